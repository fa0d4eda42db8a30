#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "castreg/error.hpp"
#include "castreg/pipeline.hpp"

using namespace castreg;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> method, out, frame;
  std::optional<std::uint64_t> seed;
  std::optional<double> budget_s;
  std::optional<std::size_t> threads;
};

pipeline::RunConfig resolve(const Overrides& o) {
  pipeline::RunConfig cfg = o.config.empty() ? pipeline::RunConfig{} : pipeline::load_config(o.config);
  if (o.method) cfg.method = pipeline::method_from_string(*o.method);
  if (o.out) cfg.output_dir = *o.out;
  if (o.frame) cfg.frame = pipeline::frame_from_string(*o.frame);
  if (o.seed) cfg.seed = *o.seed;
  if (o.budget_s) cfg.budget_s = *o.budget_s;
  if (o.threads) cfg.threads = *o.threads;
  cfg.validate();
  return cfg;
}

void print_history(const char* what, const pipeline::TrainSummary& s) {
  std::printf("%s: %zu epochs, loss %.6g -> %.6g\ncheckpoint %s\nloss log %s\n", what,
              s.history.size(), s.history.empty() ? 0.0 : s.history.front(),
              s.history.empty() ? 0.0 : s.history.back(), s.checkpoint.string().c_str(),
              s.loss_csv.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"castreg: coarse-to-fine point cloud registration toolkit"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--method", o.method, "icp, ndt, ms-icp, ms-ndt, edcp, mdr, medpnet");
  app.add_option("--seed", o.seed, "top-level seed");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--budget-s", o.budget_s, "per-registration time budget (s)");
  app.add_option("--frame", o.frame, "metric frame: normalized or millimeters");
  app.add_option("--threads", o.threads, "worker threads (0: all cores)");

  auto* gen = app.add_subcommand("gen-data", "generate synthetic pairs and a manifest");
  auto* train_edcp = app.add_subcommand("train-edcp", "train the coarse registration network");
  auto* train_fusion = app.add_subcommand("train-fusion", "train the channel fusion MLP");

  auto* reg = app.add_subcommand("register", "register one pair");
  std::optional<std::size_t> reg_pair;
  std::string reg_x, reg_y;
  bool reg_export = false;
  reg->add_option("--pair", reg_pair, "manifest pair index");
  auto* xo = reg->add_option("--x", reg_x, "source cloud (PLY or XYZ)")->check(CLI::ExistingFile);
  auto* yo = reg->add_option("--y", reg_y, "target cloud (PLY or XYZ)")->check(CLI::ExistingFile);
  xo->needs(yo);
  yo->needs(xo);
  reg->add_flag("--export-aligned", reg_export, "also write the transformed source as PLY");

  auto* bench = app.add_subcommand("bench", "run the method x perturbation grid");

  auto* exp = app.add_subcommand("export", "write source, target and aligned source as PLY");
  std::size_t exp_pair = 0;
  std::string exp_transform;
  exp->add_option("--pair", exp_pair, "manifest pair index")->required();
  exp->add_option("--transform", exp_transform, "register record JSON (default identity)")
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    const pipeline::RunConfig cfg = resolve(o);
    if (*gen) {
      const auto m = pipeline::cmd_gen_data(cfg);
      std::printf("%zu pairs (%zu train, %zu test)\nmanifest %s\n", m.pairs.size(),
                  m.split("train").size(), m.split("test").size(),
                  cfg.manifest_path().string().c_str());
    } else if (*train_edcp) {
      print_history("train-edcp", pipeline::cmd_train_edcp(cfg));
    } else if (*train_fusion) {
      print_history("train-fusion", pipeline::cmd_train_fusion(cfg));
    } else if (*reg) {
      pipeline::RegisterOutput out;
      if (!reg_x.empty()) {
        out = pipeline::cmd_register(cfg, reg_x, reg_y, reg_export);
      } else {
        if (!reg_pair) throw CLI::ValidationError("register needs --pair or --x/--y");
        out = pipeline::cmd_register(cfg, *reg_pair, reg_export);
      }
      std::printf("%s in %.3f s\nrecord %s\n", std::string(pipeline::to_string(cfg.method)).c_str(),
                  out.reg.seconds, out.record.string().c_str());
      if (out.aligned) std::printf("aligned %s\n", out.aligned->string().c_str());
    } else if (*bench) {
      const auto report = pipeline::cmd_bench(cfg);
      std::size_t failed = 0;
      for (const auto& r : report.rows) failed += !r.ok();
      std::printf("%zu rows, %zu failed\nreport %s\n", report.rows.size(), failed,
                  (cfg.output_dir / "bench.csv").string().c_str());
    } else if (*exp) {
      const RigidTransform t =
          exp_transform.empty() ? RigidTransform{} : pipeline::read_transform(exp_transform);
      const auto p = pipeline::cmd_export(cfg, exp_pair, t);
      std::printf("%s\n%s\n%s\n", p.source.string().c_str(), p.target.string().c_str(),
                  p.aligned.string().c_str());
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
