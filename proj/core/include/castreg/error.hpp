#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace castreg {

enum class ErrorCode {
  InvalidArgument,
  InvalidTransform,
  ShapeMismatch,
  SizeMismatch,
  DegenerateConfiguration,
  LogNearBranchCut,
  EmptySurface,
  OverlapInfeasible,
  ParseError,
  MissingFile,
  IoError,
  TooFewPoints,
  IndexOutOfRange,
  BackwardBeforeForward,
  NoCorrespondences,
  NoValidCells,
  AllPointsOutsideGrid,
  TooFewSamples,
  EmptyDataset,
  TimeBudgetExceeded,
  MissingCheckpoint,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure in the library is reported as an Error carrying a code that
// callers (tests, the benchmark harness) can branch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  // The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace castreg
