#include "castreg/error.hpp"

namespace castreg {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidTransform: return "InvalidTransform";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::LogNearBranchCut: return "LogNearBranchCut";
    case ErrorCode::EmptySurface: return "EmptySurface";
    case ErrorCode::OverlapInfeasible: return "OverlapInfeasible";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::BackwardBeforeForward: return "BackwardBeforeForward";
    case ErrorCode::NoCorrespondences: return "NoCorrespondences";
    case ErrorCode::NoValidCells: return "NoValidCells";
    case ErrorCode::AllPointsOutsideGrid: return "AllPointsOutsideGrid";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::TimeBudgetExceeded: return "TimeBudgetExceeded";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
  }
  return "Unknown";
}

}  // namespace castreg
