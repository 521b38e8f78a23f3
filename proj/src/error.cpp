#include "mviz/error.hpp"

namespace mviz {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnboundInput: return "UnboundInput";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonScalarOutputWithoutSeed: return "NonScalarOutputWithoutSeed";
    case ErrorCode::kEmptyAtomSet: return "EmptyAtomSet";
    case ErrorCode::kSchemaMismatch: return "SchemaMismatch";
    case ErrorCode::kUnknownLayer: return "UnknownLayer";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kDivergence: return "Divergence";
    case ErrorCode::kDegenerateDesign: return "DegenerateDesign";
    case ErrorCode::kSampleTooSmall: return "SampleTooSmall";
    case ErrorCode::kMissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kSingleClassLabels: return "SingleClassLabels";
    case ErrorCode::kPoolTooSmall: return "PoolTooSmall";
    case ErrorCode::kMissingSurrogate: return "MissingSurrogate";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kNotFound: return "NotFound";
  }
  return "Unknown";
}

}  // namespace mviz
