#include "semprobe/error.hpp"

namespace semprobe {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::BadBand: return "BadBand";
    case ErrorCode::MissingSlot: return "MissingSlot";
    case ErrorCode::GatewayTimeout: return "GatewayTimeout";
    case ErrorCode::RateLimited: return "RateLimited";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::NoLogProbs: return "NoLogProbs";
    case ErrorCode::AmbiguousVerdict: return "AmbiguousVerdict";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::CacheCorrupt: return "CacheCorrupt";
    case ErrorCode::EmptyClusters: return "EmptyClusters";
    case ErrorCode::BadPartition: return "BadPartition";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::MissingRecord: return "MissingRecord";
    case ErrorCode::SingleClassTraining: return "SingleClassTraining";
    case ErrorCode::NonFiniteFeature: return "NonFiniteFeature";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::MissingGreedy: return "MissingGreedy";
    case ErrorCode::SingleClassGold: return "SingleClassGold";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::Usage: return "Usage";
  }
  return "Unknown";
}

}  // namespace semprobe
