#include "docgeo/error.hpp"

namespace docgeo {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "E_INVALID_ARGUMENT";
    case ErrorCode::ShapeMismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::OutOfRange: return "E_OUT_OF_RANGE";
    case ErrorCode::NotConverged: return "E_NOT_CONVERGED";
    case ErrorCode::Io: return "E_IO";
    case ErrorCode::Format: return "E_FORMAT";
    case ErrorCode::Config: return "E_CONFIG";
    case ErrorCode::MissingData: return "E_MISSING_DATA";
    case ErrorCode::Diverged: return "E_DIVERGED";
  }
  return "E_UNKNOWN";
}

}  // namespace docgeo
