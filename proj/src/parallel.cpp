#include "embalance/parallel.hpp"

#include <cstdlib>
#include <string>

namespace embal {

std::size_t worker_count() {
  if (const char* env = std::getenv("EMBALANCE_THREADS")) {
    try {
      const long value = std::stol(env);
      if (value > 0) return static_cast<std::size_t>(value);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

ErrorClass error_class(ErrorCode code) {
  switch (code) {
    case ErrorCode::io:
      return ErrorClass::io;
    case ErrorCode::bad_magic:
    case ErrorCode::version_mismatch:
    case ErrorCode::truncated:
    case ErrorCode::zero_row:
    case ErrorCode::non_finite:
    case ErrorCode::validation:
      return ErrorClass::validation;
    default:
      return ErrorClass::precondition;
  }
}

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::io: return "io";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::zero_row: return "zero_row";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::inconsistent_k: return "inconsistent_k";
    case ErrorCode::coverage_gap: return "coverage_gap";
    case ErrorCode::label_out_of_range: return "label_out_of_range";
    case ErrorCode::validation: return "validation";
  }
  return "unknown";
}

}  // namespace embal
