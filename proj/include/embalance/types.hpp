#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace embal {

using Index = std::int64_t;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Half-open interval [begin, end) of row indices.
struct IndexRange {
  Index begin = 0;
  Index end = 0;

  Index size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(Index i) const { return i >= begin && i < end; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

enum class ErrorCode {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  zero_row,
  non_finite,
  invalid_argument,
  dimension_mismatch,
  inconsistent_k,
  coverage_gap,
  label_out_of_range,
  validation,
};

/// Broad failure classes, used for process exit codes.
enum class ErrorClass { io, validation, precondition };

ErrorClass error_class(ErrorCode code);
const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what, std::optional<Index> index = std::nullopt)
      : std::runtime_error(what), code_(code), index_(index) {}

  ErrorCode code() const { return code_; }
  /// Offending row/item, when the error concerns one.
  std::optional<Index> index() const { return index_; }

 private:
  ErrorCode code_;
  std::optional<Index> index_;
};

/// Squared Euclidean distance accumulated left to right in double precision.
/// Every exact distance decision in the library goes through this routine so
/// that results do not depend on blocking or vectorization.
inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += diff * diff;
  }
  return acc;
}

}  // namespace embal
