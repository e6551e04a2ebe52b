#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "embalance/types.hpp"

namespace embal {

/// N x d float embeddings, one item per row, plus one 64-bit id per item.
///
/// Binary layout (little-endian):
///   "EMB1" | version u32 = 1 | N u64 | d u32 | N*d f32 payload
/// Ids that differ from 0..N-1 (and an optional source tag) are stored in a
/// JSON sidecar at `<path>.meta.json`.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;
  /// Throws if dim is zero or ids are not unique / of the wrong length.
  /// Empty ids means 0..N-1.
  explicit EmbeddingSet(RowMatrix<float> data, std::vector<std::uint64_t> ids = {}, std::string source = {});

  Index count() const { return data_.rows(); }
  Index dim() const { return data_.cols(); }

  const RowMatrix<float>& data() const { return data_; }
  std::span<const float> row(Index i) const {
    return {data_.data() + i * data_.cols(), static_cast<std::size_t>(data_.cols())};
  }
  const std::vector<std::uint64_t>& ids() const { return ids_; }
  const std::string& source() const { return source_; }
  bool has_default_ids() const;

  /// Rows at `indices`, in the given order, carrying their ids along.
  EmbeddingSet subset(std::span<const Index> indices) const;

  friend bool operator==(const EmbeddingSet& a, const EmbeddingSet& b);

 private:
  RowMatrix<float> data_ = RowMatrix<float>(0, 1);
  std::vector<std::uint64_t> ids_;
  std::string source_;
};

struct ValidationReport {
  Index nan_count = 0;
  Index inf_count = 0;
  std::vector<Index> zero_rows;
  double norm_deviation_max = 0.0;

  bool clean() const { return nan_count == 0 && inf_count == 0 && zero_rows.empty(); }
};

inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;

EmbeddingSet read_embeddings(const std::filesystem::path& path);
void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);

/// Rows divided by their L2 norm. Throws ErrorCode::zero_row with the index
/// of the first all-zero row, ErrorCode::non_finite for NaN/Inf rows.
EmbeddingSet normalize(const EmbeddingSet& set);

ValidationReport validate(const EmbeddingSet& set);

/// Parses whitespace- or comma-separated floats, one item per line. Blank
/// lines and lines starting with '#' are skipped.
EmbeddingSet parse_text_embeddings(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace embal
