#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "embalance/clustering.hpp"
#include "embalance/types.hpp"

namespace embal {

/// Cluster model file (little-endian):
///   "KMC1" | version u32 = 1 | k u32 | d u32 | k*d f32 (centroid by centroid) | N u64 | N u32 labels
/// A sidecar `<path>.meta.json` records {"provenance": "kmeans", ...}.
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct StoredModel {
  Matrix<float> centroids;  // d x k
  std::vector<Index> labels;
  /// From the sidecar; empty when there is none.
  std::string provenance;
};

void write_model(const ClusterModel& model, const std::filesystem::path& path, const std::string& provenance = "kmeans");
StoredModel read_model(const std::filesystem::path& path);

/// Newline-delimited non-negative integers.
std::vector<Index> read_index_list(const std::filesystem::path& path);
void write_index_list(const std::vector<Index>& values, const std::filesystem::path& path);

}  // namespace embal
