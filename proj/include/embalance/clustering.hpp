#pragma once

#include <cstdint>
#include <vector>

#include "embalance/embedding_store.hpp"
#include "embalance/types.hpp"

namespace embal {

/// Spherical k-means result. `centroids` is d x k, column j is prototype w_j
/// with unit L2 norm. `objective` is (1/N) * sum_i ||e_i - w_{labels[i]}||^2
/// evaluated against `centroids`, and every label is the exact argmin for it.
struct ClusterModel {
  Matrix<float> centroids;
  std::vector<Index> labels;
  double objective = 0.0;
  Index iterations_run = 0;
  bool converged = false;

  /// Objective after each assignment step, in order.
  std::vector<double> objective_history;
  /// reseeded[t] is true when the update following assignment t re-seeded
  /// at least one empty cluster.
  std::vector<bool> reseeded;

  Index k() const { return centroids.cols(); }
  Index dim() const { return centroids.rows(); }
  std::vector<Index> cluster_sizes() const;
};

struct Assignment {
  std::vector<Index> labels;
  /// Squared distance of each item to its centroid.
  std::vector<double> residuals;
  double objective = 0.0;
};

struct CentroidUpdate {
  Matrix<float> centroids;
  /// Clusters that were empty and got re-seeded, ascending.
  std::vector<Index> reseeded;
};

struct KMeansOptions {
  Index k = 1024;
  Index max_iters = 100;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

/// k-means++ seeding: the first centroid uniform over rows, each later one
/// drawn with probability proportional to the squared distance to the
/// nearest centroid chosen so far. Rows with zero weight everywhere fall back
/// to a uniform draw among unchosen rows.
Matrix<float> kmeans_init(const EmbeddingSet& set, Index k, std::uint64_t seed);

/// Nearest centroid per row (ties to the lowest column) and the mean squared
/// residual.
Assignment assign(const EmbeddingSet& set, const Matrix<float>& centroids);

/// Mean of each cluster's rows, projected to unit norm. A cluster that is
/// empty (or whose mean is the zero vector) is re-seeded to the row with the
/// largest residual against the freshly computed centroids; several such
/// clusters take rows in descending residual order.
CentroidUpdate update_centroids(const EmbeddingSet& set, const std::vector<Index>& labels, Index k);

/// Lloyd iterations from k-means++ seeding until the objective improves by
/// at most `tol` or `max_iters` assignment steps have run.
ClusterModel kmeans(const EmbeddingSet& set, const KMeansOptions& options);

/// Same iteration from caller-supplied initial centroids.
ClusterModel kmeans_from(const EmbeddingSet& set, Matrix<float> initial, const KMeansOptions& options);

}  // namespace embal
