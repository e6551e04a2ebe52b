#include "embalance/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "embalance/parallel.hpp"

namespace embal {

namespace {

constexpr Index kRowTile = 256;

std::span<const float> column(const Matrix<float>& m, Index j) {
  return {m.data() + j * m.rows(), static_cast<std::size_t>(m.rows())};
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1p-53; }

Index uniform_index(std::mt19937_64& rng, Index n) { return static_cast<Index>(rng() % static_cast<std::uint64_t>(n)); }

void check_k(const EmbeddingSet& set, Index k) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  if (k > set.count())
    throw Error(ErrorCode::invalid_argument,
                "k=" + std::to_string(k) + " exceeds the number of rows N=" + std::to_string(set.count()));
}

}  // namespace

std::vector<Index> ClusterModel::cluster_sizes() const {
  std::vector<Index> sizes(static_cast<std::size_t>(k()), 0);
  for (const Index l : labels) ++sizes[static_cast<std::size_t>(l)];
  return sizes;
}

Matrix<float> kmeans_init(const EmbeddingSet& set, Index k, std::uint64_t seed) {
  check_k(set, k);
  const Index n = set.count();
  const auto& data = set.data();
  std::mt19937_64 rng(seed);

  Matrix<float> centroids(set.dim(), k);
  std::vector<double> nearest(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);

  Index pick = uniform_index(rng, n);
  for (Index c = 0; c < k; ++c) {
    centroids.col(c) = data.row(pick).transpose();
    chosen[static_cast<std::size_t>(pick)] = true;
    if (c + 1 == k) break;

    const Eigen::RowVectorXf center = data.row(pick);
    parallel_for(0, n, 4096, [&](Index b, Index e) {
      const Eigen::VectorXf d2 = (data.middleRows(b, e - b).rowwise() - center).rowwise().squaredNorm();
      for (Index i = b; i < e; ++i)
        nearest[static_cast<std::size_t>(i)] =
            std::min(nearest[static_cast<std::size_t>(i)], static_cast<double>(d2(i - b)));
    });
    nearest[static_cast<std::size_t>(pick)] = 0.0;

    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    pick = -1;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double running = 0.0;
      Index last_positive = -1;
      for (Index i = 0; i < n; ++i) {
        const double w = nearest[static_cast<std::size_t>(i)];
        if (w <= 0.0) continue;
        last_positive = i;
        running += w;
        if (running > target) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = last_positive;
    }
    if (pick < 0) {
      // Every remaining row coincides with a chosen centroid.
      const Index unchosen = n - (c + 1);
      Index r = uniform_index(rng, unchosen);
      for (Index i = 0; i < n; ++i) {
        if (chosen[static_cast<std::size_t>(i)]) continue;
        if (r-- == 0) {
          pick = i;
          break;
        }
      }
    }
  }
  return centroids;
}

Assignment assign(const EmbeddingSet& set, const Matrix<float>& centroids) {
  if (centroids.rows() != set.dim())
    throw Error(ErrorCode::dimension_mismatch, "centroid dimension " + std::to_string(centroids.rows()) +
                                                   " does not match embedding dimension " + std::to_string(set.dim()));
  const Index k = centroids.cols();
  if (k < 1) throw Error(ErrorCode::invalid_argument, "no centroids");
  const Index n = set.count();
  const auto& data = set.data();

  const Vector<double> centroid_norms = centroids.cast<double>().colwise().squaredNorm().transpose();
  const double max_centroid_norm = centroid_norms.maxCoeff();
  const double slack_scale = (4.0 * static_cast<double>(set.dim()) + 16.0) * 0x1p-24;

  Assignment out;
  out.labels.resize(static_cast<std::size_t>(n));
  out.residuals.resize(static_cast<std::size_t>(n));

  parallel_for(0, n, kRowTile, [&](Index b, Index e) {
    const RowMatrix<float> dots = data.middleRows(b, e - b) * centroids;
    std::vector<double> approx(static_cast<std::size_t>(k));
    for (Index i = b; i < e; ++i) {
      const auto row = set.row(i);
      const double norm = data.row(i).cast<double>().squaredNorm();
      double lowest = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < k; ++j) {
        approx[static_cast<std::size_t>(j)] = norm + centroid_norms(j) - 2.0 * static_cast<double>(dots(i - b, j));
        lowest = std::min(lowest, approx[static_cast<std::size_t>(j)]);
      }
      // Only columns that could be the exact argmin get an exact distance.
      const double cutoff = lowest + 2.0 * slack_scale * (norm + max_centroid_norm);
      Index best = -1;
      double best_d2 = std::numeric_limits<double>::infinity();
      for (Index j = 0; j < k; ++j) {
        if (approx[static_cast<std::size_t>(j)] > cutoff) continue;
        const double d2 = squared_distance(row, column(centroids, j));
        if (d2 < best_d2) {
          best_d2 = d2;
          best = j;
        }
      }
      out.labels[static_cast<std::size_t>(i)] = best;
      out.residuals[static_cast<std::size_t>(i)] = best_d2;
    }
  });

  const double total = std::accumulate(out.residuals.begin(), out.residuals.end(), 0.0);
  out.objective = n == 0 ? 0.0 : total / static_cast<double>(n);
  return out;
}

CentroidUpdate update_centroids(const EmbeddingSet& set, const std::vector<Index>& labels, Index k) {
  const Index n = set.count();
  const Index d = set.dim();
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  if (static_cast<Index>(labels.size()) != n)
    throw Error(ErrorCode::dimension_mismatch, "label count does not match row count");

  // Counting sort keeps each cluster's members in ascending order, so sums
  // do not depend on the thread count.
  std::vector<Index> offsets(static_cast<std::size_t>(k) + 1, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Index l = labels[i];
    if (l < 0 || l >= k)
      throw Error(ErrorCode::label_out_of_range, "label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")",
                  static_cast<Index>(i));
    ++offsets[static_cast<std::size_t>(l) + 1];
  }
  std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
  std::vector<Index> members(static_cast<std::size_t>(n));
  {
    auto cursor = offsets;
    for (Index i = 0; i < n; ++i) members[static_cast<std::size_t>(cursor[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]++)] = i;
  }

  CentroidUpdate out;
  out.centroids = Matrix<float>::Zero(d, k);
  std::vector<char> degenerate(static_cast<std::size_t>(k), 0);
  parallel_for(0, k, 16, [&](Index cb, Index ce) {
    Vector<double> sum(d);
    for (Index j = cb; j < ce; ++j) {
      sum.setZero();
      for (Index m = offsets[static_cast<std::size_t>(j)]; m < offsets[static_cast<std::size_t>(j) + 1]; ++m)
        sum += set.data().row(members[static_cast<std::size_t>(m)]).cast<double>().transpose();
      const double norm = sum.norm();
      if (norm == 0.0 || !std::isfinite(norm)) {
        degenerate[static_cast<std::size_t>(j)] = 1;
        continue;
      }
      // The mean and the sum share a direction.
      out.centroids.col(j) = (sum / norm).cast<float>();
    }
  });

  for (Index j = 0; j < k; ++j)
    if (degenerate[static_cast<std::size_t>(j)]) out.reseeded.push_back(j);
  if (out.reseeded.empty()) return out;

  std::vector<double> residual(static_cast<std::size_t>(n));
  parallel_for(0, n, 4096, [&](Index b, Index e) {
    for (Index i = b; i < e; ++i) {
      const Index l = labels[static_cast<std::size_t>(i)];
      residual[static_cast<std::size_t>(i)] = squared_distance(set.row(i), column(out.centroids, l));
    }
  });
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return residual[static_cast<std::size_t>(a)] > residual[static_cast<std::size_t>(b)];
  });
  for (std::size_t r = 0; r < out.reseeded.size() && r < order.size(); ++r) {
    const Index j = out.reseeded[r];
    const Index i = order[r];
    const double norm = set.data().row(i).cast<double>().norm();
    out.centroids.col(j) = (set.data().row(i).cast<double>().transpose() / norm).cast<float>();
  }
  return out;
}

ClusterModel kmeans_from(const EmbeddingSet& set, Matrix<float> initial, const KMeansOptions& options) {
  check_k(set, initial.cols());
  if (options.max_iters < 1) throw Error(ErrorCode::invalid_argument, "max_iters must be >= 1");
  if (initial.rows() != set.dim()) throw Error(ErrorCode::dimension_mismatch, "initial centroid dimension mismatch");

  ClusterModel model;
  model.centroids = std::move(initial);
  const Index k = model.centroids.cols();
  double previous = std::numeric_limits<double>::infinity();
  for (Index it = 0; it < options.max_iters; ++it) {
    auto assignment = assign(set, model.centroids);
    model.objective_history.push_back(assignment.objective);
    model.iterations_run = it + 1;
    model.labels = std::move(assignment.labels);
    model.objective = assignment.objective;
    if (it > 0 && previous - assignment.objective <= options.tol) {
      model.converged = true;
      break;
    }
    previous = assignment.objective;
    if (it + 1 == options.max_iters) break;

    auto update = update_centroids(set, model.labels, k);
    model.reseeded.push_back(!update.reseeded.empty());
    model.centroids = std::move(update.centroids);
  }
  return model;
}

ClusterModel kmeans(const EmbeddingSet& set, const KMeansOptions& options) {
  return kmeans_from(set, kmeans_init(set, options.k, options.seed), options);
}

}  // namespace embal
