#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "embalance/embedding_store.hpp"
#include "embalance/types.hpp"

namespace embal {

/// Index used to pad neighbor rows when fewer than k candidates exist.
inline constexpr Index kNoNeighbor = -1;

/// Top-k nearest references for each query of one (query chunk, reference
/// chunk) pair. Rows are ordered by (squared distance, index) ascending;
/// padding entries carry +inf and kNoNeighbor and sort last.
struct ChunkTopK {
  IndexRange query_range;
  IndexRange ref_range;
  Index k = 0;
  RowMatrix<double> squared;
  IndexMatrix indices;

  RowMatrix<double> distances() const { return squared.cwiseSqrt(); }
};

/// Global top-k table over all N items, merged from ChunkTopK partials.
struct NeighborTable {
  Index count = 0;
  Index k = 0;
  RowMatrix<double> squared;
  IndexMatrix indices;

  NeighborTable() = default;
  NeighborTable(Index count, Index k);

  RowMatrix<double> distances() const { return squared.cwiseSqrt(); }
};

/// Disjoint-set forest with path compression and union by size.
class Partition {
 public:
  explicit Partition(Index count = 0);

  Index count() const { return static_cast<Index>(parent_.size()); }
  Index set_count() const { return set_count_; }

  Index find(Index i);
  /// find without path compression.
  Index root(Index i) const;
  /// Returns true if a merge happened.
  bool unite(Index a, Index b);
  Index size_of(Index i) const { return size_[static_cast<std::size_t>(root(i))]; }

  /// Canonical labels: items in the same set share a label, labels are
  /// assigned 0, 1, ... in order of each set's lowest member.
  std::vector<Index> labels() const;
  /// True if every set of *this lies inside a single set of `coarser`.
  bool refines(const Partition& coarser) const;

 private:
  std::vector<Index> parent_;
  std::vector<Index> size_;
  Index set_count_ = 0;
};

struct BalanceResult {
  Index count = 0;
  std::vector<Index> kept;
  double removed_fraction = 0.0;
  /// set size -> number of sets of that size.
  std::map<Index, Index> set_sizes;
  double beta = 0.0;
  Index k = 0;
};

struct BalanceOptions {
  double beta = 0.07;
  Index k = 64;
  Index chunks = 1;
};

/// Exact k smallest distances from each item of query_range to the items of
/// ref_range (self excluded). Candidates are screened with a float GEMM and
/// confirmed with squared_distance(), so the result is independent of tiling.
ChunkTopK chunk_topk(const EmbeddingSet& set, IndexRange query_range, IndexRange ref_range, Index k);

/// Folds partials into a global table; the result does not depend on the
/// order of `partials`. Throws inconsistent_k or coverage_gap.
NeighborTable merge_topk(std::span<const ChunkTopK> partials, Index k);

/// Merges one partial into `table` in place (k-way merge of sorted rows).
void accumulate_topk(NeighborTable& table, const ChunkTopK& partial);

/// Unions every pair (i, j) in the table whose distance is strictly below beta.
Partition build_sets(const NeighborTable& table, double beta);

/// Keeps, per set, the member nearest the arithmetic mean of its rows (ties
/// to the lowest index).
BalanceResult select_representatives(const Partition& partition, const EmbeddingSet& set);

/// Global table built from chunk_topk over every (query chunk, reference
/// chunk) pair, folded in as each partial completes.
NeighborTable neighbor_table(const EmbeddingSet& set, Index k, Index chunks);

/// neighbor_table -> build_sets -> select_representatives.
BalanceResult balance(const EmbeddingSet& set, const BalanceOptions& options);

/// Reference answer: full O(N^2) threshold graph, connected components by
/// breadth-first search, same representative rule.
BalanceResult brute_force_balance(const EmbeddingSet& set, double beta);

/// Splits [0, count) into `chunks` contiguous near-equal ranges (empty ranges dropped).
std::vector<IndexRange> split_range(Index count, Index chunks);

}  // namespace embal
