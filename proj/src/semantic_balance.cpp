#include "embalance/semantic_balance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include "embalance/parallel.hpp"

namespace embal {

namespace {

constexpr Index kQueryTile = 256;
constexpr Index kRefTile = 512;
constexpr double kInf = std::numeric_limits<double>::infinity();

// Total order on neighbor entries; padding (kNoNeighbor) sorts after every real index.
struct EntryKey {
  double squared;
  std::uint64_t index;
  friend auto operator<=>(const EntryKey&, const EntryKey&) = default;
};

EntryKey key(double squared, Index index) { return {squared, static_cast<std::uint64_t>(index)}; }

double squared_distance_to(std::span<const float> row, std::span<const double> point) {
  double acc = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    const double diff = static_cast<double>(row[i]) - point[i];
    acc += diff * diff;
  }
  return acc;
}

void check_range(const IndexRange& range, Index count, const char* what) {
  if (range.begin < 0 || range.end > count || range.begin > range.end)
    throw Error(ErrorCode::invalid_argument, std::string(what) + " range [" + std::to_string(range.begin) + ", " +
                                                 std::to_string(range.end) + ") outside [0, " + std::to_string(count) +
                                                 ")");
}

// Member nearest the mean of `members` (ascending indices, so the mean is
// accumulated in a fixed order).
Index nearest_to_mean(const EmbeddingSet& set, std::span<const Index> members, std::vector<double>& scratch) {
  const auto d = static_cast<std::size_t>(set.dim());
  scratch.assign(d, 0.0);
  for (const Index i : members) {
    const auto row = set.row(i);
    for (std::size_t c = 0; c < d; ++c) scratch[c] += static_cast<double>(row[c]);
  }
  const auto size = static_cast<double>(members.size());
  for (auto& v : scratch) v /= size;

  Index best = members.front();
  double best_d2 = kInf;
  for (const Index i : members) {
    const double d2 = squared_distance_to(set.row(i), scratch);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  return best;
}

BalanceResult make_result(Index count, std::vector<Index> kept, std::map<Index, Index> sizes) {
  BalanceResult result;
  result.count = count;
  std::sort(kept.begin(), kept.end());
  result.removed_fraction =
      count == 0 ? 0.0 : static_cast<double>(count - static_cast<Index>(kept.size())) / static_cast<double>(count);
  result.kept = std::move(kept);
  result.set_sizes = std::move(sizes);
  return result;
}

}  // namespace

NeighborTable::NeighborTable(Index count, Index k)
    : count(count),
      k(k),
      squared(RowMatrix<double>::Constant(count, k, kInf)),
      indices(IndexMatrix::Constant(count, k, kNoNeighbor)) {}

std::vector<IndexRange> split_range(Index count, Index chunks) {
  if (chunks < 1) throw Error(ErrorCode::invalid_argument, "chunk count must be >= 1");
  std::vector<IndexRange> ranges;
  for (Index c = 0; c < chunks; ++c) {
    const IndexRange r{count * c / chunks, count * (c + 1) / chunks};
    if (!r.empty()) ranges.push_back(r);
  }
  return ranges;
}

ChunkTopK chunk_topk(const EmbeddingSet& set, IndexRange query_range, IndexRange ref_range, Index k) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  if (query_range.empty()) throw Error(ErrorCode::invalid_argument, "empty query range");
  check_range(query_range, set.count(), "query");
  check_range(ref_range, set.count(), "reference");

  ChunkTopK out;
  out.query_range = query_range;
  out.ref_range = ref_range;
  out.k = k;
  out.squared = RowMatrix<double>::Constant(query_range.size(), k, kInf);
  out.indices = IndexMatrix::Constant(query_range.size(), k, kNoNeighbor);

  const Index d = set.dim();
  const auto& data = set.data();
  const Vector<double> norms = data.middleRows(std::min(query_range.begin, ref_range.begin),
                                               std::max(query_range.end, ref_range.end) -
                                                   std::min(query_range.begin, ref_range.begin))
                                   .cast<double>()
                                   .rowwise()
                                   .squaredNorm();
  const Index norm_offset = std::min(query_range.begin, ref_range.begin);
  // |float dot - exact dot| <= d * 2^-24 * (|a|^2 + |b|^2) / 2 (with or without FMA);
  // the factor below leaves a wide margin on top of that.
  const double slack_scale = (4.0 * static_cast<double>(d) + 16.0) * 0x1p-24;

  parallel_for(0, query_range.size(), kQueryTile, [&](Index qb, Index qe) {
    const Index rows = qe - qb;
    RowMatrix<float> dots(rows, kRefTile);
    std::vector<std::vector<std::pair<double, Index>>> heaps(static_cast<std::size_t>(rows));
    for (auto& h : heaps) h.reserve(static_cast<std::size_t>(std::min<Index>(k, ref_range.size())));

    for (Index rb = ref_range.begin; rb < ref_range.end; rb += kRefTile) {
      const Index width = std::min(kRefTile, ref_range.end - rb);
      dots.leftCols(width).noalias() =
          data.middleRows(query_range.begin + qb, rows) * data.middleRows(rb, width).transpose();

      for (Index li = 0; li < rows; ++li) {
        const Index gi = query_range.begin + qb + li;
        const double qn = norms(gi - norm_offset);
        auto& heap = heaps[static_cast<std::size_t>(li)];
        const auto query = set.row(gi);
        for (Index j = 0; j < width; ++j) {
          const Index gj = rb + j;
          if (gj == gi) continue;
          const bool full = static_cast<Index>(heap.size()) == k;
          if (full) {
            const double rn = norms(gj - norm_offset);
            const double approx = qn + rn - 2.0 * static_cast<double>(dots(li, j));
            if (approx - slack_scale * (qn + rn) > heap.front().first) continue;
          }
          const std::pair<double, Index> entry{squared_distance(query, set.row(gj)), gj};
          if (!full) {
            heap.push_back(entry);
            std::push_heap(heap.begin(), heap.end());
          } else if (entry < heap.front()) {
            std::pop_heap(heap.begin(), heap.end());
            heap.back() = entry;
            std::push_heap(heap.begin(), heap.end());
          }
        }
      }
    }

    for (Index li = 0; li < rows; ++li) {
      auto& heap = heaps[static_cast<std::size_t>(li)];
      std::sort_heap(heap.begin(), heap.end());
      for (std::size_t c = 0; c < heap.size(); ++c) {
        out.squared(qb + li, static_cast<Index>(c)) = heap[c].first;
        out.indices(qb + li, static_cast<Index>(c)) = heap[c].second;
      }
    }
  });
  return out;
}

void accumulate_topk(NeighborTable& table, const ChunkTopK& partial) {
  if (partial.k != table.k)
    throw Error(ErrorCode::inconsistent_k,
                "partial has k=" + std::to_string(partial.k) + ", table has k=" + std::to_string(table.k));
  check_range(partial.query_range, table.count, "query");
  const Index k = table.k;
  std::vector<double> sq(static_cast<std::size_t>(k));
  std::vector<Index> idx(static_cast<std::size_t>(k));

  for (Index li = 0; li < partial.query_range.size(); ++li) {
    const Index gi = partial.query_range.begin + li;
    Index a = 0;
    Index b = 0;
    for (Index out = 0; out < k; ++out) {
      const bool take_table =
          key(table.squared(gi, a), table.indices(gi, a)) <= key(partial.squared(li, b), partial.indices(li, b));
      if (take_table) {
        sq[static_cast<std::size_t>(out)] = table.squared(gi, a);
        idx[static_cast<std::size_t>(out)] = table.indices(gi, a);
        ++a;
      } else {
        sq[static_cast<std::size_t>(out)] = partial.squared(li, b);
        idx[static_cast<std::size_t>(out)] = partial.indices(li, b);
        ++b;
      }
    }
    for (Index c = 0; c < k; ++c) {
      table.squared(gi, c) = sq[static_cast<std::size_t>(c)];
      table.indices(gi, c) = idx[static_cast<std::size_t>(c)];
    }
  }
}

NeighborTable merge_topk(std::span<const ChunkTopK> partials, Index k) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  Index count = 0;
  for (const auto& p : partials) {
    if (p.k != k)
      throw Error(ErrorCode::inconsistent_k, "partial has k=" + std::to_string(p.k) + ", expected " + std::to_string(k));
    if (p.squared.rows() != p.query_range.size() || p.squared.cols() != k || p.indices.rows() != p.squared.rows() ||
        p.indices.cols() != k)
      throw Error(ErrorCode::dimension_mismatch, "partial table shape does not match its query range and k");
    count = std::max({count, p.query_range.end, p.ref_range.end});
  }

  // Distinct query ranges must tile [0, count); within each, the non-empty
  // reference ranges must tile [0, count) as well.
  std::vector<IndexRange> queries;
  for (const auto& p : partials)
    if (std::find(queries.begin(), queries.end(), p.query_range) == queries.end()) queries.push_back(p.query_range);
  std::sort(queries.begin(), queries.end(), [](const auto& x, const auto& y) { return x.begin < y.begin; });
  Index cursor = 0;
  for (const auto& q : queries) {
    if (q.begin != cursor) throw Error(ErrorCode::coverage_gap, "query rows " + std::to_string(cursor) + ".. not covered exactly once");
    cursor = q.end;

    std::vector<IndexRange> refs;
    for (const auto& p : partials)
      if (p.query_range == q && !p.ref_range.empty()) refs.push_back(p.ref_range);
    std::sort(refs.begin(), refs.end(), [](const auto& x, const auto& y) { return x.begin < y.begin; });
    Index ref_cursor = 0;
    for (const auto& r : refs) {
      if (r.begin != ref_cursor) break;
      ref_cursor = r.end;
    }
    if (ref_cursor != count)
      throw Error(ErrorCode::coverage_gap, "reference chunks for query rows [" + std::to_string(q.begin) + ", " +
                                               std::to_string(q.end) + ") do not tile [0, " + std::to_string(count) +
                                               ")");
  }
  if (cursor != count) throw Error(ErrorCode::coverage_gap, "query rows " + std::to_string(cursor) + ".. not covered");

  NeighborTable table(count, k);
  for (const auto& p : partials) accumulate_topk(table, p);
  return table;
}

NeighborTable neighbor_table(const EmbeddingSet& set, Index k, Index chunks) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  const auto ranges = split_range(set.count(), chunks);
  NeighborTable table(set.count(), k);
  for (const auto& q : ranges)
    for (const auto& r : ranges) accumulate_topk(table, chunk_topk(set, q, r, k));
  return table;
}

Partition build_sets(const NeighborTable& table, double beta) {
  if (!(beta > 0.0)) throw Error(ErrorCode::invalid_argument, "beta must be > 0");
  Partition partition(table.count);
  for (Index i = 0; i < table.count; ++i) {
    for (Index c = 0; c < table.k; ++c) {
      const Index j = table.indices(i, c);
      if (j == kNoNeighbor) break;
      // Rows are ascending, so the first miss ends the row.
      if (!(std::sqrt(table.squared(i, c)) < beta)) break;
      partition.unite(i, j);
    }
  }
  return partition;
}

BalanceResult select_representatives(const Partition& partition, const EmbeddingSet& set) {
  const Index n = set.count();
  if (partition.count() != n)
    throw Error(ErrorCode::dimension_mismatch, "partition covers " + std::to_string(partition.count()) +
                                                   " items, set has " + std::to_string(n));
  const auto labels = partition.labels();
  const Index groups = n == 0 ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;

  // Bucket members by label; the counting sort keeps each bucket ascending.
  std::vector<Index> offsets(static_cast<std::size_t>(groups) + 1, 0);
  for (const Index l : labels) ++offsets[static_cast<std::size_t>(l) + 1];
  std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
  std::vector<Index> members(static_cast<std::size_t>(n));
  {
    auto cursor = offsets;
    for (Index i = 0; i < n; ++i) members[static_cast<std::size_t>(cursor[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]++)] = i;
  }

  std::vector<Index> kept(static_cast<std::size_t>(groups));
  std::map<Index, Index> sizes;
  parallel_for(0, groups, 64, [&](Index gb, Index ge) {
    std::vector<double> scratch;
    for (Index g = gb; g < ge; ++g) {
      const auto first = offsets[static_cast<std::size_t>(g)];
      const auto last = offsets[static_cast<std::size_t>(g) + 1];
      kept[static_cast<std::size_t>(g)] =
          nearest_to_mean(set, std::span<const Index>(members).subspan(static_cast<std::size_t>(first),
                                                                       static_cast<std::size_t>(last - first)),
                          scratch);
    }
  });
  for (Index g = 0; g < groups; ++g) ++sizes[offsets[static_cast<std::size_t>(g) + 1] - offsets[static_cast<std::size_t>(g)]];
  return make_result(n, std::move(kept), std::move(sizes));
}

BalanceResult balance(const EmbeddingSet& set, const BalanceOptions& options) {
  if (options.chunks < 1) throw Error(ErrorCode::invalid_argument, "chunks must be >= 1");
  if (!(options.beta > 0.0)) throw Error(ErrorCode::invalid_argument, "beta must be > 0");
  const auto table = neighbor_table(set, options.k, options.chunks);
  const auto partition = build_sets(table, options.beta);
  auto result = select_representatives(partition, set);
  result.beta = options.beta;
  result.k = options.k;
  return result;
}

BalanceResult brute_force_balance(const EmbeddingSet& set, double beta) {
  if (!(beta > 0.0)) throw Error(ErrorCode::invalid_argument, "beta must be > 0");
  const Index n = set.count();
  std::vector<Index> unvisited(static_cast<std::size_t>(n));
  std::iota(unvisited.begin(), unvisited.end(), Index{0});

  std::vector<Index> kept;
  std::map<Index, Index> sizes;
  std::vector<double> scratch;
  std::vector<Index> component;
  std::vector<Index> remaining;
  // Components are discovered in order of their lowest member.
  while (!unvisited.empty()) {
    component.assign(1, unvisited.front());
    unvisited.erase(unvisited.begin());
    for (std::size_t head = 0; head < component.size(); ++head) {
      const Index u = component[head];
      remaining.clear();
      for (const Index v : unvisited) {
        if (std::sqrt(squared_distance(set.row(u), set.row(v))) < beta)
          component.push_back(v);
        else
          remaining.push_back(v);
      }
      unvisited.swap(remaining);
    }
    std::sort(component.begin(), component.end());
    kept.push_back(nearest_to_mean(set, component, scratch));
    ++sizes[static_cast<Index>(component.size())];
  }
  auto result = make_result(n, std::move(kept), std::move(sizes));
  result.beta = beta;
  result.k = n > 0 ? n - 1 : 0;
  return result;
}

// --- Partition -------------------------------------------------------------

Partition::Partition(Index count)
    : parent_(static_cast<std::size_t>(count)), size_(static_cast<std::size_t>(count), 1), set_count_(count) {
  std::iota(parent_.begin(), parent_.end(), Index{0});
}

Index Partition::root(Index i) const {
  while (parent_[static_cast<std::size_t>(i)] != i) i = parent_[static_cast<std::size_t>(i)];
  return i;
}

Index Partition::find(Index i) {
  const Index r = root(i);
  while (parent_[static_cast<std::size_t>(i)] != r) {
    const Index next = parent_[static_cast<std::size_t>(i)];
    parent_[static_cast<std::size_t>(i)] = r;
    i = next;
  }
  return r;
}

bool Partition::unite(Index a, Index b) {
  a = find(a);
  b = find(b);
  if (a == b) return false;
  auto& sa = size_[static_cast<std::size_t>(a)];
  auto& sb = size_[static_cast<std::size_t>(b)];
  // Equal sizes: the lower root wins, which keeps the forest deterministic.
  if (sa < sb || (sa == sb && b < a)) std::swap(a, b);
  parent_[static_cast<std::size_t>(b)] = a;
  size_[static_cast<std::size_t>(a)] += size_[static_cast<std::size_t>(b)];
  --set_count_;
  return true;
}

std::vector<Index> Partition::labels() const {
  const Index n = count();
  std::vector<Index> label_of_root(static_cast<std::size_t>(n), -1);
  std::vector<Index> labels(static_cast<std::size_t>(n));
  Index next = 0;
  for (Index i = 0; i < n; ++i) {
    auto& l = label_of_root[static_cast<std::size_t>(root(i))];
    if (l < 0) l = next++;
    labels[static_cast<std::size_t>(i)] = l;
  }
  return labels;
}

bool Partition::refines(const Partition& coarser) const {
  if (coarser.count() != count()) return false;
  const auto fine = labels();
  const auto coarse = coarser.labels();
  std::vector<Index> image(fine.size(), -1);
  for (std::size_t i = 0; i < fine.size(); ++i) {
    auto& target = image[static_cast<std::size_t>(fine[i])];
    if (target < 0) target = coarse[i];
    if (target != coarse[i]) return false;
  }
  return true;
}

}  // namespace embal
