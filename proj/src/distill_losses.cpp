#include "embalance/distill_losses.hpp"

#include <algorithm>
#include <random>

namespace embal {

std::vector<Index> sample_negatives(Index k, double rate, const std::vector<Index>& positives, std::uint64_t seed) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "k must be >= 1");
  if (!(rate > 0.0 && rate <= 1.0)) throw Error(ErrorCode::invalid_argument, "sampling rate must lie in (0, 1]");

  std::vector<char> positive(static_cast<std::size_t>(k), 0);
  for (const Index p : positives) {
    if (p < 0 || p >= k) throw Error(ErrorCode::label_out_of_range, "positive class outside [0, k)", p);
    positive[static_cast<std::size_t>(p)] = 1;
  }
  std::vector<Index> result;
  std::vector<Index> negatives;
  for (Index j = 0; j < k; ++j) (positive[static_cast<std::size_t>(j)] ? result : negatives).push_back(j);

  const auto pool = static_cast<Index>(negatives.size());
  const Index take = std::min<Index>(pool, static_cast<Index>(std::ceil(rate * static_cast<double>(pool))));
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `take` slots become the sample.
  for (Index i = 0; i < take; ++i) {
    const Index j = i + static_cast<Index>(rng() % static_cast<std::uint64_t>(pool - i));
    std::swap(negatives[static_cast<std::size_t>(i)], negatives[static_cast<std::size_t>(j)]);
  }
  result.insert(result.end(), negatives.begin(), negatives.begin() + take);
  std::sort(result.begin(), result.end());
  return result;
}

namespace {

double relative_error(const RowMatrix<double>& analytic, const RowMatrix<double>& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

}  // namespace

GradientCheck check_overall_gradient(const DistillBatch<double>& batch, const Prototypes<double>& prototypes,
                                     const LossParams& params, double eps) {
  const auto report = overall_loss(batch, prototypes, params, true);
  auto probe = batch;
  const auto numeric = [&](RowMatrix<double>& block) {
    RowMatrix<double> fd(block.rows(), block.cols());
    for (Index i = 0; i < block.rows(); ++i) {
      for (Index c = 0; c < block.cols(); ++c) {
        const double saved = block(i, c);
        block(i, c) = saved + eps;
        const double plus = overall_loss(probe, prototypes, params).sum.l_overall;
        block(i, c) = saved - eps;
        const double minus = overall_loss(probe, prototypes, params).sum.l_overall;
        block(i, c) = saved;
        fd(i, c) = (plus - minus) / (2.0 * eps);
      }
    }
    return fd;
  };
  GradientCheck check;
  check.relative_error_image = relative_error(*report.grad_student_image, numeric(probe.student_image));
  check.relative_error_text = relative_error(*report.grad_student_text, numeric(probe.student_text));
  check.max_relative_error = std::max(check.relative_error_image, check.relative_error_text);
  return check;
}

}  // namespace embal
