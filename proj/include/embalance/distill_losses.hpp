#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "embalance/types.hpp"

namespace embal {

/// Temperature and loss weights.
struct LossParams {
  double tau = 0.07;
  double alpha = 0.999;
  double gamma = 0.5;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw Error(ErrorCode::invalid_argument, "tau must be a positive finite number");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::invalid_argument, "alpha must lie in [0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::invalid_argument, "gamma must lie in [0, 1]");
  }
};

/// Classification head: d x k matrix with unit-norm columns (k-means
/// centroids). `active`, when non-empty, is the sorted column subset the
/// logit loss is restricted to.
template <typename Scalar>
struct Prototypes {
  Matrix<Scalar> matrix;
  std::vector<Index> active;

  Index k() const { return matrix.cols(); }
  Index dim() const { return matrix.rows(); }
};

/// Student and teacher embeddings for n image-text pairs plus the cluster
/// label of each image.
template <typename Scalar>
struct DistillBatch {
  RowMatrix<Scalar> student_image;
  RowMatrix<Scalar> student_text;
  RowMatrix<Scalar> teacher_image;
  RowMatrix<Scalar> teacher_text;
  std::vector<Index> labels;

  Index size() const { return student_image.rows(); }
  Index dim() const { return student_image.cols(); }

  void validate(Index k) const {
    const auto same = [&](const RowMatrix<Scalar>& m) { return m.rows() == size() && m.cols() == dim(); };
    if (!same(student_text) || !same(teacher_image) || !same(teacher_text))
      throw Error(ErrorCode::dimension_mismatch, "batch blocks must share n and d");
    if (static_cast<Index>(labels.size()) != size())
      throw Error(ErrorCode::dimension_mismatch, "label count does not match batch size");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || labels[i] >= k)
        throw Error(ErrorCode::label_out_of_range, "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")",
                    static_cast<Index>(i));
  }
};

template <typename Scalar>
struct LossGrad {
  Scalar value = 0;
  RowMatrix<Scalar> grad;
};

template <typename Scalar>
struct PairLossGrad {
  Scalar value = 0;
  RowMatrix<Scalar> grad_left;
  RowMatrix<Scalar> grad_right;
};

template <typename Scalar>
struct ClusterLoss {
  Scalar logit = 0;
  Scalar kl = 0;
  Scalar value = 0;
  RowMatrix<Scalar> grad;
};

template <typename Scalar>
struct InstanceLoss {
  Scalar value = 0;
  RowMatrix<Scalar> grad_student_image;
  RowMatrix<Scalar> grad_student_text;
};

template <typename Scalar>
struct LossValues {
  Scalar l_logit = 0;
  Scalar l_kl = 0;
  Scalar l_cluster = 0;
  Scalar l_contrast_base = 0;
  Scalar l_instance = 0;
  Scalar l_overall = 0;
};

/// Batch-summed losses, the same divided by n, and optionally gradients of
/// l_overall with respect to both student towers.
template <typename Scalar>
struct LossReport {
  Index n = 0;
  LossValues<Scalar> sum;
  LossValues<Scalar> mean;
  std::optional<RowMatrix<Scalar>> grad_student_image;
  std::optional<RowMatrix<Scalar>> grad_student_text;
};

template <typename Scalar>
Scalar compose_cluster(Scalar alpha, Scalar logit, Scalar kl) {
  return alpha * logit + (1 - alpha) * kl;
}
template <typename Scalar>
Scalar compose_instance(Scalar gamma, Scalar image_to_text, Scalar text_to_image) {
  return gamma * image_to_text + (1 - gamma) * text_to_image;
}
template <typename Scalar>
Scalar compose_overall(Scalar base, Scalar cluster, Scalar instance) {
  return base + cluster + instance;
}

/// Sorted union of `positives` and ceil(rate * (k - |positives|)) negatives
/// drawn uniformly without replacement. Deterministic per seed.
std::vector<Index> sample_negatives(Index k, double rate, const std::vector<Index>& positives, std::uint64_t seed);

namespace detail {

template <typename Scalar, typename Values>
Scalar log_sum_exp(const Values& x) {
  Scalar top = -std::numeric_limits<Scalar>::infinity();
  for (Index j = 0; j < x.size(); ++j) top = std::max<Scalar>(top, x(j));
  if (!std::isfinite(top)) return top;
  Scalar acc = 0;
  for (Index j = 0; j < x.size(); ++j) acc += std::exp(x(j) - top);
  return top + std::log(acc);
}

template <typename Scalar>
Scalar dot(const RowMatrix<Scalar>& a, Index i, const RowMatrix<Scalar>& b, Index j) {
  Scalar acc = 0;
  for (Index c = 0; c < a.cols(); ++c) acc += a(i, c) * b(j, c);
  return acc;
}

template <typename Scalar>
Matrix<Scalar> active_columns(const Prototypes<Scalar>& prototypes) {
  if (prototypes.active.empty()) return prototypes.matrix;
  Matrix<Scalar> sub(prototypes.dim(), static_cast<Index>(prototypes.active.size()));
  for (std::size_t c = 0; c < prototypes.active.size(); ++c) {
    const Index j = prototypes.active[c];
    if (j < 0 || j >= prototypes.k()) throw Error(ErrorCode::label_out_of_range, "active column outside prototype range", j);
    sub.col(static_cast<Index>(c)) = prototypes.matrix.col(j);
  }
  return sub;
}

}  // namespace detail

/// softmax(logits / tau) with max-subtraction.
template <typename Scalar>
Vector<Scalar> softmax_with_temperature(const Vector<Scalar>& logits, Scalar tau) {
  if (!(tau > 0)) throw Error(ErrorCode::invalid_argument, "tau must be > 0");
  for (Index j = 0; j < logits.size(); ++j)
    if (std::isnan(logits(j))) throw Error(ErrorCode::non_finite, "NaN logit", j);
  const Vector<Scalar> scaled = logits / tau;
  const Scalar lse = detail::log_sum_exp<Scalar>(scaled);
  return (scaled.array() - lse).exp().matrix();
}

/// Softmax cross-entropy of student images against the prototypes, summed
/// over the batch: sum_i [logsumexp_j(w_j . e_i) - w_{y_i} . e_i].
/// No temperature. Restricted to prototypes.active when set.
template <typename Scalar>
LossGrad<Scalar> logit_loss(const RowMatrix<Scalar>& student_image, const std::vector<Index>& labels,
                            const Prototypes<Scalar>& prototypes) {
  if (student_image.cols() != prototypes.dim())
    throw Error(ErrorCode::dimension_mismatch, "embedding and prototype dimensions differ");
  if (static_cast<Index>(labels.size()) != student_image.rows())
    throw Error(ErrorCode::dimension_mismatch, "label count does not match batch size");

  std::vector<Index> position(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Index y = labels[i];
    if (prototypes.active.empty()) {
      if (y < 0 || y >= prototypes.k()) throw Error(ErrorCode::label_out_of_range, "label outside prototype range", static_cast<Index>(i));
      position[i] = y;
    } else {
      const auto it = std::lower_bound(prototypes.active.begin(), prototypes.active.end(), y);
      if (it == prototypes.active.end() || *it != y)
        throw Error(ErrorCode::label_out_of_range, "label " + std::to_string(y) + " is not in the active prototype set",
                    static_cast<Index>(i));
      position[i] = static_cast<Index>(it - prototypes.active.begin());
    }
  }

  const Matrix<Scalar> weights = detail::active_columns(prototypes);
  const RowMatrix<Scalar> logits = student_image * weights;
  RowMatrix<Scalar> dlogits(logits.rows(), logits.cols());
  LossGrad<Scalar> out;
  for (Index i = 0; i < logits.rows(); ++i) {
    const Scalar lse = detail::log_sum_exp<Scalar>(logits.row(i));
    const Index y = position[static_cast<std::size_t>(i)];
    out.value += lse - logits(i, y);
    dlogits.row(i) = (logits.row(i).array() - lse).exp().matrix();
    dlogits(i, y) -= 1;
  }
  out.grad = dlogits * weights.transpose();
  return out;
}

/// sum_i KL(p_i^s || p_i^t) with p = softmax(W^T e / tau) over all k
/// prototypes. The teacher distribution is held constant.
template <typename Scalar>
LossGrad<Scalar> kl_distill_loss(const RowMatrix<Scalar>& student_image, const RowMatrix<Scalar>& teacher_image,
                                 const Prototypes<Scalar>& prototypes, Scalar tau) {
  if (!(tau > 0)) throw Error(ErrorCode::invalid_argument, "tau must be > 0");
  if (student_image.cols() != prototypes.dim() || teacher_image.cols() != prototypes.dim() ||
      teacher_image.rows() != student_image.rows())
    throw Error(ErrorCode::dimension_mismatch, "student, teacher and prototype shapes disagree");

  const RowMatrix<Scalar> student_logits = (student_image * prototypes.matrix) / tau;
  const RowMatrix<Scalar> teacher_logits = (teacher_image * prototypes.matrix) / tau;
  RowMatrix<Scalar> dlogits(student_logits.rows(), student_logits.cols());
  LossGrad<Scalar> out;
  for (Index i = 0; i < student_logits.rows(); ++i) {
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> log_p =
        student_logits.row(i).array() - detail::log_sum_exp<Scalar>(student_logits.row(i));
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> log_q =
        teacher_logits.row(i).array() - detail::log_sum_exp<Scalar>(teacher_logits.row(i));
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> p = log_p.exp();
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> log_ratio = log_p - log_q;
    Scalar kl = 0;
    for (Index j = 0; j < p.size(); ++j) kl += p(j) * log_ratio(j);
    out.value += kl;
    dlogits.row(i) = (p * (log_ratio - kl)).matrix();
  }
  out.grad = (dlogits * prototypes.matrix.transpose()) / tau;
  return out;
}

/// alpha * logit_loss + (1 - alpha) * kl_distill_loss.
template <typename Scalar>
ClusterLoss<Scalar> cluster_loss(const RowMatrix<Scalar>& student_image, const RowMatrix<Scalar>& teacher_image,
                                 const std::vector<Index>& labels, const Prototypes<Scalar>& prototypes,
                                 const LossParams& params) {
  params.validate();
  const auto logit = logit_loss(student_image, labels, prototypes);
  const auto kl = kl_distill_loss(student_image, teacher_image, prototypes, static_cast<Scalar>(params.tau));
  const auto alpha = static_cast<Scalar>(params.alpha);
  ClusterLoss<Scalar> out;
  out.logit = logit.value;
  out.kl = kl.value;
  out.value = compose_cluster(alpha, logit.value, kl.value);
  out.grad = alpha * logit.grad + (1 - alpha) * kl.grad;
  return out;
}

/// Bidirectional InfoNCE over the n x n similarity matrix S = L R^T / tau
/// with matched rows as positives: 1/2 * (row-wise + column-wise
/// cross-entropy), each summed over the batch.
template <typename Scalar>
PairLossGrad<Scalar> contrastive_loss(const RowMatrix<Scalar>& left, const RowMatrix<Scalar>& right, Scalar tau) {
  if (!(tau > 0)) throw Error(ErrorCode::invalid_argument, "tau must be > 0");
  const Index n = left.rows();
  if (n == 0) throw Error(ErrorCode::invalid_argument, "contrastive loss needs a non-empty batch");
  if (right.rows() != n || right.cols() != left.cols())
    throw Error(ErrorCode::dimension_mismatch, "contrastive loss needs matching n x d blocks");

  // Entry-wise dots so that swapping the arguments yields exactly S^T.
  RowMatrix<Scalar> sim(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) sim(i, j) = detail::dot(left, i, right, j) / tau;

  RowMatrix<Scalar> dsim(n, n);
  Vector<Scalar> line(n);
  Scalar forward = 0;
  Scalar backward = 0;
  for (Index i = 0; i < n; ++i) {
    line = sim.row(i).transpose();
    const Scalar lse = detail::log_sum_exp<Scalar>(line);
    forward += lse - sim(i, i);
    dsim.row(i) = (line.array() - lse).exp().matrix().transpose();
  }
  for (Index j = 0; j < n; ++j) {
    line = sim.col(j);
    const Scalar lse = detail::log_sum_exp<Scalar>(line);
    backward += lse - sim(j, j);
    dsim.col(j) += (line.array() - lse).exp().matrix();
  }
  dsim.diagonal().array() -= 2;
  dsim *= Scalar(0.5) / tau;

  PairLossGrad<Scalar> out;
  out.value = Scalar(0.5) * (forward + backward);
  out.grad_left = dsim * right;
  out.grad_right = dsim.transpose() * left;
  return out;
}

/// gamma * contrast(student_image, teacher_text) + (1 - gamma) * contrast(student_text, teacher_image).
template <typename Scalar>
InstanceLoss<Scalar> instance_loss(const DistillBatch<Scalar>& batch, const LossParams& params) {
  params.validate();
  const auto tau = static_cast<Scalar>(params.tau);
  const auto gamma = static_cast<Scalar>(params.gamma);
  const auto image_side = contrastive_loss(batch.student_image, batch.teacher_text, tau);
  const auto text_side = contrastive_loss(batch.student_text, batch.teacher_image, tau);
  InstanceLoss<Scalar> out;
  out.value = compose_instance(gamma, image_side.value, text_side.value);
  out.grad_student_image = gamma * image_side.grad_left;
  out.grad_student_text = (1 - gamma) * text_side.grad_left;
  return out;
}

/// Every loss component for one batch; l_overall = l_contrast_base +
/// l_cluster + l_instance, where the base term is the contrastive loss
/// between the two student towers.
template <typename Scalar>
LossReport<Scalar> overall_loss(const DistillBatch<Scalar>& batch, const Prototypes<Scalar>& prototypes,
                                const LossParams& params, bool with_gradients = false) {
  params.validate();
  if (batch.dim() != prototypes.dim()) throw Error(ErrorCode::dimension_mismatch, "batch and prototype dimensions differ");
  batch.validate(prototypes.k());

  const auto tau = static_cast<Scalar>(params.tau);
  const auto base = contrastive_loss(batch.student_image, batch.student_text, tau);
  const auto cluster = cluster_loss(batch.student_image, batch.teacher_image, batch.labels, prototypes, params);
  const auto instance = instance_loss(batch, params);

  LossReport<Scalar> report;
  report.n = batch.size();
  auto& s = report.sum;
  s.l_logit = cluster.logit;
  s.l_kl = cluster.kl;
  s.l_cluster = cluster.value;
  s.l_contrast_base = base.value;
  s.l_instance = instance.value;
  s.l_overall = compose_overall(base.value, cluster.value, instance.value);

  const auto n = static_cast<Scalar>(report.n);
  report.mean = {s.l_logit / n, s.l_kl / n, s.l_cluster / n, s.l_contrast_base / n, s.l_instance / n, s.l_overall / n};
  if (with_gradients) {
    report.grad_student_image = base.grad_left + cluster.grad + instance.grad_student_image;
    report.grad_student_text = base.grad_right + instance.grad_student_text;
  }
  return report;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  double relative_error_image = 0.0;
  double relative_error_text = 0.0;
};

/// Central finite differences of sum-form l_overall against the analytic
/// gradients, per student tower: ||g - fd|| / max(||g||, ||fd||, 1e-12).
GradientCheck check_overall_gradient(const DistillBatch<double>& batch, const Prototypes<double>& prototypes,
                                     const LossParams& params, double eps = 1e-4);

}  // namespace embal
