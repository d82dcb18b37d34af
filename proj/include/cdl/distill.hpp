#pragma once

// Loss terms for collaborative training of a branch group. Every function
// takes the student side as raw logits (or raw hidden states) and returns
// the per-token-mean loss together with its gradient with respect to that
// input. Teacher-side inputs are constants: no gradient is produced for them.
//
// Row i of every matrix is one response position (batch-major, flattened);
// `mask[i] != 0` marks positions that take part in the mean.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace cdl {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Mask = std::span<const std::uint8_t>;

template <class T>
struct SoftDistribution {
  RowMatrix<T> probs;
  T temperature = T(1);
};

template <class T>
struct LossGrad {
  T value = T(0);
  RowMatrix<T> grad;  // same shape as the student input
};

// Smallest admissible 1 - p inside log(1 - p).
inline constexpr double kUnlikelihoodFloor = 1e-7;
// Below this squared norm the teacher hidden state is treated as zero.
inline constexpr double kRejectNormFloor = 1e-12;

namespace detail {

inline std::size_t active_count(Mask mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(),
                                                [](std::uint8_t m) { return m != 0; }));
}

template <class T>
void check_rows(Eigen::Index rows, Mask mask) {
  if (static_cast<std::size_t>(rows) != mask.size())
    throw std::invalid_argument("mask length does not match the number of positions");
}

template <class T, class Row>
T log_sum_exp(const Row& row) {
  const T peak = row.maxCoeff();
  return peak + std::log((row.array() - peak).exp().sum());
}

}  // namespace detail

// Temperature softmax with max subtraction.
template <class T>
SoftDistribution<T> soften(const RowMatrix<T>& logits, T temperature) {
  if (!(temperature > T(0))) throw std::invalid_argument("temperature must be positive");
  SoftDistribution<T> out;
  out.temperature = temperature;
  out.probs.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto scaled = (logits.row(i).array() / temperature).eval();
    auto e = (scaled - scaled.maxCoeff()).exp().eval();
    out.probs.row(i) = e / e.sum();
  }
  return out;
}

// Token-level negative log-likelihood. Throws when no position is active.
template <class T, class Id>
LossGrad<T> mle_loss(const RowMatrix<T>& logits, std::span<const Id> targets, Mask mask) {
  detail::check_rows<T>(logits.rows(), mask);
  if (targets.size() != mask.size()) throw std::invalid_argument("targets/mask length mismatch");
  const std::size_t n = detail::active_count(mask);
  if (n == 0) throw std::invalid_argument("mle_loss: every position is masked");
  LossGrad<T> out;
  out.grad = RowMatrix<T>::Zero(logits.rows(), logits.cols());
  const T inv_n = T(1) / static_cast<T>(n);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const auto target = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(i)]);
    if (target < 0 || target >= logits.cols()) throw std::out_of_range("target id out of range");
    const T lse = detail::log_sum_exp<T>(logits.row(i));
    out.value += (lse - logits(i, target)) * inv_n;
    out.grad.row(i) = (logits.row(i).array() - lse).exp() * inv_n;
    out.grad(i, target) -= inv_n;
  }
  return out;
}

// Cross-entropy of the student's softened distribution against a constant
// teacher distribution.
template <class T>
LossGrad<T> pd_loss(const SoftDistribution<T>& teacher, const RowMatrix<T>& student_logits,
                    Mask mask, T temperature) {
  if (teacher.probs.rows() != student_logits.rows() ||
      teacher.probs.cols() != student_logits.cols())
    throw std::invalid_argument("pd_loss: teacher/student shape mismatch");
  detail::check_rows<T>(student_logits.rows(), mask);
  LossGrad<T> out;
  out.grad = RowMatrix<T>::Zero(student_logits.rows(), student_logits.cols());
  const std::size_t n = detail::active_count(mask);
  if (n == 0) return out;
  const T inv_n = T(1) / static_cast<T>(n);
  for (Eigen::Index i = 0; i < student_logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    auto scaled = (student_logits.row(i).array() / temperature).eval();
    const T lse = detail::log_sum_exp<T>(scaled);
    auto log_p = (scaled - lse).eval();
    out.value -= (teacher.probs.row(i).array() * log_p).sum() * inv_n;
    out.grad.row(i) = (log_p.exp() - teacher.probs.row(i).array()) * (inv_n / temperature);
  }
  return out;
}

// Soft unlikelihood -sum_k p_teacher(k) log(1 - p_student(k)) on given
// distributions. Value only.
template <class T>
T nd_pred_value(const SoftDistribution<T>& teacher, const SoftDistribution<T>& student,
                Mask mask) {
  if (teacher.probs.rows() != student.probs.rows() || teacher.probs.cols() != student.probs.cols())
    throw std::invalid_argument("nd_pred: teacher/student shape mismatch");
  detail::check_rows<T>(student.probs.rows(), mask);
  const std::size_t n = detail::active_count(mask);
  if (n == 0) return T(0);
  T total = T(0);
  for (Eigen::Index i = 0; i < student.probs.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index k = 0; k < student.probs.cols(); ++k) {
      const T rest = std::max<T>(T(1) - student.probs(i, k), T(kUnlikelihoodFloor));
      total -= teacher.probs(i, k) * std::log(rest);
    }
  }
  return total / static_cast<T>(n);
}

// Soft unlikelihood with the gradient taken through the student's
// temperature softmax. Clamped entries contribute no gradient.
template <class T>
LossGrad<T> nd_pred_loss(const SoftDistribution<T>& teacher, const RowMatrix<T>& student_logits,
                         Mask mask, T temperature) {
  if (teacher.probs.rows() != student_logits.rows() ||
      teacher.probs.cols() != student_logits.cols())
    throw std::invalid_argument("nd_pred: teacher/student shape mismatch");
  detail::check_rows<T>(student_logits.rows(), mask);
  LossGrad<T> out;
  out.grad = RowMatrix<T>::Zero(student_logits.rows(), student_logits.cols());
  const std::size_t n = detail::active_count(mask);
  if (n == 0) return out;
  const T inv_n = T(1) / static_cast<T>(n);
  const auto student = soften<T>(student_logits, temperature);
  ColVector<T> weight(student_logits.cols());
  for (Eigen::Index i = 0; i < student_logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index k = 0; k < student_logits.cols(); ++k) {
      const T rest = T(1) - student.probs(i, k);
      if (rest < T(kUnlikelihoodFloor)) {
        out.value -= teacher.probs(i, k) * std::log(T(kUnlikelihoodFloor)) * inv_n;
        weight(k) = T(0);
      } else {
        out.value -= teacher.probs(i, k) * std::log(rest) * inv_n;
        weight(k) = teacher.probs(i, k) / rest;
      }
    }
    const auto p = student.probs.row(i).transpose().array();
    const T mix = (weight.array() * p).sum();
    out.grad.row(i) = (p * (weight.array() - mix)).transpose() * (inv_n / temperature);
  }
  return out;
}

// Removes from `a` its component along `b`. Leaves `a` untouched when `b` is
// (numerically) zero.
template <class Derived, class Other>
auto orthogonal_reject(const Eigen::MatrixBase<Derived>& a, const Eigen::MatrixBase<Other>& b) {
  using T = typename Derived::Scalar;
  using Vec = Eigen::Matrix<T, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime>;
  const T bb = b.squaredNorm();
  Vec out = a;
  if (bb >= T(kRejectNormFloor)) out -= (a.dot(b) / bb) * b;
  return out;
}

// Mean over positions of exp(-SE_i), SE_i = |h_L,i - h_B,i|^2 / d. The
// student row h_A is first rejected against the teacher row h_B unless
// `orthogonal` is false, in which case h_L = h_A. The gradient is taken with
// respect to h_A, through the rejection.
template <class T>
LossGrad<T> nd_hidden_loss(const RowMatrix<T>& student_hidden, const RowMatrix<T>& teacher_hidden,
                           Mask mask, bool orthogonal = true) {
  if (student_hidden.rows() != teacher_hidden.rows() ||
      student_hidden.cols() != teacher_hidden.cols())
    throw std::invalid_argument("nd_hidden: shape mismatch");
  detail::check_rows<T>(student_hidden.rows(), mask);
  LossGrad<T> out;
  out.grad = RowMatrix<T>::Zero(student_hidden.rows(), student_hidden.cols());
  const std::size_t n = detail::active_count(mask);
  if (n == 0) return out;
  const T inv_n = T(1) / static_cast<T>(n);
  const T d = static_cast<T>(student_hidden.cols());
  for (Eigen::Index i = 0; i < student_hidden.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const auto a = student_hidden.row(i);
    const auto b = teacher_hidden.row(i);
    const T bb = b.squaredNorm();
    const bool project = orthogonal && bb >= T(kRejectNormFloor);
    Eigen::Matrix<T, 1, Eigen::Dynamic> l = a;
    if (project) l -= (a.dot(b) / bb) * b;
    const auto diff = (l - b).eval();
    const T e = std::exp(-diff.squaredNorm() / d);
    out.value += e * inv_n;
    Eigen::Matrix<T, 1, Eigen::Dynamic> g = diff * (-T(2) * e * inv_n / d);
    // The rejection is a symmetric projector, so its Jacobian-transpose
    // product is another rejection.
    if (project) g -= (g.dot(b) / bb) * b;
    out.grad.row(i) = g;
  }
  return out;
}

// Value-only form over already-projected states.
template <class T>
T mrse(const RowMatrix<T>& projected, const RowMatrix<T>& teacher_hidden, Mask mask) {
  return nd_hidden_loss<T>(projected, teacher_hidden, mask, false).value;
}

// Decomposed objective of one branch for one step.
struct LossTerms {
  double mle = 0.0;
  double pd = 0.0;
  double nd_pred = 0.0;
  double nd_hidden = 0.0;
  double total = 0.0;
};

// MLE plus the mean of the positive-distillation terms, one per auxiliary.
inline LossTerms master_objective(double mle, std::span<const double> pd_terms) {
  if (pd_terms.empty()) throw std::invalid_argument("master objective needs at least one auxiliary");
  LossTerms t;
  t.mle = mle;
  t.pd = std::accumulate(pd_terms.begin(), pd_terms.end(), 0.0) /
         static_cast<double>(pd_terms.size());
  t.total = t.mle + t.pd;
  return t;
}

// MLE on the branch's own subset plus PD from the master plus the negative
// terms against every other auxiliary, each family averaged over its
// members. With a single auxiliary both negative families are empty and
// contribute nothing.
inline LossTerms auxiliary_objective(double mle, double pd, std::span<const double> nd_pred_terms,
                                     std::span<const double> nd_hidden_terms) {
  auto mean = [](std::span<const double> xs) {
    return xs.empty() ? 0.0
                      : std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  };
  LossTerms t;
  t.mle = mle;
  t.pd = pd;
  t.nd_pred = mean(nd_pred_terms);
  t.nd_hidden = mean(nd_hidden_terms);
  t.total = t.mle + t.pd + t.nd_pred + t.nd_hidden;
  return t;
}

}  // namespace cdl
