#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cdl/distill.hpp"
#include "gradcheck.hpp"

using namespace cdl;
using M = RowMatrix<double>;

namespace {

M row(std::initializer_list<double> xs) {
  M m(1, static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) m(0, i++) = x;
  return m;
}

const std::vector<std::uint8_t> kOne = {1};

}  // namespace

TEST(Soften, ClosedForms) {
  auto a = soften<double>(row({0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(a.probs(0, 0), 0.5);
  auto b = soften<double>(row({std::log(3.0), 0}), 1.0);
  EXPECT_NEAR(b.probs(0, 0), 0.75, 1e-15);
  EXPECT_NEAR(b.probs(0, 1), 0.25, 1e-15);
  auto c = soften<double>(row({5, -3, 1, 0}), 1e6);
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(c.probs(0, k), 0.25, 1e-5);
  EXPECT_THROW(soften<double>(row({0, 0}), 0.0), std::invalid_argument);
}

TEST(Soften, RowsSumToOne) {
  auto logits = gradcheck::random_matrix(6, 8, 1);
  auto p = soften<double>(logits * 10.0, 0.7);
  for (Eigen::Index i = 0; i < p.probs.rows(); ++i) EXPECT_NEAR(p.probs.row(i).sum(), 1.0, 1e-12);
}

TEST(Mle, ReferenceValues) {
  std::vector<int> target = {0};
  EXPECT_NEAR((mle_loss<double, int>)(row({0, 0, 0, 0}), target, kOne).value, std::log(4.0), 1e-15);
  EXPECT_NEAR((mle_loss<double, int>)(row({0, -800, -800}), target, kOne).value, 0.0, 1e-15);
  M two(2, 4);
  two << 0, 0, -1e9, -1e9, 0, 0, 0, 0;  // target probabilities 0.5 and 0.25
  std::vector<int> t2 = {0, 3};
  std::vector<std::uint8_t> m2 = {1, 1};
  EXPECT_NEAR((mle_loss<double, int>)(two, t2, m2).value, (std::log(2.0) + std::log(4.0)) / 2, 1e-12);
  std::vector<std::uint8_t> none = {0};
  EXPECT_THROW((mle_loss<double, int>)(row({0, 0}), target, none), std::invalid_argument);
}

TEST(Pd, ReferenceValues) {
  auto uniform = soften<double>(row({0, 0}), 1.0);
  EXPECT_NEAR(pd_loss<double>(uniform, row({0, 0}), kOne, 1.0).value, std::log(2.0), 1e-15);
  SoftDistribution<double> onehot{row({1, 0}), 1.0};
  EXPECT_NEAR(pd_loss<double>(onehot, row({0, 0}), kOne, 1.0).value, std::log(2.0), 1e-15);
}

TEST(Pd, GradientIsStudentMinusTeacher) {
  auto teacher = soften<double>(gradcheck::random_matrix(1, 5, 2), 1.0);
  auto logits = gradcheck::random_matrix(1, 5, 3);
  auto g = pd_loss<double>(teacher, logits, kOne, 1.0).grad;
  auto student = soften<double>(logits, 1.0);
  EXPECT_LT((g - (student.probs - teacher.probs)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Pd, BoundedBelowByTeacherEntropy) {
  for (unsigned seed = 0; seed < 50; ++seed) {
    auto teacher = soften<double>(gradcheck::random_matrix(1, 6, seed) * 3.0, 1.0);
    const double h = -(teacher.probs.array() * teacher.probs.array().log()).sum();
    const double ce = pd_loss<double>(teacher, gradcheck::random_matrix(1, 6, seed + 100) * 3.0,
                                      kOne, 1.0)
                          .value;
    EXPECT_GE(ce, h - 1e-12);
  }
}

TEST(NdPred, ReferenceValues) {
  auto uniform = soften<double>(row({0, 0}), 1.0);
  EXPECT_NEAR(nd_pred_loss<double>(uniform, row({0, 0}), kOne, 1.0).value, std::log(2.0), 1e-15);
  SoftDistribution<double> teacher{row({1, 0}), 1.0};
  EXPECT_NEAR(nd_pred_loss<double>(teacher, row({-40, 0}), kOne, 1.0).value, 0.0, 1e-12);
  SoftDistribution<double> student{row({1 - 1e-7, 1e-7}), 1.0};
  EXPECT_NEAR(nd_pred_value<double>(teacher, student, kOne), -std::log(1e-7), 1e-6);
  EXPECT_NEAR(-std::log(1e-7), 16.118, 1e-3);
  // Saturated student: the clamp keeps the value finite.
  EXPECT_TRUE(std::isfinite(nd_pred_loss<double>(teacher, row({200, 0}), kOne, 1.0).value));
}

TEST(NdPred, StepReducesOverlap) {
  auto teacher = soften<double>(gradcheck::random_matrix(4, 8, 21) * 2.0, 1.0);
  M logits = gradcheck::random_matrix(4, 8, 22) * 2.0;
  std::vector<std::uint8_t> mask(4, 1);
  auto overlap = [&](const M& z) {
    return (teacher.probs.array() * soften<double>(z, 1.0).probs.array()).sum();
  };
  const double before = overlap(logits);
  logits -= 0.01 * nd_pred_loss<double>(teacher, logits, mask, 1.0).grad;
  EXPECT_LT(overlap(logits), before);
}

TEST(Reject, Examples) {
  Eigen::Vector2d a(1, 1), b(1, 0);
  EXPECT_TRUE(orthogonal_reject(a, b).isApprox(Eigen::Vector2d(0, 1)));
  Eigen::Vector2d c(0, 3);
  EXPECT_TRUE(orthogonal_reject(c, b).isApprox(c));
  EXPECT_LT(orthogonal_reject(Eigen::Vector2d(2.5, 0), b).norm(), 1e-15);
  EXPECT_TRUE(orthogonal_reject(a, Eigen::Vector2d(0, 0)).isApprox(a));
}

TEST(Reject, OrthogonalIdempotentScaleInvariant) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd a(32), b(32);
    for (int i = 0; i < 32; ++i) {
      a(i) = n(rng);
      b(i) = n(rng);
    }
    auto l = orthogonal_reject(a, b);
    EXPECT_NEAR(l.dot(b), 0.0, 1e-9);
    EXPECT_LT((orthogonal_reject(l, b) - l).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((orthogonal_reject(a, -3.7 * b) - l).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(NdHidden, ReferenceValues) {
  M h = gradcheck::random_matrix(3, 4, 41);
  std::vector<std::uint8_t> mask(3, 1);
  EXPECT_DOUBLE_EQ(nd_hidden_loss<double>(h, h, mask, false).value, 1.0);
  // SE = |(x, 0, 0, 0)|^2 / 4 = ln 2 at every position.
  M zero = M::Zero(3, 4);
  M shift = M::Zero(3, 4);
  shift.col(0).setConstant(std::sqrt(4 * std::log(2.0)));
  EXPECT_NEAR(nd_hidden_loss<double>(shift, zero, mask, false).value, 0.5, 1e-15);
  EXPECT_NEAR(mrse<double>(shift, zero, mask), 0.5, 1e-15);
}

TEST(NdHidden, BoundedInUnitInterval) {
  for (unsigned seed = 0; seed < 30; ++seed) {
    std::vector<std::uint8_t> mask(5, 1);
    const double v = nd_hidden_loss<double>(gradcheck::random_matrix(5, 7, seed),
                                            gradcheck::random_matrix(5, 7, seed + 50), mask)
                         .value;
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(GradCheck, AllLossesOnSmallTensors) {
  // [batch 2 x positions 3 x width 8], one padded position.
  std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1};
  std::vector<int> targets = {1, 7, 0, 3, 0, 5};
  const double T = 1.5;
  auto teacher = soften<double>(gradcheck::random_matrix(6, 8, 51) * 2.0, T);
  const M z = gradcheck::random_matrix(6, 8, 52) * 2.0;
  const M hb = gradcheck::random_matrix(6, 8, 53);
  const M ha = gradcheck::random_matrix(6, 8, 54);

  EXPECT_LT(gradcheck::max_relative_error(
                z, [&](const M& x) { return (mle_loss<double, int>)(x, targets, mask).value; },
                (mle_loss<double, int>)(z, targets, mask).grad),
            1e-4);
  EXPECT_LT(gradcheck::max_relative_error(
                z, [&](const M& x) { return pd_loss<double>(teacher, x, mask, T).value; },
                pd_loss<double>(teacher, z, mask, T).grad),
            1e-4);
  EXPECT_LT(gradcheck::max_relative_error(
                z, [&](const M& x) { return nd_pred_loss<double>(teacher, x, mask, T).value; },
                nd_pred_loss<double>(teacher, z, mask, T).grad),
            1e-4);
  for (bool orthogonal : {true, false})
    EXPECT_LT(gradcheck::max_relative_error(
                  ha,
                  [&](const M& x) { return nd_hidden_loss<double>(x, hb, mask, orthogonal).value; },
                  nd_hidden_loss<double>(ha, hb, mask, orthogonal).grad),
              1e-4);
}

TEST(Objectives, MasterArithmetic) {
  std::vector<double> pd = {0.4, 0.8};
  auto t = master_objective(1.0, pd);
  EXPECT_DOUBLE_EQ(t.total, 1.6);
  std::vector<double> single = {0.3};
  EXPECT_DOUBLE_EQ(master_objective(1.0, single).total, 1.3);
  EXPECT_THROW(master_objective(1.0, {}), std::invalid_argument);
}

TEST(Objectives, MasterWithIdenticalAuxiliariesAddsEntropy) {
  const M z = gradcheck::random_matrix(1, 5, 61);
  auto self = soften<double>(z, 1.0);
  const double h = -(self.probs.array() * self.probs.array().log()).sum();
  std::vector<double> pd(3, pd_loss<double>(self, z, kOne, 1.0).value);
  EXPECT_NEAR(master_objective(2.0, pd).total, 2.0 + h, 1e-12);
}

TEST(Objectives, AuxiliaryArithmetic) {
  std::vector<double> one = {0.5};
  auto a = auxiliary_objective(1.0, 0.2, one, one);
  EXPECT_DOUBLE_EQ(a.total, 2.2);
  std::vector<double> nd = {0.2, 0.4};
  EXPECT_NEAR(auxiliary_objective(0.0, 0.0, nd, {}).nd_pred, 0.3, 1e-15);
  EXPECT_DOUBLE_EQ(auxiliary_objective(0.0, 0.7, {}, {}).total, 0.7);
}
