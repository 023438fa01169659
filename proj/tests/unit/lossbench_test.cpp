#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "steerlab/error.hpp"
#include "steerlab/lossbench/lossbench.hpp"
#include "steerlab/rng.hpp"

namespace steerlab::lossbench {
namespace {

std::vector<double> random_logits(std::size_t v, std::uint64_t seed, double scale = 3.0) {
  CounterRng rng(seed, Stream::kProbe);
  std::vector<double> z(v);
  for (double& x : z) x = scale * rng.normal();
  return z;
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

TEST(Kl, UniformLogitsExample) {
  const std::vector<double> z(4, 0.0);
  const auto r = kl_loss_and_grad(z, {0, 1});
  const std::vector<double> want{-0.25, -0.25, 0.25, 0.25};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.grad[j], want[j], 1e-15);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
}

TEST(Kl, LossVanishesWhenPMatchesQ) {
  const std::vector<double> z{0, 0, -60, -60};
  EXPECT_NEAR(kl_loss_and_grad(z, {0, 1}).loss, 0.0, 1e-20);
}

TEST(Kl, FiniteDifferencesAndZeroSum) {
  const auto z = random_logits(30, 1);
  const auto rep = grad_check(LossId::kKl, z, {2, 11, 25});
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
  EXPECT_LT(rep.max_rel_err, 1e-8);
  EXPECT_NEAR(sum(kl_loss_and_grad(z, {2, 11, 25}).grad), 0.0, 1e-15);
}

TEST(Ce, UniformLogitsExample) {
  const std::vector<double> z(4, 0.0);
  const auto r = column_ce_loss_and_grad(z, {0, 1});
  const std::vector<double> want{-0.5, -0.5, 0.5, 0.5};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.grad[j], want[j], 1e-15);
}

TEST(Ce, SingleTargetIsStandardCrossEntropy) {
  const auto z = random_logits(7, 2);
  const auto p = softmax(z);
  const auto r = column_ce_loss_and_grad(z, {4});
  for (std::size_t j = 0; j < z.size(); ++j) EXPECT_NEAR(r.grad[j], p[j] - (j == 4 ? 1.0 : 0.0), 1e-15);
  EXPECT_NEAR(sum(r.grad), 0.0, 1e-14);
}

TEST(Ce, TugOfWarWitness) {
  const std::vector<double> z{10, 0, 0, 0};
  const auto ce = column_ce_loss_and_grad(z, {0, 1});
  EXPECT_GT(ce.grad[0], 0.0);
  const auto mse = mse_target_loss_and_grad(z, {0, 1}, default_mse_target(z));
  EXPECT_LE(mse.grad[0], 0.0);
  EXPECT_LE(mse.grad[1], 0.0);
}

TEST(Ce, SmallestCasePasses) { EXPECT_TRUE(grad_check(LossId::kCe, std::vector<double>{0.3, -1.1}, {0}).pass); }

TEST(Mse, Examples) {
  const auto r = mse_target_loss_and_grad(std::vector<double>{1, 2, 3}, {0}, 5.0);
  EXPECT_EQ(r.grad, (std::vector<double>{-8, 0, 0}));
  EXPECT_EQ(r.loss, 16.0);
  const auto at = mse_target_loss_and_grad(std::vector<double>{5, 2, 5}, {0, 2}, 5.0);
  EXPECT_EQ(at.loss, 0.0);
  EXPECT_EQ(at.grad, (std::vector<double>{0, 0, 0}));
}

TEST(Mse, SupportIsExactlyTargets) {
  CounterRng rng(3, Stream::kProbe);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t v = 2 + rng.below(40);
    const auto z = random_logits(v, 100 + trial);
    TokenIds t{static_cast<int>(rng.below(v))};
    const auto r = mse_target_loss_and_grad(z, t, default_mse_target(z));
    for (std::size_t j = 0; j < v; ++j) {
      if (static_cast<int>(j) == t[0]) {
        ASSERT_NE(r.grad[j], 0.0);
      } else {
        ASSERT_EQ(r.grad[j], 0.0);
      }
    }
  }
  EXPECT_TRUE(grad_check(LossId::kMse, random_logits(20, 4), {1, 5}, {.mse_target = 3.0}).pass);
}

TEST(Sigmoid, Saturation) {
  EXPECT_DOUBLE_EQ(sigmoid_grad_factor(0.0), 0.25);
  EXPECT_NEAR(sigmoid_grad_factor(20.0), 2.0611536e-9, 1e-15);
  EXPECT_LT(sigmoid_grad_factor(20.0), 1e-6);
  double prev = sigmoid_grad_factor(0.0);
  for (double x = 0.5; x <= 60; x += 0.5) {
    const double f = sigmoid_grad_factor(x);
    EXPECT_LT(f, prev);
    prev = f;
  }
  const std::vector<double> mags{0, 5, 20, 40};
  const auto rows = sigmoid_saturation_probe(mags, {1}, 4);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_DOUBLE_EQ(rows[0].grad_inf_norm, 0.25);
  EXPECT_LT(rows[2].grad_inf_norm, 1e-6);
  EXPECT_LT(rows[3].grad_inf_norm, 1e-6);
  EXPECT_THROW(sigmoid_saturation_probe(std::vector<double>{-1}, {0}, 2), ArgumentError);
}

TEST(GradCheck, AllLossesPassOnRandomLogits) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto z = random_logits(16 + 8 * s, 50 + s);
    for (LossId id : {LossId::kKl, LossId::kCe, LossId::kMse, LossId::kSigmoid}) {
      GradCheckParams gp;
      gp.mse_target = default_mse_target(z);
      const auto r = grad_check(id, z, {0, 3, 5}, gp);
      EXPECT_TRUE(r.pass) << to_string(id) << " " << r.max_rel_err;
    }
  }
}

TEST(GradCheck, NaiveSoftmaxOverflowReported) {
  std::vector<double> z(6);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = i % 2 ? 1000.0 : -1000.0;
  GradCheckParams gp;
  gp.naive_softmax = true;
  const auto r = grad_check(LossId::kKl, z, {0, 1}, gp);
  EXPECT_TRUE(r.numeric_error);
  EXPECT_FALSE(r.pass);
  EXPECT_FALSE(r.message.empty());
  // the stable path does not overflow, but p_0 underflows to zero
  EXPECT_THROW(kl_loss_and_grad(z, {0, 1}), NumericError);
  EXPECT_NO_THROW(kl_loss_and_grad(z, {1, 3}));
}

TEST(LossId, Parse) {
  EXPECT_EQ(parse_loss_id("sigmoid"), LossId::kSigmoid);
  EXPECT_EQ(to_string(LossId::kCe), "ce");
  EXPECT_THROW(parse_loss_id("hinge"), ArgumentError);
  EXPECT_THROW(kl_loss_and_grad(std::vector<double>{1, 2}, {}), ArgumentError);
}

}  // namespace
}  // namespace steerlab::lossbench
