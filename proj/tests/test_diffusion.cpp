#include <gtest/gtest.h>

#include <random>

#include "csesim/diffusion.hpp"

using namespace csesim;

namespace {

LatentVector initial_noise(Eigen::Index dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return standard_normal(rng, dim);
}

}  // namespace

TEST(Schedule, Invariants) {
  const BetaSchedule s = linear_beta_schedule();
  ASSERT_EQ(s.T, 500u);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 1.0 - s.beta_at(1));
  long double prod = 1.0L;
  for (std::size_t t = 1; t <= s.T; ++t) {
    EXPECT_GT(s.beta_at(t), 0.0);
    EXPECT_LT(s.beta_at(t), 1.0);
    if (t > 1) {
      EXPECT_GT(s.beta_at(t), s.beta_at(t - 1));
      EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
    }
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t - 1) / 499.0L;
    prod *= 1.0L - beta;
    EXPECT_NEAR(s.alpha_bar_at(t), static_cast<double>(prod), 1e-12);
  }
  EXPECT_LT(s.alpha_bar_at(500), 0.01);
  EXPECT_THROW(linear_beta_schedule(0), DataError);
  EXPECT_THROW(linear_beta_schedule(10, 0.02, 0.01), DataError);
}

TEST(ForwardNoise, ExamplesAndInversion) {
  const BetaSchedule s = linear_beta_schedule();
  const LatentVector z0 = initial_noise(7, 1), eps = initial_noise(7, 2);
  for (std::size_t t : {1u, 100u, 500u}) {
    const double ab = s.alpha_bar_at(t);
    EXPECT_LE((forward_noise(s, z0, t, LatentVector::Zero(7)) - std::sqrt(ab) * z0).norm(), 1e-15);
    EXPECT_LE((forward_noise(s, LatentVector::Zero(7), t, eps) - std::sqrt(1 - ab) * eps).norm(), 1e-15);
    const LatentVector zt = forward_noise(s, z0, t, eps);
    const LatentVector back = (zt - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
    EXPECT_LE((back - z0).cwiseAbs().maxCoeff(), 1e-10);
  }
  EXPECT_THROW(forward_noise(s, z0, 0, eps), DataError);
  EXPECT_THROW(forward_noise(s, z0, 501, eps), DataError);
}

TEST(DenoiserLoss, OracleAndZeroDenoisers) {
  const BetaSchedule s = linear_beta_schedule();
  const LatentVector z0 = initial_noise(4, 3);
  const Denoiser oracle = [&](const LatentVector& zt, std::size_t t) {
    const double ab = s.alpha_bar_at(t);
    return LatentVector((zt - std::sqrt(ab) * z0) / std::sqrt(1 - ab));
  };
  EXPECT_LE(denoiser_loss(oracle, s, {z0}, 5, 100), 1e-18);
  const Denoiser zero = [](const LatentVector& zt, std::size_t) { return LatentVector(LatentVector::Zero(zt.size())); };
  const std::size_t k = 16;
  const double loss = denoiser_loss(zero, s, {LatentVector::Zero(k)}, 9, 10000);
  EXPECT_NEAR(loss, static_cast<double>(k), 0.05 * k);
  EXPECT_EQ(denoiser_loss(zero, s, {z0}, 9, 10), denoiser_loss(zero, s, {z0}, 9, 10));
}

TEST(Mlp, GradientMatchesFiniteDifferences) {
  const DenoiserArch arch{2, 5, 4};
  MlpDenoiser net(3, arch, 11);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0, 1);
  Eigen::MatrixXd zt(3, 4), eps(3, 4);
  for (Eigen::Index i = 0; i < zt.size(); ++i) zt.data()[i] = g(rng), eps.data()[i] = g(rng);
  const std::vector<std::size_t> steps = {1, 17, 250, 500};
  std::vector<double> grad;
  net.loss_and_gradient(zt, steps, eps, grad);
  const auto params = net.parameters();
  ASSERT_EQ(grad.size(), params.size());
  double diff_sq = 0.0, ref_sq = 0.0;
  const double h = 1e-5;
  std::vector<double> dummy;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params;
    p[i] = params[i] + h;
    net.set_parameters(p);
    const double up = net.loss_and_gradient(zt, steps, eps, dummy);
    p[i] = params[i] - h;
    net.set_parameters(p);
    const double down = net.loss_and_gradient(zt, steps, eps, dummy);
    const double fd = (up - down) / (2 * h);
    diff_sq += (fd - grad[i]) * (fd - grad[i]);
    ref_sq += fd * fd;
    EXPECT_LE(std::abs(fd - grad[i]), 1e-5 * std::max(std::abs(fd), 1e-2)) << "parameter " << i;
  }
  EXPECT_LE(std::sqrt(diff_sq / ref_sq), 1e-5);
}

TEST(Mlp, BatchedPredictionMatchesSingle) {
  MlpDenoiser net(3, {2, 6, 4}, 4);
  const LatentVector z = initial_noise(3, 8);
  Eigen::MatrixXd batch(3, 2);
  batch.col(0) = z;
  batch.col(1) = 2 * z;
  const Eigen::MatrixXd out = net.predict(batch, {10, 20});
  EXPECT_LE((out.col(0) - net(z, 10)).norm(), 1e-14);
  EXPECT_LE((out.col(1) - net(LatentVector(2 * z), 20)).norm(), 1e-14);
  EXPECT_EQ(net(z, 10).size(), 3);
}

TEST(Training, LossDecreasesAndIsDeterministic) {
  const BetaSchedule s = linear_beta_schedule(100);
  Eigen::MatrixXd data(1, 256);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 1);
  for (Eigen::Index i = 0; i < data.cols(); ++i) data(0, i) = g(rng);
  OptimizerConfig opt;
  opt.learning_rate = 1e-3;
  opt.epochs = 30;
  const auto a = train_mlp_denoiser(data, s, {2, 32, 8}, opt, 5);
  const auto b = train_mlp_denoiser(data, s, {2, 32, 8}, opt, 5);
  ASSERT_EQ(a.loss_trace.size(), 30u);
  const double first = (a.loss_trace[0] + a.loss_trace[1]) / 2, last = (a.loss_trace[28] + a.loss_trace[29]) / 2;
  EXPECT_LT(last, first);
  EXPECT_EQ(a.network.parameters(), b.network.parameters());
}

TEST(Sampler, PaperLiteralExamples) {
  const BetaSchedule s = linear_beta_schedule();
  const Denoiser zero = [](const LatentVector& z, std::size_t) { return LatentVector(LatentVector::Zero(z.size())); };
  EXPECT_EQ(sample_paper_literal(s, zero, 5, 21), initial_noise(5, 21));
  const BetaSchedule one = linear_beta_schedule(1, 1e-4, 0.02);
  const Denoiser half = [](const LatentVector& z, std::size_t t) {
    EXPECT_EQ(t, 1u);
    return LatentVector(0.5 * z + LatentVector::Ones(z.size()));
  };
  const LatentVector eps = initial_noise(5, 22);
  EXPECT_LE((sample_paper_literal(one, half, 5, 22) - (eps - (0.5 * eps + LatentVector::Ones(5)))).norm(), 1e-15);
  const Denoiser damp = [](const LatentVector& z, std::size_t t) { return LatentVector(z / static_cast<double>(t + 1)); };
  EXPECT_EQ(sample_paper_literal(s, damp, 5, 23), sample_paper_literal(s, damp, 5, 23));
}

TEST(Sampler, AncestralSingleStep) {
  const BetaSchedule one = linear_beta_schedule(1, 1e-4, 0.02);
  const Denoiser zero = [](const LatentVector& z, std::size_t) { return LatentVector(LatentVector::Zero(z.size())); };
  const LatentVector out = sample_ddpm_ancestral(one, zero, 4, 31);
  EXPECT_LE((out - initial_noise(4, 31) / std::sqrt(one.alpha_at(1))).norm(), 1e-15);
}

TEST(Sampler, AncestralWithOptimalDenoiserMatchesGaussian) {
  const BetaSchedule s = linear_beta_schedule();
  const double mu = 1.5, sigma = 0.5;
  const Denoiser optimal = [&](const LatentVector& z, std::size_t t) {
    const double ab = s.alpha_bar_at(t);
    return LatentVector(std::sqrt(1 - ab) * (z.array() - std::sqrt(ab) * mu) / (ab * sigma * sigma + 1 - ab));
  };
  const std::size_t n = 10000;
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = sample_ddpm_ancestral(s, optimal, 1, sample_item_seed(77, i))(0);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(mean, mu, 0.05 * mu);
  EXPECT_NEAR(sd, sigma, 0.05 * sigma);
}

TEST(Sampler, NonFiniteIsNumericError) {
  const BetaSchedule s = linear_beta_schedule(10);
  const Denoiser bad = [](const LatentVector& z, std::size_t) {
    return LatentVector(LatentVector::Constant(z.size(), std::numeric_limits<double>::quiet_NaN()));
  };
  EXPECT_THROW(sample_ddpm_ancestral(s, bad, 2, 1), NumericError);
  EXPECT_THROW(sample_paper_literal(s, bad, 2, 1), NumericError);
}
