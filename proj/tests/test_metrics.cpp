#include <gtest/gtest.h>

#include <random>

#include "csesim/metrics.hpp"

using namespace csesim;

namespace {

Eigen::MatrixXd normal_rows(std::size_t n, double mean, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(mean, 1.0);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), 1);
  for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, 0) = g(rng);
  return m;
}

RealMap textured(std::size_t H, std::size_t W, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  RealMap img(H, W);
  const double fx = 0.05 + 0.05 * u(rng), fy = 0.07 + 0.05 * u(rng);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) img(r, c) = 0.5 + 0.3 * std::sin(fx * c) * std::cos(fy * r) + 0.1 * u(rng);
  }
  return img;
}

RealMap add_noise(const RealMap& img, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, sigma);
  RealMap out = img;
  for (auto& v : out) v += g(rng);
  return out;
}

}  // namespace

TEST(Mmd, IdenticalSetsGiveZero) {
  const auto a = normal_rows(200, 0, 1);
  EXPECT_NEAR(mmd_gaussian(a, a), 0.0, 1e-12);
}

TEST(Mmd, SameDistributionBelowPermutationThreshold) {
  const auto a = normal_rows(500, 0, 2), b = normal_rows(500, 0, 3);
  Eigen::MatrixXd pooled(1000, 1);
  pooled << a, b;
  const double bandwidth = median_pairwise_distance(pooled, pooled);
  const double observed = mmd_gaussian(a, b, bandwidth);
  std::mt19937_64 rng(4);
  std::vector<Eigen::Index> idx(1000);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> null;
  for (int p = 0; p < 100; ++p) {
    std::shuffle(idx.begin(), idx.end(), rng);
    Eigen::MatrixXd x(500, 1), y(500, 1);
    for (Eigen::Index i = 0; i < 500; ++i) x(i, 0) = pooled(idx[static_cast<std::size_t>(i)], 0), y(i, 0) = pooled(idx[static_cast<std::size_t>(500 + i)], 0);
    null.push_back(mmd_gaussian(x, y, bandwidth));
  }
  std::sort(null.begin(), null.end());
  EXPECT_LT(observed, null[95]);
}

TEST(Mmd, ShiftedDistributionIsFarLarger) {
  const auto a = normal_rows(500, 0, 5), b = normal_rows(500, 0, 6), c = normal_rows(500, 3, 7);
  EXPECT_GE(mmd_gaussian(a, c), 10.0 * mmd_gaussian(a, b));
}

TEST(Ssim, IdentityConstantsAndShift) {
  const RealMap x = textured(64, 64, 1);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  const SsimParams p;
  for (auto [c1v, c2v] : {std::pair{0.2, 0.7}, std::pair{0.5, 0.5}, std::pair{0.0, 0.9}}) {
    const RealMap a(32, 32, c1v), b(32, 32, c2v);
    const double C1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
    const double expected = (2 * c1v * c2v + C1) / (c1v * c1v + c2v * c2v + C1);
    EXPECT_NEAR(ssim(a, b), expected, 1e-12);
  }
  RealMap shifted(64, 64);
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t c = 0; c < 64; ++c) shifted(r, c) = x(r, (c + 20) % 64);
  }
  EXPECT_LT(ssim(x, shifted), 1.0);
  EXPECT_THROW(ssim(RealMap(8, 8), RealMap(8, 8)), DataError);
  EXPECT_THROW(ssim(x, RealMap(32, 32)), DataError);
}

TEST(MsSsim, IdentityMonotoneAndConstants) {
  const RealMap x = textured(192, 192, 2);
  EXPECT_NEAR(ms_ssim(x, x), 1.0, 1e-12);
  double previous = 1.0;
  for (double sigma : {0.01, 0.05, 0.1}) {
    const double v = ms_ssim(x, add_noise(x, sigma, 3));
    EXPECT_LT(v, previous) << sigma;
    previous = v;
  }
  const SsimParams p;
  const double C1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double lum = (2 * 0.3 * 0.6 + C1) / (0.09 + 0.36 + C1);
  EXPECT_NEAR(ms_ssim(RealMap(176, 176, 0.3), RealMap(176, 176, 0.6)), std::pow(lum, kMsSsimWeights[4]), 1e-12);
  EXPECT_THROW(ms_ssim(RealMap(128, 128), RealMap(128, 128)), DataError);
}

TEST(Diversity, IdenticalSamplesAndDeterminism) {
  const RealMap x = textured(176, 176, 4);
  const auto stats = pairwise_diversity({x, x, x}, 5, 1);
  EXPECT_NEAR(stats.mean_ssim, 1.0, 1e-12);
  ASSERT_TRUE(stats.mean_ms_ssim.has_value());
  EXPECT_NEAR(*stats.mean_ms_ssim, 1.0, 1e-12);
  const std::vector<RealMap> varied = {textured(64, 64, 5), textured(64, 64, 6), textured(64, 64, 7)};
  const auto a = pairwise_diversity(varied, 10, 9), b = pairwise_diversity(varied, 10, 9);
  EXPECT_EQ(a.mean_ssim, b.mean_ssim);
  EXPECT_LT(a.mean_ssim, 1.0);
  EXPECT_FALSE(a.mean_ms_ssim.has_value());
}

TEST(PdffMae, Examples) {
  RealMap ref(4, 4, 0.2), est = ref;
  const Mask all(4, 4, 1);
  EXPECT_EQ(pdff_mae(est, ref, all), 0.0);
  for (auto& v : est) v += 0.01;
  EXPECT_NEAR(pdff_mae(est, ref, all), 1.0, 1e-12);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  Mask m(4, 4);
  double total = 0;
  int n = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    est[i] = u(rng), ref[i] = u(rng), m[i] = i % 3 == 0;
    if (m[i]) total += std::abs(est[i] - ref[i]), ++n;
  }
  EXPECT_NEAR(pdff_mae(est, ref, m), 100.0 * total / n, 1e-12);
  EXPECT_THROW(pdff_mae(est, ref, Mask(4, 4)), DataError);
}

TEST(RoiBias, MedianArithmetic) {
  RealMap est(1, 3), ref(1, 3, 0.1);
  est[0] = 0.1, est[1] = 0.2, est[2] = 0.3;
  const Mask roi(1, 3, 1);
  EXPECT_NEAR(roi_bias(est, ref, roi), 10.0, 1e-12);
  EXPECT_EQ(roi_bias(ref, ref, roi), 0.0);
}

TEST(BlandAltman, HandComputedTriple) {
  const auto s = bland_altman({{12, 10}, {19, 20}, {33, 30}});
  EXPECT_NEAR(s.bias, 4.0 / 3.0, 1e-9);
  EXPECT_NEAR(s.sd, std::sqrt(13.0 / 3.0), 1e-9);
  EXPECT_NEAR(s.sd, 2.082, 1e-3);
  EXPECT_NEAR(s.loa_low, 4.0 / 3.0 - 1.96 * std::sqrt(13.0 / 3.0), 1e-9);
  EXPECT_NEAR(s.loa_high, 4.0 / 3.0 + 1.96 * std::sqrt(13.0 / 3.0), 1e-9);
  EXPECT_NEAR(s.loa_low, -2.75, 0.01);
  EXPECT_NEAR(s.loa_high, 5.41, 0.01);
  EXPECT_DOUBLE_EQ(s.loa_high - s.loa_low, 2.0 * 1.96 * s.sd);
  EXPECT_LE(s.loa_low, s.bias);
  EXPECT_LE(s.bias, s.loa_high);
}

TEST(BlandAltman, IdenticalAndAffine) {
  const auto z = bland_altman({{1, 1}, {2, 2}, {5, 5}});
  EXPECT_EQ(z.bias, 0.0);
  EXPECT_EQ(z.loa_low, 0.0);
  EXPECT_EQ(z.loa_high, 0.0);
  const std::vector<std::pair<double, double>> base = {{3, 2}, {7, 9}, {4, 4}, {10, 6}};
  auto shifted = base;
  for (auto& [e, r] : shifted) e += 2.5;
  const auto a = bland_altman(base), b = bland_altman(shifted);
  EXPECT_NEAR(b.bias - a.bias, 2.5, 1e-12);
  EXPECT_NEAR(b.loa_high - b.loa_low, a.loa_high - a.loa_low, 1e-12);
  EXPECT_THROW(bland_altman({{1, 1}}), DataError);
}

TEST(Summary, MeanAndInterval) {
  const auto s = summarize({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.ci95, 1.96);
  EXPECT_EQ(s.n, 3u);
}
