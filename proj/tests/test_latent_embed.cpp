#include <gtest/gtest.h>

#include <random>

#include "csesim/latent_embed.hpp"
#include "csesim/phantom.hpp"

using namespace csesim;

namespace {

std::vector<QMaps> small_phantoms(std::size_t n, std::uint64_t seed) {
  PhantomConfig cfg;
  cfg.height = cfg.width = 64;
  cfg.pixel_size_mm = 6.0;
  std::vector<QMaps> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_qmaps(cfg, phantom_item_seed(seed, i)).q);
  return out;
}

Eigen::MatrixXd random_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

}  // namespace

TEST(Pca, RotatedToyPrincipalDirection) {
  // Symmetric point set with covariance proportional to R diag(4, 1) R^T, R a 30 degree rotation.
  const double a = kPi / 6.0;
  const Eigen::Vector2d v1(std::cos(a), std::sin(a)), v2(-std::sin(a), std::cos(a));
  Eigen::MatrixXd x(4, 2);
  x.row(0) = 2.0 * v1;
  x.row(1) = -2.0 * v1;
  x.row(2) = v2;
  x.row(3) = -v2;
  const PcaModel m = fit_pca(x, 2);
  const double angle = std::acos(std::min(1.0, std::abs(m.components.col(0).dot(v1))));
  EXPECT_LT(angle, 1e-3);
  EXPECT_NEAR(m.stddev(0) / m.stddev(1), 2.0, 1e-12);
  EXPECT_GT(m.components.col(0).cwiseAbs().maxCoeff(), 0.0);
  Eigen::Index arg = 0;
  m.components.col(0).cwiseAbs().maxCoeff(&arg);
  EXPECT_GT(m.components(arg, 0), 0.0);
}

TEST(Pca, OrthonormalAndSortedBothRoutes) {
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{200, 12}, {15, 300}}) {
    const PcaModel m = fit_pca(random_rows(n, d, 3), 10);
    ASSERT_EQ(m.k(), 10u);
    const Eigen::MatrixXd gram = m.components.transpose() * m.components;
    EXPECT_LE((gram - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff(), 1e-8);
    for (Eigen::Index c = 1; c < m.stddev.size(); ++c) EXPECT_GE(m.stddev(c - 1), m.stddev(c));
  }
}

TEST(Pca, FullRankReconstruction) {
  const Eigen::MatrixXd x = random_rows(12, 40, 4);
  const PcaModel m = fit_pca(x, 40);  // more than the data rank; effective k shrinks
  EXPECT_EQ(m.k(), 11u);
  EXPECT_EQ(m.requested_k, 40u);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd row = x.row(i).transpose();
    const Eigen::VectorXd back = decode_linear(m, encode(m, row));
    EXPECT_LE((back - row).norm() / row.norm(), 1e-8);
  }
}

TEST(Pca, IdenticalSamples) {
  Eigen::MatrixXd x(5, 3);
  for (Eigen::Index i = 0; i < 5; ++i) x.row(i) << 1.0, -2.0, 3.5;
  const PcaModel m = fit_pca(x, 2);
  EXPECT_LE((m.mean - Eigen::Vector3d(1.0, -2.0, 3.5)).norm(), 1e-15);
  EXPECT_EQ(m.k(), 0u);
  EXPECT_EQ(encode(m, Eigen::VectorXd(m.mean)).size(), 0);
}

TEST(Pca, EncodeMatchesBruteForceDotProducts) {
  const Eigen::MatrixXd x = random_rows(50, 8, 5);
  const PcaModel m = fit_pca(x, 4);
  EXPECT_LE(encode(m, Eigen::VectorXd(m.mean)).norm(), 1e-15);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0, 1);
  Eigen::VectorXd v(8);
  for (auto& e : v) e = g(rng);
  const LatentVector z = encode(m, v);
  for (Eigen::Index c = 0; c < 4; ++c) {
    double dot = 0.0;
    for (Eigen::Index i = 0; i < 8; ++i) dot += m.components(i, c) * (v(i) - m.mean(i));
    EXPECT_NEAR(z(c), dot / m.stddev(c), 1e-12);
  }
}

TEST(Pca, WhitenedTrainingLatentsHaveUnitVariance) {
  const Eigen::MatrixXd x = random_rows(300, 6, 7);
  const PcaModel m = fit_pca(x, 6);
  Eigen::MatrixXd z(300, 6);
  for (Eigen::Index i = 0; i < 300; ++i) z.row(i) = encode(m, Eigen::VectorXd(x.row(i).transpose())).transpose();
  for (Eigen::Index c = 0; c < 6; ++c) {
    EXPECT_NEAR(z.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR(z.col(c).squaredNorm() / 299.0, 1.0, 1e-10);
  }
}

TEST(QMapEmbedding, RoundTripAndZeroLatent) {
  const auto maps = small_phantoms(12, 1);
  const PcaModel m = fit_pca(maps, 64);
  EXPECT_EQ(m.k(), 11u);
  for (const auto& q : maps) {
    const QMaps back = decode(m, encode(m, q));
    for (std::size_t i = 0; i < q.rho_w.size(); ++i) {
      EXPECT_NEAR(back.rho_w[i], q.rho_w[i], 1e-8);
      EXPECT_NEAR(back.field[i], q.field[i], 1e-6);
    }
  }
  const QMaps mean_map = decode(m, LatentVector::Zero(static_cast<Eigen::Index>(m.k())));
  const QMaps expected = unflatten(m.mean, m.layout);
  EXPECT_TRUE(mean_map == expected);
}

TEST(QMapEmbedding, DecodeClampsNegativeDensities) {
  const auto maps = small_phantoms(12, 2);
  const PcaModel m = fit_pca(maps, 4);
  const std::size_t P = m.layout.pixels();
  LatentVector z = LatentVector::Zero(static_cast<Eigen::Index>(m.k()));
  // Walk along the first component until the linear reconstruction has negative water density.
  Eigen::VectorXd lin;
  bool found = false;
  for (double s = 1.0; s < 1e4 && !found; s *= 1.5) {
    for (double sign : {1.0, -1.0}) {
      z(0) = sign * s;
      lin = decode_linear(m, z);
      if (lin.head(static_cast<Eigen::Index>(P)).minCoeff() < 0.0) {
        found = true;
        break;
      }
    }
  }
  ASSERT_TRUE(found);
  const QMaps q = decode(m, z);
  EXPECT_TRUE(q.is_valid());
  for (std::size_t i = 0; i < P; ++i) {
    const double raw = lin(static_cast<Eigen::Index>(i)) * m.layout.channel_scale[0];
    if (raw < 0.0) EXPECT_EQ(q.rho_w[i], 0.0);
    else EXPECT_NEAR(q.rho_w[i], raw, 1e-12);
  }
}

TEST(QMapEmbedding, LayoutMismatchThrows) {
  const auto maps = small_phantoms(3, 3);
  const PcaModel m = fit_pca(maps, 2);
  EXPECT_THROW(encode(m, QMaps(32, 32)), DataError);
  EXPECT_THROW(decode(m, LatentVector::Zero(5)), DataError);
}
