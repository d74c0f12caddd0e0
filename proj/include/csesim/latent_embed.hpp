#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "csesim/core.hpp"
#include "csesim/signal_model.hpp"

namespace csesim {

using LatentVector = Eigen::VectorXd;

/// Channel order used when flattening q-maps.
inline constexpr std::array<const char*, 5> kQMapChannels = {"rho_w", "rho_f", "r2star", "field", "phi0"};

/// Describes how q-maps map onto the flat vectors the model sees.
struct QMapLayout {
  std::size_t height = 0;
  std::size_t width = 0;
  double pixel_size_mm = 1.0;
  /// Per-channel divisor applied before projection so that channels with different units are comparable.
  std::array<double, 5> channel_scale{1.0, 1.0, 1.0, 1.0, 1.0};

  std::size_t pixels() const noexcept { return height * width; }
  std::size_t dimension() const noexcept { return 5 * pixels(); }
  friend bool operator==(const QMapLayout&, const QMapLayout&) = default;
};

struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // dimension x k, orthonormal columns
  Eigen::VectorXd stddev;      // descending
  std::size_t requested_k = 0;
  QMapLayout layout;

  std::size_t dimension() const noexcept { return static_cast<std::size_t>(mean.size()); }
  std::size_t k() const noexcept { return static_cast<std::size_t>(components.cols()); }
};

/// Principal components of `samples` (one sample per row). Components whose variance is at
/// round-off level relative to the largest are dropped, so k() may be smaller than requested.
inline PcaModel fit_pca(const Eigen::MatrixXd& samples, std::size_t k) {
  const auto n = static_cast<std::size_t>(samples.rows());
  const auto d = static_cast<std::size_t>(samples.cols());
  if (k < 1) throw DataError("pca needs k >= 1");
  if (n < 1 || d < 1) throw DataError("empty pca dataset");

  PcaModel model;
  model.requested_k = k;
  model.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - model.mean.transpose();
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;

  Eigen::VectorXd eigenvalues;
  Eigen::MatrixXd vectors;
  if (n < d) {
    // Gram route: eigenvectors of X X^T lifted through X^T.
    const Eigen::MatrixXd gram = centered * centered.transpose() / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    eigenvalues = solver.eigenvalues();
    vectors = centered.transpose() * solver.eigenvectors();
    for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
      const double norm = vectors.col(j).norm();
      if (norm > 0.0) vectors.col(j) /= norm;
    }
  } else {
    const Eigen::MatrixXd cov = centered.transpose() * centered / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    eigenvalues = solver.eigenvalues();
    vectors = solver.eigenvectors();
  }

  // Solver returns ascending order.
  const Eigen::Index m = eigenvalues.size();
  const double largest = m > 0 ? std::max(eigenvalues(m - 1), 0.0) : 0.0;
  const double cutoff = std::max(1e-12 * largest, 1e-300);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = m - 1; j >= 0 && keep.size() < k; --j) {
    if (eigenvalues(j) > cutoff) keep.push_back(j);
  }

  model.components.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(keep.size()));
  model.stddev.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) {
    Eigen::VectorXd v = vectors.col(keep[c]);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    model.components.col(static_cast<Eigen::Index>(c)) = v;
    model.stddev(static_cast<Eigen::Index>(c)) = std::sqrt(eigenvalues(keep[c]));
  }
  if (n < d && keep.size() > 1) {
    // The lifted vectors are orthogonal analytically; re-orthonormalize to remove round-off.
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(model.components);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(model.components.rows(), model.components.cols());
    for (Eigen::Index c = 0; c < q.cols(); ++c) {
      if (q.col(c).dot(model.components.col(c)) < 0.0) q.col(c) = -q.col(c);
    }
    model.components = q;
  }
  return model;
}

inline LatentVector encode(const PcaModel& model, const Eigen::VectorXd& x) {
  if (static_cast<std::size_t>(x.size()) != model.dimension()) throw DataError("layout mismatch in encode");
  return (model.components.transpose() * (x - model.mean)).cwiseQuotient(model.stddev);
}

/// Linear reconstruction without the physical-domain projection.
inline Eigen::VectorXd decode_linear(const PcaModel& model, const LatentVector& z) {
  if (static_cast<std::size_t>(z.size()) != model.k()) throw DataError("latent size does not match model");
  return model.mean + model.components * z.cwiseProduct(model.stddev);
}

inline Eigen::VectorXd flatten(const QMaps& q, const QMapLayout& layout) {
  if (q.height() != layout.height || q.width() != layout.width) throw DataError("layout mismatch: q-map grid");
  const std::size_t P = layout.pixels();
  Eigen::VectorXd v(static_cast<Eigen::Index>(layout.dimension()));
  const std::array<const RealMap*, 5> maps = {&q.rho_w, &q.rho_f, &q.r2star, &q.field, &q.phi0};
  for (std::size_t ch = 0; ch < 5; ++ch) {
    for (std::size_t i = 0; i < P; ++i) v(static_cast<Eigen::Index>(ch * P + i)) = (*maps[ch])[i] / layout.channel_scale[ch];
  }
  return v;
}

/// Inverse of flatten; non-negative channels are clamped at zero.
inline QMaps unflatten(const Eigen::VectorXd& v, const QMapLayout& layout) {
  if (static_cast<std::size_t>(v.size()) != layout.dimension()) throw DataError("layout mismatch: vector size");
  QMaps q(layout.height, layout.width, layout.pixel_size_mm);
  const std::size_t P = layout.pixels();
  const std::array<RealMap*, 5> maps = {&q.rho_w, &q.rho_f, &q.r2star, &q.field, &q.phi0};
  for (std::size_t ch = 0; ch < 5; ++ch) {
    const bool non_negative = ch <= 2;
    for (std::size_t i = 0; i < P; ++i) {
      double value = v(static_cast<Eigen::Index>(ch * P + i)) * layout.channel_scale[ch];
      if (non_negative) value = std::max(value, 0.0);
      (*maps[ch])[i] = value;
    }
  }
  return q;
}

/// Channel scales: root-mean-square deviation of each channel about its mean over the dataset.
inline std::array<double, 5> channel_scales(const std::vector<QMaps>& dataset) {
  std::array<double, 5> scale{};
  for (std::size_t ch = 0; ch < 5; ++ch) {
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (const auto& q : dataset) {
      const std::array<const RealMap*, 5> maps = {&q.rho_w, &q.rho_f, &q.r2star, &q.field, &q.phi0};
      for (double v : *maps[ch]) {
        sum += v;
        sq += v * v;
        ++count;
      }
    }
    const double mean = sum / static_cast<double>(std::max<std::size_t>(count, 1));
    const double var = sq / static_cast<double>(std::max<std::size_t>(count, 1)) - mean * mean;
    scale[ch] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return scale;
}

inline PcaModel fit_pca(const std::vector<QMaps>& dataset, std::size_t k) {
  if (dataset.empty()) throw DataError("empty pca dataset");
  QMapLayout layout{dataset.front().height(), dataset.front().width(), dataset.front().pixel_size_mm,
                    channel_scales(dataset)};
  Eigen::MatrixXd samples(static_cast<Eigen::Index>(dataset.size()), static_cast<Eigen::Index>(layout.dimension()));
  for (std::size_t i = 0; i < dataset.size(); ++i) samples.row(static_cast<Eigen::Index>(i)) = flatten(dataset[i], layout).transpose();
  PcaModel model = fit_pca(samples, k);
  model.layout = layout;
  return model;
}

inline LatentVector encode(const PcaModel& model, const QMaps& q) { return encode(model, flatten(q, model.layout)); }

/// Reconstruction projected onto the physical domain (densities and R2* clamped at zero).
inline QMaps decode(const PcaModel& model, const LatentVector& z) { return unflatten(decode_linear(model, z), model.layout); }

}  // namespace csesim
