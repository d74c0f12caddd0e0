#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "csesim/core.hpp"
#include "csesim/latent_embed.hpp"

namespace csesim {

/// Variance schedule. Step indices are 1-based (t = 1..T); storage is 0-based.
struct BetaSchedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(std::size_t t) const { return beta.at(t - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
  double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }
};

inline BetaSchedule linear_beta_schedule(std::size_t T = 500, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw DataError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw DataError("schedule bounds must satisfy 0 < beta_start < beta_end < 1");
  }
  BetaSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double cumulative = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    s.beta[i] = beta_start + (beta_end - beta_start) * (T > 1 ? static_cast<double>(i) / static_cast<double>(T - 1) : 0.0);
    s.alpha[i] = 1.0 - s.beta[i];
    cumulative *= s.alpha[i];
    s.alpha_bar[i] = cumulative;
  }
  return s;
}

inline void check_step(const BetaSchedule& schedule, std::size_t t) {
  if (t < 1 || t > schedule.T) {
    throw DataError("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(schedule.T));
  }
}

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
inline LatentVector forward_noise(const BetaSchedule& schedule, const LatentVector& z0, std::size_t t,
                                  const LatentVector& eps) {
  check_step(schedule, t);
  if (z0.size() != eps.size()) throw DataError("forward_noise dimension mismatch");
  const double ab = schedule.alpha_bar_at(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

/// Predicts the noise component of z_t at step t.
using Denoiser = std::function<LatentVector(const LatentVector&, std::size_t)>;

inline LatentVector standard_normal(std::mt19937_64& rng, Eigen::Index dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  LatentVector v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v(i) = normal(rng);
  return v;
}

/// Monte-Carlo estimate of E ||eps - eps_theta(z_t, t)||^2 with t ~ U{1..T} and eps ~ N(0, I).
inline double denoiser_loss(const Denoiser& denoiser, const BetaSchedule& schedule, const std::vector<LatentVector>& batch,
                            std::uint64_t seed, std::size_t repeats = 1) {
  if (batch.empty()) throw DataError("denoiser_loss needs a non-empty batch");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> step(1, schedule.T);
  double total = 0.0;
  std::size_t draws = 0;
  for (std::size_t r = 0; r < repeats; ++r) {
    for (const auto& z0 : batch) {
      const std::size_t t = step(rng);
      const LatentVector eps = standard_normal(rng, z0.size());
      const LatentVector zt = forward_noise(schedule, z0, t, eps);
      total += (eps - denoiser(zt, t)).squaredNorm();
      ++draws;
    }
  }
  return total / static_cast<double>(draws);
}

struct DenoiserArch {
  std::size_t hidden_layers = 3;
  std::size_t hidden_units = 128;
  std::size_t time_embedding = 32;
};

struct OptimizerConfig {
  double learning_rate = 7e-5;
  std::size_t batch_size = 8;
  std::size_t epochs = 300;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Learning rate at the last step as a fraction of the initial one (linear decay); 1 keeps it constant.
  double final_lr_fraction = 1.0;
};

/// Sinusoidal embedding of the diffusion step: sin and cos at geometrically spaced frequencies.
inline Eigen::VectorXd time_embedding(std::size_t t, std::size_t dim) {
  Eigen::VectorXd e(static_cast<Eigen::Index>(dim));
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(half, 1)));
    e(static_cast<Eigen::Index>(i)) = std::sin(static_cast<double>(t) * freq);
    e(static_cast<Eigen::Index>(half + i)) = std::cos(static_cast<double>(t) * freq);
  }
  if (dim % 2 == 1) e(static_cast<Eigen::Index>(dim - 1)) = 0.0;
  return e;
}

/// Fully connected noise predictor with SiLU hidden activations and a linear output layer.
class MlpDenoiser {
 public:
  struct Layer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;
  };

  MlpDenoiser() = default;

  MlpDenoiser(std::size_t latent_dim, DenoiserArch arch, std::uint64_t seed) : latent_dim_(latent_dim), arch_(arch) {
    if (latent_dim < 1) throw DataError("latent dimension must be >= 1");
    std::mt19937_64 rng(seed);
    std::size_t in = latent_dim + arch.time_embedding;
    for (std::size_t l = 0; l <= arch.hidden_layers; ++l) {
      const std::size_t out = l == arch.hidden_layers ? latent_dim : arch.hidden_units;
      std::normal_distribution<double> init(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
      Layer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out))};
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = init(rng);
      }
      layers_.push_back(std::move(layer));
      in = out;
    }
  }

  std::size_t latent_dim() const noexcept { return latent_dim_; }
  const DenoiserArch& arch() const noexcept { return arch_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  std::vector<double> parameters() const {
    std::vector<double> p;
    p.reserve(parameter_count());
    for (const auto& l : layers_) {
      p.insert(p.end(), l.weight.data(), l.weight.data() + l.weight.size());
      p.insert(p.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return p;
  }

  void set_parameters(const std::vector<double>& p) {
    if (p.size() != parameter_count()) throw DataError("parameter vector size mismatch");
    std::size_t k = 0;
    for (auto& l : layers_) {
      std::copy(p.begin() + static_cast<long>(k), p.begin() + static_cast<long>(k + l.weight.size()), l.weight.data());
      k += static_cast<std::size_t>(l.weight.size());
      std::copy(p.begin() + static_cast<long>(k), p.begin() + static_cast<long>(k + l.bias.size()), l.bias.data());
      k += static_cast<std::size_t>(l.bias.size());
    }
  }

  /// Builds the network input: latent rows on top of the step embedding rows.
  Eigen::MatrixXd input(const Eigen::MatrixXd& zt, const std::vector<std::size_t>& steps) const {
    const Eigen::Index B = zt.cols();
    Eigen::MatrixXd x(static_cast<Eigen::Index>(latent_dim_ + arch_.time_embedding), B);
    x.topRows(static_cast<Eigen::Index>(latent_dim_)) = zt;
    for (Eigen::Index b = 0; b < B; ++b) {
      x.col(b).tail(static_cast<Eigen::Index>(arch_.time_embedding)) = time_embedding(steps[static_cast<std::size_t>(b)], arch_.time_embedding);
    }
    return x;
  }

  /// Batched prediction; columns of `zt` are samples.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& zt, const std::vector<std::size_t>& steps) const {
    Eigen::MatrixXd h = input(zt, steps);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Eigen::MatrixXd pre = (layers_[l].weight * h).colwise() + layers_[l].bias;
      h = l + 1 < layers_.size() ? silu(pre) : pre;
    }
    return h;
  }

  LatentVector operator()(const LatentVector& zt, std::size_t t) const {
    return predict(zt, std::vector<std::size_t>{t}).col(0);
  }

  Denoiser as_denoiser() const {
    return [self = *this](const LatentVector& z, std::size_t t) { return self(z, t); };
  }

  /// Mean over the batch of ||eps - prediction||^2 and its gradient in parameters() order.
  double loss_and_gradient(const Eigen::MatrixXd& zt, const std::vector<std::size_t>& steps, const Eigen::MatrixXd& eps,
                           std::vector<double>& gradient) const {
    const double B = static_cast<double>(zt.cols());
    std::vector<Eigen::MatrixXd> inputs, pres;
    Eigen::MatrixXd h = input(zt, steps);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      inputs.push_back(h);
      Eigen::MatrixXd pre = (layers_[l].weight * h).colwise() + layers_[l].bias;
      h = l + 1 < layers_.size() ? silu(pre) : pre;
      pres.push_back(std::move(pre));
    }
    const Eigen::MatrixXd diff = h - eps;
    const double loss = diff.squaredNorm() / B;

    gradient.assign(parameter_count(), 0.0);
    std::vector<std::size_t> offsets(layers_.size());
    std::size_t k = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      offsets[l] = k;
      k += static_cast<std::size_t>(layers_[l].weight.size() + layers_[l].bias.size());
    }
    Eigen::MatrixXd delta = 2.0 * diff / B;  // dL/d(pre) of the output layer
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size()) delta = delta.cwiseProduct(silu_derivative(pres[l]));
      Eigen::Map<Eigen::MatrixXd> gw(gradient.data() + offsets[l], layers_[l].weight.rows(), layers_[l].weight.cols());
      Eigen::Map<Eigen::VectorXd> gb(gradient.data() + offsets[l] + layers_[l].weight.size(), layers_[l].bias.size());
      gw = delta * inputs[l].transpose();
      gb = delta.rowwise().sum();
      if (l > 0) delta = layers_[l].weight.transpose() * delta;
    }
    return loss;
  }

 private:
  static Eigen::MatrixXd silu(const Eigen::MatrixXd& x) {
    return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
  }
  static Eigen::MatrixXd silu_derivative(const Eigen::MatrixXd& x) {
    return x.unaryExpr([](double v) {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    });
  }

  std::size_t latent_dim_ = 0;
  DenoiserArch arch_;
  std::vector<Layer> layers_;
};

/// Adaptive-moment optimizer state over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t n, const OptimizerConfig& cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.epsilon);
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

struct TrainedDenoiser {
  MlpDenoiser network;
  std::vector<double> loss_trace;  // mean training loss per epoch
};

/// Trains the noise predictor on the latent dataset (one sample per column).
inline TrainedDenoiser train_mlp_denoiser(const Eigen::MatrixXd& dataset, const BetaSchedule& schedule,
                                          const DenoiserArch& arch, const OptimizerConfig& opt, std::uint64_t seed) {
  if (dataset.cols() < 1 || dataset.rows() < 1) throw DataError("denoiser training set is empty");
  if (opt.batch_size < 1 || opt.epochs < 1 || !(opt.learning_rate > 0.0)) throw DataError("invalid optimizer config");
  const auto n = static_cast<std::size_t>(dataset.cols());
  const auto dim = dataset.rows();
  TrainedDenoiser out{MlpDenoiser(static_cast<std::size_t>(dim), arch, derive_seed(seed, 1)), {}};
  std::vector<double> params = out.network.parameters(), grad;
  Adam adam(params.size(), opt);
  std::mt19937_64 rng(derive_seed(seed, 2));
  std::uniform_int_distribution<std::size_t> step(1, schedule.T);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t batches_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const double total_steps = static_cast<double>(batches_per_epoch * opt.epochs);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
      const std::size_t B = std::min(opt.batch_size, n - start);
      Eigen::MatrixXd zt(dim, static_cast<Eigen::Index>(B)), eps(dim, static_cast<Eigen::Index>(B));
      std::vector<std::size_t> steps(B);
      for (std::size_t b = 0; b < B; ++b) {
        steps[b] = step(rng);
        for (Eigen::Index i = 0; i < dim; ++i) eps(i, static_cast<Eigen::Index>(b)) = normal(rng);
        const double ab = schedule.alpha_bar_at(steps[b]);
        zt.col(static_cast<Eigen::Index>(b)) =
            std::sqrt(ab) * dataset.col(static_cast<Eigen::Index>(order[start + b])) + std::sqrt(1.0 - ab) * eps.col(static_cast<Eigen::Index>(b));
      }
      const double loss = out.network.loss_and_gradient(zt, steps, eps, grad);
      if (!std::isfinite(loss)) {
        throw NumericError("denoiser training diverged at step " + std::to_string(global_step));
      }
      const double progress = static_cast<double>(global_step) / std::max(1.0, total_steps - 1.0);
      const double lr = opt.learning_rate * (1.0 - (1.0 - opt.final_lr_fraction) * progress);
      adam.step(params, grad, lr);
      out.network.set_parameters(params);
      epoch_loss += loss * static_cast<double>(B);
      ++global_step;
    }
    out.loss_trace.push_back(epoch_loss / static_cast<double>(n));
  }
  return out;
}

namespace detail {

inline void check_finite(const LatentVector& z, std::size_t t) {
  if (!z.allFinite()) throw NumericError("non-finite latent at reverse step " + std::to_string(t));
}

}  // namespace detail

/// Reverse iteration exactly as z_{t-1} = z_t - eps_theta(z_t, t), from z_T ~ N(0, I).
inline LatentVector sample_paper_literal(const BetaSchedule& schedule, const Denoiser& denoiser, Eigen::Index dim,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LatentVector z = standard_normal(rng, dim);
  for (std::size_t t = schedule.T; t >= 1; --t) {
    z = z - denoiser(z, t);
    detail::check_finite(z, t);
  }
  return z;
}

/// Standard ancestral sampler with posterior variance beta_t.
inline LatentVector sample_ddpm_ancestral(const BetaSchedule& schedule, const Denoiser& denoiser, Eigen::Index dim,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LatentVector z = standard_normal(rng, dim);
  for (std::size_t t = schedule.T; t >= 1; --t) {
    const double a = schedule.alpha_at(t), b = schedule.beta_at(t), ab = schedule.alpha_bar_at(t);
    z = (z - (b / std::sqrt(1.0 - ab)) * denoiser(z, t)) / std::sqrt(a);
    if (t > 1) {
      const double sd = std::sqrt(b);
      for (Eigen::Index i = 0; i < dim; ++i) z(i) += sd * normal(rng);
    }
    detail::check_finite(z, t);
  }
  return z;
}

enum class SamplerKind { Ancestral, PaperLiteral };

inline LatentVector sample(SamplerKind kind, const BetaSchedule& schedule, const Denoiser& denoiser, Eigen::Index dim,
                           std::uint64_t seed) {
  return kind == SamplerKind::Ancestral ? sample_ddpm_ancestral(schedule, denoiser, dim, seed)
                                        : sample_paper_literal(schedule, denoiser, dim, seed);
}

inline std::uint64_t sample_item_seed(std::uint64_t master_seed, std::size_t index) {
  return derive_seed(master_seed, 0x53414D50ull /* "SAMP" */, index);
}

/// Draws `count` latents by reverse diffusion and decodes them into q-maps.
inline std::vector<QMaps> generate_qmaps(const PcaModel& pca, const BetaSchedule& schedule, const Denoiser& denoiser,
                                         std::size_t count, std::uint64_t seed,
                                         SamplerKind kind = SamplerKind::Ancestral) {
  std::vector<QMaps> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const LatentVector z = sample(kind, schedule, denoiser, static_cast<Eigen::Index>(pca.k()), sample_item_seed(seed, i));
    out.push_back(decode(pca, z));
  }
  return out;
}

}  // namespace csesim
