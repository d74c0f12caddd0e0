#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <span>
#include <thread>
#include <vector>

#include "csesim/core.hpp"
#include "csesim/phantom.hpp"
#include "csesim/signal_model.hpp"

namespace csesim {

struct FitConfig {
  /// Half-width of the field search window in Hz; defaults to 1/(2 dTE).
  std::optional<double> field_window_hz;
  Range r2star_range{0.0, 500.0};
  std::size_t field_grid_points = 48;
  std::size_t r2star_grid_points = 11;
  std::size_t max_iterations = 50;
  std::size_t multi_start = 4;
  /// Relative residual change at which Gauss-Newton stops.
  double tolerance = 1e-12;
  /// Block size of the low-resolution field initialization.
  std::size_t downsample = 2;
  std::size_t median_size = 5;
  /// Seeded voxel searches span +/- this fraction of the window around the seed.
  double seeded_window_fraction = 0.5;
  /// Voxels whose first-echo magnitude is below this fraction of the 99th percentile do not seed the field.
  double seed_foreground_fraction = 0.05;
  std::size_t threads = 1;

  void validate() const {
    if (field_window_hz && !(*field_window_hz > 0.0)) throw DataError("field window must be positive");
    if (r2star_range.lo < 0.0 || !(r2star_range.hi > r2star_range.lo)) throw DataError("invalid r2star range");
    if (field_grid_points < 3 || r2star_grid_points < 2) throw DataError("fit grid too coarse");
    if (multi_start < 1 || max_iterations < 1) throw DataError("multi_start and max_iterations must be >= 1");
    if (!(tolerance > 0.0)) throw DataError("tolerance must be positive");
    if (downsample < 1 || median_size < 1 || median_size % 2 == 0) throw DataError("invalid downsample/median size");
    if (!(seeded_window_fraction > 0.0) || seeded_window_fraction > 1.0) throw DataError("invalid seeded window");
  }
};

enum FitFlag : std::uint8_t {
  kFitOk = 0,
  kFitNotConverged = 1,
  kFitRankDeficient = 2,
  kFitAmbiguous = 4,  // a distinct basin reached almost the same residual: possible water-fat swap
};

struct VarproResult {
  Complex rho_w;
  Complex rho_f;
  double residual = 0.0;
  bool rank_deficient = false;
};

struct VoxelFit {
  Complex rho_w;
  Complex rho_f;
  double r2star = 0.0;
  double field = 0.0;
  double residual = 0.0;
  std::uint32_t iterations = 0;
  std::uint8_t flags = kFitOk;

  double pdff() const {
    const double total = std::abs(rho_w) + std::abs(rho_f);
    return total > 0.0 ? std::abs(rho_f) / total : 0.0;
  }
};

/// Echo times with their fat phasors; the parts of the model that do not depend on the voxel.
class SignalModel {
 public:
  SignalModel(const EchoProtocol& protocol, const FatSpectrum& spectrum)
      : times_(protocol.echo_times()), fat_(detail::fat_phasors(protocol, spectrum)) {
    detail::check_spectrum_matches(protocol, spectrum);
  }

  std::size_t echo_count() const noexcept { return times_.size(); }
  const std::vector<double>& times() const noexcept { return times_; }
  const std::vector<Complex>& fat() const noexcept { return fat_; }

  /// Water column exp((-r2 + i 2 pi field) t) of the basis.
  void water_column(double r2star, double field, std::span<Complex> out) const {
    for (std::size_t n = 0; n < times_.size(); ++n) {
      out[n] = std::exp(-r2star * times_[n]) * detail::unit_phasor(field * times_[n]);
    }
  }

 private:
  std::vector<double> times_;
  std::vector<Complex> fat_;
};

namespace detail {

struct Gram2 {
  double g11 = 0.0, g22 = 0.0;
  Complex g12;
  double det = 0.0;
  bool rank_deficient = false;

  static Gram2 of(std::span<const Complex> a, std::span<const Complex> b) {
    Gram2 g;
    for (std::size_t n = 0; n < a.size(); ++n) {
      g.g11 += std::norm(a[n]);
      g.g22 += std::norm(b[n]);
      g.g12 += std::conj(a[n]) * b[n];
    }
    g.det = g.g11 * g.g22 - std::norm(g.g12);
    g.rank_deficient = !(g.det > 1e-12 * g.g11 * g.g22);
    return g;
  }

  /// Solves G x = y for the least-squares amplitudes. Falls back to the water column alone when singular.
  std::pair<Complex, Complex> solve(Complex y1, Complex y2) const {
    if (rank_deficient) return {g11 > 0.0 ? y1 / g11 : Complex{}, Complex{}};
    return {(g22 * y1 - g12 * y2) / det, (g11 * y2 - std::conj(g12) * y1) / det};
  }
};

inline Complex dot(std::span<const Complex> a, std::span<const Complex> b) {
  Complex acc;
  for (std::size_t n = 0; n < a.size(); ++n) acc += std::conj(a[n]) * b[n];
  return acc;
}

inline double energy(std::span<const Complex> s) {
  double e = 0.0;
  for (const auto& v : s) e += std::norm(v);
  return e;
}

}  // namespace detail

/// Exact linear least-squares water/fat amplitudes at fixed (r2star, field), with the projected residual.
inline VarproResult varpro_project(std::span<const Complex> signal, double r2star, double field,
                                   const SignalModel& model) {
  const std::size_t N = model.echo_count();
  if (signal.size() != N) throw DataError("signal length does not match echo count");
  std::vector<Complex> a(N), b(N);
  model.water_column(r2star, field, a);
  for (std::size_t n = 0; n < N; ++n) b[n] = a[n] * model.fat()[n];
  const auto gram = detail::Gram2::of(a, b);
  const auto [xw, xf] = gram.solve(detail::dot(a, signal), detail::dot(b, signal));
  double residual = 0.0;
  for (std::size_t n = 0; n < N; ++n) residual += std::norm(signal[n] - xw * a[n] - xf * b[n]);
  return {xw, xf, residual, gram.rank_deficient};
}

inline VarproResult varpro_project(std::span<const Complex> signal, double r2star, double field,
                                   const EchoProtocol& protocol, const FatSpectrum& spectrum) {
  if (protocol.echo_count() < 3) throw DataError("fitting needs at least three echoes");
  return varpro_project(signal, r2star, field, SignalModel(protocol, spectrum));
}

/// Grid-initialized, multi-start Gauss-Newton fitter for a single protocol.
class VoxelFitter {
 public:
  VoxelFitter(const EchoProtocol& protocol, const FatSpectrum& spectrum, FitConfig config)
      : model_(protocol, spectrum), config_(std::move(config)) {
    config_.validate();
    if (protocol.echo_count() < 3) throw DataError("fitting needs at least three echoes");
    const double dte = protocol.delta_te();
    window_ = config_.field_window_hz.value_or(1.0 / (2.0 * dte));
    bool uniform = true;
    const auto& t = protocol.echo_times();
    for (std::size_t n = 1; n < t.size(); ++n) uniform = uniform && std::abs((t[n] - t[n - 1]) - dte) < 1e-12;
    period_ = 1.0 / dte;
    periodic_ = uniform && std::abs(2.0 * window_ - period_) < 1e-9 * period_;
    build_grid();
  }

  const FitConfig& config() const noexcept { return config_; }
  const SignalModel& model() const noexcept { return model_; }
  double window() const noexcept { return window_; }
  bool periodic() const noexcept { return periodic_; }
  double period() const noexcept { return period_; }

  /// Unseeded fit over the full field window centered at 0 Hz.
  VoxelFit fit(std::span<const Complex> signal) const { return fit_around(signal, 0.0, false); }

  /// Fit restricted to the seeded window around a prior field estimate.
  VoxelFit fit_seeded(std::span<const Complex> signal, double seed_field) const {
    return fit_around(signal, seed_field, true);
  }

  /// Distinct unseeded solutions whose residual is within 5% of the best one, best first.
  std::vector<VoxelFit> near_optimal(std::span<const Complex> signal) const {
    if (signal.size() != model_.echo_count()) throw DataError("signal length does not match echo count");
    const double e = detail::energy(signal);
    if (e == 0.0) return {VoxelFit{}};
    auto fits = refined_starts(signal, 0.0, false);
    const double tie = 1e-12 * e;
    std::vector<VoxelFit> out{fits[best_index(fits, 0.0, tie)]};
    std::sort(fits.begin(), fits.end(), [](const VoxelFit& a, const VoxelFit& b) { return a.residual < b.residual; });
    for (const auto& f : fits) {
      if (f.residual > 1.05 * out.front().residual + tie) break;
      if (std::all_of(out.begin(), out.end(), [&](const VoxelFit& o) { return distinct(f, o); })) out.push_back(f);
    }
    return out;
  }

  /// Separation of two field values, modulo the period when the field is only defined up to it.
  double field_distance(double a, double b) const {
    const double sep = std::abs(a - b);
    return periodic_ ? std::min(std::fmod(sep, period_), period_ - std::fmod(sep, period_)) : sep;
  }

  /// Residual of the projected functional at one (r2star, field) point.
  double projected_residual(std::span<const Complex> signal, double r2star, double field) const {
    return varpro_project(signal, r2star, field, model_).residual;
  }

 private:
  struct Node {
    double field_offset;
    double r2star;
    std::vector<Complex> a, b;  // basis columns at offset field
    double h11, h22;            // inverse Gram matrix
    Complex h12;
  };

  struct Candidate {
    double r2star, field;
    double cost;
  };

  void build_grid() {
    const std::size_t nf = config_.field_grid_points, nr = config_.r2star_grid_points;
    const std::size_t N = model_.echo_count();
    field_offsets_.resize(nf);
    const double step = 2.0 * window_ / static_cast<double>(periodic_ ? nf : nf - 1);
    for (std::size_t j = 0; j < nf; ++j) field_offsets_[j] = -window_ + step * static_cast<double>(j);
    r2_values_.resize(nr);
    for (std::size_t k = 0; k < nr; ++k) {
      r2_values_[k] = config_.r2star_range.lo + config_.r2star_range.width() * static_cast<double>(k) /
                                                    static_cast<double>(nr - 1);
    }
    nodes_.clear();
    nodes_.reserve(nf * nr);
    for (std::size_t j = 0; j < nf; ++j) {
      for (std::size_t k = 0; k < nr; ++k) {
        Node node{field_offsets_[j], r2_values_[k], std::vector<Complex>(N), std::vector<Complex>(N), 0, 0, {}};
        model_.water_column(node.r2star, node.field_offset, node.a);
        for (std::size_t n = 0; n < N; ++n) node.b[n] = node.a[n] * model_.fat()[n];
        const auto g = detail::Gram2::of(node.a, node.b);
        if (g.rank_deficient) {
          node.h11 = g.g11 > 0.0 ? 1.0 / g.g11 : 0.0;
          node.h22 = 0.0;
          node.h12 = {};
        } else {
          node.h11 = g.g22 / g.det;
          node.h22 = g.g11 / g.det;
          node.h12 = -g.g12 / g.det;
        }
        nodes_.push_back(std::move(node));
      }
    }
  }

  std::vector<Candidate> grid_candidates(std::span<const Complex> signal, double center, bool seeded) const {
    const std::size_t nf = field_offsets_.size(), nr = r2_values_.size();
    const std::size_t N = model_.echo_count();
    std::vector<Complex> demod(N);
    for (std::size_t n = 0; n < N; ++n) demod[n] = signal[n] * detail::unit_phasor(-center * model_.times()[n]);
    const double e = detail::energy(signal);
    const double limit = seeded ? config_.seeded_window_fraction * window_ : std::numeric_limits<double>::infinity();

    std::vector<double> cost(nf * nr, std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < nf; ++j) {
      if (std::abs(field_offsets_[j]) > limit + 1e-9) continue;
      for (std::size_t k = 0; k < nr; ++k) {
        const Node& node = nodes_[j * nr + k];
        const Complex y1 = detail::dot(node.a, demod), y2 = detail::dot(node.b, demod);
        const double projected = node.h11 * std::norm(y1) + node.h22 * std::norm(y2) +
                                 2.0 * std::real(std::conj(y1) * node.h12 * y2);
        cost[j * nr + k] = e - projected;
      }
    }

    const bool wrap = periodic_ && !seeded;
    std::vector<Candidate> minima;
    for (std::size_t j = 0; j < nf; ++j) {
      for (std::size_t k = 0; k < nr; ++k) {
        const double c = cost[j * nr + k];
        if (!std::isfinite(c)) continue;
        bool is_min = true;
        for (int dj = -1; dj <= 1 && is_min; ++dj) {
          for (int dk = -1; dk <= 1 && is_min; ++dk) {
            if (dj == 0 && dk == 0) continue;
            long jj = static_cast<long>(j) + dj;
            const long kk = static_cast<long>(k) + dk;
            if (kk < 0 || kk >= static_cast<long>(nr)) continue;
            if (wrap) jj = (jj + static_cast<long>(nf)) % static_cast<long>(nf);
            if (jj < 0 || jj >= static_cast<long>(nf)) continue;
            const double other = cost[static_cast<std::size_t>(jj) * nr + static_cast<std::size_t>(kk)];
            // Strict on one side so that plateaus yield a single representative.
            if (other < c || (other == c && (jj * static_cast<long>(nr) + kk) < static_cast<long>(j * nr + k))) {
              is_min = false;
            }
          }
        }
        if (is_min) minima.push_back({r2_values_[k], center + field_offsets_[j], c});
      }
    }
    std::stable_sort(minima.begin(), minima.end(), [](const Candidate& a, const Candidate& b) { return a.cost < b.cost; });
    if (minima.size() > config_.multi_start) minima.resize(config_.multi_start);
    return minima;
  }

  double wrap_field(double field, double center) const {
    if (!periodic_) return field;
    const double k = std::floor((field - center + 0.5 * period_) / period_);
    return field - k * period_;
  }

  /// Gauss-Newton on the projected functional, Kaufman's Jacobian approximation, step halving on increase.
  VoxelFit refine(std::span<const Complex> signal, Candidate start, double center, bool seeded) const {
    const std::size_t N = model_.echo_count();
    const auto& t = model_.times();
    const double e = detail::energy(signal);
    const double lo_field = seeded ? center - config_.seeded_window_fraction * window_ : -std::numeric_limits<double>::infinity();
    const double hi_field = seeded ? center + config_.seeded_window_fraction * window_ : std::numeric_limits<double>::infinity();
    auto clamp_state = [&](double& r2, double& f) {
      r2 = config_.r2star_range.clamp(r2);
      f = std::clamp(f, lo_field, hi_field);
    };

    double r2 = start.r2star, field = start.field;
    clamp_state(r2, field);
    VarproResult vp = varpro_project(signal, r2, field, model_);
    std::vector<Complex> a(N), b(N), fitted(N), resid(N), j1(N), j2(N);
    VoxelFit out;
    bool converged = false;
    std::uint32_t iter = 0;
    for (; iter < config_.max_iterations; ++iter) {
      if (vp.residual <= 1e-28 * e) {
        converged = true;
        break;
      }
      model_.water_column(r2, field, a);
      for (std::size_t n = 0; n < N; ++n) {
        b[n] = a[n] * model_.fat()[n];
        fitted[n] = vp.rho_w * a[n] + vp.rho_f * b[n];
        resid[n] = signal[n] - fitted[n];
      }
      const auto gram = detail::Gram2::of(a, b);
      // d(model)/d(r2star) = -t * model, d(model)/d(field) = i 2 pi t * model; project out the basis.
      for (std::size_t n = 0; n < N; ++n) {
        j1[n] = -t[n] * fitted[n];
        j2[n] = Complex(0.0, kTwoPi * t[n]) * fitted[n];
      }
      for (auto* u : {&j1, &j2}) {
        const auto [c1, c2] = gram.solve(detail::dot(a, *u), detail::dot(b, *u));
        for (std::size_t n = 0; n < N; ++n) (*u)[n] = -((*u)[n] - c1 * a[n] - c2 * b[n]);
      }
      const double h11 = detail::energy(j1), h22 = detail::energy(j2);
      const double h12 = std::real(detail::dot(j1, j2));
      const double g1 = std::real(detail::dot(j1, resid)), g2 = std::real(detail::dot(j2, resid));
      const double det = h11 * h22 - h12 * h12;
      if (!(det > 1e-300) || !std::isfinite(det)) {
        converged = true;
        break;
      }
      const double d1 = -(h22 * g1 - h12 * g2) / det;
      const double d2 = -(h11 * g2 - h12 * g1) / det;

      double scale = 1.0;
      bool accepted = false;
      for (int halving = 0; halving <= 20; ++halving, scale *= 0.5) {
        double r2_new = r2 + scale * d1, field_new = field + scale * d2;
        clamp_state(r2_new, field_new);
        const VarproResult trial = varpro_project(signal, r2_new, field_new, model_);
        if (trial.residual < vp.residual) {
          const double change = (vp.residual - trial.residual) / std::max(vp.residual, 1e-300);
          r2 = r2_new;
          field = field_new;
          vp = trial;
          accepted = true;
          if (change < config_.tolerance) converged = true;
          break;
        }
      }
      if (!accepted) {
        converged = true;  // no descent direction left at working precision
        break;
      }
      if (converged) {
        ++iter;
        break;
      }
    }

    const double wrapped = seeded ? field : wrap_field(field, center);
    if (wrapped != field) vp = varpro_project(signal, r2, wrapped, model_);
    out.rho_w = vp.rho_w;
    out.rho_f = vp.rho_f;
    out.r2star = r2;
    out.field = wrapped;
    out.residual = vp.residual;
    out.iterations = iter;
    out.flags = static_cast<std::uint8_t>((converged ? 0 : kFitNotConverged) | (vp.rank_deficient ? kFitRankDeficient : 0));
    return out;
  }

  VoxelFit fit_around(std::span<const Complex> signal, double center, bool seeded) const {
    if (signal.size() != model_.echo_count()) throw DataError("signal length does not match echo count");
    const double e = detail::energy(signal);
    if (e == 0.0) {
      VoxelFit zero;
      zero.field = center;
      return zero;
    }
    const auto fits = refined_starts(signal, center, seeded);
    const double tie = 1e-12 * e;
    const std::size_t best = best_index(fits, center, tie);
    VoxelFit out = fits[best];
    std::uint32_t total_iter = 0;
    for (std::size_t i = 0; i < fits.size(); ++i) {
      total_iter += fits[i].iterations;
      if (i != best && distinct(fits[i], out) && fits[i].residual <= 1.05 * out.residual + tie) out.flags |= kFitAmbiguous;
    }
    out.iterations = total_iter;
    return out;
  }

  std::vector<VoxelFit> refined_starts(std::span<const Complex> signal, double center, bool seeded) const {
    const auto starts = grid_candidates(signal, center, seeded);
    std::vector<VoxelFit> fits;
    fits.reserve(starts.size());
    for (const auto& s : starts) fits.push_back(refine(signal, s, center, seeded));
    return fits;
  }

  static std::size_t best_index(const std::vector<VoxelFit>& fits, double center, double tie) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < fits.size(); ++i) {
      const double diff = fits[i].residual - fits[best].residual;
      if (diff < -tie || (std::abs(diff) <= tie && std::abs(fits[i].field - center) < std::abs(fits[best].field - center))) {
        best = i;
      }
    }
    return best;
  }

  bool distinct(const VoxelFit& a, const VoxelFit& b) const {
    return field_distance(a.field, b.field) > 0.1 * window_ || std::abs(a.pdff() - b.pdff()) > 0.1;
  }

  SignalModel model_;
  FitConfig config_;
  double window_ = 0.0;
  double period_ = 0.0;
  bool periodic_ = false;
  std::vector<double> field_offsets_;
  std::vector<double> r2_values_;
  std::vector<Node> nodes_;
};

inline VoxelFit fit_voxel(std::span<const Complex> signal, const EchoProtocol& protocol, const FatSpectrum& spectrum,
                          const FitConfig& config = {}) {
  return VoxelFitter(protocol, spectrum, config).fit(signal);
}

/// Magnitudes plus a consensus phase arg(rho_w + rho_f) in cycles.
inline QMaps shared_phase_projection(const QMapsComplex& q, double pixel_size_mm = 1.0) {
  QMaps out(q.height(), q.width(), pixel_size_mm);
  for (std::size_t i = 0; i < q.rho_w.size(); ++i) {
    out.rho_w[i] = std::abs(q.rho_w[i]);
    out.rho_f[i] = std::abs(q.rho_f[i]);
    const Complex sum = q.rho_w[i] + q.rho_f[i];
    out.phi0[i] = sum == Complex{} ? 0.0 : std::arg(sum) / kTwoPi;
    out.r2star[i] = q.r2star[i];
    out.field[i] = q.field[i];
  }
  return out;
}

struct FitResult {
  QMapsComplex estimate;
  QMaps derived;
  RealMap residual;
  Image<std::uint32_t> iterations;
  Mask flags;
  RealMap seed_field;

  RealMap pdff() const { return pdff_map(derived); }
};

namespace detail {

template <typename T>
T percentile(std::vector<T> values, double p) {
  if (values.empty()) return T{};
  const auto k = static_cast<std::size_t>(std::clamp(p, 0.0, 1.0) * static_cast<double>(values.size() - 1));
  std::nth_element(values.begin(), values.begin() + static_cast<long>(k), values.end());
  return values[k];
}

/// Median of field values around a reference, unwrapping by the aliasing period when periodic.
inline double circular_median(std::vector<double> values, double period, bool periodic) {
  if (periodic) {
    Complex mean;
    for (double v : values) mean += unit_phasor(v / period);
    const double ref = std::arg(mean) / kTwoPi * period;
    for (double& v : values) v -= period * std::round((v - ref) / period);
  }
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<long>(mid), values.end());
  double m = values[mid];
  if (values.size() % 2 == 0) {
    const double lower = *std::max_element(values.begin(), values.begin() + static_cast<long>(mid));
    m = 0.5 * (m + lower);
  }
  return m;
}

template <typename Fn>
void parallel_rows(std::size_t rows, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, rows));
  if (threads == 1) {
    for (std::size_t r = 0; r < rows; ++r) fn(r);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t r = w; r < rows; r += threads) fn(r);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Low-resolution field estimate, median filtered; serves as the per-voxel seed.
inline RealMap initial_field_map(const ComplexImageSeries& series, const VoxelFitter& fitter) {
  const auto& cfg = fitter.config();
  const std::size_t H = series.height(), W = series.width(), N = series.echo_count();
  const std::size_t d = cfg.downsample;
  const std::size_t h = (H + d - 1) / d, w = (W + d - 1) / d;

  std::vector<std::vector<Complex>> low(h * w, std::vector<Complex>(N));
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      std::size_t count = 0;
      auto& acc = low[r * w + c];
      for (std::size_t rr = r * d; rr < std::min(H, (r + 1) * d); ++rr) {
        for (std::size_t cc = c * d; cc < std::min(W, (c + 1) * d); ++cc) {
          for (std::size_t n = 0; n < N; ++n) acc[n] += series.echoes[n](rr, cc);
          ++count;
        }
      }
      for (auto& v : acc) v /= static_cast<double>(count);
    }
  }

  std::vector<double> magnitudes(h * w);
  for (std::size_t i = 0; i < h * w; ++i) magnitudes[i] = std::abs(low[i][0]);
  const double threshold = cfg.seed_foreground_fraction * detail::percentile(magnitudes, 0.99);

  RealMap unseeded(h, w);
  Mask valid(h, w), ambiguous(h, w);
  detail::parallel_rows(h, cfg.threads, [&](std::size_t r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      if (magnitudes[i] > threshold && magnitudes[i] > 0.0) {
        const VoxelFit v = fitter.fit(low[i]);
        unseeded[i] = v.field;
        ambiguous[i] = (v.flags & kFitAmbiguous) != 0;
        valid[i] = 1;
      }
    }
  });

  // Region growing in order of decreasing magnitude: each voxel is fitted around the mean field of its
  // already assigned neighbours, so the field stays continuous where single voxels cannot resolve it.
  const auto neighbours = [&](std::size_t i, auto&& fn) {
    const long r = static_cast<long>(i / w), c = static_cast<long>(i % w);
    for (long dr = -1; dr <= 1; ++dr) {
      for (long dc = -1; dc <= 1; ++dc) {
        const long rr = r + dr, cc = c + dc;
        if ((dr || dc) && rr >= 0 && cc >= 0 && rr < static_cast<long>(h) && cc < static_cast<long>(w)) {
          const auto j = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc);
          if (valid[j]) fn(j);
        }
      }
    }
  };
  struct Grown {
    RealMap field;
    Mask assigned;
    double residual = 0.0;
  };
  const auto grow = [&](Grown g, std::size_t start, double start_field) {
    using Entry = std::pair<double, std::size_t>;
    std::priority_queue<Entry> queue;
    g.field[start] = start_field;
    g.assigned[start] = 1;
    g.residual += fitter.fit_seeded(low[start], start_field).residual;
    neighbours(start, [&](std::size_t j) { queue.emplace(magnitudes[j], j); });
    while (!queue.empty()) {
      const std::size_t i = queue.top().second;
      queue.pop();
      if (g.assigned[i]) continue;
      double sum = 0.0;
      int count = 0;
      neighbours(i, [&](std::size_t j) {
        if (g.assigned[j]) {
          sum += g.field[j];
          ++count;
        }
      });
      const VoxelFit v = fitter.fit_seeded(low[i], sum / count);
      g.field[i] = v.field;
      g.residual += v.residual;
      g.assigned[i] = 1;
      neighbours(i, [&](std::size_t j) {
        if (!g.assigned[j]) queue.emplace(magnitudes[j], j);
      });
    }
    return g;
  };

  Grown state{RealMap(h, w), Mask(h, w)};
  for (;;) {
    std::optional<std::size_t> start;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (!valid[i] || state.assigned[i]) continue;
      const bool better = !start || (ambiguous[*start] && !ambiguous[i]) ||
                          (ambiguous[*start] == ambiguous[i] && magnitudes[i] > magnitudes[*start]);
      if (better) start = i;
    }
    if (!start) break;
    if (!ambiguous[*start]) {
      state = grow(std::move(state), *start, unseeded[*start]);
      continue;
    }
    // An ambiguous start is grown from every near-optimal solution; the lowest total residual wins and
    // exact ties go to the region whose median field lies closest to zero.
    std::optional<Grown> best;
    double best_offset = 0.0;
    for (const auto& candidate : fitter.near_optimal(low[*start])) {
      Grown g = grow(state, *start, candidate.field);
      std::vector<double> region;
      for (std::size_t i = 0; i < h * w; ++i) {
        if (g.assigned[i] && !state.assigned[i]) region.push_back(g.field[i]);
      }
      const double offset = std::abs(detail::circular_median(std::move(region), fitter.period(), fitter.periodic()));
      const double tie = 1e-9 * std::max(g.residual, best ? best->residual : 0.0) + 1e-300;
      if (!best || g.residual < best->residual - tie || (g.residual <= best->residual + tie && offset < best_offset)) {
        best = std::move(g);
        best_offset = offset;
      }
    }
    state = std::move(*best);
  }
  const RealMap& coarse = state.field;

  std::vector<double> all_valid;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (valid[i]) all_valid.push_back(coarse[i]);
  }
  const double fallback = all_valid.empty() ? 0.0 : detail::circular_median(all_valid, fitter.period(), fitter.periodic());

  const long half = static_cast<long>(cfg.median_size / 2);
  RealMap smooth(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      std::vector<double> neigh;
      for (long dr = -half; dr <= half; ++dr) {
        for (long dc = -half; dc <= half; ++dc) {
          const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
          if (valid(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc))) {
            neigh.push_back(coarse(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc)));
          }
        }
      }
      smooth(r, c) = neigh.empty() ? fallback : detail::circular_median(std::move(neigh), fitter.period(), fitter.periodic());
    }
  }

  RealMap seed(H, W);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) seed(r, c) = smooth(r / d, c / d);
  }
  return seed;
}

/// Whole-image water-fat separation: seeded field initialization then voxelwise fits.
inline FitResult fit_image(const ComplexImageSeries& series, const FatSpectrum& spectrum, const FitConfig& config = {},
                           double pixel_size_mm = 1.0) {
  series.validate();
  const VoxelFitter fitter(series.protocol, spectrum, config);
  const std::size_t H = series.height(), W = series.width(), N = series.echo_count();

  FitResult out;
  out.estimate = QMapsComplex(H, W);
  out.residual = RealMap(H, W);
  out.iterations = Image<std::uint32_t>(H, W);
  out.flags = Mask(H, W);
  out.seed_field = initial_field_map(series, fitter);

  detail::parallel_rows(H, config.threads, [&](std::size_t r) {
    std::vector<Complex> s(N);
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t i = r * W + c;
      for (std::size_t n = 0; n < N; ++n) s[n] = series.echoes[n][i];
      const VoxelFit v = fitter.fit_seeded(s, out.seed_field[i]);
      out.estimate.rho_w[i] = v.rho_w;
      out.estimate.rho_f[i] = v.rho_f;
      out.estimate.r2star[i] = v.r2star;
      out.estimate.field[i] = v.field;
      out.residual[i] = v.residual;
      out.iterations[i] = v.iterations;
      out.flags[i] = v.flags;
    }
  });
  out.derived = shared_phase_projection(out.estimate, pixel_size_mm);
  return out;
}

}  // namespace csesim
