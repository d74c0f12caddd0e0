#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "csesim/core.hpp"

namespace csesim {

/// Proton gyromagnetic ratio over 2*pi, in MHz/T.
inline constexpr double kGyromagneticMHzPerTesla = 42.5774;

inline double ppm_to_hz(double ppm, double field_strength_tesla) {
  if (!(field_strength_tesla > 0.0) || !std::isfinite(field_strength_tesla)) {
    throw DataError("field strength must be positive, got " + std::to_string(field_strength_tesla));
  }
  return ppm * kGyromagneticMHzPerTesla * field_strength_tesla;  // MHz * ppm == Hz
}

struct SpectralPeak {
  double frequency_hz = 0.0;
  double amplitude = 0.0;
};

/// Multi-peak triglyceride spectrum. Amplitudes are normalized to sum to one.
class FatSpectrum {
 public:
  struct PpmPeak {
    double ppm = 0.0;
    double amplitude = 0.0;
  };

  FatSpectrum(std::vector<SpectralPeak> peaks, double field_strength_tesla)
      : peaks_(std::move(peaks)), field_strength_(field_strength_tesla) {
    normalize();
  }

  static FatSpectrum from_ppm(const std::vector<PpmPeak>& ppm_peaks, double field_strength_tesla) {
    std::vector<SpectralPeak> peaks;
    peaks.reserve(ppm_peaks.size());
    for (const auto& p : ppm_peaks) peaks.push_back({ppm_to_hz(p.ppm, field_strength_tesla), p.amplitude});
    FatSpectrum s(std::move(peaks), field_strength_tesla);
    s.source_ppm_ = ppm_peaks;
    return s;
  }

  /// Six-peak liver fat model, offsets relative to water.
  static FatSpectrum default_liver(double field_strength_tesla = 1.5) {
    return from_ppm({{-3.80, 0.087}, {-3.40, 0.693}, {-2.60, 0.128}, {-1.94, 0.004}, {-0.39, 0.039}, {0.60, 0.048}},
                    field_strength_tesla);
  }

  const std::vector<SpectralPeak>& peaks() const noexcept { return peaks_; }
  std::size_t size() const noexcept { return peaks_.size(); }
  double field_strength() const noexcept { return field_strength_; }
  const std::optional<std::vector<PpmPeak>>& source_ppm() const noexcept { return source_ppm_; }

 private:
  void normalize() {
    if (peaks_.empty()) throw DataError("fat spectrum needs at least one peak");
    if (!(field_strength_ > 0.0)) throw DataError("fat spectrum field strength must be positive");
    double total = 0.0;
    for (const auto& p : peaks_) {
      if (!(p.amplitude > 0.0) || !std::isfinite(p.amplitude) || !std::isfinite(p.frequency_hz)) {
        throw DataError("fat spectrum amplitudes must be finite and strictly positive");
      }
      total += p.amplitude;
    }
    for (auto& p : peaks_) p.amplitude /= total;
  }

  std::vector<SpectralPeak> peaks_;
  double field_strength_ = 1.5;
  std::optional<std::vector<PpmPeak>> source_ppm_;
};

/// Sum over peaks of amplitude * exp(i 2 pi f t).
inline Complex fat_phasor(const FatSpectrum& spectrum, double t) {
  Complex acc{0.0, 0.0};
  for (const auto& p : spectrum.peaks()) {
    const double phase = kTwoPi * p.frequency_hz * t;
    acc += p.amplitude * Complex(std::cos(phase), std::sin(phase));
  }
  return acc;
}

class EchoProtocol {
 public:
  EchoProtocol(std::vector<double> echo_times_s, double field_strength_tesla)
      : echo_times_(std::move(echo_times_s)), field_strength_(field_strength_tesla) {
    validate();
  }

  static EchoProtocol uniform(double te1_s, double delta_te_s, std::size_t count, double field_strength_tesla) {
    if (count < 1) throw DataError("echo count must be >= 1");
    if (!(delta_te_s > 0.0)) throw DataError("echo spacing must be positive");
    std::vector<double> tes(count);
    for (std::size_t n = 0; n < count; ++n) tes[n] = te1_s + static_cast<double>(n) * delta_te_s;
    EchoProtocol p(std::move(tes), field_strength_tesla);
    p.te1_ = te1_s;
    p.delta_te_ = delta_te_s;
    return p;
  }

  /// Keeps the first `count` echoes, as done for echo-count augmentation.
  EchoProtocol truncated(std::size_t count) const {
    if (count < 1 || count > echo_times_.size()) throw DataError("cannot truncate protocol to " + std::to_string(count));
    EchoProtocol p(std::vector<double>(echo_times_.begin(), echo_times_.begin() + static_cast<long>(count)),
                   field_strength_);
    p.te1_ = te1_;
    p.delta_te_ = delta_te_;
    return p;
  }

  const std::vector<double>& echo_times() const noexcept { return echo_times_; }
  std::size_t echo_count() const noexcept { return echo_times_.size(); }
  double field_strength() const noexcept { return field_strength_; }
  std::optional<double> te1() const noexcept { return te1_; }

  /// Uniform spacing if declared, otherwise the smallest gap between echoes.
  double delta_te() const {
    if (delta_te_) return *delta_te_;
    if (echo_times_.size() < 2) return echo_times_.front();
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t n = 1; n < echo_times_.size(); ++n) gap = std::min(gap, echo_times_[n] - echo_times_[n - 1]);
    return gap;
  }

  friend bool operator==(const EchoProtocol& a, const EchoProtocol& b) {
    return a.echo_times_ == b.echo_times_ && a.field_strength_ == b.field_strength_;
  }

 private:
  void validate() const {
    if (echo_times_.empty()) throw DataError("protocol needs at least one echo");
    if (!(field_strength_ > 0.0)) throw DataError("protocol field strength must be positive");
    for (std::size_t n = 0; n < echo_times_.size(); ++n) {
      if (!(echo_times_[n] > 0.0) || !std::isfinite(echo_times_[n])) throw DataError("echo times must be positive");
      if (n > 0 && !(echo_times_[n] > echo_times_[n - 1])) throw DataError("echo times must be strictly increasing");
    }
  }

  std::vector<double> echo_times_;
  double field_strength_ = 1.5;
  std::optional<double> te1_;
  std::optional<double> delta_te_;
};

/// Shared-phase quantitative maps: real densities plus a common phase in cycles.
struct QMaps {
  RealMap rho_w;
  RealMap rho_f;
  RealMap r2star;  // 1/s
  RealMap field;   // Hz
  RealMap phi0;    // cycles
  double pixel_size_mm = 1.0;

  QMaps() = default;
  QMaps(std::size_t height, std::size_t width, double pixel_size = 1.0)
      : rho_w(height, width), rho_f(height, width), r2star(height, width), field(height, width), phi0(height, width),
        pixel_size_mm(pixel_size) {}

  std::size_t height() const noexcept { return rho_w.height(); }
  std::size_t width() const noexcept { return rho_w.width(); }

  /// Throws DataError if the shape or physical-domain invariants are broken.
  void validate() const {
    require_same_shape(rho_w, rho_f, "rho_f");
    require_same_shape(rho_w, r2star, "r2star");
    require_same_shape(rho_w, field, "field");
    require_same_shape(rho_w, phi0, "phi0");
    for (std::size_t i = 0; i < rho_w.size(); ++i) {
      if (!(rho_w[i] >= 0.0) || !(rho_f[i] >= 0.0) || !(r2star[i] >= 0.0) || !std::isfinite(rho_w[i]) ||
          !std::isfinite(rho_f[i]) || !std::isfinite(r2star[i]) || !std::isfinite(field[i]) ||
          !std::isfinite(phi0[i])) {
        throw DataError("q-map invariant violated at voxel " + std::to_string(i));
      }
    }
  }

  bool is_valid() const {
    try {
      validate();
      return true;
    } catch (const DataError&) {
      return false;
    }
  }

  friend bool operator==(const QMaps&, const QMaps&) = default;
};

/// Independent-phase maps: complex water and fat densities.
struct QMapsComplex {
  ComplexMap rho_w;
  ComplexMap rho_f;
  RealMap r2star;
  RealMap field;

  QMapsComplex() = default;
  QMapsComplex(std::size_t height, std::size_t width)
      : rho_w(height, width), rho_f(height, width), r2star(height, width), field(height, width) {}

  std::size_t height() const noexcept { return rho_w.height(); }
  std::size_t width() const noexcept { return rho_w.width(); }

  void validate() const {
    require_same_shape(rho_w, rho_f, "rho_f");
    require_same_shape(rho_w, r2star, "r2star");
    require_same_shape(rho_w, field, "field");
    for (double r : r2star) {
      if (!(r >= 0.0)) throw DataError("r2star must be non-negative");
    }
  }
};

struct ComplexImageSeries {
  std::vector<ComplexMap> echoes;
  EchoProtocol protocol;

  ComplexImageSeries(std::vector<ComplexMap> e, EchoProtocol p) : echoes(std::move(e)), protocol(std::move(p)) {
    validate();
  }

  std::size_t echo_count() const noexcept { return echoes.size(); }
  std::size_t height() const noexcept { return echoes.empty() ? 0 : echoes.front().height(); }
  std::size_t width() const noexcept { return echoes.empty() ? 0 : echoes.front().width(); }

  /// Echo samples of one voxel (flat index).
  std::vector<Complex> voxel(std::size_t index) const {
    std::vector<Complex> s(echoes.size());
    for (std::size_t n = 0; n < echoes.size(); ++n) s[n] = echoes[n][index];
    return s;
  }

  void validate() const {
    if (echoes.size() != protocol.echo_count()) {
      throw DataError("series has " + std::to_string(echoes.size()) + " echoes, protocol declares " +
                      std::to_string(protocol.echo_count()));
    }
    for (const auto& e : echoes) require_same_shape(echoes.front(), e, "echo image");
  }
};

namespace detail {

inline void check_spectrum_matches(const EchoProtocol& protocol, const FatSpectrum& spectrum) {
  if (std::abs(protocol.field_strength() - spectrum.field_strength()) > 1e-9) {
    throw DataError("spectrum field strength " + std::to_string(spectrum.field_strength()) +
                    " T does not match protocol " + std::to_string(protocol.field_strength()) + " T");
  }
}

inline std::vector<Complex> fat_phasors(const EchoProtocol& protocol, const FatSpectrum& spectrum) {
  std::vector<Complex> c;
  c.reserve(protocol.echo_count());
  for (double t : protocol.echo_times()) c.push_back(fat_phasor(spectrum, t));
  return c;
}

inline Complex unit_phasor(double cycles) { return {std::cos(kTwoPi * cycles), std::sin(kTwoPi * cycles)}; }

}  // namespace detail

inline ComplexImageSeries forward_signal_shared_phase(const QMaps& q, const EchoProtocol& protocol,
                                                      const FatSpectrum& spectrum) {
  q.validate();
  detail::check_spectrum_matches(protocol, spectrum);
  const auto fat = detail::fat_phasors(protocol, spectrum);
  const auto& tes = protocol.echo_times();
  std::vector<ComplexMap> echoes(tes.size(), ComplexMap(q.height(), q.width()));
  for (std::size_t i = 0; i < q.rho_w.size(); ++i) {
    const Complex phase0 = detail::unit_phasor(q.phi0[i]);
    for (std::size_t n = 0; n < tes.size(); ++n) {
      const double t = tes[n];
      const Complex mod = std::exp(-q.r2star[i] * t) * detail::unit_phasor(q.field[i] * t) * phase0;
      echoes[n][i] = mod * (q.rho_w[i] + q.rho_f[i] * fat[n]);
    }
  }
  return ComplexImageSeries(std::move(echoes), protocol);
}

inline ComplexImageSeries forward_signal_complex(const QMapsComplex& q, const EchoProtocol& protocol,
                                                 const FatSpectrum& spectrum) {
  q.validate();
  detail::check_spectrum_matches(protocol, spectrum);
  const auto fat = detail::fat_phasors(protocol, spectrum);
  const auto& tes = protocol.echo_times();
  std::vector<ComplexMap> echoes(tes.size(), ComplexMap(q.height(), q.width()));
  for (std::size_t i = 0; i < q.rho_w.size(); ++i) {
    for (std::size_t n = 0; n < tes.size(); ++n) {
      const double t = tes[n];
      const Complex mod = std::exp(-q.r2star[i] * t) * detail::unit_phasor(q.field[i] * t);
      echoes[n][i] = mod * (q.rho_w[i] + q.rho_f[i] * fat[n]);
    }
  }
  return ComplexImageSeries(std::move(echoes), protocol);
}

/// Relative floor applied to the PDFF denominator (fraction of the max total density).
inline constexpr double kPdffDenominatorFloor = 1e-6;

namespace detail {

template <typename W, typename F, typename Mag>
RealMap pdff_from(const Image<W>& rho_w, const Image<F>& rho_f, Mag mag) {
  require_same_shape(rho_w, rho_f, "rho_f");
  RealMap out(rho_w.height(), rho_w.width());
  double max_total = 0.0;
  for (std::size_t i = 0; i < rho_w.size(); ++i) max_total = std::max(max_total, mag(rho_w[i]) + mag(rho_f[i]));
  const double floor = kPdffDenominatorFloor * max_total;
  for (std::size_t i = 0; i < rho_w.size(); ++i) {
    const double fat = mag(rho_f[i]);
    const double total = mag(rho_w[i]) + fat;
    out[i] = (total > floor && total > 0.0) ? std::clamp(fat / total, 0.0, 1.0) : 0.0;
  }
  return out;
}

}  // namespace detail

inline RealMap pdff_map(const QMaps& q) {
  return detail::pdff_from(q.rho_w, q.rho_f, [](double v) { return std::abs(v); });
}

inline RealMap pdff_map(const QMapsComplex& q) {
  return detail::pdff_from(q.rho_w, q.rho_f, [](const Complex& v) { return std::abs(v); });
}

/// Foreground used by the noise model when none is supplied: non-zero first echo.
inline Mask nonzero_first_echo(const ComplexImageSeries& series) {
  Mask m(series.height(), series.width());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = series.echoes.front()[i] != Complex{} ? 1 : 0;
  return m;
}

/// Noise standard deviation per real channel for a given SNR.
inline double noise_sigma(const ComplexImageSeries& series, double snr, const Mask& foreground) {
  if (!(snr > 0.0)) throw DataError("snr must be positive");
  require_same_shape(series.echoes.front(), foreground, "foreground mask");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < foreground.size(); ++i) {
    if (foreground[i]) {
      sum += std::abs(series.echoes.front()[i]);
      ++count;
    }
  }
  if (count == 0) throw DataError("empty foreground for noise scaling");
  return (sum / static_cast<double>(count)) / snr;
}

/// Adds i.i.d. Gaussian noise to real and imaginary channels. An infinite SNR returns the series unchanged.
inline ComplexImageSeries add_complex_noise(const ComplexImageSeries& series, double snr, std::uint64_t seed,
                                            const std::optional<Mask>& foreground = std::nullopt) {
  if (std::isinf(snr) && snr > 0.0) return series;
  const Mask fg = foreground ? *foreground : nonzero_first_echo(series);
  const double sigma = noise_sigma(series, snr, fg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  ComplexImageSeries out = series;
  for (auto& echo : out.echoes) {
    for (auto& v : echo) {
      const double re = normal(rng);
      const double im = normal(rng);
      v += Complex(re, im);
    }
  }
  return out;
}

}  // namespace csesim
