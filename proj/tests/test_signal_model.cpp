#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "csesim/signal_model.hpp"

using namespace csesim;

namespace {

// Term-by-term evaluation in long double, independent of the library's summation.
std::complex<long double> oracle_fat(const std::vector<std::pair<long double, long double>>& ppm_amp, long double field,
                                     long double t) {
  long double total = 0;
  for (auto [ppm, a] : ppm_amp) total += a;
  std::complex<long double> acc{0, 0};
  const long double two_pi = 6.283185307179586476925286766559L;
  for (auto [ppm, a] : ppm_amp) {
    const long double f = ppm * 42.5774L * field;
    acc += (a / total) * std::complex<long double>(std::cos(two_pi * f * t), std::sin(two_pi * f * t));
  }
  return acc;
}

const std::vector<std::pair<long double, long double>> kLiver = {
    {-3.80L, 0.087L}, {-3.40L, 0.693L}, {-2.60L, 0.128L}, {-1.94L, 0.004L}, {-0.39L, 0.039L}, {0.60L, 0.048L}};

std::complex<long double> oracle_voxel(long double rw, long double rf, long double r2, long double phi, long double phi0,
                                       long double t) {
  const long double two_pi = 6.283185307179586476925286766559L;
  const auto phase = [&](long double cycles) { return std::complex<long double>(std::cos(two_pi * cycles), std::sin(two_pi * cycles)); };
  return std::exp(-r2 * t) * phase(phi * t) * phase(phi0) * (rw + rf * oracle_fat(kLiver, 1.5L, t));
}

QMaps single_voxel(double rw, double rf, double r2, double phi, double phi0) {
  QMaps q(1, 1);
  q.rho_w[0] = rw;
  q.rho_f[0] = rf;
  q.r2star[0] = r2;
  q.field[0] = phi;
  q.phi0[0] = phi0;
  return q;
}

EchoProtocol paper_protocol() { return EchoProtocol::uniform(1.4e-3, 2.2e-3, 6, 1.5); }

}  // namespace

TEST(PpmToHz, KnownConversions) {
  EXPECT_EQ(ppm_to_hz(0.0, 1.5), 0.0);
  EXPECT_NEAR(ppm_to_hz(-3.40, 1.5), -3.40 * 42.5774 * 1.5, 1e-12);
  EXPECT_NEAR(ppm_to_hz(-3.40, 1.5), -217.1, 0.05);
  EXPECT_NEAR(ppm_to_hz(1.0, 3.0), 127.73, 0.01);
  EXPECT_THROW(ppm_to_hz(1.0, 0.0), DataError);
}

TEST(FatSpectrum, NormalizesAmplitudes) {
  const FatSpectrum s = FatSpectrum::default_liver();
  ASSERT_EQ(s.size(), 6u);
  double total = 0.0;
  for (const auto& p : s.peaks()) {
    EXPECT_GT(p.amplitude, 0.0);
    total += p.amplitude;
  }
  EXPECT_NEAR(total, 1.0, 1e-9);
  const FatSpectrum unnormalized({{-200.0, 2.0}, {50.0, 6.0}}, 1.5);
  EXPECT_NEAR(unnormalized.peaks()[0].amplitude, 0.25, 1e-15);
  EXPECT_THROW(FatSpectrum({}, 1.5), DataError);
  EXPECT_THROW(FatSpectrum({{-200.0, 0.0}}, 1.5), DataError);
}

TEST(FatPhasor, UnitAtZero) { EXPECT_NEAR(std::abs(fat_phasor(FatSpectrum::default_liver(), 0.0) - Complex(1.0, 0.0)), 0.0, 1e-15); }

TEST(FatPhasor, HalfPeriodSinglePeak) {
  const FatSpectrum s({{-217.1, 1.0}}, 1.5);
  const Complex v = fat_phasor(s, 1.0 / (2.0 * 217.1));
  EXPECT_NEAR(v.real(), -1.0, 1e-12);
  EXPECT_NEAR(v.imag(), 0.0, 1e-12);
}

TEST(FatPhasor, MatchesExtendedPrecisionOracle) {
  const FatSpectrum s = FatSpectrum::default_liver(1.5);
  for (double t : {1.4e-3, 3.6e-3, 5.8e-3, 12.4e-3}) {
    const auto expected = oracle_fat(kLiver, 1.5L, static_cast<long double>(t));
    const Complex got = fat_phasor(s, t);
    EXPECT_NEAR(got.real(), static_cast<double>(expected.real()), 1e-13);
    EXPECT_NEAR(got.imag(), static_cast<double>(expected.imag()), 1e-13);
  }
}

TEST(EchoProtocol, Validation) {
  const EchoProtocol p = paper_protocol();
  EXPECT_EQ(p.echo_count(), 6u);
  EXPECT_NEAR(p.delta_te(), 2.2e-3, 1e-15);
  EXPECT_NEAR(p.echo_times().back(), 1.4e-3 + 5 * 2.2e-3, 1e-15);
  EXPECT_THROW(EchoProtocol({1e-3, 1e-3}, 1.5), DataError);
  EXPECT_THROW(EchoProtocol({0.0, 1e-3}, 1.5), DataError);
  EXPECT_THROW(EchoProtocol({}, 1.5), DataError);
  EXPECT_NO_THROW(EchoProtocol({1e-3}, 1.5));
}

TEST(ForwardShared, PureWaterIsConstant) {
  const auto s = forward_signal_shared_phase(single_voxel(1, 0, 0, 0, 0), paper_protocol(), FatSpectrum::default_liver());
  for (const auto& e : s.echoes) EXPECT_NEAR(std::abs(e[0] - Complex(1, 0)), 0.0, 1e-15);
}

TEST(ForwardShared, PureFatAtZeroTime) {
  const EchoProtocol p({1e-14, 1e-3, 2e-3}, 1.5);
  const auto s = forward_signal_shared_phase(single_voxel(0, 1, 0, 0, 0), p, FatSpectrum::default_liver());
  EXPECT_NEAR(std::abs(s.echoes[0][0] - Complex(1, 0)), 0.0, 1e-9);
}

TEST(ForwardShared, MatchesScalarOracle) {
  const EchoProtocol p = paper_protocol();
  const auto s = forward_signal_shared_phase(single_voxel(0.6, 0.4, 50, 40, 0.1), p, FatSpectrum::default_liver());
  for (std::size_t n = 0; n < 6; ++n) {
    const auto expected = oracle_voxel(0.6L, 0.4L, 50.0L, 40.0L, 0.1L, static_cast<long double>(p.echo_times()[n]));
    EXPECT_NEAR(s.echoes[n][0].real(), static_cast<double>(expected.real()), 1e-13);
    EXPECT_NEAR(s.echoes[n][0].imag(), static_cast<double>(expected.imag()), 1e-13);
  }
}

TEST(ForwardComplex, ImaginaryWaterAndRandomVoxel) {
  const EchoProtocol p = paper_protocol();
  const FatSpectrum spec = FatSpectrum::default_liver();
  QMapsComplex q(1, 1);
  q.rho_w[0] = Complex(0, 1);
  auto s = forward_signal_complex(q, p, spec);
  for (const auto& e : s.echoes) EXPECT_NEAR(std::abs(e[0] - Complex(0, 1)), 0.0, 1e-15);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  q.rho_w[0] = {u(rng), u(rng)};
  q.rho_f[0] = {u(rng), u(rng)};
  q.r2star[0] = 60 * (u(rng) + 1);
  q.field[0] = 100 * u(rng);
  s = forward_signal_complex(q, p, spec);
  const long double two_pi = 6.283185307179586476925286766559L;
  for (std::size_t n = 0; n < 6; ++n) {
    const long double t = p.echo_times()[n];
    const std::complex<long double> rw(q.rho_w[0].real(), q.rho_w[0].imag()), rf(q.rho_f[0].real(), q.rho_f[0].imag());
    const auto expected = std::exp(-static_cast<long double>(q.r2star[0]) * t) *
                          std::complex<long double>(std::cos(two_pi * q.field[0] * t), std::sin(two_pi * q.field[0] * t)) *
                          (rw + rf * oracle_fat(kLiver, 1.5L, t));
    EXPECT_NEAR(s.echoes[n][0].real(), static_cast<double>(expected.real()), 1e-13);
    EXPECT_NEAR(s.echoes[n][0].imag(), static_cast<double>(expected.imag()), 1e-13);
  }
}

TEST(ForwardModel, SharedPhaseEquivalence) {
  const EchoProtocol p = paper_protocol();
  const FatSpectrum spec = FatSpectrum::default_liver();
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  QMaps q(4, 5);
  for (std::size_t i = 0; i < q.rho_w.size(); ++i) {
    q.rho_w[i] = u(rng);
    q.rho_f[i] = u(rng);
    q.r2star[i] = 100 * u(rng);
    q.field[i] = 200 * u(rng) - 100;
    q.phi0[i] = u(rng) - 0.5;
  }
  QMapsComplex c(4, 5);
  for (std::size_t i = 0; i < c.rho_w.size(); ++i) {
    const Complex ph = std::polar(1.0, kTwoPi * q.phi0[i]);
    c.rho_w[i] = q.rho_w[i] * ph;
    c.rho_f[i] = q.rho_f[i] * ph;
    c.r2star[i] = q.r2star[i];
    c.field[i] = q.field[i];
  }
  const auto a = forward_signal_shared_phase(q, p, spec), b = forward_signal_complex(c, p, spec);
  for (std::size_t n = 0; n < 6; ++n) {
    for (std::size_t i = 0; i < q.rho_w.size(); ++i) EXPECT_LE(std::abs(a.echoes[n][i] - b.echoes[n][i]), 1e-12);
  }
}

TEST(ForwardModel, MagnitudeInvariantUnderFieldAndPhase) {
  const EchoProtocol p = paper_protocol();
  const FatSpectrum spec = FatSpectrum::default_liver();
  const auto base = forward_signal_shared_phase(single_voxel(0.7, 0.3, 40, 0, 0), p, spec);
  for (auto [phi, phi0] : {std::pair{55.0, 0.2}, std::pair{-130.0, -0.45}}) {
    const auto s = forward_signal_shared_phase(single_voxel(0.7, 0.3, 40, phi, phi0), p, spec);
    for (std::size_t n = 0; n < 6; ++n) EXPECT_NEAR(std::abs(s.echoes[n][0]), std::abs(base.echoes[n][0]), 1e-14);
  }
}

TEST(ForwardModel, ExactR2starDecay) {
  const EchoProtocol p = paper_protocol();
  const FatSpectrum spec = FatSpectrum::default_liver();
  const auto a = forward_signal_shared_phase(single_voxel(0.7, 0.3, 0, 25, 0.1), p, spec);
  const auto b = forward_signal_shared_phase(single_voxel(0.7, 0.3, 73, 25, 0.1), p, spec);
  for (std::size_t n = 0; n < 6; ++n) {
    const double ratio = std::abs(b.echoes[n][0]) / std::abs(a.echoes[n][0]);
    EXPECT_NEAR(ratio, std::exp(-73.0 * p.echo_times()[n]), 1e-14);
  }
}

TEST(ForwardModel, RejectsMismatchedField) {
  EXPECT_THROW(forward_signal_shared_phase(single_voxel(1, 0, 0, 0, 0), paper_protocol(), FatSpectrum::default_liver(3.0)), DataError);
}

TEST(PdffMap, Examples) {
  QMaps q(1, 3);
  q.rho_w[0] = 0.4, q.rho_f[0] = 0.4;
  q.rho_w[1] = 0.7, q.rho_f[1] = 0.0;
  q.rho_w[2] = 0.0, q.rho_f[2] = 0.0;
  const RealMap f = pdff_map(q);
  EXPECT_DOUBLE_EQ(f[0], 0.5);
  EXPECT_DOUBLE_EQ(f[1], 0.0);
  EXPECT_DOUBLE_EQ(f[2], 0.0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  QMaps r(8, 8);
  for (std::size_t i = 0; i < 64; ++i) r.rho_w[i] = u(rng), r.rho_f[i] = u(rng);
  for (double v : pdff_map(r)) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Noise, InfiniteSnrIsIdentityAndSeedDeterministic) {
  QMaps q(16, 16);
  for (auto& v : q.rho_w) v = 1.0;
  const auto s = forward_signal_shared_phase(q, paper_protocol(), FatSpectrum::default_liver());
  const auto same = add_complex_noise(s, std::numeric_limits<double>::infinity(), 3);
  for (std::size_t n = 0; n < 6; ++n) EXPECT_EQ(same.echoes[n], s.echoes[n]);
  const auto a = add_complex_noise(s, 50, 3), b = add_complex_noise(s, 50, 3), c = add_complex_noise(s, 50, 4);
  for (std::size_t n = 0; n < 6; ++n) EXPECT_EQ(a.echoes[n], b.echoes[n]);
  EXPECT_NE(a.echoes[0], c.echoes[0]);
}

TEST(Noise, SigmaMatchesSnr) {
  QMaps q(128, 128);
  for (auto& v : q.rho_w) v = 1.0;
  const EchoProtocol p({1.4e-3}, 1.5);
  const auto s = forward_signal_shared_phase(q, p, FatSpectrum::default_liver());
  const auto noisy = add_complex_noise(s, 100, 17);
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < s.echoes[0].size(); ++i) {
    const Complex d = noisy.echoes[0][i] - s.echoes[0][i];
    sum_sq += d.real() * d.real() + d.imag() * d.imag();
  }
  const double sigma = std::sqrt(sum_sq / (2.0 * static_cast<double>(s.echoes[0].size())));
  EXPECT_NEAR(sigma, 0.01, 0.05 * 0.01);
}
