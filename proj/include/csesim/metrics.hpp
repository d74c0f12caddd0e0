#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "csesim/core.hpp"
#include "csesim/phantom.hpp"

namespace csesim {

// ---------------------------------------------------------------------------
// Maximum mean discrepancy

/// Median pairwise Euclidean distance over the pooled rows of A and B.
inline double median_pairwise_distance(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  Eigen::MatrixXd pooled(A.rows() + B.rows(), A.cols());
  pooled << A, B;
  const Eigen::Index n = pooled.rows();
  const Eigen::VectorXd sq = pooled.rowwise().squaredNorm();
  const Eigen::MatrixXd gram = pooled * pooled.transpose();
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) d.push_back(std::sqrt(std::max(0.0, sq(i) + sq(j) - 2.0 * gram(i, j))));
  }
  if (d.empty()) return 1.0;
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<long>(mid), d.end());
  double m = d[mid];
  if (d.size() % 2 == 0) m = 0.5 * (m + *std::max_element(d.begin(), d.begin() + static_cast<long>(mid)));
  return m > 0.0 ? m : 1.0;
}

namespace detail {

inline double mean_kernel(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double bandwidth) {
  const Eigen::VectorXd sx = X.rowwise().squaredNorm(), sy = Y.rowwise().squaredNorm();
  const Eigen::MatrixXd cross = X * Y.transpose();
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  double total = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = 0; j < Y.rows(); ++j) total += std::exp(-std::max(0.0, sx(i) + sy(j) - 2.0 * cross(i, j)) * inv);
  }
  return total / static_cast<double>(X.rows() * Y.rows());
}

}  // namespace detail

/// Biased (V-statistic) squared MMD with a Gaussian kernel. Rows are samples.
/// Without a fixed bandwidth the median pooled pairwise distance is used.
inline double mmd_gaussian(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, std::optional<double> bandwidth = std::nullopt) {
  if (A.rows() < 1 || B.rows() < 1) throw DataError("mmd needs non-empty sets");
  if (A.cols() != B.cols()) throw DataError("mmd dimension mismatch");
  const double h = bandwidth.value_or(median_pairwise_distance(A, B));
  if (!(h > 0.0)) throw DataError("mmd bandwidth must be positive");
  const double kaa = detail::mean_kernel(A, A, h);
  const double kbb = detail::mean_kernel(B, B, h);
  const double kab = detail::mean_kernel(A, B, h);
  return std::max(0.0, kaa + kbb - 2.0 * kab);
}

/// Stacks images as rows after scaling each to unit mean.
inline Eigen::MatrixXd unit_mean_features(const std::vector<RealMap>& images) {
  if (images.empty()) return {};
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(images.front().size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_shape(images.front(), images[i], "feature image");
    double mean = 0.0;
    for (double v : images[i]) mean += v;
    mean /= static_cast<double>(images[i].size());
    const double s = mean != 0.0 ? 1.0 / mean : 1.0;
    for (std::size_t j = 0; j < images[i].size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = images[i][j] * s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// SSIM family

struct SsimParams {
  double data_range = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;
  std::size_t window = 11;
  double sigma = 1.5;
};

namespace detail {

inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double c = 0.5 * static_cast<double>(size - 1);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - c;
    k[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

/// Separable 'valid' filtering.
inline RealMap filter_valid(const RealMap& img, const std::vector<double>& k) {
  const std::size_t n = k.size();
  const std::size_t H = img.height(), W = img.width();
  RealMap rows(H, W - n + 1);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c + n <= W; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * img(r, c + i);
      rows(r, c) = acc;
    }
  }
  RealMap out(H - n + 1, W - n + 1);
  for (std::size_t r = 0; r + n <= H; ++r) {
    for (std::size_t c = 0; c < out.width(); ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * rows(r + i, c);
      out(r, c) = acc;
    }
  }
  return out;
}

struct SsimTerms {
  double ssim = 0.0;         // mean of luminance * contrast-structure
  double contrast = 0.0;     // mean contrast-structure term
  double luminance = 0.0;    // mean luminance term
};

inline SsimTerms ssim_terms(const RealMap& a, const RealMap& b, const SsimParams& p) {
  require_same_shape(a, b, "ssim images");
  if (!(p.data_range > 0.0)) throw DataError("ssim data range must be positive");
  if (a.height() < p.window || a.width() < p.window) throw DataError("image smaller than ssim window");
  const auto k = gaussian_kernel(p.window, p.sigma);
  RealMap aa(a.height(), a.width()), bb(a.height(), a.width()), ab(a.height(), a.width());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const RealMap mu_a = filter_valid(a, k), mu_b = filter_valid(b, k);
  const RealMap e_aa = filter_valid(aa, k), e_bb = filter_valid(bb, k), e_ab = filter_valid(ab, k);
  const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
  SsimTerms t;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    const double lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    const double cs = (2.0 * cov + c2) / (va + vb + c2);
    t.ssim += lum * cs;
    t.contrast += cs;
    t.luminance += lum;
  }
  const double n = static_cast<double>(mu_a.size());
  t.ssim /= n;
  t.contrast /= n;
  t.luminance /= n;
  return t;
}

inline RealMap downsample2(const RealMap& img) {
  RealMap out(img.height() / 2, img.width() / 2);
  for (std::size_t r = 0; r < out.height(); ++r) {
    for (std::size_t c = 0; c < out.width(); ++c) {
      out(r, c) = 0.25 * (img(2 * r, 2 * c) + img(2 * r + 1, 2 * c) + img(2 * r, 2 * c + 1) + img(2 * r + 1, 2 * c + 1));
    }
  }
  return out;
}

}  // namespace detail

/// Mean local SSIM with a Gaussian window.
inline double ssim(const RealMap& a, const RealMap& b, const SsimParams& params = {}) {
  return detail::ssim_terms(a, b, params).ssim;
}

inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Five-scale MS-SSIM; contrast-structure terms are clamped at zero before exponentiation.
inline double ms_ssim(const RealMap& a, const RealMap& b, const SsimParams& params = {}) {
  require_same_shape(a, b, "ms-ssim images");
  const std::size_t min_side = 16 * params.window;
  if (a.height() < min_side || a.width() < min_side) {
    throw DataError("image too small for 5-scale ms-ssim (need >= " + std::to_string(min_side) + " px per side)");
  }
  RealMap x = a, y = b;
  double result = 1.0;
  for (std::size_t s = 0; s < kMsSsimWeights.size(); ++s) {
    const auto t = detail::ssim_terms(x, y, params);
    if (s + 1 < kMsSsimWeights.size()) {
      result *= std::pow(std::max(t.contrast, 0.0), kMsSsimWeights[s]);
      x = detail::downsample2(x);
      y = detail::downsample2(y);
    } else {
      result *= std::pow(std::max(t.ssim, 0.0), kMsSsimWeights[s]);
    }
  }
  return result;
}

struct DiversityStats {
  double mean_ssim = 0.0;
  std::optional<double> mean_ms_ssim;  // absent when images are too small for five scales
  std::size_t pairs = 0;
};

/// Mean similarity over random distinct pairs; lower values mean a more diverse sample set.
inline DiversityStats pairwise_diversity(const std::vector<RealMap>& samples, std::size_t pairs, std::uint64_t seed,
                                         const SsimParams& params = {}) {
  if (samples.size() < 2) throw DataError("pairwise diversity needs at least two samples");
  if (pairs < 1) throw DataError("pairwise diversity needs at least one pair");
  const bool multiscale = samples.front().height() >= 16 * params.window && samples.front().width() >= 16 * params.window;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  DiversityStats out;
  double ms_total = 0.0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t i = pick(rng);
    std::size_t j = pick(rng);
    while (j == i) j = pick(rng);
    out.mean_ssim += ssim(samples[i], samples[j], params);
    if (multiscale) ms_total += ms_ssim(samples[i], samples[j], params);
  }
  out.pairs = pairs;
  out.mean_ssim /= static_cast<double>(pairs);
  if (multiscale) out.mean_ms_ssim = ms_total / static_cast<double>(pairs);
  return out;
}

// ---------------------------------------------------------------------------
// Quantification accuracy

/// Mean absolute PDFF error over the mask, in percentage points.
inline double pdff_mae(const RealMap& est, const RealMap& ref, const Mask& mask) {
  require_same_shape(est, ref, "pdff maps");
  require_same_shape(est, mask, "mask");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (!mask[i]) continue;
    total += std::abs(est[i] - ref[i]);
    ++n;
  }
  if (n == 0) throw DataError("empty mask");
  return 100.0 * total / static_cast<double>(n);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw DataError("median of empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<long>(mid)));
  return m;
}

inline std::vector<double> masked_values(const RealMap& img, const Mask& mask) {
  require_same_shape(img, mask, "roi mask");
  std::vector<double> v;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (mask[i]) v.push_back(img[i]);
  }
  return v;
}

/// Median of the estimate minus median of the reference inside one ROI, in percentage points.
inline double roi_bias(const RealMap& est, const RealMap& ref, const Mask& roi) {
  const auto e = masked_values(est, roi), r = masked_values(ref, roi);
  if (e.empty()) throw DataError("empty roi");
  return 100.0 * (median(e) - median(r));
}

struct RoiBias {
  double rhl = 0.0;
  double lhl = 0.0;
};

/// Same masks applied to both maps.
inline RoiBias roi_bias(const RealMap& est, const RealMap& ref, const RoiSet& rois) {
  return {roi_bias(est, ref, rois.rhl.mask), roi_bias(est, ref, rois.lhl.mask)};
}

struct BlandAltmanStats {
  double bias = 0.0;
  double sd = 0.0;
  double loa_low = 0.0;
  double loa_high = 0.0;
  std::size_t n = 0;
};

inline constexpr double kZ95 = 1.96;

/// Differences are estimate minus reference.
inline BlandAltmanStats bland_altman(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.size() < 2) throw DataError("bland-altman needs at least two pairs");
  BlandAltmanStats s;
  s.n = pairs.size();
  for (const auto& [est, ref] : pairs) s.bias += est - ref;
  s.bias /= static_cast<double>(s.n);
  double ss = 0.0;
  for (const auto& [est, ref] : pairs) ss += (est - ref - s.bias) * (est - ref - s.bias);
  s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  s.loa_low = s.bias - kZ95 * s.sd;
  s.loa_high = s.bias + kZ95 * s.sd;
  return s;
}

/// Mean and 95% interval half-width (1.96 x sample SD) of per-item values.
struct SummaryStat {
  double mean = 0.0;
  double ci95 = 0.0;
  std::size_t n = 0;
};

inline SummaryStat summarize(const std::vector<double>& values) {
  SummaryStat s;
  s.n = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.ci95 = kZ95 * std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

/// Scatter of mean vs difference with bias and limits-of-agreement lines.
inline std::string bland_altman_svg(const std::vector<std::pair<double, double>>& pairs, const BlandAltmanStats& stats,
                                    const std::string& title) {
  constexpr double kW = 480, kH = 360, kPad = 50;
  double xmin = 1e300, xmax = -1e300, ymin = std::min(stats.loa_low, 0.0), ymax = std::max(stats.loa_high, 0.0);
  for (const auto& [e, r] : pairs) {
    const double m = 0.5 * (e + r), d = e - r;
    xmin = std::min(xmin, m);
    xmax = std::max(xmax, m);
    ymin = std::min(ymin, d);
    ymax = std::max(ymax, d);
  }
  if (!(xmax > xmin)) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  const double yspan = std::max(ymax - ymin, 1e-9);
  ymin -= 0.1 * yspan;
  ymax += 0.1 * yspan;
  auto px = [&](double x) { return kPad + (x - xmin) / (xmax - xmin) * (kW - 2 * kPad); };
  auto py = [&](double y) { return kH - kPad - (y - ymin) / (ymax - ymin) * (kH - 2 * kPad); };

  std::ostringstream svg;
  svg.setf(std::ios::fixed);
  svg.precision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  svg << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\"" << kH - kPad
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\"" << kH - kPad << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">mean PDFF (%)</text>\n";
  svg << "<text x=\"14\" y=\"" << kH / 2 << "\" transform=\"rotate(-90 14 " << kH / 2
      << ")\" text-anchor=\"middle\" font-size=\"12\">estimate - reference (%)</text>\n";
  const std::array<std::pair<double, const char*>, 3> lines = {{{stats.bias, "blue"}, {stats.loa_low, "red"}, {stats.loa_high, "red"}}};
  for (const auto& [y, colour] : lines) {
    svg << "<line x1=\"" << kPad << "\" y1=\"" << py(y) << "\" x2=\"" << kW - kPad << "\" y2=\"" << py(y) << "\" stroke=\""
        << colour << "\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (const auto& [e, r] : pairs) {
    svg << "<circle cx=\"" << px(0.5 * (e + r)) << "\" cy=\"" << py(e - r) << "\" r=\"2.5\" fill=\"black\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace csesim
