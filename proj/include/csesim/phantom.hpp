#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "csesim/core.hpp"
#include "csesim/signal_model.hpp"

namespace csesim {

enum class Tissue : std::uint8_t { Air = 0, SubcutaneousFat = 1, Muscle = 2, Liver = 3, Spleen = 4 };

inline constexpr std::array<Tissue, 4> kBodyTissues = {Tissue::SubcutaneousFat, Tissue::Muscle, Tissue::Liver,
                                                        Tissue::Spleen};

inline const char* tissue_name(Tissue t) {
  switch (t) {
    case Tissue::Air: return "air";
    case Tissue::SubcutaneousFat: return "subcutaneous_fat";
    case Tissue::Muscle: return "muscle";
    case Tissue::Liver: return "liver";
    case Tissue::Spleen: return "spleen";
  }
  return "unknown";
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double width() const noexcept { return hi - lo; }
  double clamp(double v) const noexcept { return std::clamp(v, lo, hi); }
  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
  friend bool operator==(const Range&, const Range&) = default;
};

struct TissueParameters {
  Range pdff;
  Range total_rho;
  Range r2star;  // 1/s
  friend bool operator==(const TissueParameters&, const TissueParameters&) = default;
};

struct PhantomConfig {
  std::size_t height = 256;
  std::size_t width = 256;
  double pixel_size_mm = 1.5;

  TissueParameters subcutaneous_fat{{0.80, 0.95}, {0.90, 1.00}, {20.0, 40.0}};
  TissueParameters muscle{{0.00, 0.05}, {0.60, 0.80}, {25.0, 40.0}};
  TissueParameters liver{{0.00, 0.40}, {0.80, 1.00}, {30.0, 80.0}};
  TissueParameters spleen{{0.00, 0.03}, {0.80, 0.90}, {20.0, 35.0}};

  double field_amplitude_hz = 150.0;
  double phi0_amplitude_cycles = 0.05;
  /// Intra-tissue variation as a fraction of each parameter's range width.
  double variation = 0.25;
  /// Highest spatial frequency (cycles per field of view) of the smooth random fields.
  double smooth_cycles = 2.0;
  double roi_area_cm2 = 2.0;

  const TissueParameters& tissue(Tissue t) const {
    switch (t) {
      case Tissue::SubcutaneousFat: return subcutaneous_fat;
      case Tissue::Muscle: return muscle;
      case Tissue::Liver: return liver;
      case Tissue::Spleen: return spleen;
      default: break;
    }
    throw DataError("no parameters for air");
  }

  void validate() const {
    if (height < 64 || width < 64) throw DataError("phantom grid must be at least 64x64");
    if (!(pixel_size_mm > 0.0)) throw DataError("pixel size must be positive");
    for (Tissue t : kBodyTissues) {
      const auto& p = tissue(t);
      const std::string name = tissue_name(t);
      if (p.pdff.lo < 0.0 || p.pdff.hi > 1.0 || p.pdff.lo > p.pdff.hi) throw DataError(name + ": pdff range");
      if (p.total_rho.lo < 0.0 || p.total_rho.lo > p.total_rho.hi) throw DataError(name + ": total_rho range");
      if (p.r2star.lo < 0.0 || p.r2star.lo > p.r2star.hi) throw DataError(name + ": r2star range");
    }
    if (field_amplitude_hz < 0.0 || phi0_amplitude_cycles < 0.0 || variation < 0.0 || smooth_cycles < 0.0) {
      throw DataError("phantom amplitudes must be non-negative");
    }
    if (!(roi_area_cm2 > 0.0)) throw DataError("roi area must be positive");
  }
};

struct Roi {
  std::string label;
  double center_row = 0.0;
  double center_col = 0.0;
  double radius_px = 0.0;
  Mask mask;

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

/// Right (posterior) and left hepatic lobe ROIs.
struct RoiSet {
  Roi rhl;
  Roi lhl;
};

struct PhantomSample {
  QMaps q;
  Image<std::uint8_t> labels;
  RoiSet rois;
};

namespace detail {

/// Smooth random field normalized to [-1, 1]: a sum of low-frequency plane waves.
class SmoothField {
 public:
  SmoothField(std::mt19937_64& rng, double max_cycles, int terms = 6) {
    std::uniform_real_distribution<double> freq(-max_cycles, max_cycles);
    std::uniform_real_distribution<double> phase(0.0, kTwoPi);
    std::uniform_real_distribution<double> amp(0.5, 1.0);
    double total = 0.0;
    for (int k = 0; k < terms; ++k) {
      Wave w{freq(rng), freq(rng), phase(rng), amp(rng)};
      total += w.a;
      waves_.push_back(w);
    }
    for (auto& w : waves_) w.a /= total;
  }

  /// x, y are normalized coordinates in [0, 1].
  double operator()(double x, double y) const {
    double v = 0.0;
    for (const auto& w : waves_) v += w.a * std::cos(kTwoPi * (w.u * x + w.v * y) + w.p);
    return v;
  }

 private:
  struct Wave {
    double u, v, p, a;
  };
  std::vector<Wave> waves_;
};

/// Ellipse with a low-order radial perturbation of its boundary.
struct Blob {
  double cx = 0.0, cy = 0.0;  // pixels
  double ax = 1.0, ay = 1.0;  // pixels
  double rotation = 0.0;      // radians
  std::array<double, 3> ripple_amp{};
  std::array<double, 3> ripple_phase{};

  static Blob random(std::mt19937_64& rng, double cx, double cy, double ax, double ay, double rotation,
                     double ripple) {
    std::uniform_real_distribution<double> amp(-ripple, ripple);
    std::uniform_real_distribution<double> phase(0.0, kTwoPi);
    Blob b{cx, cy, ax, ay, rotation, {}, {}};
    for (std::size_t m = 0; m < 3; ++m) {
      b.ripple_amp[m] = amp(rng);
      b.ripple_phase[m] = phase(rng);
    }
    return b;
  }

  bool contains(double row, double col, double scale = 1.0) const {
    const double dx = col - cx;
    const double dy = row - cy;
    const double c = std::cos(rotation), s = std::sin(rotation);
    const double u = (c * dx + s * dy) / ax;
    const double v = (-s * dx + c * dy) / ay;
    const double theta = std::atan2(v, u);
    double boundary = 1.0;
    for (std::size_t m = 0; m < 3; ++m) boundary += ripple_amp[m] * std::cos(static_cast<double>(m + 2) * theta + ripple_phase[m]);
    return std::sqrt(u * u + v * v) <= scale * boundary;
  }
};

inline double draw(std::mt19937_64& rng, const Range& r) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return r.lo + r.width() * u(rng);
}

struct DiskShape {
  double offset_row = 0.0;
  double offset_col = 0.0;
  double radius = 0.0;
  std::size_t count = 0;
};

/// Picks a sub-pixel offset and radius whose digital disk area is closest to the target.
inline DiskShape best_disk(double target_pixels) {
  DiskShape best;
  double best_err = std::numeric_limits<double>::infinity();
  const double r_max = std::sqrt(target_pixels / kPi) + 2.0;
  for (double orow : {0.0, 0.5}) {
    for (double ocol : {0.0, 0.5}) {
      for (double r = 0.5; r <= r_max; r += 0.01) {
        std::size_t count = 0;
        const int reach = static_cast<int>(std::ceil(r)) + 1;
        for (int dr = -reach; dr <= reach; ++dr) {
          for (int dc = -reach; dc <= reach; ++dc) {
            const double y = dr - orow, x = dc - ocol;
            if (x * x + y * y <= r * r) ++count;
          }
        }
        const double err = std::abs(static_cast<double>(count) - target_pixels);
        if (err < best_err) {
          best_err = err;
          best = {orow, ocol, r, count};
        }
      }
    }
  }
  return best;
}

inline Roi place_roi(const Image<std::uint8_t>& labels, const DiskShape& disk, double target_row, double target_col,
                     const std::string& label, const Roi* avoid) {
  constexpr double kMargin = 3.0;
  const int H = static_cast<int>(labels.height());
  const int W = static_cast<int>(labels.width());
  const double reach = disk.radius + kMargin;
  const int ireach = static_cast<int>(std::ceil(reach)) + 1;
  double best_dist = std::numeric_limits<double>::infinity();
  int best_r = -1, best_c = -1;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (labels(r, c) != static_cast<std::uint8_t>(Tissue::Liver)) continue;
      const double crow = r + disk.offset_row, ccol = c + disk.offset_col;
      const double d = std::hypot(crow - target_row, ccol - target_col);
      if (d >= best_dist) continue;
      if (avoid && std::hypot(crow - avoid->center_row, ccol - avoid->center_col) <= 2.0 * disk.radius + 1.0) continue;
      bool ok = true;
      for (int dr = -ireach; dr <= ireach && ok; ++dr) {
        for (int dc = -ireach; dc <= ireach && ok; ++dc) {
          const double y = r + dr - crow, x = c + dc - ccol;
          if (x * x + y * y > reach * reach) continue;
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= H || cc >= W || labels(rr, cc) != static_cast<std::uint8_t>(Tissue::Liver)) ok = false;
        }
      }
      if (ok) {
        best_dist = d;
        best_r = r;
        best_c = c;
      }
    }
  }
  if (best_r < 0) throw DataError("liver too small to place ROI " + label);
  Roi roi;
  roi.label = label;
  roi.center_row = best_r + disk.offset_row;
  roi.center_col = best_c + disk.offset_col;
  roi.radius_px = disk.radius;
  roi.mask = Mask(labels.height(), labels.width());
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const double y = r - roi.center_row, x = c - roi.center_col;
      if (x * x + y * y <= disk.radius * disk.radius) roi.mask(r, c) = 1;
    }
  }
  return roi;
}

}  // namespace detail

/// Procedural abdominal slice: body outline with subcutaneous fat, liver, spleen and muscle.
inline PhantomSample sample_qmaps(const PhantomConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  const double H = static_cast<double>(config.height), W = static_cast<double>(config.width);

  const double cx = W / 2.0 + 0.01 * W * jitter(rng);
  const double cy = H / 2.0 + 0.01 * H * jitter(rng);
  const auto body = detail::Blob::random(rng, cx, cy, (0.43 + 0.02 * jitter(rng)) * W, (0.33 + 0.02 * jitter(rng)) * H,
                                         0.0, 0.02);
  const double fat_thickness = 0.08 + 0.02 * jitter(rng);
  const auto liver = detail::Blob::random(rng, cx - (0.16 + 0.01 * jitter(rng)) * W, cy - 0.02 * H,
                                          (0.18 + 0.015 * jitter(rng)) * W, (0.16 + 0.015 * jitter(rng)) * H,
                                          0.25 * jitter(rng), 0.03);
  const auto spleen = detail::Blob::random(rng, cx + (0.25 + 0.01 * jitter(rng)) * W, cy + 0.03 * H,
                                           (0.07 + 0.01 * jitter(rng)) * W, (0.09 + 0.01 * jitter(rng)) * H,
                                           0.3 * jitter(rng), 0.03);

  PhantomSample out;
  out.labels = Image<std::uint8_t>(config.height, config.width);
  for (std::size_t r = 0; r < config.height; ++r) {
    for (std::size_t c = 0; c < config.width; ++c) {
      const double row = static_cast<double>(r), col = static_cast<double>(c);
      Tissue t = Tissue::Air;
      if (body.contains(row, col)) {
        t = Tissue::SubcutaneousFat;
        if (body.contains(row, col, 1.0 - fat_thickness)) {
          t = Tissue::Muscle;
          if (liver.contains(row, col)) t = Tissue::Liver;
          else if (spleen.contains(row, col)) t = Tissue::Spleen;
        }
      }
      out.labels(r, c) = static_cast<std::uint8_t>(t);
    }
  }

  QMaps& q = out.q;
  q = QMaps(config.height, config.width, config.pixel_size_mm);
  for (Tissue t : kBodyTissues) {
    const auto& p = config.tissue(t);
    const double pdff0 = detail::draw(rng, p.pdff);
    const double rho0 = detail::draw(rng, p.total_rho);
    const double r20 = detail::draw(rng, p.r2star);
    const detail::SmoothField f_pdff(rng, config.smooth_cycles);
    const detail::SmoothField f_rho(rng, config.smooth_cycles);
    const detail::SmoothField f_r2(rng, config.smooth_cycles);
    const auto code = static_cast<std::uint8_t>(t);
    for (std::size_t r = 0; r < config.height; ++r) {
      for (std::size_t c = 0; c < config.width; ++c) {
        if (out.labels(r, c) != code) continue;
        const double x = static_cast<double>(c) / W, y = static_cast<double>(r) / H;
        const double pdff = p.pdff.clamp(pdff0 + config.variation * p.pdff.width() * f_pdff(x, y));
        const double rho = p.total_rho.clamp(rho0 + config.variation * p.total_rho.width() * f_rho(x, y));
        q.rho_w(r, c) = rho * (1.0 - pdff);
        q.rho_f(r, c) = rho * pdff;
        q.r2star(r, c) = p.r2star.clamp(r20 + config.variation * p.r2star.width() * f_r2(x, y));
      }
    }
  }

  // Field: random quadratic polynomial plus a smooth random component, clipped to the amplitude.
  std::normal_distribution<double> coef(0.0, 0.4);
  std::array<double, 6> poly{};
  for (auto& a : poly) a = coef(rng);
  const detail::SmoothField f_field(rng, config.smooth_cycles);
  const detail::SmoothField f_phi0(rng, config.smooth_cycles);
  const double amp = config.field_amplitude_hz;
  for (std::size_t r = 0; r < config.height; ++r) {
    for (std::size_t c = 0; c < config.width; ++c) {
      const double x = 2.0 * static_cast<double>(c) / W - 1.0, y = 2.0 * static_cast<double>(r) / H - 1.0;
      const double p = poly[0] + poly[1] * x + poly[2] * y + poly[3] * x * x + poly[4] * x * y + poly[5] * y * y;
      const double s = f_field(0.5 * (x + 1.0), 0.5 * (y + 1.0));
      q.field(r, c) = std::clamp(amp * (p + 0.3 * s), -amp, amp);
      q.phi0(r, c) = config.phi0_amplitude_cycles * f_phi0(0.5 * (x + 1.0), 0.5 * (y + 1.0));
    }
  }

  const double target = config.roi_area_cm2 * 100.0 / (config.pixel_size_mm * config.pixel_size_mm);
  const auto disk = detail::best_disk(target);
  out.rois.rhl = detail::place_roi(out.labels, disk, liver.cy + 0.25 * liver.ay, liver.cx - 0.45 * liver.ax, "RHL",
                                   nullptr);
  out.rois.lhl = detail::place_roi(out.labels, disk, liver.cy - 0.20 * liver.ay, liver.cx + 0.50 * liver.ax, "LHL",
                                   &out.rois.rhl);
  return out;
}

/// Seed of dataset item `index`; items are independent of how the dataset is split into batches.
inline std::uint64_t phantom_item_seed(std::uint64_t master_seed, std::size_t index) {
  return derive_seed(master_seed, 0x5048414Eull /* "PHAN" */, index);
}

struct DatasetItem {
  PhantomSample phantom;
  ComplexImageSeries series;
};

inline std::vector<DatasetItem> generate_dataset(const PhantomConfig& config, const EchoProtocol& protocol,
                                                 const FatSpectrum& spectrum, std::size_t count, std::uint64_t seed,
                                                 std::size_t first_index = 0) {
  if (count < 1) throw DataError("dataset count must be >= 1");
  std::vector<DatasetItem> items;
  items.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto phantom = sample_qmaps(config, phantom_item_seed(seed, first_index + i));
    auto series = forward_signal_shared_phase(phantom.q, protocol, spectrum);
    items.push_back({std::move(phantom), std::move(series)});
  }
  return items;
}

}  // namespace csesim
