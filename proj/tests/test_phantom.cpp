#include <gtest/gtest.h>

#include <set>

#include "csesim/phantom.hpp"

using namespace csesim;

namespace {

PhantomConfig small_config() {
  PhantomConfig c;
  c.height = 128;
  c.width = 128;
  c.pixel_size_mm = 3.0;
  return c;
}

std::size_t count_label(const Image<std::uint8_t>& labels, Tissue t) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(t)));
}

// FNV-1a over the raw bytes of every channel.
std::uint64_t hash_qmaps(const QMaps& q) {
  std::uint64_t h = 1469598103934665603ull;
  for (const RealMap* m : {&q.rho_w, &q.rho_f, &q.r2star, &q.field, &q.phi0}) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m->data().data());
    for (std::size_t i = 0; i < m->size() * sizeof(double); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  }
  return h;
}

}  // namespace

TEST(Phantom, SameSeedIsBitIdentical) {
  const auto a = sample_qmaps(small_config(), 42), b = sample_qmaps(small_config(), 42);
  EXPECT_TRUE(a.q == b.q);
  EXPECT_TRUE(a.labels == b.labels);
  EXPECT_FALSE(a.q == sample_qmaps(small_config(), 43).q);
}

TEST(Phantom, AnatomyAndInvariants) {
  const PhantomConfig cfg = small_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = sample_qmaps(cfg, seed);
    EXPECT_NO_THROW(s.q.validate());
    for (Tissue t : kBodyTissues) EXPECT_GT(count_label(s.labels, t), 50u) << tissue_name(t);
    EXPECT_GT(count_label(s.labels, Tissue::Air), 0u);
    const RealMap pdff = pdff_map(s.q);
    for (std::size_t i = 0; i < pdff.size(); ++i) {
      const auto t = static_cast<Tissue>(s.labels[i]);
      if (t == Tissue::Air) {
        EXPECT_EQ(s.q.rho_w[i] + s.q.rho_f[i], 0.0);
        continue;
      }
      const auto& p = cfg.tissue(t);
      EXPECT_GE(pdff[i], p.pdff.lo - 1e-12);
      EXPECT_LE(pdff[i], p.pdff.hi + 1e-12);
      EXPECT_TRUE(p.r2star.contains(s.q.r2star[i]));
      EXPECT_LE(std::abs(s.q.field[i]), cfg.field_amplitude_hz);
      EXPECT_LE(std::abs(s.q.phi0[i]), cfg.phi0_amplitude_cycles + 1e-12);
    }
  }
}

TEST(Phantom, RoisInsideLiverWithMarginAndArea) {
  for (const double px : {1.5, 3.0}) {
    PhantomConfig cfg;
    cfg.height = cfg.width = px == 1.5 ? 256 : 128;
    cfg.pixel_size_mm = px;
    const double target = cfg.roi_area_cm2 * 100.0 / (px * px);
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const auto s = sample_qmaps(cfg, seed);
      for (const Roi* roi : {&s.rois.rhl, &s.rois.lhl}) {
        EXPECT_NEAR(static_cast<double>(roi->pixel_count()), target, 0.1 * target) << roi->label;
        for (std::size_t r = 0; r < cfg.height; ++r) {
          for (std::size_t c = 0; c < cfg.width; ++c) {
            if (!roi->mask(r, c)) continue;
            for (int dr = -3; dr <= 3; ++dr) {
              for (int dc = -3; dc <= 3; ++dc) {
                const auto rr = static_cast<std::size_t>(static_cast<long>(r) + dr);
                const auto cc = static_cast<std::size_t>(static_cast<long>(c) + dc);
                ASSERT_EQ(s.labels(rr, cc), static_cast<std::uint8_t>(Tissue::Liver)) << roi->label << " seed " << seed;
              }
            }
          }
        }
      }
      for (std::size_t i = 0; i < s.rois.rhl.mask.size(); ++i) EXPECT_FALSE(s.rois.rhl.mask[i] && s.rois.lhl.mask[i]);
    }
  }
}

TEST(Phantom, DegenerateConfigIsPiecewiseConstant) {
  PhantomConfig cfg = small_config();
  cfg.subcutaneous_fat = {{0.9, 0.9}, {1.0, 1.0}, {30, 30}};
  cfg.muscle = {{0.02, 0.02}, {0.7, 0.7}, {35, 35}};
  cfg.liver = {{0.25, 0.25}, {0.9, 0.9}, {50, 50}};
  cfg.spleen = {{0.01, 0.01}, {0.85, 0.85}, {28, 28}};
  cfg.field_amplitude_hz = 0.0;
  cfg.phi0_amplitude_cycles = 0.0;
  const auto s = sample_qmaps(cfg, 7);
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const auto t = static_cast<Tissue>(s.labels[i]);
    EXPECT_EQ(s.q.field[i], 0.0);
    EXPECT_EQ(s.q.phi0[i], 0.0);
    if (t == Tissue::Air) continue;
    const auto& p = cfg.tissue(t);
    EXPECT_EQ(s.q.rho_w[i], p.total_rho.lo * (1.0 - p.pdff.lo));
    EXPECT_EQ(s.q.rho_f[i], p.total_rho.lo * p.pdff.lo);
    EXPECT_EQ(s.q.r2star[i], p.r2star.lo);
  }
}

TEST(Phantom, ConfigValidation) {
  PhantomConfig cfg = small_config();
  cfg.height = 32;
  EXPECT_THROW(sample_qmaps(cfg, 1), DataError);
  cfg = small_config();
  cfg.liver.pdff = {0.5, 1.2};
  EXPECT_THROW(sample_qmaps(cfg, 1), DataError);
}

TEST(Dataset, CountOneAndBatchIndependence) {
  const EchoProtocol p = EchoProtocol::uniform(1.4e-3, 2.2e-3, 6, 1.5);
  const FatSpectrum spec = FatSpectrum::default_liver();
  const auto one = generate_dataset(small_config(), p, spec, 1, 5);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].series.echo_count(), 6u);
  EXPECT_EQ(one[0].series.height(), one[0].phantom.q.height());
  EXPECT_EQ(one[0].series.width(), one[0].phantom.q.width());
  const auto all = generate_dataset(small_config(), p, spec, 3, 5);
  const auto tail = generate_dataset(small_config(), p, spec, 2, 5, 1);
  EXPECT_TRUE(all[0].phantom.q == one[0].phantom.q);
  EXPECT_TRUE(all[1].phantom.q == tail[0].phantom.q);
  EXPECT_TRUE(all[2].phantom.q == tail[1].phantom.q);
  EXPECT_THROW(generate_dataset(small_config(), p, spec, 0, 5), DataError);
}

TEST(Dataset, DisjointSeedsShareNoPhantom) {
  PhantomConfig cfg = small_config();
  cfg.height = cfg.width = 64;
  std::set<std::uint64_t> a;
  for (std::size_t i = 0; i < 40; ++i) a.insert(hash_qmaps(sample_qmaps(cfg, phantom_item_seed(1, i)).q));
  EXPECT_EQ(a.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(a.count(hash_qmaps(sample_qmaps(cfg, phantom_item_seed(2, i)).q)), 0u);
}
