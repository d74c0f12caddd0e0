#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "csesim/core.hpp"
#include "csesim/diffusion.hpp"
#include "csesim/phantom.hpp"
#include "csesim/signal_model.hpp"
#include "csesim/wf_fit.hpp"

namespace csesim {

using json = nlohmann::json;

struct ProtocolSpec {
  double te1 = 1.4e-3;
  double delta_te = 2.2e-3;
  std::size_t n = 6;
  double field_strength = 1.5;
  std::optional<std::vector<double>> echo_times;  // explicit TEs override te1/delta_te/n

  EchoProtocol build() const {
    return echo_times ? EchoProtocol(*echo_times, field_strength) : EchoProtocol::uniform(te1, delta_te, n, field_strength);
  }
  friend bool operator==(const ProtocolSpec&, const ProtocolSpec&) = default;
};

struct SpectrumSpec {
  enum class Units { Ppm, Hz } units = Units::Ppm;
  std::vector<double> offsets{-3.80, -3.40, -2.60, -1.94, -0.39, 0.60};
  std::vector<double> amplitudes{0.087, 0.693, 0.128, 0.004, 0.039, 0.048};

  FatSpectrum build(double field_strength) const {
    if (units == Units::Hz) {
      std::vector<SpectralPeak> peaks;
      for (std::size_t i = 0; i < offsets.size(); ++i) peaks.push_back({offsets[i], amplitudes[i]});
      return FatSpectrum(std::move(peaks), field_strength);
    }
    std::vector<FatSpectrum::PpmPeak> peaks;
    for (std::size_t i = 0; i < offsets.size(); ++i) peaks.push_back({offsets[i], amplitudes[i]});
    return FatSpectrum::from_ppm(peaks, field_strength);
  }
};

struct NoiseSpec {
  double snr = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
};

struct LatentSpec {
  std::size_t k = 64;
};

struct DiffusionSpec {
  std::size_t T = 500;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  SamplerKind sampler = SamplerKind::Ancestral;
  DenoiserArch arch;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  std::size_t real_count = 200;
  std::size_t synthetic_count = 3100;
  std::size_t test_count = 20;
  std::size_t diversity_pairs = 100;
  /// Slices per subject for grouped confidence intervals; 1 aggregates per slice.
  std::size_t slices_per_subject = 1;
};

struct ExperimentConfig {
  ProtocolSpec protocol;
  SpectrumSpec spectrum;
  PhantomConfig phantom;
  std::uint64_t phantom_seed = 0;
  NoiseSpec noise;
  LatentSpec latent;
  DiffusionSpec diffusion;
  FitConfig fit;
  DatasetSpec dataset;
  std::vector<ProtocolSpec> protocol_variants;
  std::optional<std::string> output_dir;

  EchoProtocol echo_protocol() const { return protocol.build(); }
  FatSpectrum fat_spectrum() const { return spectrum.build(protocol.field_strength); }
  BetaSchedule schedule() const { return linear_beta_schedule(diffusion.T, diffusion.beta_start, diffusion.beta_end); }
};

namespace detail {

/// Reads an object while tracking consumed keys so that unknown keys can be rejected.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out, bool required = false) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) throw SchemaError(path_ + "." + key + ": required");
      return;
    }
    try {
      out = convert<T>(j_.at(key), path_ + "." + key);
    } catch (const json::exception& e) {
      throw SchemaError(path_ + "." + key + ": " + e.what());
    }
  }

  const json& sub(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw SchemaError(path_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, double>) {
      if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
        throw SchemaError(where + ": expected a number");
      }
      if (!v.is_number()) throw SchemaError(where + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) throw SchemaError(where + ": expected a non-negative integer");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, Range>) {
      if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        throw SchemaError(where + ": expected [lo, hi]");
      }
      return Range{v[0].get<double>(), v[1].get<double>()};
    } else {
      return v.get<T>();
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline ProtocolSpec parse_protocol(const json& j, const std::string& path) {
  StrictObject o(j, path);
  ProtocolSpec p;
  if (o.has("echo_times")) {
    std::vector<double> tes;
    o.read("echo_times", tes);
    p.echo_times = tes;
  } else {
    o.read("te1", p.te1, true);
    o.read("delta_te", p.delta_te, true);
    o.read("n", p.n, true);
  }
  o.read("field_strength", p.field_strength);
  o.finish();
  try {
    (void)p.build();
  } catch (const DataError& e) {
    throw SchemaError(path + ": " + e.what());
  }
  return p;
}

inline TissueParameters parse_tissue(const json& j, const std::string& path, TissueParameters t) {
  StrictObject o(j, path);
  o.read("pdff", t.pdff);
  o.read("total_rho", t.total_rho);
  o.read("r2star", t.r2star);
  o.finish();
  return t;
}

inline json to_json(const Range& r) { return json::array({r.lo, r.hi}); }

inline json to_json(const TissueParameters& t) {
  return {{"pdff", to_json(t.pdff)}, {"total_rho", to_json(t.total_rho)}, {"r2star", to_json(t.r2star)}};
}

inline json number_or_inf(double v) { return std::isinf(v) ? json("inf") : json(v); }

inline json to_json(const ProtocolSpec& p) {
  json j = {{"field_strength", p.field_strength}};
  if (p.echo_times) {
    j["echo_times"] = *p.echo_times;
  } else {
    j["te1"] = p.te1;
    j["delta_te"] = p.delta_te;
    j["n"] = p.n;
  }
  return j;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& root) {
  detail::StrictObject top(root, "config");
  ExperimentConfig cfg;

  if (top.has("protocol")) cfg.protocol = detail::parse_protocol(top.sub("protocol"), "protocol");

  if (top.has("spectrum")) {
    detail::StrictObject o(top.sub("spectrum"), "spectrum");
    if (o.has("ppm") == o.has("hz")) throw SchemaError("spectrum: exactly one of 'ppm' or 'hz' is required");
    if (o.has("ppm")) {
      o.read("ppm", cfg.spectrum.offsets);
      cfg.spectrum.units = SpectrumSpec::Units::Ppm;
    } else {
      o.read("hz", cfg.spectrum.offsets);
      cfg.spectrum.units = SpectrumSpec::Units::Hz;
    }
    o.read("amplitudes", cfg.spectrum.amplitudes, true);
    o.finish();
    if (cfg.spectrum.offsets.size() != cfg.spectrum.amplitudes.size()) {
      throw SchemaError("spectrum: offsets and amplitudes differ in length");
    }
    try {
      (void)cfg.fat_spectrum();
    } catch (const DataError& e) {
      throw SchemaError(std::string("spectrum: ") + e.what());
    }
  }

  {
    if (!top.has("phantom")) throw SchemaError("config.phantom: required (holds the phantom seed)");
    detail::StrictObject o(top.sub("phantom"), "phantom");
    auto& p = cfg.phantom;
    o.read("seed", cfg.phantom_seed, true);
    o.read("height", p.height);
    o.read("width", p.width);
    o.read("pixel_size_mm", p.pixel_size_mm);
    for (Tissue t : kBodyTissues) {
      const std::string name = tissue_name(t);
      if (!o.has(name)) continue;
      TissueParameters& target = t == Tissue::SubcutaneousFat ? p.subcutaneous_fat
                                 : t == Tissue::Muscle         ? p.muscle
                                 : t == Tissue::Liver          ? p.liver
                                                               : p.spleen;
      target = detail::parse_tissue(o.sub(name), "phantom." + name, target);
    }
    o.read("field_amplitude_hz", p.field_amplitude_hz);
    o.read("phi0_amplitude_cycles", p.phi0_amplitude_cycles);
    o.read("variation", p.variation);
    o.read("smooth_cycles", p.smooth_cycles);
    o.read("roi_area_cm2", p.roi_area_cm2);
    o.finish();
    try {
      p.validate();
    } catch (const DataError& e) {
      throw SchemaError(std::string("phantom: ") + e.what());
    }
  }

  {
    if (!top.has("noise")) throw SchemaError("config.noise: required (holds the noise seed)");
    detail::StrictObject o(top.sub("noise"), "noise");
    o.read("snr", cfg.noise.snr);
    o.read("seed", cfg.noise.seed, true);
    o.finish();
    if (!(cfg.noise.snr > 0.0)) throw SchemaError("noise.snr must be positive");
  }

  if (top.has("latent")) {
    detail::StrictObject o(top.sub("latent"), "latent");
    o.read("k", cfg.latent.k);
    o.finish();
    if (cfg.latent.k < 1) throw SchemaError("latent.k must be >= 1");
  }

  {
    if (!top.has("diffusion")) throw SchemaError("config.diffusion: required (holds the diffusion seed)");
    detail::StrictObject o(top.sub("diffusion"), "diffusion");
    auto& d = cfg.diffusion;
    o.read("seed", d.seed, true);
    o.read("T", d.T);
    o.read("beta_start", d.beta_start);
    o.read("beta_end", d.beta_end);
    std::string sampler = "ancestral";
    o.read("sampler", sampler);
    if (sampler == "ancestral") d.sampler = SamplerKind::Ancestral;
    else if (sampler == "paper_literal") d.sampler = SamplerKind::PaperLiteral;
    else throw SchemaError("diffusion.sampler: expected 'ancestral' or 'paper_literal'");
    if (o.has("arch")) {
      detail::StrictObject a(o.sub("arch"), "diffusion.arch");
      a.read("hidden_layers", d.arch.hidden_layers);
      a.read("hidden_units", d.arch.hidden_units);
      a.read("time_embedding", d.arch.time_embedding);
      a.finish();
    }
    if (o.has("optimizer")) {
      detail::StrictObject a(o.sub("optimizer"), "diffusion.optimizer");
      a.read("learning_rate", d.optimizer.learning_rate);
      a.read("batch_size", d.optimizer.batch_size);
      a.read("epochs", d.optimizer.epochs);
      a.read("beta1", d.optimizer.beta1);
      a.read("beta2", d.optimizer.beta2);
      a.read("epsilon", d.optimizer.epsilon);
      a.read("final_lr_fraction", d.optimizer.final_lr_fraction);
      a.finish();
    }
    o.finish();
    try {
      (void)cfg.schedule();
    } catch (const DataError& e) {
      throw SchemaError(std::string("diffusion: ") + e.what());
    }
    if (d.optimizer.batch_size < 1 || d.optimizer.epochs < 1 || !(d.optimizer.learning_rate > 0.0)) {
      throw SchemaError("diffusion.optimizer: batch_size, epochs and learning_rate must be positive");
    }
  }

  if (top.has("fit")) {
    detail::StrictObject o(top.sub("fit"), "fit");
    auto& f = cfg.fit;
    if (o.has("field_window_hz")) {
      double w = 0.0;
      o.read("field_window_hz", w);
      f.field_window_hz = w;
    }
    o.read("r2star_range", f.r2star_range);
    o.read("field_grid_points", f.field_grid_points);
    o.read("r2star_grid_points", f.r2star_grid_points);
    o.read("max_iterations", f.max_iterations);
    o.read("multi_start", f.multi_start);
    o.read("tolerance", f.tolerance);
    o.read("downsample", f.downsample);
    o.read("median_size", f.median_size);
    o.read("seeded_window_fraction", f.seeded_window_fraction);
    o.read("seed_foreground_fraction", f.seed_foreground_fraction);
    o.finish();
    try {
      f.validate();
    } catch (const DataError& e) {
      throw SchemaError(std::string("fit: ") + e.what());
    }
  }

  if (top.has("dataset")) {
    detail::StrictObject o(top.sub("dataset"), "dataset");
    o.read("real_count", cfg.dataset.real_count);
    o.read("synthetic_count", cfg.dataset.synthetic_count);
    o.read("test_count", cfg.dataset.test_count);
    o.read("diversity_pairs", cfg.dataset.diversity_pairs);
    o.read("slices_per_subject", cfg.dataset.slices_per_subject);
    o.finish();
    if (cfg.dataset.test_count < 1 || cfg.dataset.slices_per_subject < 1) {
      throw SchemaError("dataset: test_count and slices_per_subject must be >= 1");
    }
  }

  if (top.has("protocol_variants")) {
    const json& arr = top.sub("protocol_variants");
    if (!arr.is_array()) throw SchemaError("protocol_variants: expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      json entry = arr[i];
      if (entry.is_object() && !entry.contains("field_strength")) entry["field_strength"] = cfg.protocol.field_strength;
      cfg.protocol_variants.push_back(detail::parse_protocol(entry, "protocol_variants[" + std::to_string(i) + "]"));
    }
  }

  if (top.has("output_dir")) {
    std::string dir;
    top.read("output_dir", dir);
    cfg.output_dir = dir;
  }
  top.finish();
  return cfg;
}

/// Fully resolved configuration, defaults included. Keys are sorted, so dump() is canonical.
inline json to_json(const ExperimentConfig& cfg) {
  json j;
  j["protocol"] = detail::to_json(cfg.protocol);
  j["spectrum"] = {{cfg.spectrum.units == SpectrumSpec::Units::Ppm ? "ppm" : "hz", cfg.spectrum.offsets},
                   {"amplitudes", cfg.spectrum.amplitudes}};
  const auto& p = cfg.phantom;
  j["phantom"] = {{"seed", cfg.phantom_seed},
                  {"height", p.height},
                  {"width", p.width},
                  {"pixel_size_mm", p.pixel_size_mm},
                  {"subcutaneous_fat", detail::to_json(p.subcutaneous_fat)},
                  {"muscle", detail::to_json(p.muscle)},
                  {"liver", detail::to_json(p.liver)},
                  {"spleen", detail::to_json(p.spleen)},
                  {"field_amplitude_hz", p.field_amplitude_hz},
                  {"phi0_amplitude_cycles", p.phi0_amplitude_cycles},
                  {"variation", p.variation},
                  {"smooth_cycles", p.smooth_cycles},
                  {"roi_area_cm2", p.roi_area_cm2}};
  j["noise"] = {{"snr", detail::number_or_inf(cfg.noise.snr)}, {"seed", cfg.noise.seed}};
  j["latent"] = {{"k", cfg.latent.k}};
  const auto& d = cfg.diffusion;
  j["diffusion"] = {{"seed", d.seed},
                    {"T", d.T},
                    {"beta_start", d.beta_start},
                    {"beta_end", d.beta_end},
                    {"sampler", d.sampler == SamplerKind::Ancestral ? "ancestral" : "paper_literal"},
                    {"arch", {{"hidden_layers", d.arch.hidden_layers}, {"hidden_units", d.arch.hidden_units}, {"time_embedding", d.arch.time_embedding}}},
                    {"optimizer",
                     {{"learning_rate", d.optimizer.learning_rate},
                      {"batch_size", d.optimizer.batch_size},
                      {"epochs", d.optimizer.epochs},
                      {"beta1", d.optimizer.beta1},
                      {"beta2", d.optimizer.beta2},
                      {"epsilon", d.optimizer.epsilon},
                      {"final_lr_fraction", d.optimizer.final_lr_fraction}}}};
  const auto& f = cfg.fit;
  j["fit"] = {{"r2star_range", detail::to_json(f.r2star_range)},
              {"field_grid_points", f.field_grid_points},
              {"r2star_grid_points", f.r2star_grid_points},
              {"max_iterations", f.max_iterations},
              {"multi_start", f.multi_start},
              {"tolerance", f.tolerance},
              {"downsample", f.downsample},
              {"median_size", f.median_size},
              {"seeded_window_fraction", f.seeded_window_fraction},
              {"seed_foreground_fraction", f.seed_foreground_fraction}};
  if (f.field_window_hz) j["fit"]["field_window_hz"] = *f.field_window_hz;
  j["dataset"] = {{"real_count", cfg.dataset.real_count},
                  {"synthetic_count", cfg.dataset.synthetic_count},
                  {"test_count", cfg.dataset.test_count},
                  {"diversity_pairs", cfg.dataset.diversity_pairs},
                  {"slices_per_subject", cfg.dataset.slices_per_subject}};
  j["protocol_variants"] = json::array();
  for (const auto& v : cfg.protocol_variants) j["protocol_variants"].push_back(detail::to_json(v));
  if (cfg.output_dir) j["output_dir"] = *cfg.output_dir;
  return j;
}

/// FNV-1a over the canonical JSON of the resolved configuration.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("missing input: config " + path.string(), "missing_input");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

}  // namespace csesim
