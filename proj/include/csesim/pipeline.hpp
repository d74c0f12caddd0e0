#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csesim/config.hpp"
#include "csesim/container.hpp"
#include "csesim/diffusion.hpp"
#include "csesim/latent_embed.hpp"
#include "csesim/metrics.hpp"
#include "csesim/phantom.hpp"
#include "csesim/signal_model.hpp"
#include "csesim/wf_fit.hpp"

namespace csesim::pipeline {

namespace fs = std::filesystem;

/// Command-line overrides applied on top of the configuration file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> snr;
  std::optional<ProtocolSpec> protocol;
  bool force = false;
};

/// One output directory plus the configuration that produced it.
struct Workspace {
  ExperimentConfig config;
  std::string config_hash;
  fs::path dir;
  Overrides overrides;

  Workspace(ExperimentConfig cfg, fs::path out, Overrides ov = {})
      : config(std::move(cfg)), config_hash(csesim::config_hash(config)), dir(std::move(out)), overrides(std::move(ov)) {
    fs::create_directories(dir);
  }

  fs::path path(const std::string& name) const { return dir / name; }
  bool exists(const std::string& name) const { return fs::exists(path(name)); }

  EchoProtocol protocol() const { return (overrides.protocol ? *overrides.protocol : config.protocol).build(); }
  ProtocolSpec protocol_spec() const { return overrides.protocol ? *overrides.protocol : config.protocol; }
  FatSpectrum spectrum() const { return config.spectrum.build(protocol_spec().field_strength); }
  std::uint64_t phantom_seed() const { return overrides.seed.value_or(config.phantom_seed); }
  std::uint64_t noise_seed() const { return overrides.seed.value_or(config.noise.seed); }
  std::uint64_t diffusion_seed() const { return overrides.seed.value_or(config.diffusion.seed); }
  double snr() const { return overrides.snr.value_or(config.noise.snr); }
};

/// Exclusive ownership of an output directory for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".csesim.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw UsageError("output directory is locked by another run: " + path_.string(), "locked");
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

/// Process exit code for an error: missing input 1, schema 2, data/CRC 3, dimension mismatch or numeric failure 4.
inline int exit_code_for(const Error& e) {
  if (e.reason() == "dimension") return 4;
  return e.exit_code();
}

/// One machine-parsable diagnostic line.
inline std::string error_line(const Error& e) {
  json msg = e.what();
  return "csesim: error code=" + std::to_string(exit_code_for(e)) + " kind=" + to_string(e.kind()) + " reason=" + e.reason() +
         " message=" + msg.dump();
}

// ---------------------------------------------------------------------------
// Sidecars

inline fs::path sidecar_path(const fs::path& container) { return fs::path(container.string() + ".json"); }

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string(), "io");
  out << text;
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("missing input: " + path.string(), "missing_input");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("malformed sidecar " + path.string() + ": " + e.what(), "sidecar");
  }
}

/// Writes a container together with its sidecar naming the producing command, config hash and seeds.
inline void write_with_sidecar(const Workspace& ws, const std::string& name, const ArrayContainer& data,
                               const std::string& command, const json& seeds, const json& metadata = json::object()) {
  write_container(ws.path(name), data);
  json side = {{"command", command},
               {"config_hash", ws.config_hash},
               {"seeds", seeds},
               {"dtype", dtype_name(data.dtype)},
               {"dims", data.dims},
               {"metadata", metadata}};
  write_text(sidecar_path(ws.path(name)), side.dump(2) + "\n");
}

inline json read_sidecar(const Workspace& ws, const std::string& name) { return read_json(sidecar_path(ws.path(name))); }

inline void check_hash(const Workspace& ws, const std::string& name) {
  const json side = read_sidecar(ws, name);
  const std::string hash = side.value("config_hash", "");
  if (hash != ws.config_hash && !ws.overrides.force) {
    throw DataError(name + " was produced with config " + hash + ", current config is " + ws.config_hash +
                        " (use --force to override)",
                    "config_hash");
  }
}

// ---------------------------------------------------------------------------
// Packing helpers

inline ArrayContainer pack_qmaps(const std::vector<QMaps>& maps) {
  if (maps.empty()) throw DataError("no q-maps to write");
  const std::size_t H = maps.front().height(), W = maps.front().width();
  std::vector<double> values;
  values.reserve(maps.size() * 5 * H * W);
  for (const auto& q : maps) {
    if (q.height() != H || q.width() != W) throw DataError("q-map stack with mixed dimensions", "dimension");
    for (const RealMap* m : {&q.rho_w, &q.rho_f, &q.r2star, &q.field, &q.phi0}) values.insert(values.end(), m->begin(), m->end());
  }
  return ArrayContainer::real({static_cast<std::uint32_t>(maps.size()), 5, static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(W)},
                              std::move(values));
}

inline std::vector<QMaps> unpack_qmaps(const ArrayContainer& a, double pixel_size_mm) {
  a.expect_dims(4, "q-map stack");
  if (a.dims[1] != 5) throw DataError("q-map stack must have 5 channels", "dimension");
  const std::size_t count = a.dims[0], H = a.dims[2], W = a.dims[3], P = H * W;
  std::vector<QMaps> out;
  for (std::size_t i = 0; i < count; ++i) {
    QMaps q(H, W, pixel_size_mm);
    std::size_t offset = i * 5 * P;
    for (RealMap* m : {&q.rho_w, &q.rho_f, &q.r2star, &q.field, &q.phi0}) {
      std::copy(a.values.begin() + static_cast<long>(offset), a.values.begin() + static_cast<long>(offset + P), m->begin());
      offset += P;
    }
    out.push_back(std::move(q));
  }
  return out;
}

inline ArrayContainer pack_labels(const std::vector<Image<std::uint8_t>>& labels) {
  const std::size_t H = labels.front().height(), W = labels.front().width();
  std::vector<double> values;
  for (const auto& l : labels) values.insert(values.end(), l.begin(), l.end());
  return ArrayContainer::real({static_cast<std::uint32_t>(labels.size()), static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(W)},
                              std::move(values), DType::F32);
}

inline std::vector<Image<std::uint8_t>> unpack_labels(const ArrayContainer& a) {
  a.expect_dims(3, "label stack");
  const std::size_t count = a.dims[0], H = a.dims[1], W = a.dims[2];
  std::vector<Image<std::uint8_t>> out;
  for (std::size_t i = 0; i < count; ++i) {
    Image<std::uint8_t> l(H, W);
    for (std::size_t j = 0; j < H * W; ++j) l[j] = static_cast<std::uint8_t>(a.values[i * H * W + j]);
    out.push_back(std::move(l));
  }
  return out;
}

inline ArrayContainer pack_series(const std::vector<ComplexImageSeries>& series) {
  const std::size_t N = series.front().echo_count(), H = series.front().height(), W = series.front().width();
  std::vector<Complex> values;
  values.reserve(series.size() * N * H * W);
  for (const auto& s : series) {
    if (s.echo_count() != N || s.height() != H || s.width() != W) throw DataError("series stack with mixed dimensions", "dimension");
    for (const auto& e : s.echoes) values.insert(values.end(), e.begin(), e.end());
  }
  return ArrayContainer::complex({static_cast<std::uint32_t>(series.size()), static_cast<std::uint32_t>(N),
                                  static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(W)},
                                 values);
}

inline std::vector<ComplexImageSeries> unpack_series(const ArrayContainer& a, const EchoProtocol& protocol) {
  a.expect_dims(4, "echo stack");
  const std::size_t count = a.dims[0], N = a.dims[1], H = a.dims[2], W = a.dims[3], P = H * W;
  if (N != protocol.echo_count()) throw DataError("echo stack does not match its protocol", "dimension");
  const auto values = a.complex_values();
  std::vector<ComplexImageSeries> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<ComplexMap> echoes(N, ComplexMap(H, W));
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t offset = (i * N + n) * P;
      std::copy(values.begin() + static_cast<long>(offset), values.begin() + static_cast<long>(offset + P), echoes[n].begin());
    }
    out.emplace_back(std::move(echoes), protocol);
  }
  return out;
}

inline Mask disk_mask(std::size_t H, std::size_t W, double row, double col, double radius) {
  Mask m(H, W);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const double y = static_cast<double>(r) - row, x = static_cast<double>(c) - col;
      if (x * x + y * y <= radius * radius) m(r, c) = 1;
    }
  }
  return m;
}

inline json roi_to_json(const Roi& r) {
  return {{"label", r.label}, {"row", r.center_row}, {"col", r.center_col}, {"radius_px", r.radius_px}, {"pixels", r.pixel_count()}};
}

inline Roi roi_from_json(const json& j, std::size_t H, std::size_t W) {
  Roi r;
  r.label = j.at("label").get<std::string>();
  r.center_row = j.at("row").get<double>();
  r.center_col = j.at("col").get<double>();
  r.radius_px = j.at("radius_px").get<double>();
  r.mask = disk_mask(H, W, r.center_row, r.center_col, r.radius_px);
  return r;
}

inline json protocol_json(const EchoProtocol& p) {
  return {{"echo_times_s", p.echo_times()}, {"field_strength_t", p.field_strength()}};
}

inline EchoProtocol protocol_from_json(const json& j) {
  return EchoProtocol(j.at("echo_times_s").get<std::vector<double>>(), j.at("field_strength_t").get<double>());
}

inline Mask foreground(const Image<std::uint8_t>& labels) {
  Mask m(labels.height(), labels.width());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels[i] != static_cast<std::uint8_t>(Tissue::Air) ? 1 : 0;
  return m;
}

struct PhantomSet {
  std::vector<QMaps> qmaps;
  std::vector<Image<std::uint8_t>> labels;
  std::vector<RoiSet> rois;
};

inline PhantomSet load_phantoms(const Workspace& ws, const std::string& prefix) {
  PhantomSet set;
  const json side = read_sidecar(ws, prefix + "_qmaps.csem");
  const double pixel = side.at("metadata").value("pixel_size_mm", 1.0);
  set.qmaps = unpack_qmaps(read_container(ws.path(prefix + "_qmaps.csem")), pixel);
  if (ws.exists(prefix + "_labels.csem")) {
    set.labels = unpack_labels(read_container(ws.path(prefix + "_labels.csem")));
    const json rois = read_sidecar(ws, prefix + "_labels.csem").at("metadata").at("rois");
    const std::size_t H = set.qmaps.front().height(), W = set.qmaps.front().width();
    for (const auto& r : rois) set.rois.push_back({roi_from_json(r.at("rhl"), H, W), roi_from_json(r.at("lhl"), H, W)});
  }
  return set;
}

inline std::vector<ComplexImageSeries> load_series(const Workspace& ws, const std::string& name) {
  const json side = read_sidecar(ws, name);
  return unpack_series(read_container(ws.path(name)), protocol_from_json(side.at("metadata").at("protocol")));
}

// ---------------------------------------------------------------------------
// Stages

inline constexpr std::uint64_t kTrainStream = 0x5452414Eull;  // "TRAN"
inline constexpr std::uint64_t kTestStream = 0x54455354ull;   // "TEST"

inline void write_phantom_set(const Workspace& ws, const std::string& prefix, const std::vector<PhantomSample>& samples,
                              std::uint64_t seed) {
  std::vector<QMaps> maps;
  std::vector<Image<std::uint8_t>> labels;
  json rois = json::array();
  for (const auto& s : samples) {
    maps.push_back(s.q);
    labels.push_back(s.labels);
    rois.push_back({{"rhl", roi_to_json(s.rois.rhl)}, {"lhl", roi_to_json(s.rois.lhl)}});
  }
  const json seeds = {{"phantom", seed}};
  const json meta = {{"pixel_size_mm", ws.config.phantom.pixel_size_mm}, {"channels", kQMapChannels}, {"set", prefix}};
  write_with_sidecar(ws, prefix + "_qmaps.csem", pack_qmaps(maps), "generate-phantoms", seeds, meta);
  write_with_sidecar(ws, prefix + "_labels.csem", pack_labels(labels), "generate-phantoms", seeds,
                     {{"rois", rois}, {"tissues", {"air", "subcutaneous_fat", "muscle", "liver", "spleen"}}});
}

/// Training ("real-analog") and test phantoms from disjoint seed streams.
inline void generate_phantoms(const Workspace& ws) {
  const auto& cfg = ws.config;
  const std::uint64_t seed = ws.phantom_seed();
  for (const auto& [prefix, count, stream] :
       {std::tuple{std::string("train"), cfg.dataset.real_count, kTrainStream},
        std::tuple{std::string("test"), cfg.dataset.test_count, kTestStream}}) {
    if (count == 0) continue;
    std::vector<PhantomSample> samples;
    const std::uint64_t stream_seed = derive_seed(seed, stream);
    for (std::size_t i = 0; i < count; ++i) samples.push_back(sample_qmaps(cfg.phantom, phantom_item_seed(stream_seed, i)));
    write_phantom_set(ws, prefix, samples, seed);
  }
}

inline json spectrum_json(const FatSpectrum& s) {
  json peaks = json::array();
  for (const auto& p : s.peaks()) peaks.push_back({{"frequency_hz", p.frequency_hz}, {"amplitude", p.amplitude}});
  return {{"peaks", peaks}, {"field_strength_t", s.field_strength()}, {"gyromagnetic_mhz_per_t", kGyromagneticMHzPerTesla}};
}

/// Forward-simulates every q-map stack present in the workspace.
inline void simulate(const Workspace& ws) {
  const EchoProtocol protocol = ws.protocol();
  const FatSpectrum spectrum = ws.spectrum();
  bool any = false;
  for (const std::string prefix : {"train", "test", "synthetic"}) {
    if (!ws.exists(prefix + "_qmaps.csem")) continue;
    any = true;
    const json side = read_sidecar(ws, prefix + "_qmaps.csem");
    const double pixel = side.at("metadata").value("pixel_size_mm", 1.0);
    const auto maps = unpack_qmaps(read_container(ws.path(prefix + "_qmaps.csem")), pixel);
    std::vector<ComplexImageSeries> series;
    for (const auto& q : maps) series.push_back(forward_signal_shared_phase(q, protocol, spectrum));
    write_with_sidecar(ws, prefix + "_echoes.csem", pack_series(series), "simulate", side.at("seeds"),
                       {{"protocol", protocol_json(protocol)}, {"spectrum", spectrum_json(spectrum)}, {"set", prefix}});
  }
  if (!any) throw UsageError("missing input: no *_qmaps.csem in " + ws.dir.string(), "missing_input");
}

/// Adds complex Gaussian noise to the simulated test echoes.
inline void corrupt(const Workspace& ws) {
  const auto series = load_series(ws, "test_echoes.csem");
  const auto labels = unpack_labels(read_container(ws.path("test_labels.csem")));
  if (labels.size() != series.size()) throw DataError("label and echo stacks differ in length", "dimension");
  const double snr = ws.snr();
  const std::uint64_t seed = ws.noise_seed();
  std::vector<ComplexImageSeries> noisy;
  for (std::size_t i = 0; i < series.size(); ++i) {
    noisy.push_back(add_complex_noise(series[i], snr, derive_seed(seed, 0x4E4F4953ull /* "NOIS" */, i), foreground(labels[i])));
  }
  json side = read_sidecar(ws, "test_echoes.csem");
  side["metadata"]["snr"] = detail::number_or_inf(snr);
  json seeds = side.at("seeds");
  seeds["noise"] = seed;
  write_with_sidecar(ws, "test_echoes_noisy.csem", pack_series(noisy), "corrupt", seeds, side.at("metadata"));
}

/// Water-fat separation of the (noisy if present) test echoes.
inline void fit(const Workspace& ws) {
  const std::string input = ws.exists("test_echoes_noisy.csem") ? "test_echoes_noisy.csem" : "test_echoes.csem";
  const auto series = load_series(ws, input);
  const json in_side = read_sidecar(ws, input);
  const FatSpectrum spectrum = ws.spectrum();
  const double pixel = ws.config.phantom.pixel_size_mm;
  std::vector<QMaps> derived;
  std::vector<double> residuals, flags;
  std::uint64_t iterations = 0;
  std::array<std::uint64_t, 3> flag_counts{};
  for (const auto& s : series) {
    const FitResult r = fit_image(s, spectrum, ws.config.fit, pixel);
    derived.push_back(r.derived);
    residuals.insert(residuals.end(), r.residual.begin(), r.residual.end());
    for (std::size_t i = 0; i < r.flags.size(); ++i) {
      flags.push_back(r.flags[i]);
      iterations += r.iterations[i];
      for (std::size_t b = 0; b < 3; ++b) flag_counts[b] += (r.flags[i] >> b) & 1u;
    }
  }
  const std::uint32_t count = static_cast<std::uint32_t>(series.size());
  const std::uint32_t H = static_cast<std::uint32_t>(series.front().height()), W = static_cast<std::uint32_t>(series.front().width());
  const json seeds = in_side.at("seeds");
  json meta = {{"input", input}, {"pixel_size_mm", pixel}, {"protocol", in_side.at("metadata").at("protocol")}};
  write_with_sidecar(ws, "test_fit.csem", pack_qmaps(derived), "fit", seeds, meta);
  write_with_sidecar(ws, "test_fit_residual.csem", ArrayContainer::real({count, H, W}, residuals), "fit", seeds);
  write_with_sidecar(ws, "test_fit_flags.csem", ArrayContainer::real({count, H, W}, flags, DType::F32), "fit", seeds,
                     {{"bits", {{"1", "not_converged"}, {"2", "rank_deficient"}, {"4", "ambiguous_basin"}}}});
  const json summary = {{"images", count},
                        {"voxels", static_cast<std::uint64_t>(count) * H * W},
                        {"total_iterations", iterations},
                        {"not_converged", flag_counts[0]},
                        {"rank_deficient", flag_counts[1]},
                        {"ambiguous", flag_counts[2]},
                        {"config_hash", ws.config_hash}};
  write_text(ws.path("test_fit_summary.json"), summary.dump(2) + "\n");
}

inline void save_pca(const Workspace& ws, const PcaModel& m, const json& seeds) {
  const auto d = static_cast<std::uint32_t>(m.dimension());
  const auto k = static_cast<std::uint32_t>(m.k());
  std::vector<double> mean(m.mean.data(), m.mean.data() + m.mean.size());
  std::vector<double> comps(static_cast<std::size_t>(m.components.size()));
  for (std::uint32_t c = 0; c < k; ++c) {
    for (std::uint32_t i = 0; i < d; ++i) comps[static_cast<std::size_t>(c) * d + i] = m.components(i, c);
  }
  std::vector<double> sd(m.stddev.data(), m.stddev.data() + m.stddev.size());
  const json layout = {{"height", m.layout.height},
                       {"width", m.layout.width},
                       {"pixel_size_mm", m.layout.pixel_size_mm},
                       {"channel_scale", m.layout.channel_scale},
                       {"channels", kQMapChannels},
                       {"k", k},
                       {"requested_k", m.requested_k}};
  write_with_sidecar(ws, "pca_mean.csem", ArrayContainer::real({d}, mean), "train-latent", seeds, layout);
  write_with_sidecar(ws, "pca_components.csem", ArrayContainer::real({k, d}, comps), "train-latent", seeds, layout);
  write_with_sidecar(ws, "pca_stddev.csem", ArrayContainer::real({k}, sd), "train-latent", seeds, layout);
}

inline PcaModel load_pca(const Workspace& ws) {
  const json layout = read_sidecar(ws, "pca_mean.csem").at("metadata");
  PcaModel m;
  m.layout.height = layout.at("height").get<std::size_t>();
  m.layout.width = layout.at("width").get<std::size_t>();
  m.layout.pixel_size_mm = layout.at("pixel_size_mm").get<double>();
  m.layout.channel_scale = layout.at("channel_scale").get<std::array<double, 5>>();
  m.requested_k = layout.at("requested_k").get<std::size_t>();
  const auto mean = read_container(ws.path("pca_mean.csem"));
  const auto comps = read_container(ws.path("pca_components.csem"));
  const auto sd = read_container(ws.path("pca_stddev.csem"));
  mean.expect_dims(1, "pca mean");
  comps.expect_dims(2, "pca components");
  sd.expect_dims(1, "pca stddev");
  const std::size_t d = mean.dims[0], k = comps.dims[0];
  if (comps.dims[1] != d || sd.dims[0] != k || d != m.layout.dimension()) throw DataError("inconsistent pca model files", "dimension");
  m.mean = Eigen::Map<const Eigen::VectorXd>(mean.values.data(), static_cast<Eigen::Index>(d));
  m.components.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < d; ++i) m.components(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = comps.values[c * d + i];
  }
  m.stddev = Eigen::Map<const Eigen::VectorXd>(sd.values.data(), static_cast<Eigen::Index>(k));
  return m;
}

/// Principal-component embedding of the training q-maps; also writes their latent coordinates.
inline void train_latent(const Workspace& ws) {
  const PhantomSet train = load_phantoms(ws, "train");
  const PcaModel model = fit_pca(train.qmaps, ws.config.latent.k);
  const json seeds = read_sidecar(ws, "train_qmaps.csem").at("seeds");
  save_pca(ws, model, seeds);
  std::vector<double> latents;
  for (const auto& q : train.qmaps) {
    const LatentVector z = encode(model, q);
    latents.insert(latents.end(), z.data(), z.data() + z.size());
  }
  write_with_sidecar(ws, "train_latents.csem",
                     ArrayContainer::real({static_cast<std::uint32_t>(train.qmaps.size()), static_cast<std::uint32_t>(model.k())}, latents),
                     "train-latent", seeds, {{"k", model.k()}});
}

inline json arch_json(const DenoiserArch& a) {
  return {{"hidden_layers", a.hidden_layers}, {"hidden_units", a.hidden_units}, {"time_embedding", a.time_embedding}};
}

/// Trains the latent noise predictor.
inline void train_diffusion(const Workspace& ws) {
  const auto latents = read_container(ws.path("train_latents.csem"));
  latents.expect_dims(2, "latent stack");
  const std::size_t n = latents.dims[0], k = latents.dims[1];
  Eigen::MatrixXd data(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) data(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = latents.values[i * k + j];
  }
  const auto& d = ws.config.diffusion;
  const std::uint64_t seed = ws.diffusion_seed();
  const TrainedDenoiser trained = train_mlp_denoiser(data, ws.config.schedule(), d.arch, d.optimizer, seed);
  const auto params = trained.network.parameters();
  json seeds = read_sidecar(ws, "train_latents.csem").at("seeds");
  seeds["diffusion"] = seed;
  write_with_sidecar(ws, "denoiser.csem", ArrayContainer::real({static_cast<std::uint32_t>(params.size())}, params), "train-diffusion",
                     seeds,
                     {{"latent_dim", k},
                      {"arch", arch_json(d.arch)},
                      {"schedule", {{"T", d.T}, {"beta_start", d.beta_start}, {"beta_end", d.beta_end}, {"kind", "linear"}}},
                      {"final_loss", trained.loss_trace.back()}});
  std::ostringstream csv;
  csv << "epoch,loss\n" << std::setprecision(10);
  for (std::size_t e = 0; e < trained.loss_trace.size(); ++e) csv << e + 1 << "," << trained.loss_trace[e] << "\n";
  write_text(ws.path("loss_trace.csv"), csv.str());
}

inline MlpDenoiser load_denoiser(const Workspace& ws) {
  const json meta = read_sidecar(ws, "denoiser.csem").at("metadata");
  DenoiserArch arch;
  arch.hidden_layers = meta.at("arch").at("hidden_layers").get<std::size_t>();
  arch.hidden_units = meta.at("arch").at("hidden_units").get<std::size_t>();
  arch.time_embedding = meta.at("arch").at("time_embedding").get<std::size_t>();
  MlpDenoiser net(meta.at("latent_dim").get<std::size_t>(), arch, 0);
  net.set_parameters(read_container(ws.path("denoiser.csem")).values);
  return net;
}

/// Reverse-diffusion sampling of synthetic q-maps.
inline void sample(const Workspace& ws) {
  const PcaModel pca = load_pca(ws);
  const MlpDenoiser net = load_denoiser(ws);
  if (net.latent_dim() != pca.k()) throw DataError("denoiser and pca latent sizes differ", "dimension");
  const std::uint64_t seed = ws.diffusion_seed();
  const auto maps = generate_qmaps(pca, ws.config.schedule(), net.as_denoiser(), ws.config.dataset.synthetic_count,
                                   derive_seed(seed, 0x47454E00ull /* "GEN" */), ws.config.diffusion.sampler);
  json seeds = read_sidecar(ws, "denoiser.csem").at("seeds");
  seeds["sampling"] = seed;
  write_with_sidecar(ws, "synthetic_qmaps.csem", pack_qmaps(maps), "sample", seeds,
                     {{"pixel_size_mm", pca.layout.pixel_size_mm},
                      {"channels", kQMapChannels},
                      {"sampler", ws.config.diffusion.sampler == SamplerKind::Ancestral ? "ancestral" : "paper_literal"},
                      {"set", "synthetic"}});
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

/// Averages consecutive groups of per-slice values into per-subject values.
inline std::vector<double> group_values(const std::vector<double>& v, std::size_t per_group) {
  if (per_group <= 1) return v;
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); i += per_group) {
    const std::size_t end = std::min(v.size(), i + per_group);
    double s = 0.0;
    for (std::size_t j = i; j < end; ++j) s += v[j];
    out.push_back(s / static_cast<double>(end - i));
  }
  return out;
}

struct QuantificationRow {
  std::string method;
  SummaryStat mae, rhl, lhl;
  std::vector<std::pair<double, double>> roi_pairs;  // (estimate, reference) ROI medians in percent
};

inline QuantificationRow quantify(const std::string& method, const PhantomSet& ref, const std::vector<QMaps>& est,
                                  std::size_t per_group) {
  if (est.size() != ref.qmaps.size() || ref.rois.size() != est.size()) throw DataError("fit and reference stacks differ in length", "dimension");
  std::vector<double> mae, rhl, lhl;
  QuantificationRow row;
  row.method = method;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const RealMap pe = pdff_map(est[i]), pr = pdff_map(ref.qmaps[i]);
    mae.push_back(pdff_mae(pe, pr, foreground(ref.labels[i])));
    const RoiBias b = roi_bias(pe, pr, ref.rois[i]);
    rhl.push_back(b.rhl);
    lhl.push_back(b.lhl);
    for (const Roi* roi : {&ref.rois[i].rhl, &ref.rois[i].lhl}) {
      row.roi_pairs.emplace_back(100.0 * median(masked_values(pe, roi->mask)), 100.0 * median(masked_values(pr, roi->mask)));
    }
  }
  row.mae = summarize(group_values(mae, per_group));
  row.rhl = summarize(group_values(rhl, per_group));
  row.lhl = summarize(group_values(lhl, per_group));
  return row;
}

inline std::string table2_csv(const std::vector<QuantificationRow>& rows) {
  std::ostringstream os;
  os << "method,n,MAE,MAE_ci95,RHL_bias,RHL_ci95,LHL_bias,LHL_ci95\n";
  for (const auto& r : rows) {
    os << r.method << "," << r.mae.n << "," << fmt(r.mae.mean) << "," << fmt(r.mae.ci95) << "," << fmt(r.rhl.mean) << ","
       << fmt(r.rhl.ci95) << "," << fmt(r.lhl.mean) << "," << fmt(r.lhl.ci95) << "\n";
  }
  return os.str();
}

inline std::string metrics_csv(const std::vector<QuantificationRow>& rows) {
  std::ostringstream os;
  os << "method,metric,roi,n,value,ci95\n";
  for (const auto& r : rows) {
    os << r.method << ",pdff_mae,foreground," << r.mae.n << "," << fmt(r.mae.mean) << "," << fmt(r.mae.ci95) << "\n";
    os << r.method << ",roi_bias,RHL," << r.rhl.n << "," << fmt(r.rhl.mean) << "," << fmt(r.rhl.ci95) << "\n";
    os << r.method << ",roi_bias,LHL," << r.lhl.n << "," << fmt(r.lhl.mean) << "," << fmt(r.lhl.ci95) << "\n";
  }
  return os.str();
}

inline std::string protocol_label(const EchoProtocol& p) {
  std::ostringstream os;
  os << std::setprecision(4) << p.echo_times().front() * 1e3 << "/" << p.delta_te() * 1e3 << "ms x" << p.echo_count();
  return os.str();
}

inline std::vector<RealMap> first_echo_magnitudes(const std::vector<QMaps>& maps, const EchoProtocol& protocol,
                                                  const FatSpectrum& spectrum) {
  std::vector<RealMap> out;
  for (const auto& q : maps) {
    const auto s = forward_signal_shared_phase(q, protocol, spectrum);
    RealMap m(q.height(), q.width());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::abs(s.echoes.front()[i]);
    out.push_back(std::move(m));
  }
  return out;
}

struct GenerativeRow {
  std::string dataset;
  std::size_t n = 0;
  double mmd = 0.0;
  DiversityStats diversity;
};

inline GenerativeRow generative_row(const std::string& name, const std::vector<RealMap>& images,
                                    const std::vector<RealMap>& reference, std::size_t pairs, std::uint64_t seed) {
  GenerativeRow row;
  row.dataset = name;
  row.n = images.size();
  row.mmd = mmd_gaussian(unit_mean_features(images), unit_mean_features(reference));
  double peak = 0.0;
  for (const auto& im : images) peak = std::max(peak, *std::max_element(im.begin(), im.end()));
  SsimParams params;
  params.data_range = peak > 0.0 ? peak : 1.0;
  row.diversity = pairwise_diversity(images, pairs, seed, params);
  return row;
}

inline std::string table1_csv(const std::vector<GenerativeRow>& rows) {
  std::ostringstream os;
  os << "dataset,n,MMD,SSIM,MS_SSIM\n";
  for (const auto& r : rows) {
    os << r.dataset << "," << r.n << "," << fmt(r.mmd) << "," << fmt(r.diversity.mean_ssim) << ","
       << (r.diversity.mean_ms_ssim ? fmt(*r.diversity.mean_ms_ssim) : std::string("NA")) << "\n";
  }
  return os.str();
}

/// Quantification accuracy of the fit against the ground truth, plus generative metrics when synthetic maps exist.
inline void evaluate(const Workspace& ws, const std::string& method = "wf-fit") {
  check_hash(ws, "test_qmaps.csem");
  check_hash(ws, "test_fit.csem");
  const PhantomSet ref = load_phantoms(ws, "test");
  const auto est = unpack_qmaps(read_container(ws.path("test_fit.csem")), ws.config.phantom.pixel_size_mm);
  const auto row = quantify(method, ref, est, ws.config.dataset.slices_per_subject);
  write_text(ws.path("table2.csv"), table2_csv({row}));
  write_text(ws.path("metrics.csv"), metrics_csv({row}));

  if (ws.exists("synthetic_qmaps.csem")) {
    check_hash(ws, "synthetic_qmaps.csem");
    const EchoProtocol protocol = ws.protocol();
    const FatSpectrum spectrum = ws.spectrum();
    const auto synth = unpack_qmaps(read_container(ws.path("synthetic_qmaps.csem")), ws.config.phantom.pixel_size_mm);
    const auto test_img = first_echo_magnitudes(ref.qmaps, protocol, spectrum);
    std::vector<GenerativeRow> rows;
    const std::uint64_t seed = derive_seed(ws.diffusion_seed(), 0x44495600ull /* "DIV" */);
    if (ws.exists("train_qmaps.csem")) {
      const auto train = unpack_qmaps(read_container(ws.path("train_qmaps.csem")), ws.config.phantom.pixel_size_mm);
      rows.push_back(generative_row("real-analog", first_echo_magnitudes(train, protocol, spectrum), test_img,
                                    ws.config.dataset.diversity_pairs, seed));
    }
    rows.push_back(generative_row("synthetic", first_echo_magnitudes(synth, protocol, spectrum), test_img,
                                  ws.config.dataset.diversity_pairs, seed));
    write_text(ws.path("table1.csv"), table1_csv(rows));
  }
}

inline std::string bland_altman_csv(const std::vector<std::pair<double, double>>& pairs, const BlandAltmanStats& s) {
  std::ostringstream os;
  os << "# difference = estimate - reference (PDFF percentage points)\n";
  os << "index,estimate,reference,mean,difference\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [e, r] = pairs[i];
    os << i << "," << fmt(e) << "," << fmt(r) << "," << fmt(0.5 * (e + r)) << "," << fmt(e - r) << "\n";
  }
  os << "# n=" << s.n << " bias=" << fmt(s.bias) << " sd=" << fmt(s.sd) << " loa_low=" << fmt(s.loa_low)
     << " loa_high=" << fmt(s.loa_high) << "\n";
  return os.str();
}

/// ROI-median agreement between the fit and the ground truth.
inline void bland_altman_stage(const Workspace& ws) {
  check_hash(ws, "test_qmaps.csem");
  check_hash(ws, "test_fit.csem");
  const PhantomSet ref = load_phantoms(ws, "test");
  const auto est = unpack_qmaps(read_container(ws.path("test_fit.csem")), ws.config.phantom.pixel_size_mm);
  const auto row = quantify("wf-fit", ref, est, 1);
  const auto stats = bland_altman(row.roi_pairs);
  write_text(ws.path("bland_altman.csv"), bland_altman_csv(row.roi_pairs, stats));
  write_text(ws.path("bland_altman.svg"), bland_altman_svg(row.roi_pairs, stats, "wf-fit vs ground truth (ROI medians)"));
}

// ---------------------------------------------------------------------------
// Full chain

/// Simulates the same q-maps under each protocol variant (identical maps, different echoes).
inline std::vector<fs::path> protocol_variants(const Workspace& ws, const std::vector<ProtocolSpec>& variants) {
  std::vector<fs::path> dirs;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const fs::path dir = ws.dir / ("variant_" + std::to_string(v));
    fs::create_directories(dir);
    for (const std::string name : {"test_qmaps.csem", "test_labels.csem"}) {
      fs::copy_file(ws.path(name), dir / name, fs::copy_options::overwrite_existing);
      fs::copy_file(sidecar_path(ws.path(name)), sidecar_path(dir / name), fs::copy_options::overwrite_existing);
    }
    Overrides ov = ws.overrides;
    ov.protocol = variants[v];
    Workspace sub(ws.config, dir, ov);
    simulate(sub);
    json side = read_sidecar(sub, "test_echoes.csem");
    side["metadata"]["variant"] = {{"index", v}, {"label", protocol_label(variants[v].build())}};
    write_text(sidecar_path(sub.path("test_echoes.csem")), side.dump(2) + "\n");
    dirs.push_back(dir);
  }
  return dirs;
}

/// generate -> embed -> diffuse -> sample -> simulate -> corrupt -> fit -> evaluate, per protocol.
inline void experiment(const Workspace& ws) {
  generate_phantoms(ws);
  if (ws.config.dataset.real_count > 0 && ws.config.dataset.synthetic_count > 0) {
    train_latent(ws);
    train_diffusion(ws);
    sample(ws);
  }
  simulate(ws);
  corrupt(ws);
  fit(ws);
  evaluate(ws, "wf-fit[" + protocol_label(ws.protocol()) + "]");
  bland_altman_stage(ws);

  const fs::path report = ws.dir / "report";
  fs::create_directories(report);
  const PhantomSet ref = load_phantoms(ws, "test");
  std::vector<QuantificationRow> rows;
  {
    const auto est = unpack_qmaps(read_container(ws.path("test_fit.csem")), ws.config.phantom.pixel_size_mm);
    rows.push_back(quantify("wf-fit[" + protocol_label(ws.protocol()) + "]", ref, est, ws.config.dataset.slices_per_subject));
  }
  const auto dirs = protocol_variants(ws, ws.config.protocol_variants);
  for (std::size_t v = 0; v < dirs.size(); ++v) {
    Overrides ov = ws.overrides;
    ov.protocol = ws.config.protocol_variants[v];
    Workspace sub(ws.config, dirs[v], ov);
    corrupt(sub);
    fit(sub);
    evaluate(sub, "wf-fit[" + protocol_label(sub.protocol()) + "]");
    const auto est = unpack_qmaps(read_container(sub.path("test_fit.csem")), ws.config.phantom.pixel_size_mm);
    rows.push_back(quantify("wf-fit[" + protocol_label(sub.protocol()) + "]", ref, est, ws.config.dataset.slices_per_subject));
  }
  write_text(report / "table2.csv", table2_csv(rows));
  write_text(report / "metrics.csv", metrics_csv(rows));
  if (ws.exists("table1.csv")) fs::copy_file(ws.path("table1.csv"), report / "table1.csv", fs::copy_options::overwrite_existing);
  fs::copy_file(ws.path("bland_altman.csv"), report / "bland_altman.csv", fs::copy_options::overwrite_existing);
  fs::copy_file(ws.path("bland_altman.svg"), report / "bland_altman.svg", fs::copy_options::overwrite_existing);

  const json manifest = {{"real_analog", {{"count", ws.config.dataset.real_count}, {"qmaps", "train_qmaps.csem"}, {"echoes", "train_echoes.csem"}}},
                         {"synthetic", {{"count", ws.exists("synthetic_qmaps.csem") ? ws.config.dataset.synthetic_count : 0},
                                        {"qmaps", "synthetic_qmaps.csem"},
                                        {"echoes", "synthetic_echoes.csem"}}},
                         {"test", {{"count", ws.config.dataset.test_count}}},
                         {"config_hash", ws.config_hash},
                         {"resolved_config", to_json(ws.config)},
                         {"notes", "FID is not computed; MMD and SSIM-family metrics cover distributional quality and diversity."}};
  write_text(report / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace csesim::pipeline
