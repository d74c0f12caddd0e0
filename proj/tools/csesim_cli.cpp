#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "csesim/pipeline.hpp"

namespace {

using namespace csesim;
namespace pl = csesim::pipeline;

double parse_snr(const std::string& text) {
  if (text == "inf" || text == "Inf" || text == "INF") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !(v > 0.0)) throw std::invalid_argument(text);
    return v;
  } catch (const std::logic_error&) {
    throw UsageError("--snr expects a positive number or inf, got '" + text + "'", "bad_flag");
  }
}

// "te1,dte,n" with times in milliseconds; field strength comes from the config.
ProtocolSpec parse_protocol_flag(const std::string& text, double field_strength) {
  std::stringstream ss(text);
  std::string item;
  std::vector<std::string> parts;
  while (std::getline(ss, item, ',')) parts.push_back(item);
  if (parts.size() != 3) throw UsageError("--protocol expects te1,dte,n (ms), got '" + text + "'", "bad_flag");
  ProtocolSpec p;
  try {
    p.te1 = std::stod(parts[0]) * 1e-3;
    p.delta_te = std::stod(parts[1]) * 1e-3;
    const long n = std::stol(parts[2]);
    if (n < 1) throw std::invalid_argument(parts[2]);
    p.n = static_cast<std::size_t>(n);
  } catch (const std::logic_error&) {
    throw UsageError("--protocol expects te1,dte,n (ms), got '" + text + "'", "bad_flag");
  }
  p.field_strength = field_strength;
  try {
    p.build();
  } catch (const Error& e) {
    throw UsageError(std::string("--protocol: ") + e.what(), "bad_flag");
  }
  return p;
}

std::size_t env_threads() {
  const char* v = std::getenv("CSESIM_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError(std::string("CSESIM_THREADS must be a positive integer, got '") + v + "'", "bad_env");
  return static_cast<std::size_t>(n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chemical-shift-encoded MRI simulation, synthesis and water-fat fitting"};
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, snr_text, protocol_text;
  std::uint64_t seed = 0;
  bool force = false;

  const std::vector<std::string> names = {"generate-phantoms", "simulate", "corrupt", "fit", "train-latent",
                                          "train-diffusion", "sample", "evaluate", "bland-altman", "experiment"};
  for (const auto& name : names) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment configuration (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory (defaults to the config's output_dir)");
    sub->add_option("--seed", seed, "override the stage seed");
    sub->add_option("--snr", snr_text, "override noise SNR (number or inf)");
    sub->add_option("--protocol", protocol_text, "override protocol as te1,dte,n in milliseconds");
    sub->add_flag("--force", force, "accept inputs produced under a different config hash");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << pl::error_line(UsageError(e.what(), "bad_flag")) << "\n";
    return 1;
  }

  try {
    ExperimentConfig cfg = load_config(config_path);
    const std::string hash = config_hash(cfg);
    cfg.fit.threads = env_threads();
    CLI::App* active = app.get_subcommands().front();
    pl::Overrides ov;
    if (active->get_option("--seed")->count() > 0) ov.seed = seed;
    if (!snr_text.empty()) ov.snr = parse_snr(snr_text);
    if (!protocol_text.empty()) ov.protocol = parse_protocol_flag(protocol_text, cfg.protocol.field_strength);
    ov.force = force;
    if (out_dir.empty()) {
      if (!cfg.output_dir) throw UsageError("no --out given and config has no output_dir", "missing_output");
      out_dir = *cfg.output_dir;
    }
    pl::Workspace ws(cfg, out_dir, ov);
    ws.config_hash = hash;
    pl::DirectoryLock lock(ws.dir);

    const std::string cmd = active->get_name();
    if (cmd == "generate-phantoms") pl::generate_phantoms(ws);
    else if (cmd == "simulate") pl::simulate(ws);
    else if (cmd == "corrupt") pl::corrupt(ws);
    else if (cmd == "fit") pl::fit(ws);
    else if (cmd == "train-latent") pl::train_latent(ws);
    else if (cmd == "train-diffusion") pl::train_diffusion(ws);
    else if (cmd == "sample") pl::sample(ws);
    else if (cmd == "evaluate") pl::evaluate(ws);
    else if (cmd == "bland-altman") pl::bland_altman_stage(ws);
    else if (cmd == "experiment") pl::experiment(ws);
  } catch (const Error& e) {
    std::cerr << pl::error_line(e) << "\n";
    return pl::exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << pl::error_line(UsageError(e.what(), "filesystem")) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << pl::error_line(NumericError(e.what())) << "\n";
    return 4;
  }
  return 0;
}
