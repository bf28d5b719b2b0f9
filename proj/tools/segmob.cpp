// segmob command-line driver.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "segmob/segmob.hpp"

namespace fs = std::filesystem;
using namespace segmob;

namespace {

std::optional<fs::path> env_output_root() {
  const char* v = std::getenv("SEGMOB_OUT");
  if (v && *v) return fs::path(v);
  return std::nullopt;
}

fs::path run_output_dir(const std::string& out_flag, const std::string& config) {
  if (!out_flag.empty()) return out_flag;
  if (auto env = env_output_root()) return *env;
  return pipeline::resolve_output_dir({}, load_run_config(config));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segmob: mobility segregation measurement pipeline"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic city with planted segregation structure");
  std::string synth_config, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--config", synth_config, "Synthetic city spec (key = value)")->required()->check(CLI::ExistingFile);
  synth->add_option("--seed", synth_seed, "Override the city config's RNG seed");
  synth->add_option("--out", synth_out, "Output directory (default: $SEGMOB_OUT/city or ./city)");

  // run
  auto* run = app.add_subcommand("run", "Run the pipeline (all stages, resuming completed ones)");
  std::string run_config, run_stage, run_out;
  bool lenient = false, force = false;
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  run->add_option("--config", run_config, "Run configuration")->required()->check(CLI::ExistingFile);
  run->add_option("--stage", run_stage, "Run only this stage: ingest|infer|label|matrices|entropy|stats");
  run->add_flag("--lenient", lenient, "Skip malformed trajectory rows instead of failing");
  run->add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);
  run->add_flag("--force", force, "Ignore completed-stage markers and recompute");
  run->add_option("--out", run_out, "Output root (overrides SEGMOB_OUT and config output_dir)");

  // emit-plots
  auto* plots = app.add_subcommand("emit-plots", "Write plot-ready CSV tables from a finished run");
  std::string plots_config, plots_out;
  plots->add_option("--config", plots_config, "Run configuration used for the run")->check(CLI::ExistingFile);
  plots->add_option("--out", plots_out, "Output root of the run");

  // suggest-breakpoints
  auto* bp = app.add_subcommand("suggest-breakpoints", "List dates where restriction levels jump");
  std::string bp_config, bp_stringency;
  double min_jump = 1.0;
  bp->add_option("--config", bp_config, "Run configuration (uses its stringency input)")->check(CLI::ExistingFile);
  bp->add_option("--stringency", bp_stringency, "Stringency CSV")->check(CLI::ExistingFile);
  bp->add_option("--min-jump", min_jump, "Minimum level change on a single restriction");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      auto spec = synth::synth_spec_from(load_config_file(synth_config));
      if (synth_seed) spec.seed = *synth_seed;
      fs::path out = synth_out.empty() ? (env_output_root().value_or(fs::path(".")) / "city") : fs::path(synth_out);
      const auto city = synth::generate_city(spec);
      const auto files = synth::write_city(city, out);
      std::cout << "wrote " << city.trajectories.size() << " stay records for " << city.users.size() << " users to "
                << out.string() << "\n  run config: " << files.run_config.string() << '\n';
    } else if (*run) {
      pipeline::Options opts;
      opts.config_path = run_config;
      if (!run_stage.empty()) opts.only = pipeline::parse_stage(run_stage);
      if (!run_out.empty()) opts.output_root = fs::path(run_out);
      else opts.output_root = env_output_root();
      opts.lenient = lenient;
      opts.threads = threads;
      opts.force = force;
      pipeline::Pipeline p(opts);
      p.run();
      std::cout << "output: " << p.output_dir().string() << '\n';
    } else if (*plots) {
      if (plots_out.empty() && plots_config.empty() && !env_output_root())
        throw Error("emit-plots needs --out, --config or SEGMOB_OUT");
      const fs::path out = plots_config.empty() && plots_out.empty() ? *env_output_root()
                                                                      : run_output_dir(plots_out, plots_config);
      const auto files = pipeline::emit_plots(out);
      std::cout << "plots written to " << (out / "plots").string() << '\n';
      (void)files;
    } else if (*bp) {
      fs::path path;
      if (!bp_stringency.empty()) path = bp_stringency;
      else if (!bp_config.empty()) path = load_run_config(bp_config).stringency;
      else throw Error("suggest-breakpoints needs --stringency or --config");
      const auto series = load_stringency(path);
      std::cout << "date\n";
      for (auto d : suggest_breakpoints(series.records, min_jump)) std::cout << format_date(d) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "segmob: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
