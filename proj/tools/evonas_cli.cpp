// evonas: command-line driver for the experiment stages.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "evonas/errors.hpp"
#include "evonas/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

void print_record(const evonas::StageRecord& r) {
  const bool complete = r.summary.value("complete", true);
  std::cout << r.name << "@v" << r.version << (complete ? " -> " : " (incomplete) -> ") << r.dir;
  if (complete) std::cout << "  [" << r.wall_clock_seconds << " s]";
  std::cout << "\n" << r.summary.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memetic architecture search for speaker verification"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  app.add_option("--config", config_path, "Experiment TOML file")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Master seed (overrides the config)");
  app.add_option("--out", out, "Output directory (overrides the config)");

  bool resume = false;
  std::optional<std::size_t> max_steps;
  std::string genome_text;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  auto* feat = app.add_subcommand("extract-features", "Extract MFCC features from a WAV corpus");
  auto* train = app.add_subcommand("train-hypernet", "Train the weight-sharing hyper-network");
  train->add_flag("--resume", resume, "Continue the newest interrupted run");
  train->add_option("--max-steps", max_steps, "Stop after this many steps (resume later)");
  auto* search = app.add_subcommand("search", "Run the memetic search (and the random baseline)");
  auto* re = app.add_subcommand("retrain", "Retrain the searched and baseline architectures");
  re->add_option("--genome", genome_text, "Architecture to retrain instead of the search result");
  auto* eval = app.add_subcommand("evaluate", "Score the retrained systems on the test trials");
  auto* report = app.add_subcommand("report", "Write the results table and report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    evonas::ExperimentConfig cfg = evonas::ExperimentConfig::load(config_path);
    if (seed) cfg.apply_seed(*seed);
    if (!out.empty()) cfg.out = out;
    cfg.validate();

    evonas::StageRecord record;
    if (gen->parsed()) {
      record = evonas::cmd_gen_data(cfg);
    } else if (feat->parsed()) {
      record = evonas::cmd_extract_features(cfg);
    } else if (train->parsed()) {
      record = evonas::cmd_train_hypernet(cfg, resume, max_steps);
    } else if (search->parsed()) {
      record = evonas::cmd_search(cfg);
    } else if (re->parsed()) {
      std::optional<evonas::Genome> genome;
      if (!genome_text.empty()) {
        try {
          genome = evonas::decode(genome_text);
        } catch (const std::exception& e) {
          throw evonas::ConfigError(std::string("--genome: ") + e.what());
        }
      }
      record = evonas::cmd_retrain(cfg, genome);
    } else if (eval->parsed()) {
      record = evonas::cmd_evaluate(cfg);
    } else if (report->parsed()) {
      record = evonas::cmd_report(cfg);
    }
    print_record(record);
    return 0;
  } catch (const evonas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
