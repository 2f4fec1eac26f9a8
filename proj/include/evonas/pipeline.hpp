#pragma once

// Experiment orchestration: TOML configuration, versioned immutable stage
// directories under one output directory, the run manifest, and the stage
// commands behind the CLI.
//
// Layout of an output directory:
//   manifest.json            config snapshot, versions, one record per stage
//   <stage>/v<N>/...         committed, never modified again
//   <stage>/v<N>.partial/    in progress (train-hypernet resumes from here)

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evonas/corpus.hpp"
#include "evonas/evosearch.hpp"
#include "evonas/hypernet.hpp"

namespace evonas {

// A stage's inputs are missing or damaged, or it cannot write its outputs.
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CorpusKind { Synthetic, Wav };

struct CorpusSpec {
  CorpusKind kind = CorpusKind::Synthetic;
  SyntheticCorpusConfig synthetic;
  std::filesystem::path wav_root;  // <root>/<speaker>/*.wav
  std::size_t wav_eval_speakers = 10;
  std::size_t wav_enroll = 5;
};

struct RetrainSpec {
  TrainConfig train;
  // Hand-designed comparison architecture; defaults to all-conv3x3 blocks
  // (or the x-vector windows in TDNN mode).
  std::optional<Genome> baseline;
  bool from_scratch = false;  // false: start from the hyper-network's weights
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";
  CorpusSpec corpus;
  HyperNetConfig hypernet;
  TrainConfig train;
  std::size_t checkpoint_every = 100;
  SearchConfig search;
  // Evaluation speakers used as the search's development set (the first ones
  // in sorted order); the rest are only used for final evaluation.
  std::size_t dev_speakers = 0;
  bool random_baseline = true;  // also run random search at the same budget
  RetrainSpec retrain;

  // Throws ConfigError (syntax, unknown keys, wrong types, invalid values).
  // Relative paths resolve against base_dir.
  static ExperimentConfig parse(std::string_view toml_text, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);

  // Sets the master seed and every per-module seed derived from it.
  void apply_seed(std::uint64_t master);
  Genome baseline_genome() const;
  // Cross-module checks, run before any compute. Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
};

// Independent per-module stream from the master seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);

// Lower-case hex SHA-256 of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);

struct StageRecord {
  std::string name;
  std::size_t version = 0;
  std::string dir;  // relative to the output directory
  std::map<std::string, std::string> checksums;  // file (relative to dir) -> sha256
  std::vector<std::string> inputs;               // "<stage>@v<N>"
  double wall_clock_seconds = 0.0;
  nlohmann::json summary;
};

struct RunManifest {
  nlohmann::json config;
  std::map<std::string, StageRecord> stages;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  // <out>/manifest.json, written atomically.
  void save(const std::filesystem::path& out) const;
  // An empty manifest when none exists yet.
  static RunManifest load(const std::filesystem::path& out);
};

// Stage names as recorded in the manifest.
inline constexpr std::string_view kStageData = "data";
inline constexpr std::string_view kStageHypernet = "hypernet";
inline constexpr std::string_view kStageSearch = "search";
inline constexpr std::string_view kStageRetrain = "retrain";
inline constexpr std::string_view kStageEvaluate = "evaluate";
inline constexpr std::string_view kStageReport = "report";

// Committed directory of a stage; StageError naming the command to run
// when the stage is missing, or when a recorded checksum no longer matches.
std::filesystem::path stage_path(const std::filesystem::path& out, const RunManifest& manifest, std::string_view stage);

// Stage commands. Each reads its inputs through the manifest, writes a new
// version directory and records it.
StageRecord cmd_gen_data(const ExperimentConfig& cfg);
StageRecord cmd_extract_features(const ExperimentConfig& cfg);
// Continues the newest unfinished run when `resume` is set. With
// `max_steps`, stops after that many steps of this invocation and leaves the
// checkpointed partial directory for a later resume (summary "complete": false).
StageRecord cmd_train_hypernet(const ExperimentConfig& cfg, bool resume = false,
                               std::optional<std::size_t> max_steps = std::nullopt);
StageRecord cmd_search(const ExperimentConfig& cfg);
// Retrains `genome` (default: the searched one) and the baseline.
StageRecord cmd_retrain(const ExperimentConfig& cfg, const std::optional<Genome>& genome = std::nullopt);
StageRecord cmd_evaluate(const ExperimentConfig& cfg);
StageRecord cmd_report(const ExperimentConfig& cfg);

// The development / test partition of the corpus's evaluation speakers.
struct EvalSplit {
  Corpus dev;   // train + the first dev_speakers evaluation speakers
  Corpus test;  // train + the remaining evaluation speakers
};
EvalSplit split_eval_speakers(const Corpus& corpus, std::size_t dev_speakers);

}  // namespace evonas
