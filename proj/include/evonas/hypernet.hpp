#pragma once

// Weight-sharing hyper-network over the genome search space, single-path
// training, candidate evaluation with inherited weights, and sub-network
// extraction/retraining.
//
// Choice-block topology:
//   stem conv3x3 (1 -> F) + relu
//   per block i: [stride-2 conv3x3 + relu doubling channels, if i is a
//   reduction position] then the sum of the block's 1 or 2 chosen ops
//   adaptive avg pool 1x1 -> tail.dense1 (embedding) -> relu -> tail.dense2
//   -> relu -> head (softmax logits)
// Conv ops are relu(conv kxk, same padding); maxpool is 3x3/s1/p1.
//
// TDNN topology: five spliced frame-affine layers + relu, statistics
// pooling, then the same tail.
//
// Parameter names: stem.*, block<i>.<op>.*, block<i>.reduce.*,
// block<i>.ctx<c>.*, tail.dense1.*, tail.dense2.*, head.weight/bias and the
// GE2E scale head.score_w / head.score_b.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "evonas/audio.hpp"
#include "evonas/corpus.hpp"
#include "evonas/optim.hpp"
#include "evonas/search_space.hpp"
#include "evonas/tensor.hpp"
#include "evonas/verifier.hpp"

namespace evonas {

struct HyperNetConfig {
  SpaceMode mode = SpaceMode::AutoVector;
  std::size_t filters = 8;  // F: stem output channels
  std::size_t blocks = 6;   // B
  std::size_t embedding_dim = 512;
  // Blocks preceded by a stride-2 reduction; unset means {floor(B/3), floor(2B/3)}.
  std::optional<std::vector<std::size_t>> reduction_positions;
  double path_dropout = 0.1;
  std::size_t n_train_speakers = 0;  // softmax head rows; 0 = no head
  std::vector<std::size_t> tdnn_widths = {512, 512, 512, 512, 1500};
  // Adaptive average pooling of the 40 x T input before the stem; 0 keeps
  // that axis at full resolution. TDNN mode only pools the time axis.
  std::size_t input_pool_rows = 0;
  std::size_t input_pool_frames = 0;
  std::uint64_t seed = 0;

  std::vector<std::size_t> reductions() const;
  SpaceConfig space() const;
  // Throws ConfigError.
  void validate() const;
};

// Per block, the multiplier of each chosen op (canonical order); 0 drops it.
using PathScales = std::vector<std::vector<double>>;

// Draws path dropout for g: in two-op blocks each op is dropped with
// probability p, redrawn if both drop; kept ops are scaled by 1/(1-p).
PathScales sample_path_dropout(const Genome& g, double p, Rng& rng);

// Network input: [1, rows, frames] (choice blocks) or [rows, frames] (TDNN),
// after the configured input pooling.
Tensor prepare_input(const HyperNetConfig& cfg, const FeatureMatrix& x);

// Embedding of a prepared input through the ops named by g. Every parameter
// the path needs must be present in `params`.
Tensor network_embedding(const HyperNetConfig& cfg, const ParameterStore& params, const Genome& g,
                         const Tensor& input, const PathScales* scales = nullptr);
// relu(embedding) -> dense2 -> relu -> head.
Tensor network_logits(const ParameterStore& params, const Tensor& embedding);
ScoreParams score_params(const ParameterStore& params);

class HyperNet {
 public:
  // Kaiming-normal weights (std sqrt(2 / fan_in)), zero biases, w = 10, b = -5.
  static HyperNet build(const HyperNetConfig& cfg);

  const HyperNetConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::size_t parameter_count() const { return params_.parameter_count(); }

  // Throws ContractError when g does not fit the network.
  void check_genome(const Genome& g) const;
  Tensor forward(const Genome& g, const FeatureMatrix& x, const PathScales* scales = nullptr) const;

  // Replaces the weights; names and shapes must match the built network.
  void load_params(const ParameterStore& loaded);

 private:
  HyperNetConfig config_;
  ParameterStore params_;
};

// A standalone network holding only the weights one genome uses.
struct SubNet {
  HyperNetConfig config;
  Genome genome;
  ParameterStore params;

  Tensor forward(const FeatureMatrix& x) const;
  std::size_t parameter_count() const { return params.parameter_count(); }
};

// Parameter names used by g (including the tail and head).
std::vector<std::string> path_parameter_names(const HyperNetConfig& cfg, const Genome& g);
SubNet extract_subnet(const HyperNet& h, const Genome& g);
// Rebuilds a SubNet from its stored parameters.
SubNet load_subnet(const HyperNetConfig& cfg, const Genome& g, const ParameterStore& params);

enum class LossMode { Softmax, Ge2e };

struct TrainConfig {
  std::size_t softmax_steps = 0;  // warm-up, run first
  std::size_t ge2e_steps = 200;
  std::size_t batch_speakers = 8;
  std::size_t batch_utterances = 5;
  double base_lr = 0.02;
  std::uint64_t seed = 0;

  std::size_t total_steps() const { return softmax_steps + ge2e_steps; }
  LossMode mode_at(std::size_t step) const { return step < softmax_steps ? LossMode::Softmax : LossMode::Ge2e; }
  // base_lr * (N - 1 - step) / (N - 1): linear decay, exactly 0 at the last step.
  double lr_at(std::size_t step) const;
};

struct LossRecord {
  std::size_t step = 0;
  LossMode mode = LossMode::Ge2e;
  double lr = 0.0;
  double loss = 0.0;
};

// Optimiser state carried across resumed runs.
struct TrainState {
  std::size_t step = 0;
  Adam adam;
  std::vector<LossRecord> trace;
};

// Pre-pooled training inputs grouped by training speaker.
struct TrainData {
  std::vector<std::vector<Tensor>> by_speaker;
  static TrainData from_corpus(const Corpus& corpus, const HyperNetConfig& cfg);
};

using GenomeSampler = std::function<Genome(Rng&)>;
// Called after every completed step (state.step already advanced).
using StepCallback = std::function<void(const TrainState&)>;

// Runs steps state.step .. total_steps()-1. Each step draws a genome
// (uniformly unless `sampler` is given), a batch of batch_speakers x
// batch_utterances, applies path dropout, and Adam-updates only the weights
// that received a gradient. Step randomness derives from (seed, step), so a
// resumed run matches an uninterrupted one. Throws ConfigError when the
// corpus is too small for the batch shape.
void train_hypernet(HyperNet& h, const TrainData& data, const TrainConfig& cfg, TrainState& state,
                    const GenomeSampler& sampler = {}, const StepCallback& after_step = {});
// The same loop on a fixed architecture without path dropout.
void retrain(SubNet& net, const TrainData& data, const TrainConfig& cfg, TrainState& state,
             const StepCallback& after_step = {});

// Weights + Adam moments + "train.step" in the checkpoint format.
void save_training_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const TrainState& state);
// Loads into `params` (names must already exist) and returns the state;
// the loss trace is not restored.
TrainState load_training_checkpoint(const std::filesystem::path& path, ParameterStore& params);

// Enrollment/eval utterances with pre-pooled inputs and the trial list.
struct EvalData {
  TrialSet trials;
  std::vector<std::string> ids;
  std::vector<Tensor> inputs;
  static EvalData from_corpus(const Corpus& corpus, const HyperNetConfig& cfg);
};

struct EvalResult {
  double eer = 0.0;           // folded, in [0, 0.5]
  double eer_unfolded = 0.0;  // before min(e, 1-e)
  ScoreSet scores;            // in trial order
};

EmbeddingTable embed_all(const HyperNetConfig& cfg, const ParameterStore& params, const Genome& g, const EvalData& data);
// Deterministic: no dropout, no gradient tracking.
EvalResult evaluate_candidate(const HyperNet& h, const Genome& g, const EvalData& data);
EvalResult evaluate_subnet(const SubNet& net, const EvalData& data);

}  // namespace evonas
