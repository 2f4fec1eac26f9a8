#pragma once

// Speaker-verification losses and metrics.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "evonas/tensor.hpp"

namespace evonas {

// d(a, p) = w * cos(a, p) + b. w stays above kMinScoreScale.
struct ScoreParams {
  double w = 10.0;
  double b = -5.0;
};
inline constexpr double kMinScoreScale = 1e-6;

Tensor scaled_similarity(const Tensor& a, const Tensor& p, const Tensor& w, const Tensor& b);
double scaled_similarity(std::span<const double> a, std::span<const double> p, const ScoreParams& params);

// N speakers x M utterances of equal-length embeddings.
struct EmbeddingBatch {
  std::vector<std::vector<Tensor>> embeddings;

  std::size_t speakers() const { return embeddings.size(); }
  std::size_t utterances() const { return embeddings.empty() ? 0 : embeddings.front().size(); }
  // Throws ContractError unless N >= 2, M >= 2 and the batch is rectangular.
  void check() const;
};

// Mean of speaker k's embeddings, optionally leaving utterance `exclude` out.
Tensor centroid(const EmbeddingBatch& batch, std::size_t speaker, std::optional<std::size_t> exclude = std::nullopt);

// Per anchor (speaker j, utterance i):
//   1 - sigmoid(d(e, centroid_j without e)) + max_{k != j} sigmoid(d(e, centroid_k)).
// Returned in speaker-major order.
std::vector<Tensor> ge2e_anchor_losses(const EmbeddingBatch& batch, const Tensor& w, const Tensor& b);
// Mean of ge2e_anchor_losses.
Tensor ge2e_style_loss(const EmbeddingBatch& batch, const Tensor& w, const Tensor& b);

// log-sum-exp cross-entropy of logits [n] against `label`.
Tensor softmax_xent_loss(const Tensor& logits, std::size_t label);

struct Trial {
  std::string enroll_speaker;
  std::string test_utterance;
  bool target = false;
};

struct TrialSet {
  std::vector<Trial> trials;
  // Speaker -> enrollment utterance ids.
  std::map<std::string, std::vector<std::string>> enrollment;

  // Every test utterance against every enrolled speaker.
  static TrialSet cross(const std::map<std::string, std::vector<std::string>>& enrollment,
                        const std::vector<std::pair<std::string, std::string>>& tests);
  // Utterance ids that need embeddings.
  std::vector<std::string> utterances() const;
};

struct ScoredTrial {
  double score = 0.0;
  bool target = false;
};
using ScoreSet = std::vector<ScoredTrial>;

using EmbeddingTable = std::unordered_map<std::string, std::vector<double>>;

ScoreSet score_trials(const EmbeddingTable& embeddings, const TrialSet& trials, const ScoreParams& params);

// FAR(t) = share of non-targets scoring >= t, FRR(t) = share of targets
// scoring < t, swept over every distinct score plus +inf. The result is the
// first point where FRR >= FAR, linearly interpolated against the previous
// point unless the two rates meet exactly on a threshold. Can exceed 0.5 for
// anti-correlated scores.
double eer_unfolded(const ScoreSet& scores);
// min(e, 1 - e) of eer_unfolded, always in [0, 0.5].
double compute_eer(const ScoreSet& scores);
inline double fitness_from_eer(double eer) { return 1.0 - eer; }

// "<enroll_speaker> <test_utterance> target|nontarget" per line.
void write_trial_list(const std::filesystem::path& path, const TrialSet& trials);
std::vector<Trial> read_trial_list(const std::filesystem::path& path);
// "<score> target|nontarget" per line.
void write_scores(const std::filesystem::path& path, const ScoreSet& scores);
ScoreSet read_scores(const std::filesystem::path& path);

}  // namespace evonas
