#include "evonas/verifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "evonas/ops.hpp"

namespace evonas {

Tensor scaled_similarity(const Tensor& a, const Tensor& p, const Tensor& w, const Tensor& b) {
  return add(mul(w, cosine(a, p)), b);
}

double scaled_similarity(std::span<const double> a, std::span<const double> p, const ScoreParams& params) {
  return params.w * cosine(a, p) + params.b;
}

void EmbeddingBatch::check() const {
  if (speakers() < 2) throw ContractError("embedding batch needs at least 2 speakers, got " + std::to_string(speakers()));
  const std::size_t m = utterances();
  if (m < 2) throw ContractError("embedding batch needs at least 2 utterances per speaker, got " + std::to_string(m));
  const Shape& shape = embeddings[0][0].shape();
  for (std::size_t k = 0; k < speakers(); ++k) {
    if (embeddings[k].size() != m)
      throw ContractError("speaker " + std::to_string(k) + " has " + std::to_string(embeddings[k].size()) +
                          " utterances, expected " + std::to_string(m));
    for (const Tensor& e : embeddings[k])
      if (e.shape() != shape || e.rank() != 1)
        throw ContractError("embedding shapes differ within the batch: " + shape_str(e.shape()));
  }
}

Tensor centroid(const EmbeddingBatch& batch, std::size_t speaker, std::optional<std::size_t> exclude) {
  if (speaker >= batch.speakers()) throw ContractError("speaker index out of range");
  const auto& utts = batch.embeddings[speaker];
  if (!exclude) return mean_of(utts);
  if (utts.size() < 2) throw ContractError("centroid exclusion needs at least 2 utterances");
  if (*exclude >= utts.size()) throw ContractError("excluded utterance index out of range");
  std::vector<Tensor> rest;
  for (std::size_t i = 0; i < utts.size(); ++i)
    if (i != *exclude) rest.push_back(utts[i]);
  return mean_of(rest);
}

std::vector<Tensor> ge2e_anchor_losses(const EmbeddingBatch& batch, const Tensor& w, const Tensor& b) {
  batch.check();
  const std::size_t n = batch.speakers(), m = batch.utterances();
  std::vector<Tensor> full;
  for (std::size_t k = 0; k < n; ++k) full.push_back(centroid(batch, k));

  std::vector<Tensor> losses;
  losses.reserve(n * m);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) {
      const Tensor& anchor = batch.embeddings[j][i];
      Tensor positive = sigmoid(scaled_similarity(anchor, centroid(batch, j, i), w, b));
      std::vector<Tensor> negatives;
      for (std::size_t k = 0; k < n; ++k)
        if (k != j) negatives.push_back(sigmoid(scaled_similarity(anchor, full[k], w, b)));
      losses.push_back(add(affine(positive, -1.0, 1.0), max_of(negatives)));
    }
  return losses;
}

Tensor ge2e_style_loss(const EmbeddingBatch& batch, const Tensor& w, const Tensor& b) {
  return mean_of(ge2e_anchor_losses(batch, w, b));
}

Tensor softmax_xent_loss(const Tensor& logits, std::size_t label) {
  if (logits.rank() != 1) throw ShapeError("softmax_xent_loss: logits must be a vector, got " + shape_str(logits.shape()));
  const std::size_t n = logits.numel();
  if (label >= n)
    throw ContractError("softmax_xent_loss: label " + std::to_string(label) + " outside [0, " + std::to_string(n) + ")");
  auto z = logits.data();
  const double peak = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - peak);
  const double log_norm = peak + std::log(total);
  std::vector<double> probs(n);
  for (std::size_t i = 0; i < n; ++i) probs[i] = std::exp(z[i] - log_norm);
  auto li = logits.impl();
  return Tensor::from_op({1}, {log_norm - z[label]}, "softmax_xent", {&logits},
                         [li, label, probs = std::move(probs)](const TensorImpl& o) {
                           auto& g = li->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             g[i] += o.grad[0] * (probs[i] - (i == label ? 1.0 : 0.0));
                         });
}

TrialSet TrialSet::cross(const std::map<std::string, std::vector<std::string>>& enrollment,
                         const std::vector<std::pair<std::string, std::string>>& tests) {
  TrialSet set;
  set.enrollment = enrollment;
  for (const auto& [speaker, utt] : tests)
    for (const auto& [enrolled, utts] : enrollment) set.trials.push_back({enrolled, utt, enrolled == speaker});
  return set;
}

std::vector<std::string> TrialSet::utterances() const {
  std::set<std::string> ids;
  for (const auto& [speaker, utts] : enrollment) ids.insert(utts.begin(), utts.end());
  for (const Trial& t : trials) ids.insert(t.test_utterance);
  return {ids.begin(), ids.end()};
}

ScoreSet score_trials(const EmbeddingTable& embeddings, const TrialSet& trials, const ScoreParams& params) {
  auto lookup = [&](const std::string& id) -> const std::vector<double>& {
    auto it = embeddings.find(id);
    if (it == embeddings.end()) throw LookupError("no embedding for utterance '" + id + "'");
    return it->second;
  };
  std::map<std::string, std::vector<double>> centroids;
  auto centroid_of = [&](const std::string& speaker) -> const std::vector<double>& {
    if (auto it = centroids.find(speaker); it != centroids.end()) return it->second;
    auto enrolled = trials.enrollment.find(speaker);
    if (enrolled == trials.enrollment.end() || enrolled->second.empty())
      throw LookupError("no enrollment utterances for speaker '" + speaker + "'");
    std::vector<double> mean;
    for (const std::string& id : enrolled->second) {
      const auto& e = lookup(id);
      if (mean.empty()) mean.assign(e.size(), 0.0);
      if (e.size() != mean.size()) throw ShapeError("enrollment embeddings differ in length for '" + speaker + "'");
      for (std::size_t i = 0; i < e.size(); ++i) mean[i] += e[i];
    }
    for (double& v : mean) v /= static_cast<double>(enrolled->second.size());
    return centroids.emplace(speaker, std::move(mean)).first->second;
  };
  ScoreSet scores;
  scores.reserve(trials.trials.size());
  for (const Trial& t : trials.trials)
    scores.push_back({scaled_similarity(centroid_of(t.enroll_speaker), lookup(t.test_utterance), params), t.target});
  return scores;
}

double eer_unfolded(const ScoreSet& scores) {
  std::vector<ScoredTrial> sorted = scores;
  std::size_t n_target = 0;
  for (const auto& s : sorted) n_target += s.target ? 1 : 0;
  const std::size_t n_nontarget = sorted.size() - n_target;
  if (n_target == 0 || n_nontarget == 0)
    throw ContractError("EER needs both target and non-target trials");
  std::sort(sorted.begin(), sorted.end(), [](const ScoredTrial& a, const ScoredTrial& b) { return a.score < b.score; });

  // Walk thresholds upwards; `below_*` count trials strictly under the threshold.
  std::size_t below_target = 0, below_nontarget = 0;
  double prev_far = 1.0, prev_frr = 0.0;
  std::size_t i = 0;
  while (true) {
    const bool at_infinity = i == sorted.size();
    const double far = at_infinity ? 0.0
                                   : static_cast<double>(n_nontarget - below_nontarget) / static_cast<double>(n_nontarget);
    const double frr = at_infinity ? 1.0 : static_cast<double>(below_target) / static_cast<double>(n_target);
    if (frr >= far) {
      if (frr == far) return frr;
      const double alpha = (prev_far - prev_frr) / ((prev_far - prev_frr) - (far - frr));
      return prev_frr + alpha * (frr - prev_frr);
    }
    prev_far = far;
    prev_frr = frr;
    const double t = sorted[i].score;
    for (; i < sorted.size() && sorted[i].score == t; ++i) ++(sorted[i].target ? below_target : below_nontarget);
  }
}

double compute_eer(const ScoreSet& scores) {
  const double e = eer_unfolded(scores);
  return std::min(e, 1.0 - e);
}

void write_trial_list(const std::filesystem::path& path, const TrialSet& trials) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write trial list " + path.string());
  for (const Trial& t : trials.trials)
    out << t.enroll_speaker << ' ' << t.test_utterance << ' ' << (t.target ? "target" : "nontarget") << '\n';
}

std::vector<Trial> read_trial_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trial list " + path.string());
  std::vector<Trial> trials;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    Trial t;
    std::string label, extra;
    if (!(fields >> t.enroll_speaker >> t.test_utterance >> label) || (fields >> extra) ||
        (label != "target" && label != "nontarget"))
      throw ParseError("bad trial line " + std::to_string(lineno) + ": '" + line + "'", lineno);
    t.target = label == "target";
    trials.push_back(std::move(t));
  }
  return trials;
}

void write_scores(const std::filesystem::path& path, const ScoreSet& scores) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write score file " + path.string());
  out << std::setprecision(17);
  for (const auto& s : scores) out << s.score << ' ' << (s.target ? "target" : "nontarget") << '\n';
}

ScoreSet read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open score file " + path.string());
  ScoreSet scores;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    ScoredTrial s;
    std::string label;
    if (!(fields >> s.score >> label) || (label != "target" && label != "nontarget"))
      throw ParseError("bad score line " + std::to_string(lineno) + ": '" + line + "'", lineno);
    s.target = label == "target";
    scores.push_back(s);
  }
  return scores;
}

}  // namespace evonas
