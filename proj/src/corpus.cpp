#include "evonas/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

#include "evonas/checkpoint.hpp"
#include "evonas/errors.hpp"
#include "evonas/ops.hpp"

namespace evonas {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Enroll: return "enroll";
    case Split::Eval: return "eval";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "enroll") return Split::Enroll;
  if (name == "eval") return Split::Eval;
  throw ParseError("unknown split '" + std::string(name) + "'", 0);
}

void Corpus::add(Utterance u) {
  auto it = std::find_if(speakers.begin(), speakers.end(), [&](const SpeakerRecord& s) { return s.id == u.speaker; });
  if (it == speakers.end()) {
    speakers.push_back({u.speaker, {}});
    it = std::prev(speakers.end());
  }
  it->utterances.push_back(utterances.size());
  utterances.push_back(std::move(u));
}

const Utterance& Corpus::utterance(const std::string& id) const {
  for (const Utterance& u : utterances)
    if (u.id == id) return u;
  throw LookupError("no utterance '" + id + "' in corpus");
}

std::vector<std::size_t> Corpus::train_speakers() const {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < speakers.size(); ++s)
    if (!speakers[s].utterances.empty() && utterances[speakers[s].utterances.front()].split == Split::Train)
      out.push_back(s);
  return out;
}

std::vector<std::size_t> Corpus::eval_speakers() const {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < speakers.size(); ++s)
    if (!speakers[s].utterances.empty() && utterances[speakers[s].utterances.front()].split != Split::Train)
      out.push_back(s);
  return out;
}

std::vector<std::size_t> Corpus::utterances_of(std::size_t speaker, Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t u : speakers.at(speaker).utterances)
    if (utterances[u].split == split) out.push_back(u);
  return out;
}

TrialSet Corpus::trials() const {
  std::map<std::string, std::vector<std::string>> enrollment;
  std::vector<std::pair<std::string, std::string>> tests;
  for (std::size_t s : eval_speakers()) {
    for (std::size_t u : utterances_of(s, Split::Enroll)) enrollment[speakers[s].id].push_back(utterances[u].id);
    for (std::size_t u : utterances_of(s, Split::Eval)) tests.emplace_back(speakers[s].id, utterances[u].id);
  }
  return TrialSet::cross(enrollment, tests);
}

void Corpus::check() const {
  std::set<std::string> speaker_ids, utt_ids;
  for (const SpeakerRecord& s : speakers)
    if (!speaker_ids.insert(s.id).second) throw ContractError("duplicate speaker id '" + s.id + "'");
  for (const Utterance& u : utterances)
    if (!utt_ids.insert(u.id).second) throw ContractError("duplicate utterance id '" + u.id + "'");
  std::vector<bool> owned(utterances.size(), false);
  for (const SpeakerRecord& s : speakers) {
    bool train = false, held_out = false;
    for (std::size_t i : s.utterances) {
      if (i >= utterances.size()) throw ContractError("speaker '" + s.id + "' references a missing utterance");
      if (utterances[i].speaker != s.id)
        throw ContractError("utterance '" + utterances[i].id + "' listed under the wrong speaker");
      if (owned[i]) throw ContractError("utterance '" + utterances[i].id + "' listed twice");
      owned[i] = true;
      (utterances[i].split == Split::Train ? train : held_out) = true;
    }
    if (train && held_out) throw ContractError("speaker '" + s.id + "' appears in both training and evaluation");
  }
  for (std::size_t i = 0; i < owned.size(); ++i)
    if (!owned[i]) throw ContractError("utterance '" + utterances[i].id + "' has no speaker record");
}

void SyntheticCorpusConfig::validate() const {
  if (n_utts < 2) throw ConfigError("synthetic corpus needs n_utts >= 2 per speaker, got " + std::to_string(n_utts));
  if (n_train_speakers < 2) throw ConfigError("synthetic corpus needs at least 2 training speakers");
  if (n_eval_speakers < 2) throw ConfigError("synthetic corpus needs at least 2 evaluation speakers");
  if (n_enroll < 1 || n_enroll >= n_utts)
    throw ConfigError("n_enroll must be in [1, n_utts), got " + std::to_string(n_enroll));
  if (!(separation >= 0.0) || !(noise >= 0.0) || !(frame_noise >= 0.0) || !(content_scale >= 0.0))
    throw ConfigError("separation and noise levels must be non-negative");
  if (separation == 0.0 && noise == 0.0) throw ConfigError("separation and noise cannot both be zero");
  if (latent_dim == 0 || frames == 0) throw ConfigError("latent_dim and frames must be positive");
}

Corpus make_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t rows = kNumCepstra, d = cfg.latent_dim;

  std::vector<double> render(rows * d);
  const double render_scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& v : render) v = render_scale * gauss(rng);
  std::vector<double> pattern(rows * cfg.frames);
  for (double& v : pattern) v = gauss(rng);

  Corpus corpus;
  const std::size_t n_speakers = cfg.n_train_speakers + cfg.n_eval_speakers;
  for (std::size_t s = 0; s < n_speakers; ++s) {
    const bool train = s < cfg.n_train_speakers;
    char name[32];
    std::snprintf(name, sizeof name, train ? "train%03zu" : "eval%03zu", train ? s : s - cfg.n_train_speakers);
    const std::string speaker = name;

    std::vector<double> z(d);
    double norm = 0.0;
    for (double& v : z) {
      v = gauss(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : z) v *= cfg.separation / norm;

    for (std::size_t k = 0; k < cfg.n_utts; ++k) {
      Utterance u;
      u.id = speaker + "-" + std::to_string(k);
      u.speaker = speaker;
      u.split = train ? Split::Train : (k < cfg.n_enroll ? Split::Enroll : Split::Eval);
      u.latent.resize(d);
      for (std::size_t i = 0; i < d; ++i) u.latent[i] = z[i] + cfg.noise * gauss(rng);
      std::vector<double> base(rows, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) base[r] += render[r * d + i] * u.latent[i];
      const std::size_t shift = std::uniform_int_distribution<std::size_t>(0, cfg.frames - 1)(rng);
      u.features = FeatureMatrix(rows, cfg.frames);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < cfg.frames; ++t)
          u.features.at(r, t) = base[r] + cfg.content_scale * pattern[r * cfg.frames + (t + shift) % cfg.frames] +
                                cfg.frame_noise * gauss(rng);
      corpus.add(std::move(u));
    }
  }
  return corpus;
}

ScoreSet oracle_latent_scores(const Corpus& corpus) {
  const TrialSet trials = corpus.trials();
  EmbeddingTable table;
  for (const Utterance& u : corpus.utterances) {
    if (u.split == Split::Train) continue;
    if (u.latent.empty()) throw ContractError("utterance '" + u.id + "' carries no latent");
    table.emplace(u.id, u.latent);
  }
  return score_trials(table, trials, ScoreParams{1.0, 0.0});
}

Corpus load_wav_corpus(const fs::path& root, std::size_t n_eval_speakers, std::size_t n_enroll, std::uint64_t seed,
                       const FeatureOptions& options) {
  if (!fs::is_directory(root)) throw IoError("wav corpus root is not a directory: " + root.string());
  std::map<std::string, std::vector<fs::path>> by_speaker;
  for (const auto& dir : fs::directory_iterator(root)) {
    if (!dir.is_directory()) continue;
    auto& files = by_speaker[dir.path().filename().string()];
    for (const auto& f : fs::directory_iterator(dir.path()))
      if (f.is_regular_file() && f.path().extension() == ".wav") files.push_back(f.path());
    std::sort(files.begin(), files.end());
  }
  if (by_speaker.size() <= n_eval_speakers)
    throw ConfigError("wav corpus has " + std::to_string(by_speaker.size()) + " speakers, need more than " +
                      std::to_string(n_eval_speakers) + " evaluation speakers");

  std::mt19937_64 rng(seed);
  Corpus corpus;
  const std::size_t first_eval = by_speaker.size() - n_eval_speakers;
  std::size_t index = 0;
  for (auto& [speaker, files] : by_speaker) {
    const bool eval = index++ >= first_eval;
    if (eval) {
      if (files.size() <= n_enroll)
        throw ConfigError("evaluation speaker '" + speaker + "' has " + std::to_string(files.size()) +
                          " utterances, need more than " + std::to_string(n_enroll));
      std::shuffle(files.begin(), files.end(), rng);
    }
    std::size_t kept = 0;
    for (const fs::path& file : files) {
      auto features = extract_features(read_wav(file), options);
      if (!features) continue;
      Utterance u;
      u.id = speaker + "-" + file.stem().string();
      u.speaker = speaker;
      u.split = !eval ? Split::Train : (kept < n_enroll ? Split::Enroll : Split::Eval);
      u.features = std::move(*features);
      u.source = file.string();
      corpus.add(std::move(u));
      ++kept;
    }
  }
  corpus.check();
  return corpus;
}

void save_corpus(const fs::path& dir, const Corpus& corpus) {
  corpus.check();
  std::error_code ec;
  fs::create_directories(dir / "features", ec);
  if (ec) throw IoError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  json manifest = json::array();
  for (const Utterance& u : corpus.utterances) {
    ParameterStore store;
    store.add("features", u.features.as_tensor());
    if (!u.latent.empty()) store.add("latent", Tensor::vector(u.latent));
    const std::string feature_path = "features/" + u.id + ".ckpt";
    save_checkpoint(dir / feature_path, store);
    manifest.push_back({{"speaker_id", u.speaker},
                        {"utterance_id", u.id},
                        {"utterance_path", u.source},
                        {"feature_path", feature_path},
                        {"split", split_name(u.split)}});
  }
  write_file_atomic(dir / "corpus.json", manifest.dump(1) + "\n");
}

Corpus load_corpus(const fs::path& dir) {
  const fs::path path = dir / "corpus.json";
  std::ifstream in(path);
  if (!in) throw IoError("no corpus manifest at " + path.string() + " (run gen-data or extract-features first)");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("corpus manifest " + path.string() + ": " + e.what(), e.byte);
  }
  if (!manifest.is_array()) throw ParseError("corpus manifest must be a JSON array", 0);
  Corpus corpus;
  for (const json& entry : manifest) {
    Utterance u;
    try {
      u.speaker = entry.at("speaker_id").get<std::string>();
      u.id = entry.at("utterance_id").get<std::string>();
      u.source = entry.value("utterance_path", "");
      u.split = parse_split(entry.at("split").get<std::string>());
      const ParameterStore store = load_checkpoint(dir / entry.at("feature_path").get<std::string>());
      u.features = FeatureMatrix::from_tensor(store.at("features"));
      if (store.contains("latent")) {
        auto d = store.at("latent").data();
        u.latent.assign(d.begin(), d.end());
      }
    } catch (const json::exception& e) {
      throw ParseError("corpus manifest " + path.string() + ": " + e.what(), 0);
    }
    corpus.add(std::move(u));
  }
  corpus.check();
  return corpus;
}

}  // namespace evonas
