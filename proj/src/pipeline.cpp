#include "evonas/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "evonas/checkpoint.hpp"
#include "evonas/errors.hpp"

#ifndef EVONAS_VERSION
#define EVONAS_VERSION "unknown"
#endif

namespace evonas {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

// Typed access to a parsed TOML document that remembers which keys were
// read, so leftovers can be reported as unknown.
class TomlReader {
 public:
  explicit TomlReader(const toml::table& root) : root_(root) {}

  template <typename T>
  void get(std::string_view section, std::string_view key, T& out) {
    const toml::node* node = find(section, key);
    if (!node) return;
    out = convert<T>(*node, section, key);
  }

  void get_path(std::string_view section, std::string_view key, fs::path& out, const fs::path& base) {
    std::string text;
    get(section, key, text);
    if (text.empty()) return;
    out = fs::path(text).is_absolute() || base.empty() ? fs::path(text) : base / text;
  }

  void reject_unknown() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : root_) {
      const std::string key(k.str());
      if (const toml::table* t = v.as_table()) {
        for (const auto& [k2, v2] : *t)
          if (!seen_.count(key + "." + std::string(k2.str()))) unknown.push_back(key + "." + std::string(k2.str()));
      } else if (!seen_.count(key)) {
        unknown.push_back(key);
      }
    }
    if (unknown.empty()) return;
    std::string msg = "unknown configuration key";
    msg += unknown.size() > 1 ? "s: " : ": ";
    for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
    throw ConfigError(msg);
  }

 private:
  static std::string where(std::string_view section, std::string_view key) {
    return section.empty() ? std::string(key) : std::string(section) + "." + std::string(key);
  }

  const toml::node* find(std::string_view section, std::string_view key) {
    const toml::node* node = nullptr;
    if (section.empty()) {
      node = root_.get(key);
    } else if (const toml::table* t = root_[section].as_table()) {
      node = t->get(key);
    }
    if (node) seen_.insert(where(section, key));
    return node;
  }

  template <typename T>
  static T convert(const toml::node& node, std::string_view section, std::string_view key) {
    const std::string name = where(section, key);
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = node.value_exact<bool>()) return *v;
      throw ConfigError(name + " must be true or false");
    } else if constexpr (std::is_integral_v<T>) {
      auto v = node.value_exact<std::int64_t>();
      if (!v) throw ConfigError(name + " must be an integer");
      if (*v < 0) throw ConfigError(name + " must be >= 0, got " + std::to_string(*v));
      return static_cast<T>(*v);
    } else if constexpr (std::is_same_v<T, double>) {
      if (auto v = node.value<double>()) return *v;
      throw ConfigError(name + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node.value_exact<std::string>()) return *v;
      throw ConfigError(name + " must be a string");
    } else if constexpr (std::is_same_v<T, std::optional<std::size_t>>) {
      return convert<std::size_t>(node, section, key);
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>> ||
                         std::is_same_v<T, std::optional<std::vector<std::size_t>>>) {
      const toml::array* arr = node.as_array();
      if (!arr) throw ConfigError(name + " must be an array of integers");
      std::vector<std::size_t> out;
      for (const toml::node& el : *arr) out.push_back(convert<std::size_t>(el, section, key));
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  const toml::table& root_;
  std::set<std::string> seen_;
};

void read_train(TomlReader& r, std::string_view section, TrainConfig& t) {
  r.get(section, "softmax_steps", t.softmax_steps);
  r.get(section, "ge2e_steps", t.ge2e_steps);
  r.get(section, "batch_speakers", t.batch_speakers);
  r.get(section, "batch_utterances", t.batch_utterances);
  r.get(section, "base_lr", t.base_lr);
}

Genome parse_genome_text(const std::string& text, std::string_view what) {
  try {
    return decode(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string(what) + ": cannot parse genome '" + text + "': " + e.what());
  }
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

json train_json(const TrainConfig& t) {
  return {{"softmax_steps", t.softmax_steps}, {"ge2e_steps", t.ge2e_steps},
          {"batch_speakers", t.batch_speakers}, {"batch_utterances", t.batch_utterances},
          {"base_lr", t.base_lr}, {"seed", t.seed}};
}

json hypernet_json(const HyperNetConfig& h) {
  return {{"mode", mode_name(h.mode)},
          {"filters", h.filters},
          {"blocks", h.blocks},
          {"embedding_dim", h.embedding_dim},
          {"reduction_positions", h.reductions()},
          {"path_dropout", h.path_dropout},
          {"n_train_speakers", h.n_train_speakers},
          {"tdnn_widths", h.tdnn_widths},
          {"input_pool_rows", h.input_pool_rows},
          {"input_pool_frames", h.input_pool_frames},
          {"seed", h.seed}};
}

HyperNetConfig hypernet_from_json(const json& j) {
  HyperNetConfig h;
  const auto mode = mode_from_name(j.at("mode").get<std::string>());
  if (!mode) throw StageError("hypernet.json: unknown mode");
  h.mode = *mode;
  h.filters = j.at("filters");
  h.blocks = j.at("blocks");
  h.embedding_dim = j.at("embedding_dim");
  h.reduction_positions = j.at("reduction_positions").get<std::vector<std::size_t>>();
  h.path_dropout = j.at("path_dropout");
  h.n_train_speakers = j.at("n_train_speakers");
  h.tdnn_widths = j.at("tdnn_widths").get<std::vector<std::size_t>>();
  h.input_pool_rows = j.at("input_pool_rows");
  h.input_pool_frames = j.at("input_pool_frames");
  h.seed = j.at("seed");
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream) {
  const std::uint64_t tag = fnv1a(stream);
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

ExperimentConfig ExperimentConfig::parse(std::string_view toml_text, const fs::path& base_dir) {
  toml::table doc;
  try {
    doc = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config syntax error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  TomlReader r(doc);
  ExperimentConfig c;
  std::uint64_t seed = 0;
  r.get("", "seed", seed);
  r.get_path("", "out", c.out, base_dir);

  std::string kind = "synthetic";
  r.get("corpus", "kind", kind);
  if (kind == "synthetic") {
    c.corpus.kind = CorpusKind::Synthetic;
  } else if (kind == "wav") {
    c.corpus.kind = CorpusKind::Wav;
  } else {
    throw ConfigError("corpus.kind must be \"synthetic\" or \"wav\", got \"" + kind + "\"");
  }
  SyntheticCorpusConfig& s = c.corpus.synthetic;
  r.get("corpus", "n_train_speakers", s.n_train_speakers);
  r.get("corpus", "n_eval_speakers", s.n_eval_speakers);
  r.get("corpus", "n_utts", s.n_utts);
  r.get("corpus", "n_enroll", s.n_enroll);
  r.get("corpus", "separation", s.separation);
  r.get("corpus", "noise", s.noise);
  r.get("corpus", "latent_dim", s.latent_dim);
  r.get("corpus", "frames", s.frames);
  r.get("corpus", "frame_noise", s.frame_noise);
  r.get("corpus", "content_scale", s.content_scale);
  r.get_path("corpus", "wav_root", c.corpus.wav_root, base_dir);
  r.get("corpus", "wav_eval_speakers", c.corpus.wav_eval_speakers);
  r.get("corpus", "wav_enroll", c.corpus.wav_enroll);

  HyperNetConfig& h = c.hypernet;
  std::string mode(mode_name(h.mode));
  r.get("hypernet", "mode", mode);
  const auto parsed_mode = mode_from_name(mode);
  if (!parsed_mode) throw ConfigError("hypernet.mode must be \"autovector\" or \"tdnn\", got \"" + mode + "\"");
  h.mode = *parsed_mode;
  r.get("hypernet", "filters", h.filters);
  r.get("hypernet", "blocks", h.blocks);
  r.get("hypernet", "embedding_dim", h.embedding_dim);
  r.get("hypernet", "reduction_positions", h.reduction_positions);
  r.get("hypernet", "path_dropout", h.path_dropout);
  r.get("hypernet", "tdnn_widths", h.tdnn_widths);
  r.get("hypernet", "input_pool_rows", h.input_pool_rows);
  r.get("hypernet", "input_pool_frames", h.input_pool_frames);

  read_train(r, "train", c.train);
  r.get("train", "checkpoint_every", c.checkpoint_every);

  SearchConfig& sc = c.search;
  r.get("search", "population_size", sc.population_size);
  r.get("search", "generations", sc.generations);
  r.get("search", "mutation_p", sc.mutation_p);
  r.get("search", "neighbors", sc.neighbors);
  r.get("search", "local_steps", sc.local_steps);
  r.get("search", "tournament_size", sc.tournament_size);
  r.get("search", "eval_budget", sc.eval_budget);
  r.get("search", "dev_speakers", c.dev_speakers);
  r.get("search", "random_baseline", c.random_baseline);

  read_train(r, "retrain", c.retrain.train);
  std::string baseline;
  r.get("retrain", "baseline", baseline);
  if (!baseline.empty()) c.retrain.baseline = parse_genome_text(baseline, "retrain.baseline");
  r.get("retrain", "from_scratch", c.retrain.from_scratch);

  r.reject_unknown();
  c.search.space = c.hypernet.space();
  c.apply_seed(seed);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError&) {
    throw ConfigError("cannot read config file " + path.string());
  }
  return parse(text, path.parent_path());
}

void ExperimentConfig::apply_seed(std::uint64_t master) {
  seed = master;
  corpus.synthetic.seed = derive_seed(master, "corpus");
  hypernet.seed = derive_seed(master, "hypernet");
  train.seed = derive_seed(master, "train");
  search.seed = derive_seed(master, "search");
  retrain.train.seed = derive_seed(master, "retrain");
}

Genome ExperimentConfig::baseline_genome() const {
  if (retrain.baseline) return *retrain.baseline;
  if (hypernet.mode == SpaceMode::TdnnXVector)
    return Genome{SpaceMode::TdnnXVector,
                  {},
                  {ContextWindow::Pm2, ContextWindow::Pm2, ContextWindow::Pm3, ContextWindow::Frame,
                   ContextWindow::Frame}};
  return uniform_genome(hypernet.space(), BlockGene{{OpKind::Conv3x3}});
}

void ExperimentConfig::validate() const {
  hypernet.validate();
  SearchConfig s = search;
  s.space = hypernet.space();
  s.validate();
  if (checkpoint_every == 0) throw ConfigError("train.checkpoint_every must be >= 1");
  for (const auto& [name, t] : {std::pair<const char*, const TrainConfig*>{"train", &train},
                                {"retrain", &retrain.train}}) {
    if (!(t->base_lr >= 0.0)) throw ConfigError(std::string(name) + ".base_lr must be >= 0");
    if (t->batch_speakers < 2) throw ConfigError(std::string(name) + ".batch_speakers must be >= 2");
    if (t->batch_utterances < 2) throw ConfigError(std::string(name) + ".batch_utterances must be >= 2");
  }
  if (const auto problems = evonas::validate(baseline_genome(), hypernet.space()); !problems.empty())
    throw ConfigError("retrain.baseline does not fit the search space: " + problems.front());

  std::size_t eval_speakers = 0;
  if (corpus.kind == CorpusKind::Synthetic) {
    const SyntheticCorpusConfig& sc = corpus.synthetic;
    sc.validate();
    for (const auto& [name, t] : {std::pair<const char*, const TrainConfig*>{"train", &train},
                                  {"retrain", &retrain.train}}) {
      if (t->batch_speakers > sc.n_train_speakers)
        throw ConfigError(std::string(name) + ".batch_speakers (" + std::to_string(t->batch_speakers) +
                          ") exceeds corpus.n_train_speakers (" + std::to_string(sc.n_train_speakers) + ")");
      if (t->batch_utterances > sc.n_utts)
        throw ConfigError(std::string(name) + ".batch_utterances (" + std::to_string(t->batch_utterances) +
                          ") exceeds corpus.n_utts (" + std::to_string(sc.n_utts) + ")");
    }
    eval_speakers = sc.n_eval_speakers;
  } else {
    if (corpus.wav_root.empty()) throw ConfigError("corpus.wav_root is required when corpus.kind = \"wav\"");
    if (!fs::is_directory(corpus.wav_root))
      throw ConfigError("corpus.wav_root " + corpus.wav_root.string() + " is not a directory");
    eval_speakers = corpus.wav_eval_speakers;
  }
  if (dev_speakers != 0 && (dev_speakers < 2 || eval_speakers < dev_speakers + 2))
    throw ConfigError("search.dev_speakers must be 0 or leave >= 2 speakers on each side of the split (" +
                      std::to_string(eval_speakers) + " evaluation speakers)");
}

json ExperimentConfig::to_json() const {
  json corpus_j;
  if (corpus.kind == CorpusKind::Synthetic) {
    const SyntheticCorpusConfig& s = corpus.synthetic;
    corpus_j = {{"kind", "synthetic"},         {"n_train_speakers", s.n_train_speakers},
                {"n_eval_speakers", s.n_eval_speakers}, {"n_utts", s.n_utts},
                {"n_enroll", s.n_enroll},      {"separation", s.separation},
                {"noise", s.noise},            {"latent_dim", s.latent_dim},
                {"frames", s.frames},          {"frame_noise", s.frame_noise},
                {"content_scale", s.content_scale}, {"seed", s.seed}};
  } else {
    corpus_j = {{"kind", "wav"},
                {"wav_root", corpus.wav_root.string()},
                {"wav_eval_speakers", corpus.wav_eval_speakers},
                {"wav_enroll", corpus.wav_enroll}};
  }
  json search_j = {{"population_size", search.population_size},
                   {"generations", search.generations},
                   {"mutation_p", search.mutation_p},
                   {"neighbors", search.neighbors},
                   {"local_steps", search.local_steps},
                   {"tournament_size", search.tournament_size},
                   {"eval_budget", search.eval_budget ? json(*search.eval_budget) : json(nullptr)},
                   {"dev_speakers", dev_speakers},
                   {"random_baseline", random_baseline},
                   {"seed", search.seed}};
  json train_j = train_json(train);
  train_j["checkpoint_every"] = checkpoint_every;
  json retrain_j = train_json(retrain.train);
  retrain_j["baseline"] = encode(baseline_genome());
  retrain_j["from_scratch"] = retrain.from_scratch;
  return {{"seed", seed},     {"corpus", corpus_j},   {"hypernet", hypernet_json(hypernet)},
          {"train", train_j}, {"search", search_j}, {"retrain", retrain_j}};
}

// ---------------------------------------------------------------------------
// Manifest and stage directories

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 unavailable");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

json RunManifest::to_json() const {
  json stages_j = json::object();
  for (const auto& [name, s] : stages)
    stages_j[name] = {{"version", s.version},
                      {"dir", s.dir},
                      {"checksums", s.checksums},
                      {"inputs", s.inputs},
                      {"wall_clock_seconds", s.wall_clock_seconds},
                      {"summary", s.summary}};
  return {{"format", 1},
          {"versions", {{"evonas", EVONAS_VERSION}, {"checkpoint", kCheckpointMagic}}},
          {"config", config},
          {"stages", stages_j}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.config = j.value("config", json::object());
  for (const auto& [name, s] : j.at("stages").items()) {
    StageRecord r;
    r.name = name;
    r.version = s.at("version");
    r.dir = s.at("dir");
    r.checksums = s.at("checksums").get<std::map<std::string, std::string>>();
    r.inputs = s.at("inputs").get<std::vector<std::string>>();
    r.wall_clock_seconds = s.at("wall_clock_seconds");
    r.summary = s.at("summary");
    m.stages.emplace(name, std::move(r));
  }
  return m;
}

void RunManifest::save(const fs::path& out) const {
  fs::create_directories(out);
  write_file_atomic(out / "manifest.json", to_json().dump(2) + "\n");
}

RunManifest RunManifest::load(const fs::path& out) {
  const fs::path path = out / "manifest.json";
  if (!fs::exists(path)) return {};
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw StageError("damaged manifest " + path.string() + ": " + e.what());
  }
}

namespace {

std::string command_for(std::string_view stage) {
  if (stage == kStageData) return "gen-data (or extract-features)";
  if (stage == kStageHypernet) return "train-hypernet";
  if (stage == kStageSearch) return "search";
  if (stage == kStageRetrain) return "retrain";
  if (stage == kStageEvaluate) return "evaluate";
  return std::string(stage);
}

}  // namespace

fs::path stage_path(const fs::path& out, const RunManifest& manifest, std::string_view stage) {
  auto it = manifest.stages.find(std::string(stage));
  if (it == manifest.stages.end())
    throw StageError("no " + std::string(stage) + " stage recorded in " + (out / "manifest.json").string() +
                     "; run `evonas " + command_for(stage) + "` first");
  const fs::path dir = out / it->second.dir;
  for (const auto& [file, sum] : it->second.checksums) {
    const fs::path p = dir / file;
    if (!fs::exists(p)) throw StageError("stage artifact missing: " + p.string());
    if (file_sha256(p) != sum) throw StageError("stage artifact changed since it was recorded: " + p.string());
  }
  return dir;
}

namespace {

using Clock = std::chrono::steady_clock;

std::optional<std::size_t> parse_version(const std::string& name, bool partial) {
  const std::string suffix = partial ? ".partial" : "";
  if (name.size() < 2 + suffix.size() || name[0] != 'v') return std::nullopt;
  if (!suffix.empty() && name.substr(name.size() - suffix.size()) != suffix) return std::nullopt;
  const std::string digits = name.substr(1, name.size() - 1 - suffix.size());
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) return std::nullopt;
  return std::stoul(digits);
}

class StageWriter {
 public:
  StageWriter(const ExperimentConfig& cfg, std::string_view name, bool resume = false)
      : out_(cfg.out), name_(name), start_(Clock::now()) {
    const fs::path root = out_ / name_;
    std::size_t committed = 0;
    if (fs::exists(root))
      for (const auto& e : fs::directory_iterator(root))
        if (auto v = parse_version(e.path().filename().string(), false)) committed = std::max(committed, *v);
    version_ = committed + 1;
    partial_ = root / ("v" + std::to_string(version_) + ".partial");
    resumed_ = resume && fs::exists(partial_);
    if (!resumed_ && fs::exists(partial_)) fs::remove_all(partial_);
    fs::create_directories(partial_);
    manifest_ = RunManifest::load(out_);
    manifest_.config = cfg.to_json();
    write_json("config.json", manifest_.config);
  }

  const fs::path& dir() const { return partial_; }
  bool resumed() const { return resumed_; }
  std::size_t version() const { return version_; }
  RunManifest& manifest() { return manifest_; }

  fs::path input(std::string_view stage) {
    const fs::path p = stage_path(out_, manifest_, stage);
    const StageRecord& r = manifest_.stages.at(std::string(stage));
    inputs_.push_back(r.name + "@v" + std::to_string(r.version));
    return p;
  }
  const StageRecord& input_record(std::string_view stage) const { return manifest_.stages.at(std::string(stage)); }

  void write_json(const std::string& file, const json& j) const {
    write_file_atomic(partial_ / file, j.dump(2) + "\n");
  }

  StageRecord commit(json summary) {
    StageRecord r;
    r.name = name_;
    r.version = version_;
    const fs::path final_dir = out_ / name_ / ("v" + std::to_string(version_));
    r.dir = (fs::path(name_) / final_dir.filename()).generic_string();
    for (const auto& e : fs::recursive_directory_iterator(partial_))
      if (e.is_regular_file()) r.checksums[fs::relative(e.path(), partial_).generic_string()] = file_sha256(e.path());
    fs::rename(partial_, final_dir);
    r.inputs = inputs_;
    r.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    r.summary = std::move(summary);
    manifest_.stages[name_] = r;
    manifest_.save(out_);
    return r;
  }

 private:
  fs::path out_;
  std::string name_;
  Clock::time_point start_;
  std::size_t version_ = 0;
  fs::path partial_;
  bool resumed_ = false;
  RunManifest manifest_;
  std::vector<std::string> inputs_;
};

json corpus_summary(const Corpus& corpus) {
  std::size_t target = 0;
  const TrialSet trials = corpus.trials();
  for (const Trial& t : trials.trials) target += t.target;
  json j = {{"train_speakers", corpus.train_speakers().size()},
            {"eval_speakers", corpus.eval_speakers().size()},
            {"utterances", corpus.utterances.size()},
            {"trials", trials.trials.size()},
            {"target_trials", target}};
  const bool has_latent =
      !corpus.utterances.empty() &&
      std::all_of(corpus.utterances.begin(), corpus.utterances.end(), [](const Utterance& u) { return !u.latent.empty(); });
  if (has_latent) j["oracle_latent_eer"] = compute_eer(oracle_latent_scores(corpus));
  return j;
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

std::string trace_header() { return "step,mode,lr,loss\n"; }

std::string trace_row(const LossRecord& r) {
  std::ostringstream s;
  s.precision(17);
  s << r.step << ',' << (r.mode == LossMode::Softmax ? "softmax" : "ge2e") << ',' << r.lr << ',' << r.loss << '\n';
  return s.str();
}

// Keeps the header and rows for steps < `keep_below`.
void truncate_trace(const fs::path& path, std::size_t keep_below) {
  std::string kept = trace_header();
  if (fs::exists(path)) {
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoul(line.substr(0, line.find(','))) < keep_below) kept += line + "\n";
  }
  write_text(path, kept);
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw StageError("cannot parse " + path.string() + ": " + e.what());
  }
}

double mean_last(const std::vector<LossRecord>& trace, std::size_t n) {
  if (trace.empty()) return 0.0;
  n = std::min(n, trace.size());
  double s = 0.0;
  for (std::size_t i = trace.size() - n; i < trace.size(); ++i) s += trace[i].loss;
  return s / static_cast<double>(n);
}

double trace_tail_mean(const fs::path& path, std::size_t n) {
  std::vector<LossRecord> rows;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back({0, LossMode::Ge2e, 0.0, std::stod(line.substr(line.rfind(',') + 1))});
  return mean_last(rows, n);
}

struct LoadedHypernet {
  HyperNetConfig config;
  HyperNet net;
};

LoadedHypernet load_hypernet(const fs::path& dir) {
  const json meta = read_json(dir / "hypernet.json");
  HyperNetConfig hc = hypernet_from_json(meta.at("config"));
  HyperNet h = HyperNet::build(hc);
  load_training_checkpoint(dir / "hypernet.ckpt", h.params());
  return {hc, std::move(h)};
}

// Refuses a checkpoint whose architecture differs from the configuration.
void check_hypernet_matches(const HyperNetConfig& trained, const HyperNetConfig& configured) {
  std::vector<std::string> diffs;
  auto cmp = [&](const char* field, auto a, auto b) {
    if (a != b) {
      std::ostringstream s;
      s << field << " (checkpoint " << a << ", config " << b << ")";
      diffs.push_back(s.str());
    }
  };
  cmp("mode", mode_name(trained.mode), mode_name(configured.mode));
  cmp("blocks", trained.blocks, configured.blocks);
  cmp("filters", trained.filters, configured.filters);
  cmp("embedding_dim", trained.embedding_dim, configured.embedding_dim);
  if (trained.reductions() != configured.reductions()) diffs.push_back("reduction_positions");
  if (trained.mode == SpaceMode::TdnnXVector && trained.tdnn_widths != configured.tdnn_widths)
    diffs.push_back("tdnn_widths");
  if (trained.input_pool_rows != configured.input_pool_rows || trained.input_pool_frames != configured.input_pool_frames)
    diffs.push_back("input pooling");
  if (diffs.empty()) return;
  std::string msg = "hyper-network checkpoint does not match the configuration:";
  for (const auto& d : diffs) msg += " " + d + ";";
  throw ConfigError(msg);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

EvalSplit split_eval_speakers(const Corpus& corpus, std::size_t dev_speakers) {
  std::vector<std::string> eval_ids;
  for (std::size_t s : corpus.eval_speakers()) eval_ids.push_back(corpus.speakers[s].id);
  std::sort(eval_ids.begin(), eval_ids.end());
  if (dev_speakers == 0) return {corpus, corpus};
  if (dev_speakers >= eval_ids.size()) throw ConfigError("dev_speakers leaves no test speakers");
  const std::set<std::string> dev(eval_ids.begin(), eval_ids.begin() + static_cast<std::ptrdiff_t>(dev_speakers));
  EvalSplit split;
  for (const Utterance& u : corpus.utterances) {
    if (u.split == Split::Train) {
      split.dev.add(u);
      split.test.add(u);
    } else {
      (dev.count(u.speaker) ? split.dev : split.test).add(u);
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Stage commands

StageRecord cmd_gen_data(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.corpus.kind != CorpusKind::Synthetic)
    throw ConfigError("gen-data builds synthetic corpora; with corpus.kind = \"wav\" run extract-features");
  StageWriter stage(cfg, kStageData);
  const Corpus corpus = make_synthetic_corpus(cfg.corpus.synthetic);
  save_corpus(stage.dir(), corpus);
  write_trial_list(stage.dir() / "trials.txt", corpus.trials());
  return stage.commit(corpus_summary(corpus));
}

StageRecord cmd_extract_features(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.corpus.kind != CorpusKind::Wav)
    throw ConfigError("extract-features reads WAV corpora (corpus.kind = \"wav\"); synthetic corpora use gen-data");
  StageWriter stage(cfg, kStageData);
  const Corpus corpus = load_wav_corpus(cfg.corpus.wav_root, cfg.corpus.wav_eval_speakers, cfg.corpus.wav_enroll,
                                        derive_seed(cfg.seed, "corpus"));
  const std::size_t n_train = corpus.train_speakers().size();
  for (const TrainConfig* t : {&cfg.train, &cfg.retrain.train})
    if (t->batch_speakers > n_train)
      throw ConfigError("batch_speakers (" + std::to_string(t->batch_speakers) + ") exceeds the " +
                        std::to_string(n_train) + " training speakers found under " + cfg.corpus.wav_root.string());
  save_corpus(stage.dir(), corpus);
  write_trial_list(stage.dir() / "trials.txt", corpus.trials());
  return stage.commit(corpus_summary(corpus));
}

namespace {
struct StopTraining {};
}  // namespace

StageRecord cmd_train_hypernet(const ExperimentConfig& cfg, bool resume, std::optional<std::size_t> max_steps) {
  cfg.validate();
  StageWriter stage(cfg, kStageHypernet, resume);
  const Corpus corpus = load_corpus(stage.input(kStageData));

  HyperNetConfig hc = cfg.hypernet;
  hc.n_train_speakers = cfg.train.softmax_steps > 0 ? corpus.train_speakers().size() : 0;
  HyperNet h = HyperNet::build(hc);
  const fs::path ckpt = stage.dir() / "hypernet.ckpt";
  const fs::path trace_path = stage.dir() / "loss_trace.csv";
  TrainState state;
  if (stage.resumed() && fs::exists(ckpt)) state = load_training_checkpoint(ckpt, h.params());
  const std::size_t resumed_from = state.step;
  truncate_trace(trace_path, state.step);

  std::ofstream trace(trace_path, std::ios::app);
  if (!trace) throw StageError("cannot write " + trace_path.string());
  const TrainData data = TrainData::from_corpus(corpus, hc);
  try {
    train_hypernet(h, data, cfg.train, state, {}, [&](const TrainState& s) {
      trace << trace_row(s.trace.back()) << std::flush;
      const bool stop = max_steps && s.step - resumed_from >= *max_steps && s.step < cfg.train.total_steps();
      if (stop || s.step % cfg.checkpoint_every == 0) save_training_checkpoint(ckpt, h.params(), s);
      if (stop) throw StopTraining{};
    });
  } catch (const StopTraining&) {
    StageRecord r;
    r.name = std::string(kStageHypernet);
    r.version = stage.version();
    r.dir = fs::relative(stage.dir(), cfg.out).generic_string();
    r.summary = {{"complete", false}, {"step", state.step}, {"resumed_from_step", resumed_from}};
    return r;
  }
  trace.close();
  save_training_checkpoint(ckpt, h.params(), state);

  const std::size_t n = cfg.train.total_steps();
  const json summary = {{"config", hypernet_json(hc)},
                        {"complete", true},
                        {"steps", n},
                        {"parameter_count", h.parameter_count()},
                        {"lr_schedule", {{"start", n ? cfg.train.lr_at(0) : 0.0}, {"end", n ? cfg.train.lr_at(n - 1) : 0.0}}},
                        // From the trace file: the in-memory trace starts at the resume point.
                        {"final_loss_mean20", trace_tail_mean(trace_path, 20)}};
  stage.write_json("hypernet.json", summary);
  json record = summary;
  record["resumed_from_step"] = resumed_from;
  return stage.commit(record);
}

StageRecord cmd_search(const ExperimentConfig& cfg) {
  cfg.validate();
  StageWriter stage(cfg, kStageSearch);
  const Corpus corpus = load_corpus(stage.input(kStageData));
  LoadedHypernet loaded = load_hypernet(stage.input(kStageHypernet));
  check_hypernet_matches(loaded.config, cfg.hypernet);
  const HyperNet& h = loaded.net;

  const EvalData dev = EvalData::from_corpus(split_eval_speakers(corpus, cfg.dev_speakers).dev, loaded.config);
  SearchConfig sc = cfg.search;
  sc.space = loaded.config.space();
  const FitnessFn fitness = [&](const Genome& g) { return fitness_from_eer(evaluate_candidate(h, g, dev).eer); };

  const SearchResult result = evolve(sc, fitness);
  write_history_csv(stage.dir() / "history.csv", result.history);

  std::ostringstream cand;
  cand.precision(17);
  cand << "index,source,eer,genome\n";
  std::vector<double> memetic_eers;
  for (std::size_t i = 0; i < result.evaluated.size(); ++i) {
    const double eer = 1.0 - result.evaluated[i].fitness;
    memetic_eers.push_back(eer);
    cand << i << ",memetic," << eer << ",\"" << encode(result.evaluated[i].genome) << "\"\n";
  }

  json summary = {{"genome", encode(result.best.genome)},
                  {"fitness", result.best.fitness},
                  {"eer", 1.0 - result.best.fitness},
                  {"total_evaluations", result.total_evaluations},
                  {"generations_run", result.history.size()},
                  {"budget_exhausted", result.budget_exhausted},
                  {"seed", sc.seed},
                  {"dev_speakers", cfg.dev_speakers},
                  {"memetic_median_eer", median(memetic_eers)}};

  std::vector<double> random_eers;
  if (cfg.random_baseline) {
    FitnessEvaluator ev(fitness);
    Rng rng(derive_seed(cfg.seed, "random-search"));
    const RandomSearchResult rs = random_search_baseline(sc.space, ev, result.total_evaluations, rng);
    for (std::size_t i = 0; i < ev.evaluated().size(); ++i) {
      const double eer = 1.0 - ev.evaluated()[i].fitness;
      random_eers.push_back(eer);
      cand << i << ",random," << eer << ",\"" << encode(ev.evaluated()[i].genome) << "\"\n";
    }
    const RankSumResult test = rank_sum_test(memetic_eers, random_eers);
    summary["random_search"] = {{"best_eer", 1.0 - rs.best.fitness},
                                {"best_genome", encode(rs.best.genome)},
                                {"evaluations", random_eers.size()},
                                {"median_eer", median(random_eers)},
                                {"rank_sum_p_memetic_lower", test.p_less}};
  }
  write_text(stage.dir() / "candidates.csv", cand.str());

  // Candidate-EER histogram, 0.01 wide bins over [0, 0.5].
  std::ostringstream hist;
  hist << "bin_lo,bin_hi,memetic,random\n";
  const int bins = 50;
  std::vector<std::size_t> hm(bins), hr(bins);
  auto bin_of = [&](double e) { return std::clamp(static_cast<int>(e * 100.0), 0, bins - 1); };
  for (double e : memetic_eers) ++hm[static_cast<std::size_t>(bin_of(e))];
  for (double e : random_eers) ++hr[static_cast<std::size_t>(bin_of(e))];
  for (int b = 0; b < bins; ++b)
    hist << std::fixed << std::setprecision(2) << b / 100.0 << ',' << (b + 1) / 100.0 << ',' << hm[b] << ','
         << hr[b] << '\n';
  write_text(stage.dir() / "histogram.csv", hist.str());

  stage.write_json("result.json", summary);
  return stage.commit(summary);
}

StageRecord cmd_retrain(const ExperimentConfig& cfg, const std::optional<Genome>& genome) {
  cfg.validate();
  StageWriter stage(cfg, kStageRetrain);
  const Corpus corpus = load_corpus(stage.input(kStageData));
  LoadedHypernet loaded = load_hypernet(stage.input(kStageHypernet));
  check_hypernet_matches(loaded.config, cfg.hypernet);
  const HyperNetConfig& hc = loaded.config;

  Genome searched;
  if (genome) {
    searched = *genome;
  } else {
    const json result = read_json(stage.input(kStageSearch) / "result.json");
    searched = parse_genome_text(result.at("genome").get<std::string>(), "search result");
  }
  if (const auto problems = evonas::validate(searched, hc.space()); !problems.empty())
    throw ConfigError("genome " + encode(searched) + " does not fit the hyper-network: " + problems.front());

  const TrainData data = TrainData::from_corpus(corpus, hc);
  const EvalData test = EvalData::from_corpus(split_eval_speakers(corpus, cfg.dev_speakers).test, hc);
  std::optional<HyperNet> scratch;
  if (cfg.retrain.from_scratch) {
    HyperNetConfig fresh = hc;
    fresh.seed = derive_seed(cfg.seed, "retrain-init");
    scratch = HyperNet::build(fresh);
  }

  json rows = json::array();
  json models = json::array();
  const std::vector<std::pair<std::string, Genome>> systems = {{"baseline", cfg.baseline_genome()},
                                                               {"searched", searched}};
  for (const auto& [name, g] : systems) {
    SubNet net = extract_subnet(scratch ? *scratch : loaded.net, g);
    const EvalResult before = evaluate_subnet(net, test);
    TrainState state;
    std::string trace = trace_header();
    retrain(net, data, cfg.retrain.train, state, [&](const TrainState& s) { trace += trace_row(s.trace.back()); });
    const EvalResult after = evaluate_subnet(net, test);
    save_checkpoint(stage.dir() / (name + ".ckpt"), net.params);
    write_text(stage.dir() / (name + "_loss_trace.csv"), trace);
    rows.push_back({{"system", name},
                    {"genome", encode(g)},
                    {"parameter_count", net.parameter_count()},
                    {"eer", after.eer},
                    {"fitness", fitness_from_eer(after.eer)},
                    {"eer_before_retrain", before.eer},
                    {"final_loss_mean20", mean_last(state.trace, 20)}});
    models.push_back({{"system", name}, {"genome", encode(g)}, {"checkpoint", name + ".ckpt"}});
  }
  stage.write_json("models.json", {{"hypernet_config", hypernet_json(hc)}, {"models", models}});
  const json summary = {{"rows", rows}, {"steps", cfg.retrain.train.total_steps()}, {"from_scratch", cfg.retrain.from_scratch}};
  stage.write_json("retrain.json", summary);
  return stage.commit(summary);
}

StageRecord cmd_evaluate(const ExperimentConfig& cfg) {
  cfg.validate();
  StageWriter stage(cfg, kStageEvaluate);
  const Corpus corpus = load_corpus(stage.input(kStageData));
  const fs::path models_dir = stage.input(kStageRetrain);
  const json models = read_json(models_dir / "models.json");
  const HyperNetConfig hc = hypernet_from_json(models.at("hypernet_config"));
  const EvalData test = EvalData::from_corpus(split_eval_speakers(corpus, cfg.dev_speakers).test, hc);
  write_trial_list(stage.dir() / "trials.txt", test.trials);

  json systems = json::array();
  for (const json& m : models.at("models")) {
    const std::string name = m.at("system");
    const Genome g = parse_genome_text(m.at("genome").get<std::string>(), "models.json");
    const SubNet net = load_subnet(hc, g, load_checkpoint(models_dir / m.at("checkpoint").get<std::string>()));
    const EvalResult r = evaluate_subnet(net, test);
    write_scores(stage.dir() / ("scores_" + name + ".txt"), r.scores);
    std::size_t target = 0;
    for (const ScoredTrial& t : r.scores) target += t.target;
    systems.push_back({{"system", name},
                       {"genome", encode(g)},
                       {"eer", r.eer},
                       {"eer_unfolded", r.eer_unfolded},
                       {"trials", r.scores.size()},
                       {"target_trials", target}});
  }
  const json summary = {{"systems", systems}};
  stage.write_json("evaluate.json", summary);
  return stage.commit(summary);
}

StageRecord cmd_report(const ExperimentConfig& cfg) {
  cfg.validate();
  StageWriter stage(cfg, kStageReport);
  stage.input(kStageData);
  const StageRecord data = stage.input_record(kStageData);
  stage.input(kStageHypernet);
  const StageRecord hyper = stage.input_record(kStageHypernet);
  const fs::path search_dir = stage.input(kStageSearch);
  const StageRecord search = stage.input_record(kStageSearch);
  stage.input(kStageRetrain);
  const StageRecord retrain_rec = stage.input_record(kStageRetrain);

  json table = json::array();
  std::ostringstream csv;
  csv.precision(6);
  csv << "system,genome,parameters,eer\n";
  for (const json& row : retrain_rec.summary.at("rows")) {
    const std::string name = row.at("system");
    const std::string label = name == "baseline" ? "baseline (hand-designed)" : "searched";
    table.push_back({{"system", label},
                     {"genome", row.at("genome")},
                     {"parameters", row.at("parameter_count")},
                     {"eer", row.at("eer")}});
    csv << '"' << label << "\",\"" << row.at("genome").get<std::string>() << "\"," << row.at("parameter_count").get<std::size_t>()
        << ',' << row.at("eer").get<double>() << '\n';
  }
  write_text(stage.dir() / "table.csv", csv.str());
  // Copied so the report directory is self-contained.
  fs::copy_file(search_dir / "histogram.csv", stage.dir() / "histogram.csv");

  const json report = {{"seed", cfg.seed},
                       {"corpus", data.summary},
                       {"hypernet",
                        {{"parameter_count", hyper.summary.at("parameter_count")},
                         {"steps", hyper.summary.at("steps")},
                         {"lr_schedule", hyper.summary.at("lr_schedule")},
                         {"final_loss_mean20", hyper.summary.at("final_loss_mean20")}}},
                       {"search", search.summary},
                       {"table", table},
                       {"histogram", "histogram.csv"}};
  stage.write_json("report.json", report);
  return stage.commit(report);
}

}  // namespace evonas
