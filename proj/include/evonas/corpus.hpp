#pragma once

// Speaker corpora: synthetic generation, WAV ingestion, on-disk cache.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "evonas/audio.hpp"
#include "evonas/verifier.hpp"

namespace evonas {

enum class Split { Train, Enroll, Eval };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct Utterance {
  std::string id;
  std::string speaker;
  Split split = Split::Train;
  FeatureMatrix features;
  std::vector<double> latent;  // generating latent, synthetic corpora only
  std::string source;          // WAV path for ingested corpora
};

struct SpeakerRecord {
  std::string id;
  std::vector<std::size_t> utterances;  // indices into Corpus::utterances
};

class Corpus {
 public:
  std::vector<SpeakerRecord> speakers;
  std::vector<Utterance> utterances;

  // Appends, creating the speaker record on first use.
  void add(Utterance u);
  const Utterance& utterance(const std::string& id) const;

  // Speakers owning training utterances, in corpus order.
  std::vector<std::size_t> train_speakers() const;
  // Speakers owning enroll/eval utterances, in corpus order.
  std::vector<std::size_t> eval_speakers() const;
  std::vector<std::size_t> utterances_of(std::size_t speaker, Split split) const;

  // Every eval utterance against every enrolled speaker.
  TrialSet trials() const;

  // Throws ContractError on duplicate ids, a speaker spanning training and
  // evaluation, or records pointing at missing utterances.
  void check() const;
};

struct SyntheticCorpusConfig {
  std::size_t n_train_speakers = 40;
  std::size_t n_eval_speakers = 30;
  std::size_t n_utts = 20;    // per speaker
  std::size_t n_enroll = 10;  // of each eval speaker's n_utts; the rest are eval
  double separation = 4.0;    // norm of every speaker latent
  double noise = 0.4;         // per-dimension std of the per-utterance latent offset
  std::size_t latent_dim = 16;
  std::size_t frames = kTargetFrames;
  double frame_noise = 1.0;    // iid noise per matrix entry
  double content_scale = 1.0;  // shared pattern, cyclically shifted per utterance
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

// Each speaker draws a latent of norm `separation`; each utterance adds
// N(0, noise^2) per dimension to it. Column t of the 40 x frames matrix is
//   R * latent + content_scale * P[:, (t + shift) mod frames] + frame_noise * eps_t
// with R (40 x latent_dim, entries N(0, 1/latent_dim)) and P fixed per seed
// and `shift` drawn per utterance. Features are not mean-normalised: the
// speaker signal is the time-constant part.
Corpus make_synthetic_corpus(const SyntheticCorpusConfig& cfg);

// Cosine scores of utterance latents against enrollment latent means; a
// reference for how separable a synthetic corpus is.
ScoreSet oracle_latent_scores(const Corpus& corpus);

// <root>/<speaker>/<utterance>.wav. The last `n_eval_speakers` speakers in
// sorted order become evaluation speakers with `n_enroll` enrollment
// utterances each (sorted order, shuffled with `seed`); utterances too short
// for one frame are skipped.
Corpus load_wav_corpus(const std::filesystem::path& root, std::size_t n_eval_speakers, std::size_t n_enroll,
                       std::uint64_t seed, const FeatureOptions& options = {});

// <dir>/corpus.json (array of {speaker_id, utterance_id, utterance_path,
// feature_path, split}) plus one checkpoint-format file per utterance under
// <dir>/features/ holding "features" and, when present, "latent".
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace evonas
