#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "evonas/audio.hpp"
#include "evonas/corpus.hpp"
#include "evonas/errors.hpp"

using namespace evonas;

namespace {

Waveform sine(double hz, std::size_t n, double amp = 0.5) {
  Waveform w;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = amp * std::sin(2 * std::numbers::pi * hz * i / 16000.0);
  return w;
}

FeatureMatrix random_matrix(std::size_t rows, std::size_t frames, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  FeatureMatrix f(rows, frames);
  for (double& v : f.data()) v = g(rng);
  return f;
}

// Independent mel arithmetic: which 40-filter triangle peaks highest at hz.
std::size_t oracle_mel_bin(double hz) {
  auto mel = [](double f) { return 1127.0 * std::log(1.0 + f / 700.0); };
  const double step = mel(8000.0) / 41.0, m = mel(hz);
  std::size_t best = 0;
  double best_weight = -1;
  for (std::size_t k = 0; k < 40; ++k) {
    const double centre = (k + 1) * step;
    const double weight = 1.0 - std::abs(m - centre) / step;
    if (weight > best_weight) best_weight = weight, best = k;
  }
  return best;
}

}  // namespace

TEST_CASE("frame_signal") {
  CHECK(frame_signal(sine(440, 48000)).size() == 298);
  CHECK(frame_signal(sine(440, 48000)).size() == (48000 - 400) / 160 + 1);
  CHECK(frame_signal(sine(440, 400)).size() == 1);
  CHECK(frame_signal(sine(440, 399)).empty());
  CHECK(frame_signal(Waveform{}).empty());
  for (std::size_t n : {401u, 559u, 560u, 561u, 16000u}) CHECK(frame_signal(sine(100, n)).size() == (n - 400) / 160 + 1);

  Waveform ones{std::vector<double>(1000, 1.0)};
  const Frames frames = frame_signal(ones);
  for (const auto& f : frames)
    for (std::size_t i = 0; i < 400; ++i)
      CHECK(f[i] == doctest::Approx(0.54 - 0.46 * std::cos(2 * std::numbers::pi * i / 399.0)).epsilon(1e-15));

  Waveform ramp;
  for (int i = 0; i < 800; ++i) ramp.samples.push_back(i / 1000.0);
  const Frames r = frame_signal(ramp);
  const auto window = hamming_window(400);
  CHECK(r[2][7] == doctest::Approx(ramp.samples[2 * 160 + 7] * window[7]));
}

TEST_CASE("energy_vad") {
  SUBCASE("uniform energy keeps everything") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> dither(-1e-6, 1e-6);
    Waveform silence;
    for (int i = 0; i < 16000; ++i) silence.samples.push_back(dither(rng));
    auto mask = energy_vad(frame_signal(silence));
    CHECK(std::all_of(mask.begin(), mask.end(), [](bool b) { return b; }));
    mask = energy_vad(frame_signal(sine(300, 16000)));
    CHECK(std::all_of(mask.begin(), mask.end(), [](bool b) { return b; }));
  }
  SUBCASE("burst among silence") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> dither(-1e-6, 1e-6);
    Waveform w;
    for (int i = 0; i < 24000; ++i) w.samples.push_back(dither(rng) + ((i >= 8000 && i < 16000) ? 0.5 * std::sin(i * 0.3) : 0.0));
    const Frames frames = frame_signal(w);
    const auto mask = energy_vad(frames);
    // Oracle: direct threshold on summed squares.
    std::vector<double> e;
    for (const auto& f : frames) {
      double s = 0;
      for (double v : f) s += v * v;
      e.push_back(std::log(s + 1e-10));
    }
    double mean = 0;
    for (double v : e) mean += v;
    mean /= e.size();
    for (std::size_t i = 0; i < frames.size(); ++i) {
      CHECK(mask[i] == (e[i] > mean - 3.0));
      const std::size_t start = i * 160, end = start + 400;
      const bool overlaps = end > 8000 && start < 16000;
      if (!overlaps) CHECK_FALSE(mask[i]);
      if (start >= 8000 && end <= 16000) CHECK(mask[i]);
    }
  }
}

TEST_CASE("mfcc") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 0.1);
  Waveform noise;
  for (int i = 0; i < 5000; ++i) noise.samples.push_back(g(rng));
  const FeatureMatrix f = mfcc(frame_signal(noise));
  CHECK(f.rows() == 40);
  CHECK(f.frames() == frame_signal(noise).size());
  CHECK(mfcc({}).rows() == 40);

  SUBCASE("pure tones peak at the containing mel bin") {
    for (double hz : {1000.0, 300.0, 2500.0, 5000.0}) {
      const Frames frames = frame_signal(sine(hz, 4000));
      const FeatureMatrix c = mfcc(frames);
      for (std::size_t t = 0; t < c.frames(); ++t) {
        std::vector<double> cep(40);
        for (std::size_t r = 0; r < 40; ++r) cep[r] = c.at(r, t);
        const auto logmel = dct3_orthonormal(cep);
        const auto peak = std::max_element(logmel.begin(), logmel.end()) - logmel.begin();
        CHECK(static_cast<std::size_t>(peak) == oracle_mel_bin(hz));
      }
    }
  }
  SUBCASE("identical frames give identical columns") {
    const Waveform block = sine(100, 160);  // one period == one hop
    Waveform periodic;
    for (int rep = 0; rep < 5; ++rep) periodic.samples.insert(periodic.samples.end(), block.samples.begin(), block.samples.end());
    const FeatureMatrix c = mfcc(frame_signal(periodic));
    REQUIRE(c.frames() == 3);
    for (std::size_t r = 0; r < 40; ++r) {
      CHECK(c.at(r, 0) == c.at(r, 1));
      CHECK(c.at(r, 1) == c.at(r, 2));
    }
  }
  SUBCASE("orthonormal DCT pair") {
    std::vector<double> x(40);
    for (double& v : x) v = g(rng);
    const auto c = dct2_orthonormal(x);
    const auto back = dct3_orthonormal(c);
    double energy_x = 0, energy_c = 0;
    for (std::size_t i = 0; i < 40; ++i) {
      CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-12));
      energy_x += x[i] * x[i];
      energy_c += c[i] * c[i];
    }
    CHECK(energy_x == doctest::Approx(energy_c).epsilon(1e-12));
    double c0 = 0;
    for (double v : x) c0 += v;
    CHECK(c[0] == doctest::Approx(c0 / std::sqrt(40.0)).epsilon(1e-12));
  }
  SUBCASE("mel scale") {
    CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
    CHECK(mel_to_hz(hz_to_mel(1234.5)) == doctest::Approx(1234.5));
    const auto& bank = mel_filterbank();
    CHECK(bank.size() == 40);
    CHECK(bank[0].size() == 257);
  }
}

TEST_CASE("mean_normalize") {
  std::mt19937_64 rng(4);
  SUBCASE("constant matrix becomes zero") {
    for (std::size_t t : {1u, 50u, 300u, 301u, 777u}) {
      FeatureMatrix f(40, t, 0.1);
      const FeatureMatrix n = mean_normalize(f);
      for (double v : n.data()) CHECK(v == 0.0);
    }
  }
  SUBCASE("short inputs subtract the global mean and are idempotent") {
    for (std::size_t t : {7u, 150u, 300u}) {
      FeatureMatrix f = random_matrix(40, t, rng);
      FeatureMatrix n = mean_normalize(f);
      for (std::size_t r = 0; r < 40; ++r) {
        double mean = 0;
        for (std::size_t c = 0; c < t; ++c) mean += f.at(r, c);
        mean /= t;
        for (std::size_t c = 0; c < t; ++c) CHECK(n.at(r, c) == doctest::Approx(f.at(r, c) - mean).epsilon(1e-12));
      }
      FeatureMatrix twice = mean_normalize(n);
      for (std::size_t i = 0; i < n.data().size(); ++i) CHECK(std::abs(twice.data()[i] - n.data()[i]) < 1e-12);
    }
  }
  SUBCASE("long inputs against a direct window oracle") {
    FeatureMatrix f = random_matrix(40, 600, rng);
    FeatureMatrix n = mean_normalize(f);
    double worst = 0;
    for (std::size_t t = 0; t < 600; ++t) {
      // 300-column window centred on t, clamped into [0, 600).
      long lo = static_cast<long>(t) - 150;
      lo = std::clamp(lo, 0L, 300L);
      for (std::size_t r = 0; r < 40; ++r) {
        double s = 0;
        for (long c = lo; c < lo + 300; ++c) s += f.at(r, c);
        worst = std::max(worst, std::abs(n.at(r, t) - (f.at(r, t) - s / 300.0)));
      }
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("fix_length") {
  std::mt19937_64 rng(5);
  FeatureMatrix same = random_matrix(40, 300, rng);
  CHECK(fix_length(same, 300, CropMode::Eval) == same);
  CHECK(fix_length(same, 300, CropMode::Train, &rng) == same);

  FeatureMatrix short_f = random_matrix(40, 298, rng);
  FeatureMatrix padded = fix_length(short_f, 300, CropMode::Eval);
  REQUIRE(padded.frames() == 300);
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t t = 0; t < 300; ++t) CHECK(padded.at(r, t) == short_f.at(r, t % 298));

  FeatureMatrix one = random_matrix(40, 1, rng);
  FeatureMatrix tiled = fix_length(one, 300, CropMode::Train, &rng);
  for (std::size_t t = 0; t < 300; ++t) CHECK(tiled.at(5, t) == one.at(5, 0));

  FeatureMatrix long_f = random_matrix(40, 600, rng);
  FeatureMatrix centred = fix_length(long_f, 300, CropMode::Eval);
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t t = 0; t < 300; ++t) CHECK(centred.at(r, t) == long_f.at(r, 150 + t));

  std::vector<int> starts_seen(301, 0);
  for (int trial = 0; trial < 200; ++trial) {
    FeatureMatrix crop = fix_length(long_f, 300, CropMode::Train, &rng);
    // A contiguous window: find its start from column 0 and check every column.
    std::size_t start = 0;
    while (start <= 300 && long_f.at(0, start) != crop.at(0, 0)) ++start;
    REQUIRE(start <= 300);
    ++starts_seen[start];
    for (std::size_t t = 0; t < 300; ++t) CHECK(crop.at(3, t) == long_f.at(3, start + t));
  }
  CHECK(std::count_if(starts_seen.begin(), starts_seen.end(), [](int c) { return c > 0; }) > 100);
  CHECK_THROWS_AS(fix_length(long_f, 300, CropMode::Train), ContractError);
  CHECK_THROWS_AS(fix_length(FeatureMatrix(40, 0), 300, CropMode::Eval), EmptyInputError);
}

TEST_CASE("full feature pipeline") {
  auto f = extract_features(sine(440, 48000));
  REQUIRE(f);
  CHECK(f->rows() == 40);
  CHECK(f->frames() == 300);

  auto constant = extract_features(Waveform{std::vector<double>(48000, 0.25)});
  REQUIRE(constant);
  for (double v : constant->data()) CHECK(v == 0.0);

  CHECK_FALSE(extract_features(sine(440, 399)));
  CHECK_THROWS_AS(extract_features(Waveform{std::vector<double>(1000, 0.0), 8000}), ContractError);

  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> length(0, 64000);
  std::uniform_int_distribution<int> kind(0, 4);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::size_t rejected = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Waveform w;
    const std::size_t n = length(rng);
    const int k = kind(rng);
    const double amp = std::pow(10.0, -4 * std::abs(u(rng)));
    for (std::size_t i = 0; i < n; ++i) {
      double v = 0;
      if (k == 1) v = amp * u(rng);
      if (k == 2) v = amp * std::sin(i * (0.01 + std::abs(g(rng)) * 1e-3));
      if (k == 3) v = (i % 3000 < 500) ? amp * u(rng) : 0.0;
      if (k == 4) v = std::clamp(g(rng), -1.0, 1.0);
      w.samples.push_back(v);
    }
    auto out = extract_features(w, {}, nullptr);
    if (!out) {
      CHECK(n < 400);
      ++rejected;
      continue;
    }
    CHECK(out->rows() == 40);
    CHECK(out->frames() == 300);
    CHECK(std::all_of(out->data().begin(), out->data().end(), [](double v) { return std::isfinite(v); }));
  }
  CHECK(rejected < 10);
}

TEST_CASE("wav round trip") {
  const auto path = std::filesystem::temp_directory_path() / "evonas_test.wav";
  Waveform w = sine(440, 1234, 0.9);
  w.samples.push_back(-1.0);
  write_wav(path, w);
  Waveform back = read_wav(path);
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(std::abs(back.samples[i] - w.samples[i]) <= 0.5 / 32768.0 + 1e-12);
  CHECK(back.samples.back() == -1.0);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_wav(path), IoError);
}

TEST_CASE("synthetic corpus") {
  SyntheticCorpusConfig cfg;
  cfg.n_train_speakers = 6;
  cfg.n_eval_speakers = 30;
  cfg.seed = 11;

  SUBCASE("deterministic under a seed") {
    Corpus a = make_synthetic_corpus(cfg), b = make_synthetic_corpus(cfg);
    REQUIRE(a.utterances.size() == b.utterances.size());
    for (std::size_t i = 0; i < a.utterances.size(); ++i) {
      CHECK(a.utterances[i].id == b.utterances[i].id);
      CHECK(a.utterances[i].features == b.utterances[i].features);
    }
    cfg.seed = 12;
    CHECK_FALSE(make_synthetic_corpus(cfg).utterances[0].features == a.utterances[0].features);
  }
  SUBCASE("shape and split") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      cfg.seed = seed;
      Corpus c = make_synthetic_corpus(cfg);
      CHECK_NOTHROW(c.check());
      CHECK(c.train_speakers().size() == 6);
      CHECK(c.eval_speakers().size() == 30);
      for (std::size_t s : c.eval_speakers()) {
        CHECK(c.utterances_of(s, Split::Enroll).size() == 10);
        CHECK(c.utterances_of(s, Split::Eval).size() == 10);
        CHECK(c.utterances_of(s, Split::Train).empty());
      }
      for (const auto& u : c.utterances) {
        CHECK(u.features.rows() == 40);
        CHECK(u.features.frames() == 300);
      }
      CHECK(c.trials().trials.size() == 300 * 30);
    }
  }
  SUBCASE("separability follows separation/noise") {
    cfg.separation = 0.0;
    cfg.noise = 0.4;
    CHECK(std::abs(compute_eer(oracle_latent_scores(make_synthetic_corpus(cfg))) - 0.5) <= 0.05);
    cfg.separation = 4.0;
    CHECK(compute_eer(oracle_latent_scores(make_synthetic_corpus(cfg))) < 0.02);
  }
  SUBCASE("configuration errors") {
    cfg.n_utts = 1;
    CHECK_THROWS_AS(make_synthetic_corpus(cfg), ConfigError);
    cfg.n_utts = 20;
    cfg.noise = -1;
    CHECK_THROWS_AS(make_synthetic_corpus(cfg), ConfigError);
  }
  SUBCASE("disk round trip") {
    cfg.n_eval_speakers = 3;
    cfg.n_utts = 4;
    cfg.n_enroll = 2;
    Corpus c = make_synthetic_corpus(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "evonas_corpus_test";
    std::filesystem::remove_all(dir);
    save_corpus(dir, c);
    Corpus back = load_corpus(dir);
    REQUIRE(back.utterances.size() == c.utterances.size());
    for (std::size_t i = 0; i < c.utterances.size(); ++i) {
      CHECK(back.utterances[i].id == c.utterances[i].id);
      CHECK(back.utterances[i].split == c.utterances[i].split);
      CHECK(back.utterances[i].features == c.utterances[i].features);
      CHECK(back.utterances[i].latent == c.utterances[i].latent);
    }
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(load_corpus(dir), IoError);
  }
  SUBCASE("check rejects overlapping splits") {
    cfg.n_eval_speakers = 2;
    Corpus c = make_synthetic_corpus(cfg);
    c.utterances[c.speakers[c.eval_speakers()[0]].utterances[0]].split = Split::Train;
    CHECK_THROWS_AS(c.check(), ContractError);
  }
}

TEST_CASE("wav corpus ingestion") {
  const auto root = std::filesystem::temp_directory_path() / "evonas_wav_corpus";
  std::filesystem::remove_all(root);
  for (int s = 0; s < 4; ++s) {
    std::filesystem::create_directories(root / ("spk" + std::to_string(s)));
    for (int u = 0; u < 3; ++u)
      write_wav(root / ("spk" + std::to_string(s)) / ("u" + std::to_string(u) + ".wav"), sine(200.0 + 50 * s + 7 * u, 8000));
  }
  Corpus c = load_wav_corpus(root, 2, 1, 0);
  CHECK(c.speakers.size() == 4);
  CHECK(c.train_speakers().size() == 2);
  CHECK(c.eval_speakers().size() == 2);
  for (std::size_t s : c.eval_speakers()) CHECK(c.utterances_of(s, Split::Enroll).size() == 1);
  CHECK(c.utterances[0].features.frames() == 300);
  CHECK_THROWS_AS(load_wav_corpus(root, 4, 1, 0), ConfigError);
  std::filesystem::remove_all(root);
}
