#pragma once

// Waveform -> 40 x 300 MFCC matrices:
//   frame (25 ms Hamming, 10 ms hop) -> energy VAD -> MFCC -> sliding mean
//   normalisation -> crop/pad to a fixed frame count.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <random>
#include <vector>

#include "evonas/tensor.hpp"

namespace evonas {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kFrameLength = 400;  // 25 ms
inline constexpr std::size_t kFrameHop = 160;     // 10 ms
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kNumCepstra = 40;
inline constexpr std::size_t kNumMelFilters = 40;
inline constexpr std::size_t kTargetFrames = 300;
inline constexpr std::size_t kNormWindowFrames = 300;  // 3 s
inline constexpr double kVadMarginNats = 3.0;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;
};

// Row-major [rows x frames] matrix of cepstral coefficients.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t frames, double fill = 0.0);
  FeatureMatrix(std::size_t rows, std::size_t frames, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t frames() const { return frames_; }
  double& at(std::size_t r, std::size_t t) { return data_[r * frames_ + t]; }
  double at(std::size_t r, std::size_t t) const { return data_[r * frames_ + t]; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  // [1, rows, frames] network input.
  Tensor as_image() const;
  Tensor as_tensor() const;  // [rows, frames]
  static FeatureMatrix from_tensor(const Tensor& t);

  bool operator==(const FeatureMatrix&) const = default;

 private:
  std::size_t rows_ = 0, frames_ = 0;
  std::vector<double> data_;
};

using Frames = std::vector<std::vector<double>>;

std::vector<double> hamming_window(std::size_t n);

// floor((len - 400) / 160) + 1 Hamming-windowed frames; empty when the
// signal is shorter than one frame.
Frames frame_signal(const Waveform& w, std::size_t frame_length = kFrameLength, std::size_t hop = kFrameHop);

std::vector<double> frame_log_energy(const Frames& frames);
// Keeps frames whose log-energy exceeds the utterance mean minus `margin`.
std::vector<bool> energy_vad(const Frames& frames, double margin = kVadMarginNats);

// Triangular filters over magnitude bins 0..kFftSize/2, edges equally spaced
// on the HTK mel scale between 0 Hz and Nyquist. [filters][bins].
const std::vector<std::vector<double>>& mel_filterbank();
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Per frame: |FFT_512| -> mel filterbank -> log (floored at 1e-10) ->
// orthonormal DCT-II, keeping all 40 coefficients (c0 included).
FeatureMatrix mfcc(const Frames& frames);
std::vector<double> log_mel_energies(const std::vector<double>& frame);
std::vector<double> dct2_orthonormal(const std::vector<double>& x);
std::vector<double> dct3_orthonormal(const std::vector<double>& c);

// Subtracts from each column the mean over a `window`-frame span centred on
// it; near the edges the span is shifted to stay inside the utterance, and it
// is the whole utterance when T <= window.
FeatureMatrix mean_normalize(const FeatureMatrix& f, std::size_t window = kNormWindowFrames);

enum class CropMode { Train, Eval };
// T == target: unchanged. T > target: Eval takes the centred window, Train a
// uniformly random one (needs rng). T < target: columns repeat cyclically.
FeatureMatrix fix_length(const FeatureMatrix& f, std::size_t target, CropMode mode, std::mt19937_64* rng = nullptr);

struct FeatureOptions {
  double vad_margin = kVadMarginNats;
  std::size_t target_frames = kTargetFrames;
  std::size_t norm_window = kNormWindowFrames;
  CropMode crop = CropMode::Eval;
};

// Full pipeline; nullopt when the waveform is shorter than one frame.
std::optional<FeatureMatrix> extract_features(const Waveform& w, const FeatureOptions& options = {},
                                              std::mt19937_64* rng = nullptr);

// RIFF/WAVE, PCM 16-bit, mono, 16 kHz.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);

}  // namespace evonas
