#include "evonas/audio.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "evonas/errors.hpp"

namespace evonas {

FeatureMatrix::FeatureMatrix(std::size_t rows, std::size_t frames, double fill)
    : rows_(rows), frames_(frames), data_(rows * frames, fill) {}

FeatureMatrix::FeatureMatrix(std::size_t rows, std::size_t frames, std::vector<double> data)
    : rows_(rows), frames_(frames), data_(std::move(data)) {
  if (data_.size() != rows * frames)
    throw ShapeError("feature matrix " + std::to_string(rows) + "x" + std::to_string(frames) + " given " +
                     std::to_string(data_.size()) + " values");
}

Tensor FeatureMatrix::as_image() const { return Tensor({1, rows_, frames_}, data_); }
Tensor FeatureMatrix::as_tensor() const { return Tensor({rows_, frames_}, data_); }

FeatureMatrix FeatureMatrix::from_tensor(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("feature matrix needs a rank-2 tensor, got " + shape_str(t.shape()));
  auto d = t.data();
  return FeatureMatrix(t.shape()[0], t.shape()[1], std::vector<double>(d.begin(), d.end()));
}

std::vector<double> hamming_window(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
  return w;
}

Frames frame_signal(const Waveform& w, std::size_t frame_length, std::size_t hop) {
  if (frame_length == 0 || hop == 0) throw ContractError("frame length and hop must be positive");
  Frames frames;
  if (w.samples.size() < frame_length) return frames;
  const std::size_t count = (w.samples.size() - frame_length) / hop + 1;
  const std::vector<double> window = hamming_window(frame_length);
  frames.reserve(count);
  for (std::size_t f = 0; f < count; ++f) {
    std::vector<double> frame(frame_length);
    for (std::size_t i = 0; i < frame_length; ++i) frame[i] = w.samples[f * hop + i] * window[i];
    frames.push_back(std::move(frame));
  }
  return frames;
}

std::vector<double> frame_log_energy(const Frames& frames) {
  std::vector<double> e;
  e.reserve(frames.size());
  for (const auto& frame : frames) {
    double s = 0.0;
    for (double v : frame) s += v * v;
    e.push_back(std::log(s + 1e-10));
  }
  return e;
}

std::vector<bool> energy_vad(const Frames& frames, double margin) {
  const std::vector<double> e = frame_log_energy(frames);
  if (e.empty()) return {};
  double mean = 0.0;
  for (double v : e) mean += v;
  mean /= static_cast<double>(e.size());
  std::vector<bool> keep(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) keep[i] = e[i] > mean - margin;
  return keep;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

const std::vector<std::vector<double>>& mel_filterbank() {
  static const std::vector<std::vector<double>> bank = [] {
    const std::size_t bins = kFftSize / 2 + 1;
    const double top = hz_to_mel(kSampleRate / 2.0);
    std::vector<double> edges(kNumMelFilters + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
      edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(kNumMelFilters + 1));
    std::vector<std::vector<double>> filters(kNumMelFilters, std::vector<double>(bins, 0.0));
    for (std::size_t m = 0; m < kNumMelFilters; ++m) {
      const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = static_cast<double>(k) * kSampleRate / static_cast<double>(kFftSize);
        if (f > lo && f <= mid) filters[m][k] = (f - lo) / (mid - lo);
        else if (f > mid && f < hi) filters[m][k] = (hi - f) / (hi - mid);
      }
    }
    return filters;
  }();
  return bank;
}

std::vector<double> log_mel_energies(const std::vector<double>& frame) {
  static thread_local Eigen::FFT<double> fft;
  std::vector<double> padded(kFftSize, 0.0);
  std::copy_n(frame.begin(), std::min(frame.size(), kFftSize), padded.begin());
  std::vector<std::complex<double>> spectrum;
  fft.fwd(spectrum, padded);
  const auto& bank = mel_filterbank();
  std::vector<double> out(kNumMelFilters);
  for (std::size_t m = 0; m < kNumMelFilters; ++m) {
    double s = 0.0;
    for (std::size_t k = 0; k <= kFftSize / 2; ++k)
      if (bank[m][k] != 0.0) s += bank[m][k] * std::abs(spectrum[k]);
    out[m] = std::log(std::max(s, 1e-10));
  }
  return out;
}

namespace {

const std::vector<double>& dct_basis(std::size_t n) {
  static thread_local std::vector<double> basis;
  static thread_local std::size_t cached = 0;
  if (cached != n) {
    basis.assign(n * n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
      for (std::size_t i = 0; i < n; ++i)
        basis[k * n + i] = scale * std::cos(std::numbers::pi * static_cast<double>(k) *
                                            (2.0 * static_cast<double>(i) + 1.0) / (2.0 * static_cast<double>(n)));
    }
    cached = n;
  }
  return basis;
}

}  // namespace

std::vector<double> dct2_orthonormal(const std::vector<double>& x) {
  const std::size_t n = x.size();
  const auto& basis = dct_basis(n);
  std::vector<double> c(n, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) c[k] += basis[k * n + i] * x[i];
  return c;
}

std::vector<double> dct3_orthonormal(const std::vector<double>& c) {
  const std::size_t n = c.size();
  const auto& basis = dct_basis(n);
  std::vector<double> x(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) x[i] += basis[k * n + i] * c[k];
  return x;
}

FeatureMatrix mfcc(const Frames& frames) {
  FeatureMatrix out(kNumCepstra, frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const std::vector<double> cep = dct2_orthonormal(log_mel_energies(frames[t]));
    for (std::size_t r = 0; r < kNumCepstra; ++r) out.at(r, t) = cep[r];
  }
  return out;
}

FeatureMatrix mean_normalize(const FeatureMatrix& f, std::size_t window) {
  if (window == 0) throw ContractError("normalisation window must be positive");
  const std::size_t n = f.frames();
  FeatureMatrix out(f.rows(), n);
  if (n == 0) return out;
  const std::size_t span = std::min(window, n);
  std::vector<double> prefix(n + 1);
  for (std::size_t r = 0; r < f.rows(); ++r) {
    // Sums are taken relative to the first column so constant rows cancel exactly.
    const double ref = f.at(r, 0);
    prefix[0] = 0.0;
    for (std::size_t t = 0; t < n; ++t) prefix[t + 1] = prefix[t] + (f.at(r, t) - ref);
    for (std::size_t t = 0; t < n; ++t) {
      // [start, start + span) centred on t, slid back inside [0, n).
      std::size_t start = t >= span / 2 ? t - span / 2 : 0;
      start = std::min(start, n - span);
      const double mean = (prefix[start + span] - prefix[start]) / static_cast<double>(span);
      out.at(r, t) = (f.at(r, t) - ref) - mean;
    }
  }
  return out;
}

FeatureMatrix fix_length(const FeatureMatrix& f, std::size_t target, CropMode mode, std::mt19937_64* rng) {
  const std::size_t n = f.frames();
  if (n == 0) throw EmptyInputError("fix_length needs at least one frame");
  if (n == target) return f;
  FeatureMatrix out(f.rows(), target);
  std::size_t start = 0;
  if (n > target) {
    if (mode == CropMode::Eval) {
      start = (n - target) / 2;
    } else {
      if (!rng) throw ContractError("random crop needs a generator");
      start = std::uniform_int_distribution<std::size_t>(0, n - target)(*rng);
    }
  }
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t t = 0; t < target; ++t) out.at(r, t) = f.at(r, n > target ? start + t : t % n);
  return out;
}

std::optional<FeatureMatrix> extract_features(const Waveform& w, const FeatureOptions& options, std::mt19937_64* rng) {
  if (w.sample_rate != kSampleRate)
    throw ContractError("expected " + std::to_string(kSampleRate) + " Hz audio, got " + std::to_string(w.sample_rate));
  Frames frames = frame_signal(w);
  if (frames.empty()) return std::nullopt;
  const std::vector<bool> keep = energy_vad(frames, options.vad_margin);
  Frames voiced;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (keep[i]) voiced.push_back(std::move(frames[i]));
  FeatureMatrix f = mean_normalize(mfcc(voiced), options.norm_window);
  return fix_length(f, options.target_frames, options.crop, rng);
}

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open wav file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw ParseError("not a RIFF/WAVE file: " + path.string(), 0);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const auto size = get_le<std::uint32_t>(bytes, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw ParseError("truncated '" + id + "' chunk in " + path.string(), pos);
    if (id == "fmt ") {
      if (size < 16) throw ParseError("short fmt chunk in " + path.string(), pos);
      format = get_le<std::uint16_t>(bytes, body);
      channels = get_le<std::uint16_t>(bytes, body + 2);
      rate = get_le<std::uint32_t>(bytes, body + 4);
      bits = get_le<std::uint16_t>(bytes, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw ParseError("data chunk before fmt chunk in " + path.string(), pos);
      if (format != 1 || channels != 1 || bits != 16)
        throw ParseError("only 16-bit mono PCM is supported: " + path.string(), pos);
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.reserve(size / 2);
      for (std::size_t i = 0; i + 1 < size; i += 2)
        w.samples.push_back(static_cast<double>(get_le<std::int16_t>(bytes, body + i)) / 32768.0);
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw ParseError("no data chunk in " + path.string(), pos);
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  std::string out = "RIFF";
  put_le<std::uint32_t>(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_le<std::uint32_t>(out, 16);
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put_le<std::uint16_t>(out, 2);
  put_le<std::uint16_t>(out, 16);
  out += "data";
  put_le<std::uint32_t>(out, data_bytes);
  for (double s : w.samples) {
    const double clipped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clipped * 32768.0))));
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write wav file " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace evonas
