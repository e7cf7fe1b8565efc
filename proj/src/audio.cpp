#include "dfast/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dfast/error.hpp"

namespace dfast::audio {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 FFT.
void fft_pow2(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / double(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// O(n^2) fallback for non power-of-two sizes.
std::vector<std::complex<double>> dft_naive(const std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> s(0, 0);
    for (size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * kPi * double(k) * double(t) / double(n);
      s += a[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = s;
  }
  return out;
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(uint32_t(b[0]) | uint32_t(b[1]) << 8);
}

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_u16(std::ostream& out, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Waveform resample(const Waveform& w, int target_rate) {
  if (w.samples.empty()) throw ContractError("resample: waveform is empty");
  if (target_rate <= 0) throw ContractError("resample: target rate must be positive");
  if (w.sample_rate == target_rate) return w;
  const int64_t n = int64_t(w.samples.size());
  const int64_t out_n =
      std::max<int64_t>(1, llround(double(n) * double(target_rate) / double(w.sample_rate)));
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(size_t(out_n));
  const double step = double(w.sample_rate) / double(target_rate);
  for (int64_t i = 0; i < out_n; ++i) {
    const double pos = double(i) * step;
    const int64_t i0 = std::min<int64_t>(int64_t(pos), n - 1);
    const int64_t i1 = std::min<int64_t>(i0 + 1, n - 1);
    const double frac = pos - double(i0);
    out.samples[size_t(i)] = (1.0 - frac) * w.samples[size_t(i0)] + frac * w.samples[size_t(i1)];
  }
  return out;
}

ComplexMatrix stft(const Waveform& w, int window, int hop, int fft_size) {
  if (hop <= 0) throw ContractError("stft: hop must be positive");
  if (window <= 0 || window > fft_size)
    throw ContractError("stft: need 0 < window <= fft_size");
  const int64_t n = int64_t(w.samples.size());
  if (n < window)
    throw ContractError("stft: signal length " + std::to_string(n) +
                        " is shorter than one window of " + std::to_string(window));
  const int64_t frames = 1 + (n - window) / hop;
  const int64_t bins = fft_size / 2 + 1;

  std::vector<double> hann(static_cast<size_t>(window), 0.0);
  for (int i = 0; i < window; ++i)
    hann[size_t(i)] = 0.5 * (1.0 - std::cos(2.0 * kPi * double(i) / double(window)));

  ComplexMatrix out;
  out.rows = bins;
  out.cols = frames;
  out.data.assign(size_t(bins * frames), {0.0, 0.0});

  std::vector<std::complex<double>> buf(static_cast<size_t>(fft_size));
  for (int64_t f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0, 0));
    const int64_t off = f * hop;
    for (int i = 0; i < window; ++i)
      buf[size_t(i)] = w.samples[size_t(off + i)] * hann[size_t(i)];
    if (is_pow2(fft_size)) {
      fft_pow2(buf);
      for (int64_t b = 0; b < bins; ++b) out.at(b, f) = buf[size_t(b)];
    } else {
      auto spec = dft_naive(buf);
      for (int64_t b = 0; b < bins; ++b) out.at(b, f) = spec[size_t(b)];
    }
  }
  return out;
}

Tensor<double> mel_filterbank(int n_mels, int sample_rate, double fmin, double fmax,
                              int fft_size) {
  if (n_mels < 2) throw ContractError("mel_filterbank: need at least 2 mel bands");
  if (fmax > double(sample_rate) / 2.0 + 1e-9)
    throw ContractError("mel_filterbank: fmax exceeds Nyquist");
  const int64_t bins = fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  std::vector<double> centers_hz(size_t(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    centers_hz[size_t(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * double(i) / double(n_mels + 1));

  Tensor<double> fb({int64_t(n_mels), bins});
  for (int m = 0; m < n_mels; ++m) {
    const double lo = centers_hz[size_t(m)];
    const double mid = centers_hz[size_t(m) + 1];
    const double hi = centers_hz[size_t(m) + 2];
    for (int64_t k = 0; k < bins; ++k) {
      const double f = double(k) * double(sample_rate) / double(fft_size);
      double wgt = 0.0;
      if (f > lo && f < mid)
        wgt = (f - lo) / (mid - lo);
      else if (f == mid)
        wgt = 1.0;
      else if (f > mid && f < hi)
        wgt = (hi - f) / (hi - mid);
      fb.at(m, k) = wgt;
    }
  }
  return fb;
}

Tensor<double> mel_spectrogram(const Waveform& w, const MelConfig& cfg) {
  if (w.samples.empty()) throw ContractError("mel_spectrogram: waveform is empty");
  const Waveform rs = resample(w, cfg.sample_rate);
  const ComplexMatrix spec = stft(rs, cfg.window, cfg.hop, cfg.fft_size);
  const Tensor<double> fb =
      mel_filterbank(cfg.n_mels, cfg.sample_rate, cfg.fmin, cfg.fmax, cfg.fft_size);
  const int64_t frames = spec.cols, bins = spec.rows;
  Tensor<double> power({bins, frames});
  for (int64_t b = 0; b < bins; ++b)
    for (int64_t f = 0; f < frames; ++f) power.at(b, f) = std::norm(spec.at(b, f));
  Tensor<double> mel({int64_t(cfg.n_mels), frames});
  for (int64_t m = 0; m < cfg.n_mels; ++m)
    for (int64_t f = 0; f < frames; ++f) {
      double acc = 0.0;
      for (int64_t b = 0; b < bins; ++b) acc += fb.at(m, b) * power.at(b, f);
      mel.at(m, f) = std::log(std::max(acc, kLogFloor));
    }
  return mel;
}

Tensor<double> pad_or_truncate(const Tensor<double>& mel, int64_t target) {
  if (mel.rank() != 2 || mel.dim(1) < 1)
    throw ContractError("pad_or_truncate: need a 2-D matrix with at least one frame");
  const int64_t rows = mel.dim(0), cols = mel.dim(1);
  if (cols == target) return mel;
  Tensor<double> out({rows, target});
  const double pad = std::log(kLogFloor);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < target; ++c) out.at(r, c) = c < cols ? mel.at(r, c) : pad;
  return out;
}

Tensor<double> standardize(const Tensor<double>& m) {
  const int64_t n = m.numel();
  double mean = 0;
  for (double v : m.data) mean += v;
  mean /= double(n);
  double var = 0;
  for (double v : m.data) var += (v - mean) * (v - mean);
  var /= double(n);
  Tensor<double> out = m;
  if (var < 1e-12) {
    for (auto& v : out.data) v -= mean;
    return out;
  }
  const double inv = 1.0 / std::sqrt(var);
  for (auto& v : out.data) v = (v - mean) * inv;
  return out;
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open WAV file: " + path.string());
  char tag[5] = {0};
  in.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw FormatError("not a RIFF file: " + path.string());
  read_u32(in);  // chunk size
  in.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw FormatError("not a WAVE file: " + path.string());

  uint16_t channels = 0, bits = 0, format = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  Waveform out;
  while (in.read(tag, 4)) {
    const uint32_t size = read_u32(in);
    if (!in) throw FormatError("truncated WAV chunk header: " + path.string());
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      format = read_u16(in);
      channels = read_u16(in);
      rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("WAV data chunk before fmt: " + path.string());
      if (format != 1 || bits != 16)
        throw FormatError("unsupported WAV encoding (need PCM16): " + path.string());
      if (channels == 0) throw FormatError("WAV has zero channels: " + path.string());
      std::vector<char> raw(size);
      in.read(raw.data(), std::streamsize(size));
      if (in.gcount() != std::streamsize(size))
        throw FormatError("truncated WAV data: " + path.string());
      const size_t n_frames = size / (2u * channels);
      out.samples.resize(n_frames);
      for (size_t i = 0; i < n_frames; ++i) {
        double acc = 0;
        for (uint16_t c = 0; c < channels; ++c) {
          const size_t off = (i * channels + c) * 2;
          const int16_t s = int16_t(uint16_t(uint8_t(raw[off])) |
                                    (uint16_t(uint8_t(raw[off + 1])) << 8));
          acc += double(s) / 32768.0;
        }
        out.samples[i] = acc / double(channels);
      }
      out.sample_rate = int(rate);
      return out;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
    }
  }
  throw FormatError("WAV file has no data chunk: " + path.string());
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot create WAV file: " + path.string());
  const uint32_t data_bytes = uint32_t(w.samples.size() * 2);
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, uint32_t(w.sample_rate));
  write_u32(out, uint32_t(w.sample_rate) * 2);
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (double s : w.samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const int16_t q = int16_t(std::lround(clamped * 32767.0));
    write_u16(out, uint16_t(q));
  }
  if (!out) throw FormatError("failed writing WAV file: " + path.string());
}

}  // namespace dfast::audio
