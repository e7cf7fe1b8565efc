#pragma once

#include <complex>
#include <filesystem>
#include <vector>

#include "dfast/tensor.hpp"

namespace dfast::audio {

// Power floor applied before the log; also the pad value of padded frames.
constexpr double kLogFloor = 1e-10;

struct Waveform {
  std::vector<double> samples;  // mono, in [-1, 1]
  int sample_rate = 16000;

  double duration() const { return double(samples.size()) / double(sample_rate); }
};

struct ComplexMatrix {
  int64_t rows = 0, cols = 0;
  std::vector<std::complex<double>> data;  // row-major

  std::complex<double>& at(int64_t r, int64_t c) { return data[size_t(r * cols + c)]; }
  const std::complex<double>& at(int64_t r, int64_t c) const {
    return data[size_t(r * cols + c)];
  }
};

struct MelConfig {
  int sample_rate = 16000;
  int n_mels = 80;
  int target_frames = 256;
  int window = 400;  // 25 ms at 16 kHz
  int hop = 160;     // 10 ms
  int fft_size = 512;
  double fmin = 0.0;
  double fmax = 8000.0;
};

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Linear-interpolation resampling; returns the input untouched when the rate
// already matches. Duration is preserved within one sample period.
Waveform resample(const Waveform& w, int target_rate);

// Short-time Fourier transform, Hann window, no edge padding:
// frames = 1 + floor((len - window) / hop). Result is (fft_size/2 + 1) x frames.
ComplexMatrix stft(const Waveform& w, int window, int hop, int fft_size);

// Triangular mel filterbank (n_mels x fft_size/2+1), HTK scale, unit peaks.
Tensor<double> mel_filterbank(int n_mels, int sample_rate, double fmin, double fmax,
                              int fft_size);

// resample -> stft -> power -> filterbank -> log(max(x, kLogFloor)).
// Output is n_mels x frames (not yet padded to target_frames).
Tensor<double> mel_spectrogram(const Waveform& w, const MelConfig& cfg = {});

// Right-pads with log(kLogFloor) or keeps the first `target` frames.
Tensor<double> pad_or_truncate(const Tensor<double>& mel, int64_t target = 256);

// Zero-mean unit-variance over all entries; the divide is skipped below
// variance 1e-12 so constant inputs stay finite.
Tensor<double> standardize(const Tensor<double>& m);

// RIFF PCM16 I/O; stereo inputs are averaged to mono on read.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);

}  // namespace dfast::audio
