#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "dfast/audio.hpp"
#include "dfast/error.hpp"
#include "dfast/landmarks.hpp"
#include "dfast/synthgen.hpp"

using namespace dfast;
using namespace dfast::synthgen;

namespace {

namespace fs = std::filesystem;

double corner_peak(const landmarks::FaceSequence& s, int corner) {
  const double base = s.frames.at(0, corner, 1);
  double peak = 0;
  for (int64_t f = 0; f < s.frames.dim(0); ++f)
    peak = std::max(peak, base - s.frames.at(f, corner, 1));
  return peak;
}

// number of distinct above-threshold energy bursts in the mel-frame energy
int count_energy_bursts(const audio::Waveform& w) {
  const auto mel = audio::mel_spectrogram(w);
  std::vector<double> energy(size_t(mel.dim(1)), 0.0);
  for (int64_t f = 0; f < mel.dim(1); ++f)
    for (int64_t m = 0; m < mel.dim(0); ++m) energy[size_t(f)] += std::exp(mel.at(m, f));
  const double peak = *std::max_element(energy.begin(), energy.end());
  const double thresh = 0.05 * peak;
  int bursts = 0;
  bool inside = false;
  for (double e : energy) {
    if (e >= thresh && !inside) {
      ++bursts;
      inside = true;
    } else if (e < thresh) {
      inside = false;
    }
  }
  return bursts;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("gen_face: amplitudes, asymmetry index, neutral endpoints") {
  Rng rng(1);
  const auto s = gen_face(rng, /*stroke=*/true, 0.5, /*sigma=*/0.0, /*affected_left=*/true);
  CHECK(s.frames.dim(0) == 90);
  // the sin^2 envelope peaks at sin^2(44 pi / 89) on the 90-frame grid
  const double env_peak = std::pow(std::sin(M_PI * 44.0 / 89.0), 2);
  CHECK(corner_peak(s, landmarks::kLeftMouthCorner) ==
        doctest::Approx(0.05 * env_peak).epsilon(1e-9));
  CHECK(corner_peak(s, landmarks::kRightMouthCorner) ==
        doctest::Approx(0.10 * env_peak).epsilon(1e-9));
  CHECK(corner_peak(s, landmarks::kLeftMouthCorner) == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(corner_peak(s, landmarks::kRightMouthCorner) == doctest::Approx(0.10).epsilon(1e-3));
  CHECK(face_asymmetry_index(s) == doctest::Approx(0.5).epsilon(1e-9));

  // healthy: identical corner displacement trajectories
  Rng rng2(2);
  const auto h = gen_face(rng2, false, 0.5, 0.0, true);
  const double bl = h.frames.at(0, landmarks::kLeftMouthCorner, 1);
  const double br = h.frames.at(0, landmarks::kRightMouthCorner, 1);
  for (int64_t f = 0; f < h.frames.dim(0); ++f)
    CHECK(h.frames.at(f, landmarks::kLeftMouthCorner, 1) - bl ==
          doctest::Approx(h.frames.at(f, landmarks::kRightMouthCorner, 1) - br)
              .epsilon(1e-12));

  // first and last frames equal the neutral template (sin^2 = 0)
  for (int p = 0; p < landmarks::kFacePoints; ++p)
    for (int c = 0; c < 2; ++c)
      CHECK(s.frames.at(0, p, c) == s.frames.at(89, p, c));
}

TEST_CASE("gen_voice: duration stretch, five bursts, delta-zero degeneracy") {
  Rng rng(3);
  const auto stroked = gen_voice(rng, true, 0.5, 0.0);
  CHECK(stroked.samples.size() == size_t(std::lround(1.8 * 16000)));
  CHECK(audio::mel_spectrogram(stroked).dim(1) == 178);

  Rng rng2(4);
  const auto healthy = gen_voice(rng2, false, 0.5, 0.0);
  CHECK(healthy.samples.size() == size_t(std::lround(1.2 * 16000)));
  CHECK(count_energy_bursts(healthy) == 5);

  Rng ra(77), rb(77);
  const auto h0 = gen_voice(ra, false, 0.0, 1.0);
  const auto s0 = gen_voice(rb, true, 0.0, 1.0);
  CHECK(h0.samples == s0.samples);
}

TEST_CASE("gen_pose: wrist peaks, mirror symmetry, tremor formula") {
  Rng rng(5);
  const auto s = gen_pose(rng, true, 0.4, 0.0, /*affected_left=*/true);
  CHECK(s.frames.dim(0) == 150);
  double peak_l = -1, peak_r = -1;
  for (int64_t f = 0; f < 90; ++f) {
    peak_l = std::max(peak_l, s.frames.at(f, landmarks::kLeftWrist, 1));
    peak_r = std::max(peak_r, s.frames.at(f, landmarks::kRightWrist, 1));
  }
  CHECK(peak_l == doctest::Approx(0.30).epsilon(1e-9));
  CHECK(peak_r == doctest::Approx(0.50).epsilon(1e-9));
  CHECK(wrist_peak_gap(s) == doctest::Approx(0.20).epsilon(1e-9));

  Rng rng2(6);
  const auto h = gen_pose(rng2, false, 0.4, 0.0, true);
  for (int64_t f = 0; f < 150; ++f) {
    CHECK(h.frames.at(f, landmarks::kLeftWrist, 0) ==
          doctest::Approx(-h.frames.at(f, landmarks::kRightWrist, 0)).epsilon(1e-12));
    CHECK(h.frames.at(f, landmarks::kLeftWrist, 1) ==
          doctest::Approx(h.frames.at(f, landmarks::kRightWrist, 1)).epsilon(1e-12));
  }

  // tremor amplitude at delta = 1 is 0.07: compare the affected wrist to the
  // tremor-free path during the reach phase
  Rng rng3(7);
  const auto t1 = gen_pose(rng3, true, 1.0, 0.0, true);
  double max_dev = 0;
  const double nose_y = 0.70, hold_y = 0.0;  // peak = 0.5*(1-1) = 0
  for (int64_t f = 90; f < 150; ++f) {
    const double tau = double(f - 90) / 59.0;
    const double smooth = hold_y + tau * (nose_y - hold_y);
    max_dev = std::max(max_dev,
                       std::abs(t1.frames.at(f, landmarks::kLeftWrist, 1) - smooth));
  }
  // max |sin(pi f / 3)| over integer f is sin(pi/3)
  CHECK(max_dev == doctest::Approx(0.07 * std::sin(M_PI / 3.0)).epsilon(1e-9));
}

TEST_CASE("severity monotonicity of all three symptom axes") {
  double prev_asym = -1, prev_dur = -1, prev_gap = -1;
  for (int k = 1; k <= 9; ++k) {
    const double delta = 0.1 * k;
    Rng rf(10), rv(11), rp(12);
    const double asym = face_asymmetry_index(gen_face(rf, true, delta, 0.0, true));
    const double dur = gen_voice(rv, true, delta, 0.0).duration();
    const double gap = wrist_peak_gap(gen_pose(rp, true, delta, 0.0, true));
    CHECK(asym > prev_asym);
    CHECK(dur > prev_dur);
    CHECK(gap > prev_gap);
    prev_asym = asym;
    prev_dur = dur;
    prev_gap = gap;
  }
}

TEST_CASE("delta-zero degeneracy across all modalities") {
  for (uint64_t seed : {1ull, 9ull}) {
    Rng a1(seed), a2(seed);
    CHECK(gen_face(a1, false, 0.0, 1.0, true).frames.data ==
          gen_face(a2, true, 0.0, 1.0, true).frames.data);
    Rng b1(seed), b2(seed);
    CHECK(gen_pose(b1, false, 0.0, 1.0, false).frames.data ==
          gen_pose(b2, true, 0.0, 1.0, false).frames.data);
  }
}

TEST_CASE("generated trials satisfy the preprocessing contracts") {
  const auto trial = gen_trial(31, 0, 3, true, 0.6, 1.0, false);
  CHECK_NOTHROW(landmarks::validate(trial.face));
  CHECK_NOTHROW(landmarks::validate(trial.pose));
  CHECK_NOTHROW(landmarks::normalize_face(trial.face));
  CHECK_NOTHROW(landmarks::normalize_pose(trial.pose));
  CHECK(audio::mel_spectrogram(trial.voice).dim(0) == 80);
  for (double v : trial.voice.samples) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("threshold rule on the asymmetry index recovers labels at sigma 0") {
  GenParams p;
  p.delta = 0.1;
  p.sigma = 0.0;
  p.seed = 17;
  p.n_subjects = 6;
  for (int s = 0; s < p.n_subjects; ++s) {
    const auto sp = subject_params(p, s);
    for (int t = 0; t < 6; ++t) {
      const bool stroke = t >= 3;
      const auto trial = gen_trial(p.seed, s, t, stroke, sp.delta, p.sigma, sp.affected_left);
      const bool predicted = face_asymmetry_index(trial.face) > 0.04;
      CHECK(predicted == stroke);
    }
  }
}

TEST_CASE("gen_dataset writes the manifest, balanced labels, and is reproducible") {
  const fs::path base = fs::temp_directory_path() / "dfast_synth_test";
  fs::remove_all(base);
  GenParams p;
  p.n_subjects = 8;
  p.seed = 5;
  p.delta = 0.6;
  p.sigma = 1.0;

  const auto sum1 = gen_dataset(p, base / "a");
  CHECK(sum1.subjects == 8);
  CHECK(sum1.samples == 48);
  CHECK(sum1.files == 144);

  std::ifstream mf(sum1.manifest_path);
  int lines = 0, ones = 0;
  std::string line;
  while (std::getline(mf, line))
    if (!line.empty()) {
      ++lines;
      if (line.find("\"label\":1") != std::string::npos) ++ones;
    }
  CHECK(lines == 48);
  CHECK(ones == 24);

  // per-subject balance
  {
    std::ifstream again(sum1.manifest_path);
    std::map<std::string, int> per_subject;
    while (std::getline(again, line)) {
      if (line.empty()) continue;
      const auto pos = line.find("\"subject_id\":\"");
      const std::string sid = line.substr(pos + 14, 4);
      if (line.find("\"label\":1") != std::string::npos) per_subject[sid] += 1;
    }
    for (const auto& [sid, n] : per_subject) CHECK(n == 3);
  }

  // refuse to overwrite without force
  CHECK_THROWS_AS(gen_dataset(p, base / "a"), Error);

  // byte-identical regeneration
  const auto sum2 = gen_dataset(p, base / "b");
  CHECK(file_bytes(sum1.manifest_path) == file_bytes(sum2.manifest_path));
  for (const auto& rel : {"s000/t0.face.lmk", "s003/t4.wav", "s007/t5.pose.lmk"})
    CHECK(file_bytes(base / "a" / rel) == file_bytes(base / "b" / rel));
  fs::remove_all(base);
}
