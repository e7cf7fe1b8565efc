#include "dfast/synthgen.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "dfast/error.hpp"

namespace dfast::synthgen {

namespace {

constexpr double kPi = 3.14159265358979323846;

constexpr int kFaceFrames = 90;
constexpr int kPoseFrames = 150;
constexpr double kFps = 30.0;
constexpr int kVoiceRate = 16000;

constexpr double kSmileAmp = 0.1;          // healthy mouth-corner rise
constexpr double kFaceNoise = 0.005;       // sigma multiplier, face coords
constexpr double kPoseNoise = 0.01;        // sigma multiplier, pose coords
constexpr double kVoiceNoise = 0.01;       // sigma multiplier, waveform
constexpr double kWristPeak = 0.5;         // shoulder height
constexpr int kRiseFrames = 60;
constexpr int kReachStart = 90;

// per-(seed,subject,trial) stream ids
constexpr uint64_t kStreamSubject = 0x50b;
constexpr uint64_t kStreamFace = 1;
constexpr uint64_t kStreamVoice = 2;
constexpr uint64_t kStreamPose = 3;

const std::array<int, 6>& left_cheek_points() {
  static const std::array<int, 6> v{50, 101, 118, 187, 205, 212};
  return v;
}
const std::array<int, 6>& right_cheek_points() {
  static const std::array<int, 6> v{280, 330, 347, 411, 425, 432};
  return v;
}

// Deterministic neutral face mesh in normalized image coordinates: a spiral
// fill of an ellipse, with the semantic points pinned to face-like positions.
Tensor<double> face_template() {
  Tensor<double> tpl({int64_t(landmarks::kFacePoints), 2});
  for (int i = 0; i < landmarks::kFacePoints; ++i) {
    const double t = double(i) / double(landmarks::kFacePoints);
    const double radius = 0.04 + 0.36 * std::sqrt(t);
    const double ang = double(i) * 2.399963229728653;  // golden angle
    tpl.at(i, 0) = 0.5 + 0.75 * radius * std::cos(ang);
    tpl.at(i, 1) = 0.47 + radius * std::sin(ang);
  }
  tpl.at(landmarks::kLeftMouthCorner, 0) = 0.40;
  tpl.at(landmarks::kLeftMouthCorner, 1) = 0.62;
  tpl.at(landmarks::kRightMouthCorner, 0) = 0.60;
  tpl.at(landmarks::kRightMouthCorner, 1) = 0.62;
  const auto& lc = left_cheek_points();
  const auto& rc = right_cheek_points();
  for (size_t j = 0; j < lc.size(); ++j) {
    const double dx = 0.015 * double(j % 3) - 0.015;
    const double dy = 0.02 * double(j / 3) - 0.05;
    tpl.at(lc[j], 0) = 0.36 + dx;
    tpl.at(lc[j], 1) = 0.56 + dy;
    tpl.at(rc[j], 0) = 0.64 - dx;
    tpl.at(rc[j], 1) = 0.56 + dy;
  }
  return tpl;
}

// Neutral 33-point skeleton. Left-side joints sit at negative x; wrists rest
// at y = 0, shoulders at y = 0.5, nose at y = 0.7.
Tensor<double> pose_template() {
  Tensor<double> tpl({int64_t(landmarks::kPosePoints), 3});
  auto set = [&](int i, double x, double y, double z) {
    tpl.at(i, 0) = x;
    tpl.at(i, 1) = y;
    tpl.at(i, 2) = z;
  };
  set(0, 0.0, 0.70, 0.10);  // nose
  for (int i = 1; i <= 10; ++i) {
    const int side = (i % 2 == 1) ? -1 : 1;  // odd indices: left
    set(i, side * (0.02 + 0.01 * ((i - 1) / 2)), 0.70 + 0.01 * ((i - 1) / 2), 0.08);
  }
  set(11, -0.20, 0.50, 0.0);  // shoulders
  set(12, 0.20, 0.50, 0.0);
  set(13, -0.28, 0.25, 0.02);  // elbows
  set(14, 0.28, 0.25, 0.02);
  set(15, -0.30, 0.0, 0.05);  // wrists
  set(16, 0.30, 0.0, 0.05);
  for (int k = 0; k < 3; ++k) {  // pinky/index/thumb near each wrist
    set(17 + 2 * k, -0.31 - 0.01 * k, -0.03, 0.05);
    set(18 + 2 * k, 0.31 + 0.01 * k, -0.03, 0.05);
  }
  set(23, -0.10, 0.0, 0.0);  // hips
  set(24, 0.10, 0.0, 0.0);
  set(25, -0.12, -0.40, 0.01);  // knees
  set(26, 0.12, -0.40, 0.01);
  set(27, -0.13, -0.80, 0.02);  // ankles
  set(28, 0.13, -0.80, 0.02);
  set(29, -0.14, -0.85, 0.04);  // heels / feet
  set(30, 0.14, -0.85, 0.04);
  set(31, -0.15, -0.88, 0.08);
  set(32, 0.15, -0.88, 0.08);
  return tpl;
}

struct SyllableDraw {
  double phase0, phase1, phase2;
  double jit1, jit2;
};

}  // namespace

SubjectParams subject_params(const GenParams& p, int subject) {
  Rng rng(Rng::mix({p.seed, uint64_t(subject), kStreamSubject}));
  SubjectParams sp;
  sp.affected_left = rng.coin();
  const double u = rng.uniform(-1.0, 1.0);
  sp.delta = std::clamp(p.delta * (1.0 + 0.2 * u), 0.0, 1.0);
  return sp;
}

landmarks::FaceSequence gen_face(Rng& rng, bool stroke, double delta, double sigma,
                                 bool affected_left) {
  static const Tensor<double> tpl = face_template();
  const double amp_left =
      (stroke && affected_left) ? kSmileAmp * (1.0 - delta) : kSmileAmp;
  const double amp_right =
      (stroke && !affected_left) ? kSmileAmp * (1.0 - delta) : kSmileAmp;

  Tensor<double> frames({kFaceFrames, int64_t(landmarks::kFacePoints), 2});
  for (int f = 0; f < kFaceFrames; ++f) {
    const double s2 = std::pow(std::sin(kPi * double(f) / double(kFaceFrames - 1)), 2);
    for (int p = 0; p < landmarks::kFacePoints; ++p) {
      frames.at(f, p, 0) = tpl.at(p, 0);
      frames.at(f, p, 1) = tpl.at(p, 1);
    }
    // mouth corners rise (upward = -y in image coordinates)
    frames.at(f, landmarks::kLeftMouthCorner, 1) -= amp_left * s2;
    frames.at(f, landmarks::kRightMouthCorner, 1) -= amp_right * s2;
    for (int c : left_cheek_points()) frames.at(f, c, 1) -= 0.5 * amp_left * s2;
    for (int c : right_cheek_points()) frames.at(f, c, 1) -= 0.5 * amp_right * s2;
  }
  if (sigma > 0) {
    const double noise = sigma * kFaceNoise;
    for (auto& v : frames.data) v += noise * rng.normal();
  } else {
    // keep the stream position independent of sigma
    for (int64_t i = 0; i < frames.numel(); ++i) rng.normal();
  }
  return {std::move(frames), kFps};
}

audio::Waveform gen_voice(Rng& rng, bool stroke, double delta, double sigma) {
  constexpr int kSyllables = 5;
  // formant pairs per word of the five-word test sentence
  static const std::array<std::pair<double, double>, kSyllables> formants{
      {{700, 1200}, {600, 900}, {300, 2300}, {500, 1800}, {350, 800}}};

  std::array<SyllableDraw, kSyllables> draws{};
  for (auto& d : draws) {
    d.phase0 = rng.uniform(0.0, 2.0 * kPi);
    d.phase1 = rng.uniform(0.0, 2.0 * kPi);
    d.phase2 = rng.uniform(0.0, 2.0 * kPi);
    d.jit1 = 1.0 + 0.03 * rng.uniform(-1.0, 1.0);
    d.jit2 = 1.0 + 0.03 * rng.uniform(-1.0, 1.0);
  }

  const double stretch = stroke ? 1.0 + delta : 1.0;
  const double total = 1.2 * stretch;
  const int n = int(std::lround(total * kVoiceRate));
  const double slot = total / kSyllables;
  const double voiced = 0.65 * slot;
  constexpr double kAttack = 0.003, kRelease = 0.010;

  std::vector<double> env(size_t(n), 0.0);
  for (int s = 0; s < kSyllables; ++s) {
    const int lo = int(std::lround(double(s) * slot * kVoiceRate));
    const int hi = std::min(n, int(std::lround((double(s) * slot + voiced) * kVoiceRate)));
    for (int i = lo; i < hi; ++i) {
      const double t = double(i - lo) / kVoiceRate;
      const double tail = voiced - t;
      env[size_t(i)] =
          (1.0 - std::exp(-t / kAttack)) * (1.0 - std::exp(-std::max(tail, 0.0) / kRelease));
    }
  }
  if (stroke && delta > 0) {
    // one-pole low-pass blurs the plosive-like onsets
    const double tau = 0.05 * delta;
    const double alpha = std::exp(-1.0 / (tau * kVoiceRate));
    double y = 0.0;
    for (auto& e : env) {
      y = alpha * y + (1.0 - alpha) * e;
      e = y;
    }
  }

  audio::Waveform w;
  w.sample_rate = kVoiceRate;
  w.samples.assign(size_t(n), 0.0);
  for (int s = 0; s < kSyllables; ++s) {
    const int lo = int(std::lround(double(s) * slot * kVoiceRate));
    const int hi = std::min(n, int(std::lround(double(s + 1) * slot * kVoiceRate)));
    const double f1 = formants[size_t(s)].first * draws[size_t(s)].jit1;
    const double f2 = formants[size_t(s)].second * draws[size_t(s)].jit2;
    for (int i = lo; i < hi; ++i) {
      const double t = double(i) / kVoiceRate;
      const double tone = 0.55 * std::sin(2 * kPi * 120.0 * t + draws[size_t(s)].phase0) +
                          0.25 * std::sin(2 * kPi * f1 * t + draws[size_t(s)].phase1) +
                          0.20 * std::sin(2 * kPi * f2 * t + draws[size_t(s)].phase2);
      w.samples[size_t(i)] = 0.3 * env[size_t(i)] * tone;
    }
  }
  const double noise = sigma * kVoiceNoise;
  for (auto& v : w.samples) {
    const double z = rng.normal();
    if (sigma > 0) v = std::clamp(v + noise * z, -1.0, 1.0);
  }
  return w;
}

landmarks::PoseSequence gen_pose(Rng& rng, bool stroke, double delta, double sigma,
                                 bool affected_left) {
  static const Tensor<double> tpl = pose_template();
  const int L = landmarks::kLeftWrist, R = landmarks::kRightWrist;
  const double nose_x = tpl.at(landmarks::kNose, 0);
  const double nose_y = tpl.at(landmarks::kNose, 1);
  const double nose_z = tpl.at(landmarks::kNose, 2);

  // tremor amplitude 0.02 + 0.05*delta at full severity, gated by delta so
  // delta = 0 degenerates to the healthy generator
  const double tremor_amp = stroke ? delta * (0.02 + 0.05 * delta) : 0.0;
  const double reach_end = kPoseFrames - 1;

  Tensor<double> frames({kPoseFrames, int64_t(landmarks::kPosePoints), 3});
  for (int side = 0; side < 2; ++side) {
    const bool left = side == 0;
    const bool affected = stroke && (left == affected_left);
    const int wrist = left ? L : R;
    const int elbow = left ? 13 : 14;
    const std::array<int, 3> hand = left ? std::array<int, 3>{17, 19, 21}
                                         : std::array<int, 3>{18, 20, 22};
    const double peak = affected ? kWristPeak * (1.0 - delta) : kWristPeak;
    const double rise = affected ? kRiseFrames * (1.0 + 0.3 * delta) : double(kRiseFrames);
    const double miss =
        affected ? 0.05 * delta * (affected_left ? -1.0 : 1.0) : 0.0;

    const double wx = tpl.at(wrist, 0), wy = tpl.at(wrist, 1), wz = tpl.at(wrist, 2);
    for (int f = 0; f < kPoseFrames; ++f) {
      double px = wx, py = wy, pz = wz;
      if (f < kReachStart) {
        py = wy + peak * std::min(1.0, double(f) / rise);
      } else {
        // hand tremor accompanies the nose-touch movement
        const double hold_y = wy + peak;
        const double tau = (double(f) - kReachStart) / (reach_end - kReachStart);
        px = wx + tau * (nose_x + miss - wx);
        py = hold_y + tau * (nose_y - hold_y);
        pz = wz + tau * (nose_z - wz);
        if (affected) py += tremor_amp * std::sin(2 * kPi * 5.0 * double(f) / kFps);
      }
      const double dx = px - wx, dy = py - wy, dz = pz - wz;
      frames.at(f, wrist, 0) = px;
      frames.at(f, wrist, 1) = py;
      frames.at(f, wrist, 2) = pz;
      for (int hpt : hand) {
        frames.at(f, hpt, 0) = tpl.at(hpt, 0) + dx;
        frames.at(f, hpt, 1) = tpl.at(hpt, 1) + dy;
        frames.at(f, hpt, 2) = tpl.at(hpt, 2) + dz;
      }
      frames.at(f, elbow, 0) = tpl.at(elbow, 0);
      frames.at(f, elbow, 1) = tpl.at(elbow, 1) + 0.5 * dy;
      frames.at(f, elbow, 2) = tpl.at(elbow, 2);
    }
  }
  // static joints
  for (int f = 0; f < kPoseFrames; ++f)
    for (int p = 0; p < landmarks::kPosePoints; ++p) {
      if (p >= 13 && p <= 22) continue;  // arms handled above
      frames.at(f, p, 0) = tpl.at(p, 0);
      frames.at(f, p, 1) = tpl.at(p, 1);
      frames.at(f, p, 2) = tpl.at(p, 2);
    }
  if (sigma > 0) {
    const double noise = sigma * kPoseNoise;
    for (auto& v : frames.data) v += noise * rng.normal();
  } else {
    for (int64_t i = 0; i < frames.numel(); ++i) rng.normal();
  }
  return {std::move(frames), kFps};
}

GeneratedTrial gen_trial(uint64_t seed, int subject, int trial, bool stroke,
                         double subject_delta, double sigma, bool affected_left) {
  GeneratedTrial out;
  out.label = stroke ? 1 : 0;
  out.delta = stroke ? subject_delta : 0.0;
  out.affected_left = affected_left;
  Rng face_rng(Rng::mix({seed, uint64_t(subject), uint64_t(trial), kStreamFace}));
  Rng voice_rng(Rng::mix({seed, uint64_t(subject), uint64_t(trial), kStreamVoice}));
  Rng pose_rng(Rng::mix({seed, uint64_t(subject), uint64_t(trial), kStreamPose}));
  out.face = gen_face(face_rng, stroke, subject_delta, sigma, affected_left);
  out.voice = gen_voice(voice_rng, stroke, subject_delta, sigma);
  out.pose = gen_pose(pose_rng, stroke, subject_delta, sigma, affected_left);
  return out;
}

DatasetSummary gen_dataset(const GenParams& p, const std::filesystem::path& out_dir,
                           bool force) {
  namespace fs = std::filesystem;
  if (p.n_subjects < 3) throw ContractError("gen_dataset: need at least 3 subjects");
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
    throw Error("output directory " + out_dir.string() +
                " is not empty (pass force to overwrite)");
  fs::create_directories(out_dir);

  DatasetSummary sum;
  sum.manifest_path = out_dir / "manifest.jsonl";
  std::ofstream manifest(sum.manifest_path);
  if (!manifest) throw Error("cannot create manifest at " + sum.manifest_path.string());

  const int per_subject = 2 * p.trials_per_class;
  for (int s = 0; s < p.n_subjects; ++s) {
    const SubjectParams sp = subject_params(p, s);
    char sid[16];
    std::snprintf(sid, sizeof(sid), "s%03d", s);
    const fs::path sdir = out_dir / sid;
    fs::create_directories(sdir);
    for (int t = 0; t < per_subject; ++t) {
      const bool stroke = t >= p.trials_per_class;
      const GeneratedTrial trial =
          gen_trial(p.seed, s, t, stroke, sp.delta, p.sigma, sp.affected_left);
      const std::string tid = "t" + std::to_string(t);
      const fs::path face_path = sdir / (tid + ".face.lmk");
      const fs::path pose_path = sdir / (tid + ".pose.lmk");
      const fs::path wav_path = sdir / (tid + ".wav");
      landmarks::write_lmk1(face_path, trial.face.frames);
      landmarks::write_lmk1(pose_path, trial.pose.frames);
      audio::write_wav(wav_path, trial.voice);
      nlohmann::json row{
          {"subject_id", sid},
          {"trial_id", tid},
          {"label", trial.label},
          {"face_path", (fs::path(sid) / (tid + ".face.lmk")).generic_string()},
          {"pose_path", (fs::path(sid) / (tid + ".pose.lmk")).generic_string()},
          {"audio_path", (fs::path(sid) / (tid + ".wav")).generic_string()},
          {"delta", trial.delta},
          {"affected_side", sp.affected_left ? "left" : "right"}};
      manifest << row.dump() << "\n";
      sum.samples += 1;
      sum.files += 3;
    }
    sum.subjects += 1;
  }
  manifest.flush();
  if (!manifest) throw Error("failed writing manifest at " + sum.manifest_path.string());
  return sum;
}

double face_asymmetry_index(const landmarks::FaceSequence& s) {
  const int64_t f_n = s.frames.dim(0);
  double peak_l = 0, peak_r = 0;
  const double base_l = s.frames.at(0, landmarks::kLeftMouthCorner, 1);
  const double base_r = s.frames.at(0, landmarks::kRightMouthCorner, 1);
  for (int64_t f = 0; f < f_n; ++f) {
    peak_l = std::max(peak_l, base_l - s.frames.at(f, landmarks::kLeftMouthCorner, 1));
    peak_r = std::max(peak_r, base_r - s.frames.at(f, landmarks::kRightMouthCorner, 1));
  }
  const double mx = std::max(peak_l, peak_r);
  return mx > 0 ? std::abs(peak_l - peak_r) / mx : 0.0;
}

double wrist_peak_gap(const landmarks::PoseSequence& s) {
  // raise-and-hold window only: the later nose-touch phase brings both
  // wrists to the same height regardless of severity
  const int64_t f_n = (s.frames.dim(0) * 3) / 5;
  double peak_l = -1e9, peak_r = -1e9;
  for (int64_t f = 0; f < f_n; ++f) {
    peak_l = std::max(peak_l, s.frames.at(f, landmarks::kLeftWrist, 1));
    peak_r = std::max(peak_r, s.frames.at(f, landmarks::kRightWrist, 1));
  }
  return std::abs(peak_l - peak_r);
}

}  // namespace dfast::synthgen
