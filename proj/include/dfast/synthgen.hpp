#pragma once

#include <filesystem>
#include <string>

#include "dfast/audio.hpp"
#include "dfast/landmarks.hpp"
#include "dfast/rng.hpp"

namespace dfast::synthgen {

// Severity delta in [0,1] controls the simulated impairment magnitude;
// delta = 0 makes the stroke generator coincide with the healthy one for
// matched RNG streams. sigma scales measurement noise.
struct GenParams {
  double delta = 0.6;
  double sigma = 1.0;
  uint64_t seed = 1;
  int n_subjects = 8;
  int trials_per_class = 3;
};

struct SubjectParams {
  bool affected_left = false;
  double delta = 0.0;  // subject-level severity (jittered +/-20% around GenParams::delta)
};

// Deterministic per-subject draws: affected side and severity jitter.
SubjectParams subject_params(const GenParams& p, int subject);

// Smile task: mouth corners rise by A sin^2(pi t / (F-1)); the affected
// corner's amplitude shrinks by (1 - delta). 90 frames at 30 fps.
landmarks::FaceSequence gen_face(Rng& rng, bool stroke, double delta, double sigma,
                                 bool affected_left);

// Sentence task: five syllable bursts (120 Hz fundamental plus two formants)
// over 1.2 s; stroke stretches duration by (1 + delta) and low-pass smooths
// the onsets. 16 kHz output.
audio::Waveform gen_voice(Rng& rng, bool stroke, double delta, double sigma);

// Arm task: wrists rise to shoulder height, hold, then move to the nose;
// the affected wrist peaks lower, rises slower, trembles at 5 Hz and misses
// the nose by 0.05 delta. 150 frames at 30 fps.
landmarks::PoseSequence gen_pose(Rng& rng, bool stroke, double delta, double sigma,
                                 bool affected_left);

// All three modalities of one trial, with the per-(seed,subject,trial,
// modality) RNG streams used by gen_dataset.
struct GeneratedTrial {
  landmarks::FaceSequence face;
  audio::Waveform voice;
  landmarks::PoseSequence pose;
  int label = 0;
  double delta = 0.0;  // severity ground truth (0 for healthy trials)
  bool affected_left = false;
};

GeneratedTrial gen_trial(uint64_t seed, int subject, int trial, bool stroke,
                         double subject_delta, double sigma, bool affected_left);

struct DatasetSummary {
  int subjects = 0;
  int samples = 0;
  int files = 0;
  std::filesystem::path manifest_path;
};

// Writes LMK1/WAV files plus a JSON-lines manifest under out_dir:
// 3 healthy + 3 stroke trials per subject. Refuses to touch a non-empty
// directory unless force is set.
DatasetSummary gen_dataset(const GenParams& p, const std::filesystem::path& out_dir,
                           bool force = false);

// Closed-form symptom summaries used as model-independent oracles.
double face_asymmetry_index(const landmarks::FaceSequence& s);  // |A_L-A_R| / max
double wrist_peak_gap(const landmarks::PoseSequence& s);        // |peak_L - peak_R|

}  // namespace dfast::synthgen
