#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dfast/audio.hpp"
#include "dfast/landmarks.hpp"
#include "dfast/model.hpp"

namespace dfast {

struct SampleMeta {
  std::string subject_id;
  std::string trial_id;
  int label = 0;
  std::string face_path, pose_path, audio_path;  // relative to the manifest
  double delta = 0.0;
  std::string affected_side;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<SampleMeta> samples;

  static Manifest load(const std::filesystem::path& manifest_path);
  std::vector<std::string> subjects() const;  // unique ids, sorted
};

// One sample with every used modality already preprocessed into the
// encoder-input layout.
struct PreppedSample {
  std::string subject_id;
  std::string trial_id;
  int label = 0;
  double delta = 0.0;
  Tensor<float> face_patches;  // (tokens, patch^2)
  Tensor<float> voice_patches;
  Tensor<float> pose_tokens;  // (33, frames*3)
};

struct Dataset {
  std::vector<PreppedSample> samples;

  static Dataset load(const Manifest& manifest, const ModelConfig& cfg);
  Dataset subset_by_subject(const std::vector<std::string>& ids) const;
  std::vector<std::string> subjects() const;
  int64_t size() const { return int64_t(samples.size()); }
};

// Preprocessing pipelines (shared by the dataset loader and single-sample
// inference).
Tensor<float> prep_face(const landmarks::FaceSequence& s, const PatchTransformerConfig& cfg);
Tensor<float> prep_voice(const audio::Waveform& w, const PatchTransformerConfig& cfg);
Tensor<float> prep_pose(const landmarks::PoseSequence& s, const MixerConfig& cfg);
Tensor<float> prep_face_file(const std::filesystem::path& p, const PatchTransformerConfig& cfg);
Tensor<float> prep_voice_file(const std::filesystem::path& p,
                              const PatchTransformerConfig& cfg);
Tensor<float> prep_pose_file(const std::filesystem::path& p, const MixerConfig& cfg);

// Fixed temporal lengths of the landmark branches.
constexpr int64_t kFaceFramesTarget = 256;
constexpr int64_t kPoseFramesTarget = 64;

BatchInput<float> make_batch(const Dataset& ds, const std::vector<int64_t>& idx,
                             const ModelConfig& cfg);
std::vector<float> batch_labels(const Dataset& ds, const std::vector<int64_t>& idx);

}  // namespace dfast
