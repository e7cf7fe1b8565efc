#include "dfast/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>

#include "dfast/error.hpp"

namespace dfast {

Manifest Manifest::load(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("cannot open manifest: " + manifest_path.string());
  Manifest m;
  m.base_dir = manifest_path.parent_path();
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      SampleMeta s;
      s.subject_id = j.at("subject_id").get<std::string>();
      s.trial_id = j.at("trial_id").get<std::string>();
      s.label = j.at("label").get<int>();
      s.face_path = j.at("face_path").get<std::string>();
      s.pose_path = j.at("pose_path").get<std::string>();
      s.audio_path = j.at("audio_path").get<std::string>();
      s.delta = j.value("delta", 0.0);
      s.affected_side = j.value("affected_side", "");
      if (s.label != 0 && s.label != 1)
        throw SchemaError("manifest line " + std::to_string(lineno) + ": label must be 0 or 1");
      m.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("manifest line " + std::to_string(lineno) +
                        " is missing required fields: " + e.what());
    }
  }
  if (m.samples.empty()) throw SchemaError("manifest has no samples: " + manifest_path.string());
  return m;
}

std::vector<std::string> Manifest::subjects() const {
  std::set<std::string> uniq;
  for (const auto& s : samples) uniq.insert(s.subject_id);
  return {uniq.begin(), uniq.end()};
}

Tensor<float> prep_face(const landmarks::FaceSequence& s, const PatchTransformerConfig& cfg) {
  landmarks::FaceSequence norm = landmarks::normalize_face(s);
  norm = landmarks::resample_time(norm, kFaceFramesTarget);
  const Tensor<double> grid = landmarks::face_to_grid(norm, cfg.input_h, cfg.input_w);
  return patchify(grid, cfg.patch_size).cast<float>();
}

Tensor<float> prep_voice(const audio::Waveform& w, const PatchTransformerConfig& cfg) {
  audio::MelConfig mel_cfg;
  Tensor<double> mel = audio::mel_spectrogram(w, mel_cfg);
  mel = audio::pad_or_truncate(mel, cfg.input_w);
  mel = audio::standardize(mel);
  if (mel.dim(0) > cfg.input_h)
    throw ContractError("mel rows exceed the encoder grid height");
  if (mel.dim(0) < cfg.input_h) {
    Tensor<double> padded({int64_t(cfg.input_h), mel.dim(1)});
    std::copy(mel.data.begin(), mel.data.end(), padded.data.begin());
    mel = std::move(padded);
  }
  return patchify(mel, cfg.patch_size).cast<float>();
}

Tensor<float> prep_pose(const landmarks::PoseSequence& s, const MixerConfig& cfg) {
  landmarks::PoseSequence norm = landmarks::normalize_pose(s);
  norm = landmarks::resample_time(norm, kPoseFramesTarget);
  Tensor<double> tokens = pose_to_tokens(norm.frames);
  if (tokens.dim(0) != cfg.tokens || tokens.dim(1) != cfg.input_channels)
    throw ContractError("pose tokens " + shape_str(tokens.shape) +
                        " do not match the mixer configuration");
  return tokens.cast<float>();
}

Tensor<float> prep_face_file(const std::filesystem::path& p,
                             const PatchTransformerConfig& cfg) {
  return prep_face(landmarks::FaceSequence{landmarks::read_lmk1(p), 30.0}, cfg);
}

Tensor<float> prep_voice_file(const std::filesystem::path& p,
                              const PatchTransformerConfig& cfg) {
  return prep_voice(audio::read_wav(p), cfg);
}

Tensor<float> prep_pose_file(const std::filesystem::path& p, const MixerConfig& cfg) {
  return prep_pose(landmarks::PoseSequence{landmarks::read_lmk1(p), 30.0}, cfg);
}

Dataset Dataset::load(const Manifest& manifest, const ModelConfig& cfg) {
  Dataset ds;
  ds.samples.reserve(manifest.samples.size());
  for (const auto& meta : manifest.samples) {
    PreppedSample s;
    s.subject_id = meta.subject_id;
    s.trial_id = meta.trial_id;
    s.label = meta.label;
    s.delta = meta.delta;
    if (cfg.uses(Modality::Face))
      s.face_patches = prep_face_file(manifest.base_dir / meta.face_path, cfg.face);
    if (cfg.uses(Modality::Voice))
      s.voice_patches = prep_voice_file(manifest.base_dir / meta.audio_path, cfg.voice);
    if (cfg.uses(Modality::Pose))
      s.pose_tokens = prep_pose_file(manifest.base_dir / meta.pose_path, cfg.pose);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset Dataset::subset_by_subject(const std::vector<std::string>& ids) const {
  const std::set<std::string> want(ids.begin(), ids.end());
  Dataset out;
  for (const auto& s : samples)
    if (want.count(s.subject_id)) out.samples.push_back(s);
  return out;
}

std::vector<std::string> Dataset::subjects() const {
  std::set<std::string> uniq;
  for (const auto& s : samples) uniq.insert(s.subject_id);
  return {uniq.begin(), uniq.end()};
}

namespace {

Tensor<float> stack_rows(const Dataset& ds, const std::vector<int64_t>& idx,
                         Tensor<float> PreppedSample::* field) {
  const Tensor<float>& first = ds.samples[size_t(idx[0])].*field;
  Shape s = first.shape;
  s.insert(s.begin(), int64_t(idx.size()));
  Tensor<float> out(s);
  const int64_t n = first.numel();
  for (size_t i = 0; i < idx.size(); ++i) {
    const Tensor<float>& src = ds.samples[size_t(idx[i])].*field;
    if (src.shape != first.shape)
      throw DimensionError("batch: inconsistent sample shapes " + shape_str(src.shape) +
                           " vs " + shape_str(first.shape));
    std::copy(src.data.begin(), src.data.end(), out.data.begin() + int64_t(i) * n);
  }
  return out;
}

}  // namespace

BatchInput<float> make_batch(const Dataset& ds, const std::vector<int64_t>& idx,
                             const ModelConfig& cfg) {
  if (idx.empty()) throw ContractError("make_batch: empty index list");
  BatchInput<float> b;
  b.batch = int64_t(idx.size());
  if (cfg.uses(Modality::Face)) b.face = stack_rows(ds, idx, &PreppedSample::face_patches);
  if (cfg.uses(Modality::Voice)) b.voice = stack_rows(ds, idx, &PreppedSample::voice_patches);
  if (cfg.uses(Modality::Pose)) b.pose = stack_rows(ds, idx, &PreppedSample::pose_tokens);
  return b;
}

std::vector<float> batch_labels(const Dataset& ds, const std::vector<int64_t>& idx) {
  std::vector<float> out;
  out.reserve(idx.size());
  for (int64_t i : idx) out.push_back(float(ds.samples[size_t(i)].label));
  return out;
}

}  // namespace dfast
