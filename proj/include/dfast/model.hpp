#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dfast/encoders.hpp"
#include "dfast/fusion.hpp"
#include "dfast/params.hpp"

namespace dfast {

enum class Modality { Face = 0, Voice = 1, Pose = 2 };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::Face: return "face";
    case Modality::Voice: return "voice";
    case Modality::Pose: return "pose";
  }
  return "?";
}

inline Modality modality_from_name(const std::string& s) {
  if (s == "face") return Modality::Face;
  if (s == "voice") return Modality::Voice;
  if (s == "pose") return Modality::Pose;
  throw ContractError("unknown modality: " + s + " (expected face|voice|pose)");
}

// Desk-scale encoder configurations. The face branch keeps more capacity
// than the voice branch; the pose branch is a small mixer.
inline PatchTransformerConfig face_encoder_config() {
  PatchTransformerConfig c;
  c.patch_size = 16;
  c.embed_dim = 128;
  c.depth = 4;
  c.heads = 4;
  c.mlp_ratio = 4;
  c.input_h = 128;
  c.input_w = 128;
  return c;
}

// The 80 x 256 mel grid is zero-padded to 96 x 256 along the mel axis so the
// 16-pixel patches tile it exactly.
constexpr int kMelPaddedRows = 96;

inline PatchTransformerConfig voice_encoder_config() {
  PatchTransformerConfig c;
  c.patch_size = 16;
  c.embed_dim = 96;
  c.depth = 4;
  c.heads = 3;
  c.mlp_ratio = 4;
  c.input_h = kMelPaddedRows;
  c.input_w = 256;
  return c;
}

inline MixerConfig pose_encoder_config() { return MixerConfig{}; }

struct ModelConfig {
  std::array<bool, 3> use{true, true, true};  // face, voice, pose
  FusionKind fusion = FusionKind::Attention;
  PatchTransformerConfig face = face_encoder_config();
  PatchTransformerConfig voice = voice_encoder_config();
  MixerConfig pose = pose_encoder_config();
  double dropout = 0.1;
  bool freeze_encoders = false;

  int modality_count() const {
    int n = 0;
    for (bool u : use) n += u ? 1 : 0;
    return n;
  }

  bool uses(Modality m) const { return use[size_t(m)]; }

  int head_input_dim() const {
    return fusion == FusionKind::Concat ? kEmbedDim * modality_count() : kEmbedDim;
  }

  void validate() const {
    if (modality_count() == 0) throw ContractError("model needs at least one modality");
    if (uses(Modality::Face)) face.validate();
    if (uses(Modality::Voice)) voice.validate();
  }

  std::string modalities_string() const {
    std::string s;
    for (int m = 0; m < 3; ++m)
      if (use[size_t(m)]) s += (s.empty() ? "" : ",") + std::string(modality_name(Modality(m)));
    return s;
  }
};

// One already-preprocessed batch: patch tokens for the grid branches and
// joint tokens for the pose branch. Only the tensors of used modalities
// need to be populated.
template <typename T>
struct BatchInput {
  int64_t batch = 0;
  Tensor<T> face;   // (B, 64, 256) patch tokens
  Tensor<T> voice;  // (B, 96, 256) patch tokens
  Tensor<T> pose;   // (B, 33, 192) joint tokens
};

template <typename T>
struct ForwardResult {
  Var<T> logits;          // (B)
  Var<T> fusion_weights;  // defined for wsum/attention
};

// Per-modality encoder outputs before the projector; used to cache frozen
// encoder features across epochs.
template <typename T>
using FeatureSet = std::array<Tensor<T>, 3>;

// Assembled screening model: modality encoders -> projectors -> fusion ->
// classification head (layer_norm, GELU, dropout, linear to one logit).
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix({seed, 0xd1857ull}));
    if (cfg_.uses(Modality::Face))
      init_patch_transformer(params_, "encoder.face", cfg_.face, rng);
    if (cfg_.uses(Modality::Voice))
      init_patch_transformer(params_, "encoder.voice", cfg_.voice, rng);
    if (cfg_.uses(Modality::Pose)) init_mixer(params_, "encoder.pose", cfg_.pose, rng);
    if (cfg_.uses(Modality::Face))
      init_projector(params_, "projector.face", cfg_.face.embed_dim, rng);
    if (cfg_.uses(Modality::Voice))
      init_projector(params_, "projector.voice", cfg_.voice.embed_dim, rng);
    if (cfg_.uses(Modality::Pose))
      init_projector(params_, "projector.pose", cfg_.pose.width, rng);
    if (cfg_.modality_count() > 1) init_fusion(params_, cfg_.fusion, rng);
    const int64_t hd = cfg_.head_input_dim();
    params_.add("head.norm.gain", Tensor<T>::full({hd}, T(1)));
    params_.add("head.norm.shift", Tensor<T>::zeros({hd}));
    params_.add("head.linear.weight", trunc_normal_init<T>({1, hd}, 0.02, rng));
    params_.add("head.linear.bias", Tensor<T>::zeros({1}));
    if (cfg_.freeze_encoders) apply_freeze();
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  void apply_freeze() {
    for (int m = 0; m < 3; ++m)
      if (cfg_.use[size_t(m)])
        params_.set_group_trainable("encoder." + std::string(modality_name(Modality(m))),
                                    false);
    cfg_.freeze_encoders = true;
  }

  // Encoder outputs (pre-projector) for the used modalities; the encoders
  // contain no dropout, so this is the deterministic eval-mode path.
  FeatureSet<T> encode_features(const BatchInput<T>& in) const {
    FeatureSet<T> feats;
    if (cfg_.uses(Modality::Face))
      feats[0] =
          patch_transformer_forward(params_, "encoder.face", cfg_.face, Var<T>(in.face)).value();
    if (cfg_.uses(Modality::Voice))
      feats[1] = patch_transformer_forward(params_, "encoder.voice", cfg_.voice,
                                           Var<T>(in.voice))
                     .value();
    if (cfg_.uses(Modality::Pose))
      feats[2] = mixer_forward(params_, "encoder.pose", cfg_.pose, Var<T>(in.pose)).value();
    return feats;
  }

  ForwardResult<T> forward(const BatchInput<T>& in, bool train, Rng& rng) const {
    std::vector<Var<T>> embeddings;
    std::vector<int64_t> idx;
    if (cfg_.uses(Modality::Face)) {
      Var<T> f = patch_transformer_forward(params_, "encoder.face", cfg_.face, Var<T>(in.face));
      embeddings.push_back(project(params_, "projector.face", f));
      idx.push_back(0);
    }
    if (cfg_.uses(Modality::Voice)) {
      Var<T> f =
          patch_transformer_forward(params_, "encoder.voice", cfg_.voice, Var<T>(in.voice));
      embeddings.push_back(project(params_, "projector.voice", f));
      idx.push_back(1);
    }
    if (cfg_.uses(Modality::Pose)) {
      Var<T> f = mixer_forward(params_, "encoder.pose", cfg_.pose, Var<T>(in.pose));
      embeddings.push_back(project(params_, "projector.pose", f));
      idx.push_back(2);
    }
    return finish(embeddings, idx, train, rng);
  }

  // Same tail as forward() but starting from cached encoder features.
  ForwardResult<T> forward_from_features(const FeatureSet<T>& feats, bool train,
                                         Rng& rng) const {
    std::vector<Var<T>> embeddings;
    std::vector<int64_t> idx;
    if (cfg_.uses(Modality::Face)) {
      embeddings.push_back(project(params_, "projector.face", Var<T>(feats[0])));
      idx.push_back(0);
    }
    if (cfg_.uses(Modality::Voice)) {
      embeddings.push_back(project(params_, "projector.voice", Var<T>(feats[1])));
      idx.push_back(1);
    }
    if (cfg_.uses(Modality::Pose)) {
      embeddings.push_back(project(params_, "projector.pose", Var<T>(feats[2])));
      idx.push_back(2);
    }
    return finish(embeddings, idx, train, rng);
  }

 private:
  ForwardResult<T> finish(const std::vector<Var<T>>& embeddings,
                          const std::vector<int64_t>& idx, bool train, Rng& rng) const {
    FusionResult<T> fr = embeddings.size() == 1
                             ? FusionResult<T>{embeddings[0], {}}
                             : fuse(params_, cfg_.fusion, embeddings, idx);
    Var<T> h = layer_norm(fr.fused, params_.get("head.norm.gain"),
                          params_.get("head.norm.shift"));
    h = dropout(gelu(h), cfg_.dropout, train, rng);
    h = linear(h, params_.get("head.linear.weight"), params_.get("head.linear.bias"));
    Var<T> logits = reshape(h, {h.value().dim(0)});
    return {logits, fr.weights};
  }

  ModelConfig cfg_;
  ParameterSet<T> params_;
};

}  // namespace dfast
