#pragma once

#include <string>

#include "dfast/autodiff.hpp"
#include "dfast/params.hpp"

namespace dfast {

// Shared embedding width all three branches project into.
constexpr int kEmbedDim = 256;

struct PatchTransformerConfig {
  int patch_size = 16;
  int embed_dim = 128;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int input_h = 128;
  int input_w = 128;

  void validate() const {
    if (input_h % patch_size != 0 || input_w % patch_size != 0)
      throw ContractError("patch transformer: input " + std::to_string(input_h) + "x" +
                          std::to_string(input_w) + " not divisible by patch " +
                          std::to_string(patch_size));
    if (embed_dim % heads != 0)
      throw ContractError("patch transformer: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by heads " + std::to_string(heads));
  }

  int64_t tokens() const {
    return int64_t(input_h / patch_size) * int64_t(input_w / patch_size);
  }
  int64_t patch_values() const { return int64_t(patch_size) * patch_size; }
};

struct MixerConfig {
  int tokens = 33;           // body joints
  int input_channels = 192;  // 64 frames x 3 coords, frame-major
  int width = 128;
  int token_hidden = 64;
  int channel_hidden = 256;
  int depth = 4;
};

// Splits an H x W grid into non-overlapping patches, row-major patch order,
// each patch flattened row-major: (H/p * W/p) x (p*p).
template <typename T>
Tensor<T> patchify(const Tensor<T>& grid, int patch) {
  if (grid.rank() != 2) throw ContractError("patchify expects a matrix");
  const int64_t h = grid.dim(0), w = grid.dim(1), p = patch;
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw ContractError("patchify: grid " + shape_str(grid.shape) +
                        " not divisible by patch " + std::to_string(patch));
  const int64_t gh = h / p, gw = w / p;
  Tensor<T> out({gh * gw, p * p});
  for (int64_t gi = 0; gi < gh; ++gi)
    for (int64_t gj = 0; gj < gw; ++gj) {
      T* dst = out.data.data() + (gi * gw + gj) * p * p;
      for (int64_t r = 0; r < p; ++r)
        for (int64_t c = 0; c < p; ++c) dst[r * p + c] = grid.at(gi * p + r, gj * p + c);
    }
  return out;
}

// Reorders a (frames, 33, 3) pose block into 33 joint tokens with frame-major
// channels: token j = [f0:(x,y,z), f1:(x,y,z), ...].
template <typename T>
Tensor<T> pose_to_tokens(const Tensor<T>& pose) {
  if (pose.rank() != 3) throw ContractError("pose_to_tokens expects rank 3");
  const int64_t f_n = pose.dim(0), p_n = pose.dim(1), c_n = pose.dim(2);
  Tensor<T> out({p_n, f_n * c_n});
  for (int64_t f = 0; f < f_n; ++f)
    for (int64_t p = 0; p < p_n; ++p)
      for (int64_t c = 0; c < c_n; ++c) out.at(p, f * c_n + c) = pose.at(f, p, c);
  return out;
}

// ---------------------------------------------------------------------------
// Patch transformer (pre-norm blocks, learned positional embedding, class
// token readout)
// ---------------------------------------------------------------------------

template <typename T>
void init_patch_transformer(ParameterSet<T>& ps, const std::string& prefix,
                            const PatchTransformerConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t e = cfg.embed_dim, p2 = cfg.patch_values(), n = cfg.tokens();
  ps.add(prefix + ".patch_embed.weight", trunc_normal_init<T>({e, p2}, 0.02, rng));
  ps.add(prefix + ".patch_embed.bias", Tensor<T>::zeros({e}));
  ps.add(prefix + ".cls_token", trunc_normal_init<T>({e}, 0.02, rng));
  ps.add(prefix + ".pos_embed", Tensor<T>::zeros({n + 1, e}));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = prefix + ".block" + std::to_string(i);
    ps.add(b + ".norm1.gain", Tensor<T>::full({e}, T(1)));
    ps.add(b + ".norm1.shift", Tensor<T>::zeros({e}));
    ps.add(b + ".attn.qkv.weight", trunc_normal_init<T>({3 * e, e}, 0.02, rng));
    ps.add(b + ".attn.qkv.bias", Tensor<T>::zeros({3 * e}));
    ps.add(b + ".attn.out.weight", trunc_normal_init<T>({e, e}, 0.02, rng));
    ps.add(b + ".attn.out.bias", Tensor<T>::zeros({e}));
    ps.add(b + ".norm2.gain", Tensor<T>::full({e}, T(1)));
    ps.add(b + ".norm2.shift", Tensor<T>::zeros({e}));
    ps.add(b + ".mlp.fc1.weight", trunc_normal_init<T>({cfg.mlp_ratio * e, e}, 0.02, rng));
    ps.add(b + ".mlp.fc1.bias", Tensor<T>::zeros({cfg.mlp_ratio * e}));
    ps.add(b + ".mlp.fc2.weight", trunc_normal_init<T>({e, cfg.mlp_ratio * e}, 0.02, rng));
    ps.add(b + ".mlp.fc2.bias", Tensor<T>::zeros({e}));
  }
  ps.add(prefix + ".norm.gain", Tensor<T>::full({e}, T(1)));
  ps.add(prefix + ".norm.shift", Tensor<T>::zeros({e}));
}

// patches: (B, tokens, patch*patch) -> class-token embedding (B, embed_dim)
template <typename T>
Var<T> patch_transformer_forward(const ParameterSet<T>& ps, const std::string& prefix,
                                 const PatchTransformerConfig& cfg, const Var<T>& patches) {
  const int64_t e = cfg.embed_dim, dh = e / cfg.heads;
  if (patches.value().rank() != 3 || patches.value().dim(2) != cfg.patch_values())
    throw DimensionError("patch transformer: tokens " + shape_str(patches.shape()) +
                         " do not match patch size " + std::to_string(cfg.patch_size));
  Var<T> x = linear(patches, ps.get(prefix + ".patch_embed.weight"),
                    ps.get(prefix + ".patch_embed.bias"));
  x = prepend_token(x, ps.get(prefix + ".cls_token"));
  x = add(x, ps.get(prefix + ".pos_embed"));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = prefix + ".block" + std::to_string(i);
    Var<T> h = layer_norm(x, ps.get(b + ".norm1.gain"), ps.get(b + ".norm1.shift"));
    Var<T> qkv = linear(h, ps.get(b + ".attn.qkv.weight"), ps.get(b + ".attn.qkv.bias"));
    Var<T> q = slice_last(qkv, 0, e);
    Var<T> k = slice_last(qkv, e, e);
    Var<T> v = slice_last(qkv, 2 * e, e);
    std::vector<Var<T>> head_outs;
    head_outs.reserve(size_t(cfg.heads));
    for (int hh = 0; hh < cfg.heads; ++hh)
      head_outs.push_back(scaled_dot_attention(slice_last(q, hh * dh, dh),
                                               slice_last(k, hh * dh, dh),
                                               slice_last(v, hh * dh, dh)));
    Var<T> att = linear(concat_last(head_outs), ps.get(b + ".attn.out.weight"),
                        ps.get(b + ".attn.out.bias"));
    x = add(x, att);
    h = layer_norm(x, ps.get(b + ".norm2.gain"), ps.get(b + ".norm2.shift"));
    h = linear(gelu(linear(h, ps.get(b + ".mlp.fc1.weight"), ps.get(b + ".mlp.fc1.bias"))),
               ps.get(b + ".mlp.fc2.weight"), ps.get(b + ".mlp.fc2.bias"));
    x = add(x, h);
  }
  x = layer_norm(x, ps.get(prefix + ".norm.gain"), ps.get(prefix + ".norm.shift"));
  return select_token(x, 0);
}

// ---------------------------------------------------------------------------
// MLP-Mixer over joint tokens
// ---------------------------------------------------------------------------

template <typename T>
void init_mixer(ParameterSet<T>& ps, const std::string& prefix, const MixerConfig& cfg,
                Rng& rng) {
  const int64_t wdt = cfg.width, tok = cfg.tokens;
  ps.add(prefix + ".embed.weight", trunc_normal_init<T>({wdt, cfg.input_channels}, 0.02, rng));
  ps.add(prefix + ".embed.bias", Tensor<T>::zeros({wdt}));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = prefix + ".block" + std::to_string(i);
    ps.add(b + ".norm1.gain", Tensor<T>::full({wdt}, T(1)));
    ps.add(b + ".norm1.shift", Tensor<T>::zeros({wdt}));
    ps.add(b + ".token_mlp.fc1.weight", trunc_normal_init<T>({cfg.token_hidden, tok}, 0.02, rng));
    ps.add(b + ".token_mlp.fc1.bias", Tensor<T>::zeros({cfg.token_hidden}));
    ps.add(b + ".token_mlp.fc2.weight", trunc_normal_init<T>({tok, cfg.token_hidden}, 0.02, rng));
    ps.add(b + ".token_mlp.fc2.bias", Tensor<T>::zeros({tok}));
    ps.add(b + ".norm2.gain", Tensor<T>::full({wdt}, T(1)));
    ps.add(b + ".norm2.shift", Tensor<T>::zeros({wdt}));
    ps.add(b + ".channel_mlp.fc1.weight",
           trunc_normal_init<T>({cfg.channel_hidden, wdt}, 0.02, rng));
    ps.add(b + ".channel_mlp.fc1.bias", Tensor<T>::zeros({cfg.channel_hidden}));
    ps.add(b + ".channel_mlp.fc2.weight",
           trunc_normal_init<T>({wdt, cfg.channel_hidden}, 0.02, rng));
    ps.add(b + ".channel_mlp.fc2.bias", Tensor<T>::zeros({wdt}));
  }
}

// tokens_in: (B, 33, input_channels) -> mean-pooled embedding (B, width)
template <typename T>
Var<T> mixer_forward(const ParameterSet<T>& ps, const std::string& prefix,
                     const MixerConfig& cfg, const Var<T>& tokens_in) {
  if (tokens_in.value().rank() != 3 || tokens_in.value().dim(1) != cfg.tokens ||
      tokens_in.value().dim(2) != cfg.input_channels)
    throw DimensionError("mixer: tokens " + shape_str(tokens_in.shape()) + " do not match (" +
                         std::to_string(cfg.tokens) + "," +
                         std::to_string(cfg.input_channels) + ")");
  Var<T> x = linear(tokens_in, ps.get(prefix + ".embed.weight"), ps.get(prefix + ".embed.bias"));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = prefix + ".block" + std::to_string(i);
    // token mixing across the joint axis
    Var<T> h = layer_norm(x, ps.get(b + ".norm1.gain"), ps.get(b + ".norm1.shift"));
    h = permute(h, {0, 2, 1});
    h = linear(gelu(linear(h, ps.get(b + ".token_mlp.fc1.weight"),
                           ps.get(b + ".token_mlp.fc1.bias"))),
               ps.get(b + ".token_mlp.fc2.weight"), ps.get(b + ".token_mlp.fc2.bias"));
    h = permute(h, {0, 2, 1});
    x = add(x, h);
    // channel mixing across temporal channels
    h = layer_norm(x, ps.get(b + ".norm2.gain"), ps.get(b + ".norm2.shift"));
    h = linear(gelu(linear(h, ps.get(b + ".channel_mlp.fc1.weight"),
                           ps.get(b + ".channel_mlp.fc1.bias"))),
               ps.get(b + ".channel_mlp.fc2.weight"), ps.get(b + ".channel_mlp.fc2.bias"));
    x = add(x, h);
  }
  return mean_tokens(x);
}

// ---------------------------------------------------------------------------
// Projector into the shared 256-d embedding space
// ---------------------------------------------------------------------------

template <typename T>
void init_projector(ParameterSet<T>& ps, const std::string& prefix, int in_dim, Rng& rng) {
  ps.add(prefix + ".weight", trunc_normal_init<T>({kEmbedDim, in_dim}, 0.02, rng));
  ps.add(prefix + ".bias", Tensor<T>::zeros({kEmbedDim}));
}

template <typename T>
Var<T> project(const ParameterSet<T>& ps, const std::string& prefix, const Var<T>& x) {
  return gelu(linear(x, ps.get(prefix + ".weight"), ps.get(prefix + ".bias")));
}

}  // namespace dfast
