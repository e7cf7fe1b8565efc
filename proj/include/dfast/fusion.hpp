#pragma once

#include <string>
#include <vector>

#include "dfast/autodiff.hpp"
#include "dfast/encoders.hpp"
#include "dfast/params.hpp"

namespace dfast {

enum class FusionKind { Concat, Sum, WeightedSum, Attention };

inline const char* fusion_name(FusionKind k) {
  switch (k) {
    case FusionKind::Concat: return "concat";
    case FusionKind::Sum: return "sum";
    case FusionKind::WeightedSum: return "wsum";
    case FusionKind::Attention: return "attention";
  }
  return "?";
}

inline FusionKind fusion_from_name(const std::string& s) {
  if (s == "concat") return FusionKind::Concat;
  if (s == "sum") return FusionKind::Sum;
  if (s == "wsum") return FusionKind::WeightedSum;
  if (s == "attention") return FusionKind::Attention;
  throw ContractError("unknown fusion strategy: " + s +
                      " (expected concat|sum|wsum|attention)");
}

template <typename T>
struct FusionResult {
  Var<T> fused;    // (B, 256) or (B, 256*k) for concat
  Var<T> weights;  // attention: (B, M); wsum: (M); undefined otherwise
};

// The weighted-sum strategy owns three logits in the fixed modality order;
// the attention strategy owns a global query and shared key/value maps.
template <typename T>
void init_fusion(ParameterSet<T>& ps, FusionKind kind, Rng& rng) {
  switch (kind) {
    case FusionKind::Concat:
    case FusionKind::Sum:
      break;
    case FusionKind::WeightedSum:
      ps.add("fusion.wsum.logits", Tensor<T>::zeros({3}));
      break;
    case FusionKind::Attention:
      ps.add("fusion.attention.query", trunc_normal_init<T>({kEmbedDim}, 0.02, rng));
      ps.add("fusion.attention.key.weight",
             trunc_normal_init<T>({kEmbedDim, kEmbedDim}, 0.02, rng));
      ps.add("fusion.attention.value.weight",
             trunc_normal_init<T>({kEmbedDim, kEmbedDim}, 0.02, rng));
      break;
  }
}

// Fixed order (face, voice, pose), absent modalities skipped.
template <typename T>
FusionResult<T> concat_fuse(const std::vector<Var<T>>& present) {
  if (present.empty()) throw ContractError("fusion: no modalities present");
  if (present.size() == 1) return {present[0], {}};
  return {concat_last(present), {}};
}

template <typename T>
FusionResult<T> sum_fuse(const std::vector<Var<T>>& present) {
  if (present.empty()) throw ContractError("fusion: no modalities present");
  Var<T> acc = present[0];
  for (size_t i = 1; i < present.size(); ++i) acc = add(acc, present[i]);
  return {acc, {}};
}

// weights = softmax over the logits of present modalities (absent ones are
// excluded from the softmax, not zero-imputed).
template <typename T>
FusionResult<T> weighted_sum_fuse(const ParameterSet<T>& ps, const std::vector<Var<T>>& present,
                                  const std::vector<int64_t>& present_idx) {
  if (present.empty() || present.size() != present_idx.size())
    throw ContractError("fusion: present embeddings and indices disagree");
  const int64_t m = int64_t(present.size());
  Var<T> w = softmax(gather(ps.get("fusion.wsum.logits"), present_idx));
  Var<T> stacked = stack_tokens(present);                       // (B, M, 256)
  Var<T> by_dim = permute(stacked, {0, 2, 1});                  // (B, 256, M)
  Var<T> fused = reshape(matmul(by_dim, reshape(w, {m, 1})),    // (B, 256, 1)
                         {stacked.value().dim(0), int64_t(kEmbedDim)});
  return {fused, w};
}

// Single learned query against key/value maps of each present embedding:
// a_i = softmax(q . W_k e_i / sqrt(256)), fused = sum a_i W_v e_i.
// Weights are per sample.
template <typename T>
FusionResult<T> attention_fuse(const ParameterSet<T>& ps, const std::vector<Var<T>>& present) {
  if (present.empty()) throw ContractError("fusion: no modalities present");
  const int64_t b = present[0].value().dim(0), m = int64_t(present.size());
  Var<T> stacked = stack_tokens(present);  // (B, M, 256)
  Var<T> keys = linear(stacked, ps.get("fusion.attention.key.weight"));
  Var<T> values = linear(stacked, ps.get("fusion.attention.value.weight"));
  Var<T> logits = reshape(matmul(keys, reshape(ps.get("fusion.attention.query"),
                                               {int64_t(kEmbedDim), 1})),
                          {b, m});
  Var<T> w = softmax(scale(logits, T(1) / T(16)));  // 1/sqrt(256)
  Var<T> fused = reshape(matmul(reshape(w, {b, 1, m}), values), {b, int64_t(kEmbedDim)});
  return {fused, w};
}

template <typename T>
FusionResult<T> fuse(const ParameterSet<T>& ps, FusionKind kind,
                     const std::vector<Var<T>>& present,
                     const std::vector<int64_t>& present_idx) {
  switch (kind) {
    case FusionKind::Concat: return concat_fuse(present);
    case FusionKind::Sum: return sum_fuse(present);
    case FusionKind::WeightedSum: return weighted_sum_fuse(ps, present, present_idx);
    case FusionKind::Attention: return attention_fuse(ps, present);
  }
  throw ContractError("unreachable fusion kind");
}

}  // namespace dfast
