#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dfast/autodiff.hpp"
#include "dfast/params.hpp"

namespace dfast {

// Mean binary cross-entropy on logits, in the numerically stable form
// max(z,0) - z*y + log(1 + exp(-|z|)). Gradient is (sigmoid(z) - y) / B.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const std::vector<T>& labels) {
  const int64_t n = logits.value().numel();
  if (n != int64_t(labels.size()))
    throw DimensionError("bce_with_logits: " + std::to_string(n) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double z = double(logits.value()[i]);
    const double y = double(labels[size_t(i)]);
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(n)));
  check_finite(out, "bce_with_logits");
  return detail::make_op<T>(std::move(out), {logits}, [labels, n](detail::Node<T>& self) {
    auto& ln = *self.inputs[0];
    if (!ln.requires_grad) return;
    auto& g = detail::grad_buf(ln);
    const T go = self.grad[0] / T(n);
    for (int64_t i = 0; i < n; ++i) {
      const double z = double(ln.value[i]);
      const double s = 0.5 * (1.0 + std::tanh(0.5 * z));
      g[i] += go * T(s - double(labels[size_t(i)]));
    }
  });
}

// Mean squared error against constant targets.
template <typename T>
Var<T> mse_loss(const Var<T>& pred, const std::vector<T>& targets) {
  if (pred.value().numel() != int64_t(targets.size()))
    throw DimensionError("mse_loss: size mismatch");
  Tensor<T> tt(pred.shape());
  std::copy(targets.begin(), targets.end(), tt.data.begin());
  Var<T> t(std::move(tt));
  Var<T> d = sub(pred, t);
  return mean_all(mul(d, d));
}

// Adam optimizer state: first/second moments per parameter plus the shared
// step counter. Must be initialized from the same ParameterSet it steps.
template <typename T>
struct AdamState {
  std::unordered_map<std::string, Tensor<T>> m, v;
  int64_t t = 0;

  explicit AdamState(const ParameterSet<T>& ps) {
    for (const auto& name : ps.names()) {
      m.emplace(name, Tensor<T>::zeros(ps.get(name).shape()));
      v.emplace(name, Tensor<T>::zeros(ps.get(name).shape()));
    }
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam step over the trainable groups. Frozen groups are
// not read or written; parameters without an accumulated gradient this step
// are treated as zero-gradient.
template <typename T>
void adam_step(ParameterSet<T>& ps, AdamState<T>& state, const AdamConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  for (const auto& name : ps.names()) {
    if (!ps.trainable(name)) continue;
    auto mit = state.m.find(name);
    auto vit = state.v.find(name);
    if (mit == state.m.end() || vit == state.v.end())
      throw ContractError("adam_step: no optimizer state for parameter " + name);
    Var<T>& p = ps.get(name);
    Tensor<T>& mt = mit->second;
    Tensor<T>& vt = vit->second;
    const int64_t n = p.value().numel();
    ArrMap<T> m(mt.data.data(), n);
    ArrMap<T> v(vt.data.data(), n);
    ArrMap<T> pv(p.mutable_value().data.data(), n);
    if (p.has_grad()) {
      CArrMap<T> g(p.grad().data.data(), n);
      m = T(cfg.beta1) * m + T(1.0 - cfg.beta1) * g;
      v = T(cfg.beta2) * v + T(1.0 - cfg.beta2) * g.square();
    } else {
      m *= T(cfg.beta1);
      v *= T(cfg.beta2);
    }
    pv -= T(cfg.lr) * (m / T(bc1)) / ((v / T(bc2)).sqrt() + T(cfg.eps));
  }
}

}  // namespace dfast
