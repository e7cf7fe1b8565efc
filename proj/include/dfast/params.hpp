#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "dfast/autodiff.hpp"
#include "dfast/rng.hpp"

namespace dfast {

// Truncated normal (clipped at two standard deviations) used for all learned
// weight matrices and embeddings; biases start at zero.
template <typename T>
Tensor<T> trunc_normal_init(Shape s, double stddev, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = T(rng.trunc_normal(stddev));
  return t;
}

// Named tensor tree. Parameters are grouped by name prefix
// (encoder.face, encoder.voice, encoder.pose, projector, fusion, head);
// a group may be frozen, which clears requires_grad on its members and
// makes the optimizer skip them entirely.
template <typename T>
class ParameterSet {
 public:
  Var<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    order_.push_back(name);
    auto [it, ok] = index_.emplace(name, Var<T>(std::move(init), /*requires_grad=*/true));
    (void)ok;
    return it->second;
  }

  Var<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  // encoder.<modality> for encoder parameters, the first dotted segment
  // otherwise.
  static std::string group_of(const std::string& name) {
    const size_t dot = name.find('.');
    if (dot == std::string::npos) return name;
    const std::string head = name.substr(0, dot);
    if (head != "encoder") return head;
    const size_t dot2 = name.find('.', dot + 1);
    return dot2 == std::string::npos ? name : name.substr(0, dot2);
  }

  void set_group_trainable(const std::string& group, bool trainable) {
    frozen_groups_[group] = !trainable;
    for (const auto& n : order_)
      if (group_of(n) == group) get(n).set_requires_grad(trainable);
  }

  bool group_trainable(const std::string& group) const {
    auto it = frozen_groups_.find(group);
    return it == frozen_groups_.end() || !it->second;
  }

  bool trainable(const std::string& name) const { return group_trainable(group_of(name)); }

  std::vector<std::string> frozen_groups() const {
    std::vector<std::string> out;
    for (const auto& [g, frozen] : frozen_groups_)
      if (frozen) out.push_back(g);
    std::sort(out.begin(), out.end());
    return out;
  }

  void zero_grads() {
    for (const auto& n : order_) get(n).zero_grad();
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Var<T>> index_;
  std::unordered_map<std::string, bool> frozen_groups_;
};

}  // namespace dfast
