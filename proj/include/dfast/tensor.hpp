#pragma once

#include <cstdint>
#include <cstdlib>
#include <new>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dfast/error.hpp"

namespace dfast {

using Shape = std::vector<int64_t>;

// 64-byte-aligned storage so SIMD kernels take the same code path for every
// allocation; without this, reductions over differently-aligned buffers can
// round differently and break bitwise reproducibility.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(size_t n) {
    if (n == 0) return nullptr;
    void* p = ::operator new(n * sizeof(T), std::align_val_t(kAlign));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, size_t) noexcept {
    ::operator delete(p, std::align_val_t(kAlign));
  }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major n-dimensional array. Values are immutable after
// construction except where a Var explicitly mutates its parameter data
// (optimizer updates) or accumulates gradients.
template <typename T>
struct Tensor {
  using Buffer = AlignedVec<T>;

  Shape shape;
  Buffer data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    for (int64_t d : shape)
      if (d <= 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
    data.assign(size_t(numel_of(shape)), T(0));
  }

  Tensor(Shape s, Buffer values) : shape(std::move(s)), data(std::move(values)) {
    if (int64_t(data.size()) != numel_of(shape))
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool empty() const { return data.empty(); }
  int64_t numel() const { return int64_t(data.size()); }
  int rank() const { return int(shape.size()); }
  int64_t dim(int i) const { return shape[size_t(i)]; }

  // Number of trailing-dim elements (the last axis length), 1 for scalars.
  int64_t last_dim() const { return shape.empty() ? 1 : shape.back(); }

  // Product of all dims except the last (row count when viewed 2-D).
  int64_t lead() const { return shape.empty() ? 1 : numel() / shape.back(); }

  T& operator[](int64_t i) { return data[size_t(i)]; }
  const T& operator[](int64_t i) const { return data[size_t(i)]; }

  T& at(int64_t i, int64_t j) { return data[size_t(i * shape[1] + j)]; }
  const T& at(int64_t i, int64_t j) const { return data[size_t(i * shape[1] + j)]; }

  T& at(int64_t i, int64_t j, int64_t k) {
    return data[size_t((i * shape[1] + j) * shape[2] + k)];
  }
  const T& at(int64_t i, int64_t j, int64_t k) const {
    return data[size_t((i * shape[1] + j) * shape[2] + k)];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
}

}  // namespace dfast
