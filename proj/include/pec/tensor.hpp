#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pec/common.hpp"

namespace pec {

// Dense rank-4 extents in NCHW order. All extents are >= 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::int64_t count() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;

  void validate() const {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
      throw DimensionError(msg("invalid tensor shape ", str()));
    }
  }

  std::string str() const { return msg(n, "x", c, "x", h, "x", w); }
};

// Contiguous NCHW tensor. grad is empty unless requires_grad is set and
// a backward pass has touched it.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s) {
    shape.validate();
    data.assign(static_cast<std::size_t>(s.count()), fill);
  }

  static Tensor zeros(Shape s) { return Tensor(s, T(0)); }
  static Tensor full(Shape s, T v) { return Tensor(s, v); }

  static Tensor uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  std::int64_t count() const { return shape.count(); }

  std::int64_t index(int in, int ic, int iy, int ix) const {
    return ((static_cast<std::int64_t>(in) * shape.c + ic) * shape.h + iy) * shape.w + ix;
  }
  T& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
  const T& at(int in, int ic, int iy, int ix) const {
    return data[index(in, ic, iy, ix)];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { grad.assign(data.size(), T(0)); }

  bool is_scalar() const { return shape == Shape{1, 1, 1, 1}; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.requires_grad = requires_grad;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace pec
