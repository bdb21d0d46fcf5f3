#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "pec/tape.hpp"

namespace pec {

// Convolution configuration. Dilation is fixed at 1; "same" padding is
// defined for odd kernels only.
struct ConvParams {
  int out_channels = 1;
  int in_channels = 1;
  int groups = 1;
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  bool has_bias = false;

  static int same_padding(int k) {
    if (k % 2 == 0) {
      throw ConfigError(msg("same padding requires an odd kernel extent, got ", k));
    }
    return (k - 1) / 2;
  }

  void validate() const {
    if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
      throw ConfigError(msg("groups=", groups, " must divide in_channels=", in_channels,
                            " and out_channels=", out_channels));
    }
    if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || ph < 0 || pw < 0) {
      throw ConfigError("invalid kernel/stride/padding configuration");
    }
  }

  int out_h(int h) const { return (h + 2 * ph - kh) / sh + 1; }
  int out_w(int w) const { return (w + 2 * pw - kw) / sw + 1; }
};

enum class PoolKind { Max, Avg };
enum class PoolAxis { Height, Width };

namespace detail {

template <typename T>
Shape broadcast_shape(const Shape& a, const Shape& b) {
  auto merge = [](int x, int y, const char* dim) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw DimensionError(msg("broadcast mismatch on ", dim, ": ", x, " vs ", y));
  };
  return Shape{merge(a.n, b.n, "N"), merge(a.c, b.c, "C"), merge(a.h, b.h, "H"),
               merge(a.w, b.w, "W")};
}

inline std::int64_t bindex(const Shape& s, int n, int c, int h, int w) {
  return ((static_cast<std::int64_t>(n % s.n) * s.c + (c % s.c)) * s.h + (h % s.h)) * s.w +
         (w % s.w);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with NCHW broadcasting (extent 1 broadcasts).
// ---------------------------------------------------------------------------

// An op's backward closure needs to know its own output id, which is not
// assigned until emit() runs. Ops are therefore written against this
// small helper that patches the backward function in after emission.
template <typename T>
class OpBuilder {
 public:
  OpBuilder(Tape<T>& tape, std::vector<Var<T>> inputs)
      : tape_(tape), inputs_(std::move(inputs)) {}

  // fn(tape, out_id) -> backward closure invoked with grads available.
  template <typename Fn>
  Var<T> emit(Tensor<T> out, Fn fn) {
    auto holder = std::make_shared<std::function<void(Tape<T>&)>>();
    Var<T> v = tape_.emit(std::move(out), inputs_, [holder](Tape<T>& tp) {
      if (*holder) (*holder)(tp);
    });
    *holder = fn(v.id);
    return v;
  }

 private:
  Tape<T>& tape_;
  std::vector<Var<T>> inputs_;
};

template <typename T, typename F, typename G>
Var<T> binary_broadcast(Var<T> a, Var<T> b, F fwd, G dpair) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape as = av.shape, bs = bv.shape;
  const Shape os = detail::broadcast_shape<T>(as, bs);
  Tensor<T> out(os);
  {
    std::int64_t i = 0;
    for (int n = 0; n < os.n; ++n)
      for (int c = 0; c < os.c; ++c)
        for (int h = 0; h < os.h; ++h)
          for (int w = 0; w < os.w; ++w, ++i)
            out.data[i] = fwd(av.data[detail::bindex(as, n, c, h, w)],
                              bv.data[detail::bindex(bs, n, c, h, w)]);
  }
  const int aid = a.id, bid = b.id;
  OpBuilder<T> build(t, {a, b});
  return build.emit(std::move(out), [aid, bid, as, bs, os, dpair](int out_id) {
    return [aid, bid, as, bs, os, dpair, out_id](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& av = tp.value(aid);
      const Tensor<T>& bv = tp.value(bid);
      const bool na = tp.needs_grad(aid);
      const bool nb = tp.needs_grad(bid);
      if (!na && !nb) return;
      std::vector<T>* ga = na ? &tp.grad(aid) : nullptr;
      std::vector<T>* gb = nb ? &tp.grad(bid) : nullptr;
      std::int64_t i = 0;
      for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < os.c; ++c)
          for (int h = 0; h < os.h; ++h)
            for (int w = 0; w < os.w; ++w, ++i) {
              const std::int64_t ia = detail::bindex(as, n, c, h, w);
              const std::int64_t ib = detail::bindex(bs, n, c, h, w);
              const auto [da, db] = dpair(av.data[ia], bv.data[ib]);
              if (ga) (*ga)[ia] += go[i] * da;
              if (gb) (*gb)[ib] += go[i] * db;
            }
    };
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_broadcast(
      a, b, [](T x, T y) { return x + y; },
      [](T, T) { return std::pair<T, T>(T(1), T(1)); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_broadcast(
      a, b, [](T x, T y) { return x - y; },
      [](T, T) { return std::pair<T, T>(T(1), T(-1)); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_broadcast(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y) { return std::pair<T, T>(y, x); });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary_broadcast(
      a, b, [](T x, T y) { return x / y; },
      [](T x, T y) { return std::pair<T, T>(T(1) / y, -x / (y * y)); });
}

// Ties route the gradient to the first operand.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  return binary_broadcast(
      a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y) {
        return x <= y ? std::pair<T, T>(T(1), T(0)) : std::pair<T, T>(T(0), T(1));
      });
}

template <typename T>
Var<T> maximum(Var<T> a, Var<T> b) {
  return binary_broadcast(
      a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y) {
        return x >= y ? std::pair<T, T>(T(1), T(0)) : std::pair<T, T>(T(0), T(1));
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

template <typename T, typename F, typename G>
Var<T> unary_op(Var<T> x, F fwd, G dfn) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape);
  for (std::size_t i = 0; i < xv.data.size(); ++i) out.data[i] = fwd(xv.data[i]);
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid, dfn](int out_id) {
    return [xid, dfn, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& xv = tp.value(xid);
      std::vector<T>& gx = tp.grad(xid);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * dfn(xv.data[i]);
    };
  });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T s) {
  return unary_op(
      x, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(Var<T> x, T s) {
  return unary_op(
      x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <typename T>
Var<T> maximum_scalar(Var<T> x, T s) {
  return unary_op(
      x, [s](T v) { return v >= s ? v : s; }, [s](T v) { return v >= s ? T(1) : T(0); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
T sigmoid_val(T v) {
  if (v >= T(0)) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary_op(
      x, [](T v) { return sigmoid_val(v); },
      [](T v) {
        const T s = sigmoid_val(v);
        return s * (T(1) - s);
      });
}

template <typename T>
Var<T> silu(Var<T> x) {
  return unary_op(
      x, [](T v) { return v * sigmoid_val(v); },
      [](T v) {
        const T s = sigmoid_val(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

// softplus(x) = log(1 + exp(x)), computed without overflow.
template <typename T>
Var<T> softplus(Var<T> x) {
  return unary_op(
      x,
      [](T v) {
        return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](T v) { return sigmoid_val(v); });
}

template <typename T>
Var<T> arctan(Var<T> x) {
  return unary_op(
      x, [](T v) { return std::atan(v); }, [](T v) { return T(1) / (T(1) + v * v); });
}

// ---------------------------------------------------------------------------
// Reductions and softmax.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> out(Shape{1, 1, 1, 1});
  T acc = T(0);
  for (T v : xv.data) acc += v;
  out.data[0] = acc;
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid](int out_id) {
    return [xid, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const T g = tp.grad(out_id)[0];
      for (auto& v : tp.grad(xid)) v += g;
    };
  });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  const T inv = T(1) / static_cast<T>(x.value().count());
  return mul_scalar(sum_all(x), inv);
}

// (N,C,H,W) -> (N,1,H,W)
template <typename T>
Var<T> sum_channels(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w)
          out.data[out.index(n, 0, h, w)] += xv.data[xv.index(n, c, h, w)];
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid, s](int out_id) {
    return [xid, s, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& xv = tp.value(xid);
      const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const std::int64_t xoff = xv.index(n, c, 0, 0);
          const std::int64_t ooff = static_cast<std::int64_t>(n) * hw;
          for (std::int64_t i = 0; i < hw; ++i) gx[xoff + i] += go[ooff + i];
        }
    };
  });
}

// Softmax over the H*W cells of every (n, c) plane.
template <typename T>
Var<T> softmax_spatial(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  Tensor<T> out(s);
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t off = xv.index(n, c, 0, 0);
      T mx = xv.data[off];
      for (std::int64_t i = 1; i < hw; ++i) mx = std::max(mx, xv.data[off + i]);
      T denom = T(0);
      for (std::int64_t i = 0; i < hw; ++i) {
        out.data[off + i] = std::exp(xv.data[off + i] - mx);
        denom += out.data[off + i];
      }
      for (std::int64_t i = 0; i < hw; ++i) out.data[off + i] /= denom;
    }
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid, s, hw](int out_id) {
    return [xid, s, hw, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& ov = tp.value(out_id);
      std::vector<T>& gx = tp.grad(xid);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const std::int64_t off = ov.index(n, c, 0, 0);
          T dot = T(0);
          for (std::int64_t i = 0; i < hw; ++i) dot += go[off + i] * ov.data[off + i];
          for (std::int64_t i = 0; i < hw; ++i)
            gx[off + i] += ov.data[off + i] * (go[off + i] - dot);
        }
    };
  });
}

// ---------------------------------------------------------------------------
// Pooling.
// ---------------------------------------------------------------------------

// Mean over one spatial axis (the named axis collapses to 1).
template <typename T>
Var<T> global_avg_pool_1d(Var<T> x, PoolAxis axis) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  const bool over_h = axis == PoolAxis::Height;
  Tensor<T> out(Shape{s.n, s.c, over_h ? 1 : s.h, over_h ? s.w : 1});
  const T inv = T(1) / static_cast<T>(over_h ? s.h : s.w);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) {
          out.data[out.index(n, c, over_h ? 0 : h, over_h ? w : 0)] +=
              xv.data[xv.index(n, c, h, w)] * inv;
        }
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid, s, over_h, inv](int out_id) {
    return [xid, s, over_h, inv, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& ov = tp.value(out_id);
      const Tensor<T>& xv = tp.value(xid);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
              gx[xv.index(n, c, h, w)] +=
                  go[ov.index(n, c, over_h ? 0 : h, over_h ? w : 0)] * inv;
    };
  });
}

template <typename T>
Var<T> global_avg_pool_2d(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  const T inv = T(1) / static_cast<T>(hw);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t off = xv.index(n, c, 0, 0);
      T acc = T(0);
      for (std::int64_t i = 0; i < hw; ++i) acc += xv.data[off + i];
      out.data[out.index(n, c, 0, 0)] = acc * inv;
    }
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid, s, hw, inv](int out_id) {
    return [xid, s, hw, inv, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& xv = tp.value(xid);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const T g = go[static_cast<std::int64_t>(n) * s.c + c] * inv;
          const std::int64_t off = xv.index(n, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) gx[off + i] += g;
        }
    };
  });
}

// Winner routing sends the gradient to the first maximal cell in scan order.
template <typename T>
Var<T> global_max_pool_2d(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(s.n) * s.c);
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::int64_t off = xv.index(n, c, 0, 0);
      std::int64_t best = off;
      for (std::int64_t i = 1; i < hw; ++i)
        if (xv.data[off + i] > xv.data[best]) best = off + i;
      out.data[out.index(n, c, 0, 0)] = xv.data[best];
      (*argmax)[static_cast<std::size_t>(n) * s.c + c] = best;
    }
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid, argmax](int out_id) {
    return [xid, argmax, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += go[i];
    };
  });
}

template <typename T>
Var<T> pool2d(Var<T> x, PoolKind kind, int k, int s, int p) {
  if (k < 1 || s < 1 || p < 0) throw ConfigError("invalid pooling configuration");
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape is = xv.shape;
  const int oh = (is.h + 2 * p - k) / s + 1;
  const int ow = (is.w + 2 * p - k) / s + 1;
  if (oh < 1 || ow < 1) {
    throw DimensionError(msg("pool window ", k, " exceeds padded input ", is.str()));
  }
  Tensor<T> out(Shape{is.n, is.c, oh, ow});
  const bool is_max = kind == PoolKind::Max;
  auto argmax = is_max ? std::make_shared<std::vector<std::int64_t>>(
                             static_cast<std::size_t>(out.count()))
                       : nullptr;
  auto divisors = is_max ? nullptr
                         : std::make_shared<std::vector<T>>(
                               static_cast<std::size_t>(out.count()));
  std::int64_t oi = 0;
  for (int n = 0; n < is.n; ++n)
    for (int c = 0; c < is.c; ++c)
      for (int y = 0; y < oh; ++y)
        for (int xw = 0; xw < ow; ++xw, ++oi) {
          const int h0 = y * s - p, w0 = xw * s - p;
          if (is_max) {
            T best = -std::numeric_limits<T>::infinity();
            std::int64_t besti = -1;
            for (int dy = 0; dy < k; ++dy) {
              const int hy = h0 + dy;
              if (hy < 0 || hy >= is.h) continue;
              for (int dx = 0; dx < k; ++dx) {
                const int wx = w0 + dx;
                if (wx < 0 || wx >= is.w) continue;
                const std::int64_t ii = xv.index(n, c, hy, wx);
                if (xv.data[ii] > best) {
                  best = xv.data[ii];
                  besti = ii;
                }
              }
            }
            out.data[oi] = best;
            (*argmax)[oi] = besti;
          } else {
            T acc = T(0);
            int cnt = 0;
            for (int dy = 0; dy < k; ++dy) {
              const int hy = h0 + dy;
              if (hy < 0 || hy >= is.h) continue;
              for (int dx = 0; dx < k; ++dx) {
                const int wx = w0 + dx;
                if (wx < 0 || wx >= is.w) continue;
                acc += xv.data[xv.index(n, c, hy, wx)];
                ++cnt;
              }
            }
            out.data[oi] = cnt > 0 ? acc / static_cast<T>(cnt) : T(0);
            (*divisors)[oi] = cnt > 0 ? T(1) / static_cast<T>(cnt) : T(0);
          }
        }
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out),
                    [xid, is, oh, ow, k, s, p, is_max, argmax, divisors](int out_id) {
    return [xid, is, oh, ow, k, s, p, is_max, argmax, divisors, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      if (is_max) {
        for (std::size_t i = 0; i < argmax->size(); ++i) {
          if ((*argmax)[i] >= 0) gx[(*argmax)[i]] += go[i];
        }
        return;
      }
      const Tensor<T>& xv = tp.value(xid);
      std::int64_t oi = 0;
      for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c)
          for (int y = 0; y < oh; ++y)
            for (int xw = 0; xw < ow; ++xw, ++oi) {
              const T g = go[oi] * (*divisors)[oi];
              if (g == T(0)) continue;
              const int h0 = y * s - p, w0 = xw * s - p;
              for (int dy = 0; dy < k; ++dy) {
                const int hy = h0 + dy;
                if (hy < 0 || hy >= is.h) continue;
                for (int dx = 0; dx < k; ++dx) {
                  const int wx = w0 + dx;
                  if (wx < 0 || wx >= is.w) continue;
                  gx[xv.index(n, c, hy, wx)] += g;
                }
              }
            }
    };
  });
}

// ---------------------------------------------------------------------------
// Convolution.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, ConvParams p) {
  p.validate();
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Shape is = xv.shape;
  if (is.c != p.in_channels) {
    throw DimensionError(msg("conv2d input has ", is.c, " channels, params expect ",
                             p.in_channels));
  }
  const int icg = p.in_channels / p.groups;
  const int ocg = p.out_channels / p.groups;
  const Shape expect_w{p.out_channels, icg, p.kh, p.kw};
  if (!(wv.shape == expect_w)) {
    throw DimensionError(msg("conv2d weight shape ", wv.shape.str(), ", expected ",
                             expect_w.str()));
  }
  if (p.has_bias != bias.has_value()) {
    throw ConfigError("conv2d bias presence does not match params.has_bias");
  }
  if (bias && bias->value().count() != p.out_channels) {
    throw DimensionError(msg("conv2d bias has ", bias->value().count(),
                             " values, expected ", p.out_channels));
  }
  const int oh = p.out_h(is.h), ow = p.out_w(is.w);
  if (oh < 1 || ow < 1) {
    throw DimensionError(msg("conv2d output would be empty for input ", is.str()));
  }
  Tensor<T> out(Shape{is.n, p.out_channels, oh, ow});

  const T* xd = xv.data.data();
  const T* wd = wv.data.data();
  T* od = out.data.data();
  for (int n = 0; n < is.n; ++n)
    for (int g = 0; g < p.groups; ++g)
      for (int oc = 0; oc < ocg; ++oc) {
        const int ocn = g * ocg + oc;
        T* oplane = od + (static_cast<std::int64_t>(n) * p.out_channels + ocn) *
                             static_cast<std::int64_t>(oh) * ow;
        for (int ic = 0; ic < icg; ++ic) {
          const int icn = g * icg + ic;
          const T* xplane = xd + (static_cast<std::int64_t>(n) * is.c + icn) *
                                     static_cast<std::int64_t>(is.h) * is.w;
          const T* wrow =
              wd + ((static_cast<std::int64_t>(ocn) * icg + ic) * p.kh) * p.kw;
          for (int kh = 0; kh < p.kh; ++kh)
            for (int kw = 0; kw < p.kw; ++kw) {
              const T wval = wrow[kh * p.kw + kw];
              if (wval == T(0)) continue;
              for (int y = 0; y < oh; ++y) {
                const int hy = y * p.sh - p.ph + kh;
                if (hy < 0 || hy >= is.h) continue;
                // valid ow range for this kw
                int x0 = 0, x1 = ow;
                while (x0 < ow && x0 * p.sw - p.pw + kw < 0) ++x0;
                while (x1 > x0 && (x1 - 1) * p.sw - p.pw + kw >= is.w) --x1;
                const T* xrow = xplane + static_cast<std::int64_t>(hy) * is.w;
                T* orow = oplane + static_cast<std::int64_t>(y) * ow;
                const int base = -p.pw + kw;
                for (int xi = x0; xi < x1; ++xi) {
                  orow[xi] += wval * xrow[xi * p.sw + base];
                }
              }
            }
        }
      }
  if (bias) {
    const Tensor<T>& bv = bias->value();
    for (int n = 0; n < is.n; ++n)
      for (int oc = 0; oc < p.out_channels; ++oc) {
        T* oplane = od + (static_cast<std::int64_t>(n) * p.out_channels + oc) *
                             static_cast<std::int64_t>(oh) * ow;
        const T b = bv.data[oc];
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i)
          oplane[i] += b;
      }
  }

  const int xid = x.id, wid = weight.id;
  const int bid = bias ? bias->id : -1;
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  OpBuilder<T> build(t, inputs);
  return build.emit(std::move(out), [xid, wid, bid, p, is, oh, ow, icg, ocg](int out_id) {
    return [xid, wid, bid, p, is, oh, ow, icg, ocg, out_id](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& wv = tp.value(wid);
      const T* god = go.data();
      if (tp.needs_grad(xid)) {
        std::vector<T>& gx = tp.grad(xid);
        for (int n = 0; n < is.n; ++n)
          for (int g = 0; g < p.groups; ++g)
            for (int oc = 0; oc < ocg; ++oc) {
              const int ocn = g * ocg + oc;
              const T* gplane = god + (static_cast<std::int64_t>(n) * p.out_channels +
                                       ocn) *
                                          static_cast<std::int64_t>(oh) * ow;
              for (int ic = 0; ic < icg; ++ic) {
                const int icn = g * icg + ic;
                T* xgplane = gx.data() + (static_cast<std::int64_t>(n) * is.c + icn) *
                                             static_cast<std::int64_t>(is.h) * is.w;
                const T* wrow = wv.data.data() +
                                ((static_cast<std::int64_t>(ocn) * icg + ic) * p.kh) *
                                    p.kw;
                for (int kh = 0; kh < p.kh; ++kh)
                  for (int kw = 0; kw < p.kw; ++kw) {
                    const T wval = wrow[kh * p.kw + kw];
                    if (wval == T(0)) continue;
                    for (int y = 0; y < oh; ++y) {
                      const int hy = y * p.sh - p.ph + kh;
                      if (hy < 0 || hy >= is.h) continue;
                      int x0 = 0, x1 = ow;
                      while (x0 < ow && x0 * p.sw - p.pw + kw < 0) ++x0;
                      while (x1 > x0 && (x1 - 1) * p.sw - p.pw + kw >= is.w) --x1;
                      const T* grow = gplane + static_cast<std::int64_t>(y) * ow;
                      T* xgrow = xgplane + static_cast<std::int64_t>(hy) * is.w;
                      const int base = -p.pw + kw;
                      for (int xi = x0; xi < x1; ++xi) {
                        xgrow[xi * p.sw + base] += wval * grow[xi];
                      }
                    }
                  }
              }
            }
      }
      if (tp.needs_grad(wid)) {
        std::vector<T>& gw = tp.grad(wid);
        for (int g = 0; g < p.groups; ++g)
          for (int oc = 0; oc < ocg; ++oc) {
            const int ocn = g * ocg + oc;
            for (int ic = 0; ic < icg; ++ic) {
              const int icn = g * icg + ic;
              T* gwrow = gw.data() +
                         ((static_cast<std::int64_t>(ocn) * icg + ic) * p.kh) * p.kw;
              for (int kh = 0; kh < p.kh; ++kh)
                for (int kw = 0; kw < p.kw; ++kw) {
                  T acc = T(0);
                  for (int n = 0; n < is.n; ++n) {
                    const T* gplane =
                        god + (static_cast<std::int64_t>(n) * p.out_channels + ocn) *
                                  static_cast<std::int64_t>(oh) * ow;
                    const T* xplane = xv.data.data() +
                                      (static_cast<std::int64_t>(n) * is.c + icn) *
                                          static_cast<std::int64_t>(is.h) * is.w;
                    for (int y = 0; y < oh; ++y) {
                      const int hy = y * p.sh - p.ph + kh;
                      if (hy < 0 || hy >= is.h) continue;
                      int x0 = 0, x1 = ow;
                      while (x0 < ow && x0 * p.sw - p.pw + kw < 0) ++x0;
                      while (x1 > x0 && (x1 - 1) * p.sw - p.pw + kw >= is.w) --x1;
                      const T* grow = gplane + static_cast<std::int64_t>(y) * ow;
                      const T* xrow = xplane + static_cast<std::int64_t>(hy) * is.w;
                      const int base = -p.pw + kw;
                      for (int xi = x0; xi < x1; ++xi) {
                        acc += grow[xi] * xrow[xi * p.sw + base];
                      }
                    }
                  }
                  gwrow[kh * p.kw + kw] += acc;
                }
            }
          }
      }
      if (bid >= 0 && tp.needs_grad(bid)) {
        std::vector<T>& gb = tp.grad(bid);
        for (int n = 0; n < is.n; ++n)
          for (int oc = 0; oc < p.out_channels; ++oc) {
            const T* gplane = god + (static_cast<std::int64_t>(n) * p.out_channels +
                                     oc) *
                                        static_cast<std::int64_t>(oh) * ow;
            T acc = T(0);
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i)
              acc += gplane[i];
            gb[oc] += acc;
          }
      }
    };
  });
}

// Per-channel spatial filter with same padding; supports strip kernels.
// Weight shape is (C, 1, kh, kw).
template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias = {}) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Shape is = xv.shape;
  if (wv.shape.n != is.c || wv.shape.c != 1) {
    throw DimensionError(msg("depthwise weight shape ", wv.shape.str(),
                             " does not match ", is.c, " input channels"));
  }
  const int kh = wv.shape.h, kw = wv.shape.w;
  const int ph = ConvParams::same_padding(kh);
  const int pw = ConvParams::same_padding(kw);
  if (bias && bias->value().count() != is.c) {
    throw DimensionError("depthwise bias length must equal channel count");
  }
  Tensor<T> out(is);
  for (int n = 0; n < is.n; ++n)
    for (int c = 0; c < is.c; ++c) {
      const T* xplane = xv.data.data() + xv.index(n, c, 0, 0);
      T* oplane = out.data.data() + out.index(n, c, 0, 0);
      const T* wk = wv.data.data() + wv.index(c, 0, 0, 0);
      const T b = bias ? bias->value().data[c] : T(0);
      for (int y = 0; y < is.h; ++y)
        for (int xw = 0; xw < is.w; ++xw) {
          T acc = b;
          for (int dy = 0; dy < kh; ++dy) {
            const int hy = y - ph + dy;
            if (hy < 0 || hy >= is.h) continue;
            for (int dx = 0; dx < kw; ++dx) {
              const int wx = xw - pw + dx;
              if (wx < 0 || wx >= is.w) continue;
              acc += wk[dy * kw + dx] * xplane[hy * is.w + wx];
            }
          }
          oplane[y * is.w + xw] = acc;
        }
    }
  const int xid = x.id, wid = weight.id;
  const int bid = bias ? bias->id : -1;
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  OpBuilder<T> build(t, inputs);
  return build.emit(std::move(out), [xid, wid, bid, is, kh, kw, ph, pw](int out_id) {
    return [xid, wid, bid, is, kh, kw, ph, pw, out_id](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& wv = tp.value(wid);
      const bool nx = tp.needs_grad(xid);
      const bool nw = tp.needs_grad(wid);
      std::vector<T>* gx = nx ? &tp.grad(xid) : nullptr;
      std::vector<T>* gw = nw ? &tp.grad(wid) : nullptr;
      for (int n = 0; n < is.n; ++n)
        for (int c = 0; c < is.c; ++c) {
          const std::int64_t poff = xv.index(n, c, 0, 0);
          const T* gplane = go.data() + poff;
          const T* xplane = xv.data.data() + poff;
          const T* wk = wv.data.data() + wv.index(c, 0, 0, 0);
          for (int y = 0; y < is.h; ++y)
            for (int xw = 0; xw < is.w; ++xw) {
              const T g = gplane[y * is.w + xw];
              if (g == T(0)) continue;
              for (int dy = 0; dy < kh; ++dy) {
                const int hy = y - ph + dy;
                if (hy < 0 || hy >= is.h) continue;
                for (int dx = 0; dx < kw; ++dx) {
                  const int wx = xw - pw + dx;
                  if (wx < 0 || wx >= is.w) continue;
                  if (gx) (*gx)[poff + hy * is.w + wx] += g * wk[dy * kw + dx];
                  if (gw)
                    (*gw)[wv.index(c, 0, dy, dx)] += g * xplane[hy * is.w + wx];
                }
              }
            }
        }
      if (bid >= 0 && tp.needs_grad(bid)) {
        std::vector<T>& gb = tp.grad(bid);
        for (int n = 0; n < is.n; ++n)
          for (int c = 0; c < is.c; ++c) {
            const T* gplane = go.data() + xv.index(n, c, 0, 0);
            T acc = T(0);
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(is.h) * is.w; ++i)
              acc += gplane[i];
            gb[c] += acc;
          }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Normalization.
// ---------------------------------------------------------------------------

// Running statistics live outside the tape; train mode updates them as a
// side effect and inference reads them.
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>* running_mean,
                 Tensor<T>* running_var, bool train, T momentum = T(0.1),
                 T eps = T(1e-5)) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  if (gamma.value().count() != s.c || beta.value().count() != s.c) {
    throw DimensionError("batchnorm affine parameters must have one value per channel");
  }
  if (eps <= T(0)) throw ConfigError("batchnorm eps must be positive");
  auto mean = std::make_shared<std::vector<T>>(s.c, T(0));
  auto invstd = std::make_shared<std::vector<T>>(s.c, T(0));
  const std::int64_t m = static_cast<std::int64_t>(s.n) * s.h * s.w;
  if (train) {
    for (int c = 0; c < s.c; ++c) {
      T acc = T(0);
      for (int n = 0; n < s.n; ++n) {
        const T* plane = xv.data.data() + xv.index(n, c, 0, 0);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
          acc += plane[i];
      }
      const T mu = acc / static_cast<T>(m);
      T var = T(0);
      for (int n = 0; n < s.n; ++n) {
        const T* plane = xv.data.data() + xv.index(n, c, 0, 0);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i) {
          const T d = plane[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(m);
      (*mean)[c] = mu;
      (*invstd)[c] = T(1) / std::sqrt(var + eps);
      if (running_mean && running_var) {
        running_mean->data[c] = (T(1) - momentum) * running_mean->data[c] + momentum * mu;
        running_var->data[c] = (T(1) - momentum) * running_var->data[c] + momentum * var;
      }
    }
  } else {
    if (!running_mean || !running_var) {
      throw ConfigError("batchnorm inference requires running statistics");
    }
    for (int c = 0; c < s.c; ++c) {
      (*mean)[c] = running_mean->data[c];
      (*invstd)[c] = T(1) / std::sqrt(running_var->data[c] + eps);
    }
  }
  Tensor<T> out(s);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* xplane = xv.data.data() + xv.index(n, c, 0, 0);
      T* oplane = out.data.data() + out.index(n, c, 0, 0);
      const T mu = (*mean)[c], is_ = (*invstd)[c];
      const T ga = gv.data[c], be = bv.data[c];
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
        oplane[i] = (xplane[i] - mu) * is_ * ga + be;
    }
  const int xid = x.id, gid = gamma.id, bid = beta.id;
  OpBuilder<T> build(t, {x, gamma, beta});
  return build.emit(std::move(out), [xid, gid, bid, s, m, mean, invstd, train](int out_id) {
    return [xid, gid, bid, s, m, mean, invstd, train, out_id](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& gv = tp.value(gid);
      const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
      const bool nx = tp.needs_grad(xid);
      const bool ng = tp.needs_grad(gid);
      const bool nb = tp.needs_grad(bid);
      std::vector<T>* gx = nx ? &tp.grad(xid) : nullptr;
      std::vector<T>* gg = ng ? &tp.grad(gid) : nullptr;
      std::vector<T>* gb = nb ? &tp.grad(bid) : nullptr;
      for (int c = 0; c < s.c; ++c) {
        const T mu = (*mean)[c], is_ = (*invstd)[c], ga = gv.data[c];
        T sum_go = T(0), sum_go_xhat = T(0);
        for (int n = 0; n < s.n; ++n) {
          const std::int64_t off = xv.index(n, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) {
            const T g = go[off + i];
            sum_go += g;
            sum_go_xhat += g * (xv.data[off + i] - mu) * is_;
          }
        }
        if (gg) (*gg)[c] += sum_go_xhat;
        if (gb) (*gb)[c] += sum_go;
        if (gx) {
          if (train) {
            const T inv_m = T(1) / static_cast<T>(m);
            for (int n = 0; n < s.n; ++n) {
              const std::int64_t off = xv.index(n, c, 0, 0);
              for (std::int64_t i = 0; i < hw; ++i) {
                const T xhat = (xv.data[off + i] - mu) * is_;
                (*gx)[off + i] +=
                    ga * is_ * (go[off + i] - inv_m * sum_go - xhat * inv_m * sum_go_xhat);
              }
            }
          } else {
            for (int n = 0; n < s.n; ++n) {
              const std::int64_t off = xv.index(n, c, 0, 0);
              for (std::int64_t i = 0; i < hw; ++i) (*gx)[off + i] += go[off + i] * ga * is_;
            }
          }
        }
      }
    };
  });
}

// Group normalization over (C/groups, H, W) slices with per-channel affine.
template <typename T>
Var<T> group_norm(Var<T> x, int num_groups, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  if (num_groups < 1 || s.c % num_groups != 0) {
    throw ConfigError(msg("group_norm groups=", num_groups, " must divide C=", s.c));
  }
  if (gamma.value().count() != s.c || beta.value().count() != s.c) {
    throw DimensionError("group_norm affine parameters must have one value per channel");
  }
  const int cg = s.c / num_groups;
  const std::int64_t gsize = static_cast<std::int64_t>(cg) * s.h * s.w;
  auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.n) * num_groups);
  auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.n) * num_groups);
  Tensor<T> out(s);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < num_groups; ++g) {
      const std::int64_t off = xv.index(n, g * cg, 0, 0);
      T acc = T(0);
      for (std::int64_t i = 0; i < gsize; ++i) acc += xv.data[off + i];
      const T mu = acc / static_cast<T>(gsize);
      T var = T(0);
      for (std::int64_t i = 0; i < gsize; ++i) {
        const T d = xv.data[off + i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(gsize);
      const T is_ = T(1) / std::sqrt(var + eps);
      (*mean)[static_cast<std::size_t>(n) * num_groups + g] = mu;
      (*invstd)[static_cast<std::size_t>(n) * num_groups + g] = is_;
      for (int c = 0; c < cg; ++c) {
        const T ga = gv.data[g * cg + c], be = bv.data[g * cg + c];
        const std::int64_t coff = xv.index(n, g * cg + c, 0, 0);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.h) * s.w; ++i)
          out.data[coff + i] = (xv.data[coff + i] - mu) * is_ * ga + be;
      }
    }
  const int xid = x.id, gid = gamma.id, bid = beta.id;
  OpBuilder<T> build(t, {x, gamma, beta});
  return build.emit(std::move(out),
                    [xid, gid, bid, s, num_groups, cg, gsize, mean, invstd](int out_id) {
    return [xid, gid, bid, s, num_groups, cg, gsize, mean, invstd, out_id](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& gv = tp.value(gid);
      const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
      const bool nx = tp.needs_grad(xid);
      const bool ng = tp.needs_grad(gid);
      const bool nb = tp.needs_grad(bid);
      std::vector<T>* gx = nx ? &tp.grad(xid) : nullptr;
      std::vector<T>* gg = ng ? &tp.grad(gid) : nullptr;
      std::vector<T>* gb = nb ? &tp.grad(bid) : nullptr;
      for (int n = 0; n < s.n; ++n)
        for (int g = 0; g < num_groups; ++g) {
          const T mu = (*mean)[static_cast<std::size_t>(n) * num_groups + g];
          const T is_ = (*invstd)[static_cast<std::size_t>(n) * num_groups + g];
          // t = go * gamma accumulated over the group
          T sum_t = T(0), sum_t_xhat = T(0);
          for (int c = 0; c < cg; ++c) {
            const T ga = gv.data[g * cg + c];
            const std::int64_t coff = xv.index(n, g * cg + c, 0, 0);
            for (std::int64_t i = 0; i < hw; ++i) {
              const T tt = go[coff + i] * ga;
              sum_t += tt;
              sum_t_xhat += tt * (xv.data[coff + i] - mu) * is_;
            }
          }
          const T inv_gs = T(1) / static_cast<T>(gsize);
          for (int c = 0; c < cg; ++c) {
            const int cn = g * cg + c;
            const T ga = gv.data[cn];
            const std::int64_t coff = xv.index(n, cn, 0, 0);
            T sgo = T(0), sgx = T(0);
            for (std::int64_t i = 0; i < hw; ++i) {
              const T xhat = (xv.data[coff + i] - mu) * is_;
              const T g0 = go[coff + i];
              sgo += g0;
              sgx += g0 * xhat;
              if (gx) {
                const T tt = g0 * ga;
                (*gx)[coff + i] +=
                    is_ * (tt - inv_gs * sum_t - xhat * inv_gs * sum_t_xhat);
              }
            }
            if (gg) (*gg)[cn] += sgx;
            if (gb) (*gb)[cn] += sgo;
          }
        }
    };
  });
}

// ---------------------------------------------------------------------------
// Structure: concat / slice / reshape / transpose / resize.
// ---------------------------------------------------------------------------

enum class Axis { Channel, Height };

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, Axis axis) {
  if (xs.empty()) throw ConfigError("concat needs at least one input");
  Tape<T>& t = *xs[0].tape;
  const Shape first = xs[0].value().shape;
  int total = 0;
  for (const auto& x : xs) {
    const Shape s = x.value().shape;
    if (axis == Axis::Channel) {
      if (s.n != first.n || s.h != first.h || s.w != first.w) {
        throw DimensionError(msg("concat channel inputs disagree: ", first.str(), " vs ",
                                 s.str()));
      }
      total += s.c;
    } else {
      if (s.n != first.n || s.c != first.c || s.w != first.w) {
        throw DimensionError(msg("concat height inputs disagree: ", first.str(), " vs ",
                                 s.str()));
      }
      total += s.h;
    }
  }
  Shape os = first;
  (axis == Axis::Channel ? os.c : os.h) = total;
  Tensor<T> out(os);
  std::vector<int> offsets;
  int off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const Tensor<T>& xv = x.value();
    const Shape s = xv.shape;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < s.h; ++h) {
          const T* src = xv.data.data() + xv.index(n, c, h, 0);
          T* dst = out.data.data() +
                   (axis == Axis::Channel ? out.index(n, off + c, h, 0)
                                          : out.index(n, c, off + h, 0));
          std::copy(src, src + s.w, dst);
        }
    off += axis == Axis::Channel ? s.c : s.h;
  }
  std::vector<int> ids;
  std::vector<Shape> shapes;
  for (const auto& x : xs) {
    ids.push_back(x.id);
    shapes.push_back(x.value().shape);
  }
  OpBuilder<T> build(t, xs);
  return build.emit(std::move(out), [ids, shapes, offsets, os, axis](int out_id) {
    return [ids, shapes, offsets, os, axis, out_id](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& ov = tp.value(out_id);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (!tp.needs_grad(ids[k])) continue;
        std::vector<T>& gx = tp.grad(ids[k]);
        const Tensor<T>& xv = tp.value(ids[k]);
        const Shape s = shapes[k];
        const int off = offsets[k];
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c)
            for (int h = 0; h < s.h; ++h) {
              const T* src = go.data() +
                             (axis == Axis::Channel ? ov.index(n, off + c, h, 0)
                                                    : ov.index(n, c, off + h, 0));
              T* dst = gx.data() + xv.index(n, c, h, 0);
              for (int w = 0; w < s.w; ++w) dst[w] += src[w];
            }
      }
    };
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  return concat(xs, Axis::Channel);
}

template <typename T>
Var<T> slice(Var<T> x, Axis axis, int offset, int len) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  const int extent = axis == Axis::Channel ? s.c : s.h;
  if (offset < 0 || len < 1 || offset + len > extent) {
    throw DimensionError(msg("slice [", offset, ", ", offset + len, ") out of range for ",
                             extent));
  }
  Shape os = s;
  (axis == Axis::Channel ? os.c : os.h) = len;
  Tensor<T> out(os);
  for (int n = 0; n < os.n; ++n)
    for (int c = 0; c < os.c; ++c)
      for (int h = 0; h < os.h; ++h) {
        const T* src = xv.data.data() +
                       (axis == Axis::Channel ? xv.index(n, offset + c, h, 0)
                                              : xv.index(n, c, offset + h, 0));
        T* dst = out.data.data() + out.index(n, c, h, 0);
        std::copy(src, src + os.w, dst);
      }
  const int xid = x.id;
  OpBuilder<T> build(t, {x});
  return build.emit(std::move(out), [xid, s, os, axis, offset](int out_id) {
    return [xid, s, os, axis, offset, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& ov = tp.value(out_id);
      for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < os.c; ++c)
          for (int h = 0; h < os.h; ++h) {
            const T* src = go.data() + ov.index(n, c, h, 0);
            T* dst = gx.data() +
                     (axis == Axis::Channel ? xv.index(n, offset + c, h, 0)
                                            : xv.index(n, c, offset + h, 0));
            for (int w = 0; w < os.w; ++w) dst[w] += src[w];
          }
    };
  });
}

template <typename T>
std::vector<Var<T>> split_channels(Var<T> x, const std::vector<int>& sizes) {
  int total = 0;
  for (int s : sizes) total += s;
  if (total != x.value().shape.c) {
    throw DimensionError(msg("split sizes sum to ", total, ", input has ",
                             x.value().shape.c, " channels"));
  }
  std::vector<Var<T>> out;
  int off = 0;
  for (int s : sizes) {
    out.push_back(slice(x, Axis::Channel, off, s));
    off += s;
  }
  return out;
}

// Pure relabeling of extents; element order is unchanged.
template <typename T>
Var<T> reshape(Var<T> x, Shape ns) {
  ns.validate();
  const Tensor<T>& xv = x.value();
  if (ns.count() != xv.count()) {
    throw DimensionError(msg("reshape ", xv.shape.str(), " -> ", ns.str(),
                             " changes element count"));
  }
  Tensor<T> out;
  out.shape = ns;
  out.data = xv.data;
  const int xid = x.id;
  OpBuilder<T> build(*x.tape, {x});
  return build.emit(std::move(out), [xid](int out_id) {
    return [xid, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    };
  });
}

// Fold the leading channel groups into the batch: (N, C, H, W) -> (N*G, C/G, H, W).
template <typename T>
Var<T> fold_groups(Var<T> x, int g) {
  const Shape s = x.value().shape;
  if (s.c % g != 0) throw ConfigError(msg("cannot fold ", s.c, " channels into ", g, " groups"));
  return reshape(x, Shape{s.n * g, s.c / g, s.h, s.w});
}

template <typename T>
Var<T> unfold_groups(Var<T> x, int g) {
  const Shape s = x.value().shape;
  if (s.n % g != 0) throw ConfigError("batch does not contain the folded groups");
  return reshape(x, Shape{s.n / g, s.c * g, s.h, s.w});
}

template <typename T>
Var<T> transpose_hw(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  Tensor<T> out(Shape{s.n, s.c, s.w, s.h});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w)
          out.data[out.index(n, c, w, h)] = xv.data[xv.index(n, c, h, w)];
  const int xid = x.id;
  OpBuilder<T> build(*x.tape, {x});
  return build.emit(std::move(out), [xid, s](int out_id) {
    return [xid, s, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& ov = tp.value(out_id);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
              gx[xv.index(n, c, h, w)] += go[ov.index(n, c, w, h)];
    };
  });
}

// Each input cell becomes a 2x2 block.
template <typename T>
Var<T> resize_nearest_up2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  Tensor<T> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) {
          const T v = xv.data[xv.index(n, c, h, w)];
          out.data[out.index(n, c, 2 * h, 2 * w)] = v;
          out.data[out.index(n, c, 2 * h, 2 * w + 1)] = v;
          out.data[out.index(n, c, 2 * h + 1, 2 * w)] = v;
          out.data[out.index(n, c, 2 * h + 1, 2 * w + 1)] = v;
        }
  const int xid = x.id;
  OpBuilder<T> build(*x.tape, {x});
  return build.emit(std::move(out), [xid, s](int out_id) {
    return [xid, s, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& ov = tp.value(out_id);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
              gx[xv.index(n, c, h, w)] += go[ov.index(n, c, 2 * h, 2 * w)] +
                                          go[ov.index(n, c, 2 * h, 2 * w + 1)] +
                                          go[ov.index(n, c, 2 * h + 1, 2 * w)] +
                                          go[ov.index(n, c, 2 * h + 1, 2 * w + 1)];
    };
  });
}

// Nearest selection of the top-left cell of every 2x2 block.
template <typename T>
Var<T> resize_nearest_down2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw DimensionError(msg("nearest 2x downsample needs even extents, got ", s.str()));
  }
  Tensor<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h / 2; ++h)
        for (int w = 0; w < s.w / 2; ++w)
          out.data[out.index(n, c, h, w)] = xv.data[xv.index(n, c, 2 * h, 2 * w)];
  const int xid = x.id;
  OpBuilder<T> build(*x.tape, {x});
  return build.emit(std::move(out), [xid, s](int out_id) {
    return [xid, s, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& ov = tp.value(out_id);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (int h = 0; h < s.h / 2; ++h)
            for (int w = 0; w < s.w / 2; ++w)
              gx[xv.index(n, c, 2 * h, 2 * w)] += go[ov.index(n, c, h, w)];
    };
  });
}

// ---------------------------------------------------------------------------
// Fusion and loss primitives.
// ---------------------------------------------------------------------------

// Fast normalized fusion: sum(relu(w_i) * x_i) / (sum(relu(w_j)) + eps).
// raw_weights is a (1,1,1,M) tensor, one entry per input.
template <typename T>
Var<T> bifpn_fuse(const std::vector<Var<T>>& xs, Var<T> raw_weights, T eps) {
  if (xs.size() < 2) throw ConfigError("weighted fusion needs at least two inputs");
  const Tensor<T>& wv = raw_weights.value();
  if (wv.count() != static_cast<std::int64_t>(xs.size())) {
    throw ConfigError(msg("fusion has ", xs.size(), " inputs but ", wv.count(),
                          " raw weights"));
  }
  const Shape s = xs[0].value().shape;
  for (const auto& x : xs) {
    if (!(x.value().shape == s)) {
      throw DimensionError(msg("fusion inputs must share a shape: ", s.str(), " vs ",
                               x.value().shape.str()));
    }
  }
  Tape<T>& t = *xs[0].tape;
  const int m = static_cast<int>(xs.size());
  std::vector<T> eff(m);
  T denom = eps;
  for (int i = 0; i < m; ++i) {
    eff[i] = std::max(wv.data[i], T(0));
    denom += eff[i];
  }
  Tensor<T> out(s);
  for (int i = 0; i < m; ++i) {
    const T coef = eff[i] / denom;
    if (coef == T(0)) continue;
    const Tensor<T>& xv = xs[i].value();
    for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] += coef * xv.data[j];
  }
  std::vector<int> ids;
  for (const auto& x : xs) ids.push_back(x.id);
  const int wid = raw_weights.id;
  std::vector<Var<T>> inputs = xs;
  inputs.push_back(raw_weights);
  OpBuilder<T> build(t, inputs);
  return build.emit(std::move(out), [ids, wid, m, eff, denom](int out_id) {
    return [ids, wid, m, eff, denom, out_id](Tape<T>& tp) {
      const std::vector<T>& go = tp.grad(out_id);
      const Tensor<T>& ov = tp.value(out_id);
      for (int i = 0; i < m; ++i) {
        if (!tp.needs_grad(ids[i])) continue;
        const T coef = eff[i] / denom;
        std::vector<T>& gx = tp.grad(ids[i]);
        for (std::size_t j = 0; j < gx.size(); ++j) gx[j] += coef * go[j];
      }
      if (tp.needs_grad(wid)) {
        const Tensor<T>& wv = tp.value(wid);
        std::vector<T>& gw = tp.grad(wid);
        for (int i = 0; i < m; ++i) {
          if (wv.data[i] <= T(0)) continue;  // relu clamp: zero gradient
          const Tensor<T>& xv = tp.value(ids[i]);
          T acc = T(0);
          for (std::size_t j = 0; j < ov.data.size(); ++j)
            acc += go[j] * (xv.data[j] - ov.data[j]);
          gw[i] += acc / denom;
        }
      }
    };
  });
}

// Per-element binary cross entropy on logits; numerically stable.
// loss = max(x,0) - x*t + log(1 + exp(-|x|)), d/dx = sigmoid(x) - t.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, Var<T> targets) {
  return binary_broadcast(
      logits, targets,
      [](T x, T tt) {
        return std::max(x, T(0)) - x * tt + std::log1p(std::exp(-std::abs(x)));
      },
      [](T x, T tt) {
        return std::pair<T, T>(sigmoid_val(x) - tt, T(0));
      });
}

// Gathers K cells from a (N,C,H,W) map into (1,C,1,K); scatter-add backward.
struct CellRef {
  int n;
  int h;
  int w;
};

template <typename T>
Var<T> gather_cells(Var<T> x, const std::vector<CellRef>& cells) {
  if (cells.empty()) throw ConfigError("gather_cells needs at least one cell");
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape;
  const int k = static_cast<int>(cells.size());
  Tensor<T> out(Shape{1, s.c, 1, k});
  for (int c = 0; c < s.c; ++c)
    for (int i = 0; i < k; ++i) {
      const CellRef& r = cells[static_cast<std::size_t>(i)];
      out.data[out.index(0, c, 0, i)] = xv.data[xv.index(r.n, c, r.h, r.w)];
    }
  const int xid = x.id;
  OpBuilder<T> build(*x.tape, {x});
  return build.emit(std::move(out), [xid, s, cells, k](int out_id) {
    return [xid, s, cells, k, out_id](Tape<T>& tp) {
      if (!tp.needs_grad(xid)) return;
      const std::vector<T>& go = tp.grad(out_id);
      std::vector<T>& gx = tp.grad(xid);
      const Tensor<T>& xv = tp.value(xid);
      const Tensor<T>& ov = tp.value(out_id);
      for (int c = 0; c < s.c; ++c)
        for (int i = 0; i < k; ++i) {
          const CellRef& r = cells[static_cast<std::size_t>(i)];
          gx[xv.index(r.n, c, r.h, r.w)] += go[ov.index(0, c, 0, i)];
        }
    };
  });
}

}  // namespace pec
