#pragma once

#include <cmath>
#include <string>

#include "pec/ops.hpp"
#include "pec/weights.hpp"

namespace pec {

// Shared context threaded through block forwards. Blocks are pure
// functions of (input, weights) apart from BN running statistics, which
// update in train mode.
template <typename T>
struct BlockCtx {
  Tape<T>& tape;
  WeightStore<T>& store;
  bool train = false;

  Var<T> weight(const std::string& name) { return tape.leaf(&store.at(name)); }
};

// ---------------------------------------------------------------------------
// Configs.
// ---------------------------------------------------------------------------

struct CbsConfig {
  int in_c = 1;
  int out_c = 1;
  int k = 1;
  int stride = 1;
  int groups = 1;
};

struct PConvConfig {
  int channels = 1;
  double ratio = 0.25;
  int kernel = 3;
  enum class Partition { First, Last };
  Partition partition = Partition::First;

  int conv_channels() const {
    const int cp = static_cast<int>(std::llround(channels * ratio));
    if (cp < 1 || cp > channels) {
      throw ConfigError(msg("partial convolution slice ", cp, " outside [1, ", channels, "]"));
    }
    return cp;
  }
};

struct EMAConfig {
  int channels = 1;
  int groups = 4;

  int group_channels() const {
    if (groups < 1 || channels % groups != 0) {
      throw ConfigError(msg("EMA groups=", groups, " must divide channels=", channels));
    }
    return channels / groups;
  }
};

struct CPCAConfig {
  int channels = 1;
  int mlp_reduction = 16;
  int base_kernel = 5;
  std::array<int, 3> strip_kernels{7, 11, 21};

  int hidden() const { return std::max(channels / mlp_reduction, 4); }
};

struct C2FConfig {
  int in_c = 1;
  int out_c = 1;
  int n = 1;
  bool shortcut = true;
  enum class Variant { Original, FasterEma };
  Variant variant = Variant::Original;
  int ema_groups = 4;

  int hidden() const { return out_c / 2; }
};

struct SppfConfig {
  int in_c = 1;
  int out_c = 1;
  bool with_cpca = false;
  int cpca_reduction = 16;

  int hidden() const { return in_c / 2; }
  int concat_c() const { return 4 * hidden(); }
};

struct HeadConfig {
  std::array<int, 3> in_c{};
  int num_classes = 4;
  int reg_max = 16;  // used by DFL-style parameter accounting only

  // Branch widths follow the detection-head convention keyed off the
  // first (highest resolution) scale.
  int box_width() const { return std::max({16, in_c[0] / 4, 4 * reg_max}); }
  int cls_width() const { return std::max(in_c[0], std::min(num_classes, 100)); }
};

// ---------------------------------------------------------------------------
// CBS: conv + batchnorm + SiLU, same padding.
// ---------------------------------------------------------------------------

template <typename T>
void cbs_init(WeightStore<T>& store, const std::string& p, const CbsConfig& cfg, Rng& rng) {
  const int icg = cfg.in_c / cfg.groups;
  store.add(p + ".conv.w",
            kaiming_uniform<T>(Shape{cfg.out_c, icg, cfg.k, cfg.k},
                               static_cast<std::int64_t>(icg) * cfg.k * cfg.k, rng));
  store.add(p + ".bn.g", Tensor<T>::full(Shape{1, cfg.out_c, 1, 1}, T(1)));
  store.add(p + ".bn.b", Tensor<T>::zeros(Shape{1, cfg.out_c, 1, 1}));
  store.add(p + ".bn.rm", Tensor<T>::zeros(Shape{1, cfg.out_c, 1, 1}), false);
  store.add(p + ".bn.rv", Tensor<T>::full(Shape{1, cfg.out_c, 1, 1}, T(1)), false);
}

template <typename T>
Var<T> cbs_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p, const CbsConfig& cfg) {
  ConvParams cp;
  cp.in_channels = cfg.in_c;
  cp.out_channels = cfg.out_c;
  cp.groups = cfg.groups;
  cp.kh = cp.kw = cfg.k;
  cp.sh = cp.sw = cfg.stride;
  cp.ph = cp.pw = ConvParams::same_padding(cfg.k);
  Var<T> y = conv2d(x, ctx.weight(p + ".conv.w"), {}, cp);
  y = batchnorm(y, ctx.weight(p + ".bn.g"), ctx.weight(p + ".bn.b"),
                &ctx.store.at(p + ".bn.rm"), &ctx.store.at(p + ".bn.rv"), ctx.train);
  return silu(y);
}

// Plain 1x1 convolution with bias (no norm, no activation).
template <typename T>
void conv1x1_init(WeightStore<T>& store, const std::string& p, int in_c, int out_c,
                  Rng& rng) {
  store.add(p + ".w", kaiming_uniform<T>(Shape{out_c, in_c, 1, 1}, in_c, rng));
  store.add(p + ".b", Tensor<T>::zeros(Shape{1, out_c, 1, 1}));
}

template <typename T>
Var<T> conv1x1_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p, int in_c,
                       int out_c) {
  ConvParams cp;
  cp.in_channels = in_c;
  cp.out_channels = out_c;
  cp.has_bias = true;
  return conv2d(x, ctx.weight(p + ".w"), std::optional<Var<T>>(ctx.weight(p + ".b")), cp);
}

// ---------------------------------------------------------------------------
// PConv: convolve one contiguous channel slice, pass the rest through.
// ---------------------------------------------------------------------------

template <typename T>
void pconv_init(WeightStore<T>& store, const std::string& p, const PConvConfig& cfg,
                Rng& rng) {
  const int cp = cfg.conv_channels();
  store.add(p + ".conv.w",
            kaiming_uniform<T>(Shape{cp, cp, cfg.kernel, cfg.kernel},
                               static_cast<std::int64_t>(cp) * cfg.kernel * cfg.kernel, rng));
}

template <typename T>
Var<T> pconv_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p,
                     const PConvConfig& cfg) {
  if (x.value().shape.c != cfg.channels) {
    throw DimensionError(msg("partial conv expects ", cfg.channels, " channels, got ",
                             x.value().shape.c));
  }
  const int cp = cfg.conv_channels();
  const int rest = cfg.channels - cp;
  ConvParams params;
  params.in_channels = cp;
  params.out_channels = cp;
  params.kh = params.kw = cfg.kernel;
  params.ph = params.pw = ConvParams::same_padding(cfg.kernel);
  const bool first = cfg.partition == PConvConfig::Partition::First;
  const int conv_off = first ? 0 : rest;
  Var<T> conv_in = slice(x, Axis::Channel, conv_off, cp);
  Var<T> conv_out = conv2d(conv_in, ctx.weight(p + ".conv.w"), {}, params);
  if (rest == 0) return conv_out;
  Var<T> untouched = slice(x, Axis::Channel, first ? cp : 0, rest);
  return first ? concat_channels<T>({conv_out, untouched})
               : concat_channels<T>({untouched, conv_out});
}

// ---------------------------------------------------------------------------
// EMA attention. Grouped sub-features are gated by two pooled 1D paths
// sharing a 1x1 conv, run against a parallel 3x3 path, and rescaled by a
// sigmoid map built from cross-path spatially-softmaxed descriptors.
// ---------------------------------------------------------------------------

template <typename T>
void ema_init(WeightStore<T>& store, const std::string& p, const EMAConfig& cfg, Rng& rng) {
  const int cg = cfg.group_channels();
  store.add(p + ".cv1.w", kaiming_uniform<T>(Shape{cg, cg, 1, 1}, cg, rng));
  store.add(p + ".cv1.b", Tensor<T>::zeros(Shape{1, cg, 1, 1}));
  store.add(p + ".cv3.w",
            kaiming_uniform<T>(Shape{cg, cg, 3, 3}, static_cast<std::int64_t>(cg) * 9, rng));
  store.add(p + ".cv3.b", Tensor<T>::zeros(Shape{1, cg, 1, 1}));
  store.add(p + ".gn.g", Tensor<T>::full(Shape{1, cg, 1, 1}, T(1)));
  store.add(p + ".gn.b", Tensor<T>::zeros(Shape{1, cg, 1, 1}));
}

template <typename T>
Var<T> ema_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p, const EMAConfig& cfg) {
  const int cg = cfg.group_channels();
  const Shape s = x.value().shape;
  if (s.c != cfg.channels) {
    throw DimensionError(msg("EMA expects ", cfg.channels, " channels, got ", s.c));
  }
  Var<T> g = fold_groups(x, cfg.groups);  // (N*G, C/G, H, W)

  // Pooled 1D paths share one 1x1 conv over the stacked (H + W) axis.
  Var<T> xh = global_avg_pool_1d(g, PoolAxis::Width);             // (m, cg, H, 1)
  Var<T> xw = transpose_hw(global_avg_pool_1d(g, PoolAxis::Height));  // (m, cg, W, 1)
  ConvParams c1;
  c1.in_channels = cg;
  c1.out_channels = cg;
  c1.has_bias = true;
  Var<T> hw = conv2d(concat<T>({xh, xw}, Axis::Height), ctx.weight(p + ".cv1.w"),
                     std::optional<Var<T>>(ctx.weight(p + ".cv1.b")), c1);
  Var<T> gate_h = slice(hw, Axis::Height, 0, s.h);
  Var<T> gate_w = transpose_hw(slice(hw, Axis::Height, s.h, s.w));
  Var<T> gated = mul(mul(g, sigmoid(gate_h)), sigmoid(gate_w));
  Var<T> x1 = group_norm(gated, cg, ctx.weight(p + ".gn.g"), ctx.weight(p + ".gn.b"));

  // Parallel 3x3 path.
  ConvParams c3;
  c3.in_channels = cg;
  c3.out_channels = cg;
  c3.kh = c3.kw = 3;
  c3.ph = c3.pw = 1;
  c3.has_bias = true;
  Var<T> x2 = conv2d(g, ctx.weight(p + ".cv3.w"),
                     std::optional<Var<T>>(ctx.weight(p + ".cv3.b")), c3);

  // Cross-spatial aggregation: each path's global descriptor weights the
  // other path's spatially-softmaxed maps.
  Var<T> t12 = sum_channels(mul(global_avg_pool_2d(x1), softmax_spatial(x2)));
  Var<T> t21 = sum_channels(mul(global_avg_pool_2d(x2), softmax_spatial(x1)));
  Var<T> wmap = sigmoid(add(t12, t21));  // (m, 1, H, W)
  return unfold_groups(mul(g, wmap), cfg.groups);
}

// ---------------------------------------------------------------------------
// CPCA: channel attention then multi-scale strip-kernel spatial attention,
// each applied multiplicatively.
// ---------------------------------------------------------------------------

template <typename T>
void cpca_init(WeightStore<T>& store, const std::string& p, const CPCAConfig& cfg,
               Rng& rng) {
  const int c = cfg.channels;
  const int hid = cfg.hidden();
  conv1x1_init(store, p + ".fc1", c, hid, rng);
  conv1x1_init(store, p + ".fc2", hid, c, rng);
  auto dw = [&](const std::string& name, int kh, int kw) {
    store.add(p + name + ".w",
              kaiming_uniform<T>(Shape{c, 1, kh, kw},
                                 static_cast<std::int64_t>(kh) * kw, rng));
    store.add(p + name + ".b", Tensor<T>::zeros(Shape{1, c, 1, 1}));
  };
  dw(".dw5", cfg.base_kernel, cfg.base_kernel);
  dw(".dw7a", 1, cfg.strip_kernels[0]);
  dw(".dw7b", cfg.strip_kernels[0], 1);
  dw(".dw11a", 1, cfg.strip_kernels[1]);
  dw(".dw11b", cfg.strip_kernels[1], 1);
  dw(".dw21a", 1, cfg.strip_kernels[2]);
  dw(".dw21b", cfg.strip_kernels[2], 1);
  conv1x1_init(store, p + ".mix", c, c, rng);
}

// CA(F) = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F))), a (N,C,1,1) map.
template <typename T>
Var<T> cpca_channel_attention(BlockCtx<T>& ctx, Var<T> x, const std::string& p,
                              const CPCAConfig& cfg) {
  const int c = cfg.channels;
  const int hid = cfg.hidden();
  auto mlp = [&](Var<T> v) {
    v = conv1x1_forward(ctx, v, p + ".fc1", c, hid);
    v = relu(v);
    return conv1x1_forward(ctx, v, p + ".fc2", hid, c);
  };
  return sigmoid(add(mlp(global_avg_pool_2d(x)), mlp(global_max_pool_2d(x))));
}

// SA(F) = 1x1 conv over the sum of four branches of DwConv(F); Branch_0 is
// the identity and the others are dual strip depthwise pairs.
template <typename T>
Var<T> cpca_spatial_attention(BlockCtx<T>& ctx, Var<T> x, const std::string& p,
                              const CPCAConfig& cfg) {
  auto dw = [&](Var<T> v, const std::string& name) {
    return depthwise_conv2d(v, ctx.weight(p + name + ".w"),
                            std::optional<Var<T>>(ctx.weight(p + name + ".b")));
  };
  Var<T> base = dw(x, ".dw5");
  Var<T> b1 = dw(dw(base, ".dw7a"), ".dw7b");
  Var<T> b2 = dw(dw(base, ".dw11a"), ".dw11b");
  Var<T> b3 = dw(dw(base, ".dw21a"), ".dw21b");
  Var<T> total = add(add(base, b1), add(b2, b3));
  return conv1x1_forward(ctx, total, p + ".mix", cfg.channels, cfg.channels);
}

template <typename T>
Var<T> cpca_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p,
                    const CPCAConfig& cfg) {
  Var<T> fc = mul(x, cpca_channel_attention(ctx, x, p, cfg));
  return mul(fc, cpca_spatial_attention(ctx, fc, p, cfg));
}

// ---------------------------------------------------------------------------
// Bottlenecks and C2F.
// ---------------------------------------------------------------------------

template <typename T>
void bottleneck_init(WeightStore<T>& store, const std::string& p, int channels, Rng& rng) {
  cbs_init(store, p + ".cv1", CbsConfig{channels, channels, 3, 1, 1}, rng);
  cbs_init(store, p + ".cv2", CbsConfig{channels, channels, 3, 1, 1}, rng);
}

template <typename T>
Var<T> bottleneck_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p, int channels,
                          bool shortcut) {
  Var<T> y = cbs_forward(ctx, x, p + ".cv1", CbsConfig{channels, channels, 3, 1, 1});
  y = cbs_forward(ctx, y, p + ".cv2", CbsConfig{channels, channels, 3, 1, 1});
  return shortcut ? add(x, y) : y;
}

// PConv -> channel-doubling 1x1 CBS -> 1x1 reduction -> EMA attention.
template <typename T>
void faster_ema_bottleneck_init(WeightStore<T>& store, const std::string& p, int channels,
                                int ema_groups, Rng& rng) {
  pconv_init(store, p + ".pconv", PConvConfig{channels}, rng);
  cbs_init(store, p + ".expand", CbsConfig{channels, 2 * channels, 1, 1, 1}, rng);
  conv1x1_init(store, p + ".reduce", 2 * channels, channels, rng);
  ema_init(store, p + ".ema", EMAConfig{channels, ema_groups}, rng);
}

template <typename T>
Var<T> faster_ema_bottleneck_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p,
                                     int channels, int ema_groups) {
  Var<T> y = pconv_forward(ctx, x, p + ".pconv", PConvConfig{channels});
  y = cbs_forward(ctx, y, p + ".expand", CbsConfig{channels, 2 * channels, 1, 1, 1});
  y = conv1x1_forward(ctx, y, p + ".reduce", 2 * channels, channels);
  return ema_forward(ctx, y, p + ".ema", EMAConfig{channels, ema_groups});
}

template <typename T>
void c2f_init(WeightStore<T>& store, const std::string& p, const C2FConfig& cfg, Rng& rng) {
  const int h = cfg.hidden();
  cbs_init(store, p + ".cv1", CbsConfig{cfg.in_c, 2 * h, 1, 1, 1}, rng);
  for (int i = 0; i < cfg.n; ++i) {
    const std::string bp = msg(p, ".m", i);
    if (cfg.variant == C2FConfig::Variant::Original) {
      bottleneck_init(store, bp, h, rng);
    } else {
      faster_ema_bottleneck_init(store, bp, h, cfg.ema_groups, rng);
    }
  }
  cbs_init(store, p + ".cv2", CbsConfig{(2 + cfg.n) * h, cfg.out_c, 1, 1, 1}, rng);
}

template <typename T>
Var<T> c2f_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p, const C2FConfig& cfg) {
  const int h = cfg.hidden();
  Var<T> y = cbs_forward(ctx, x, p + ".cv1", CbsConfig{cfg.in_c, 2 * h, 1, 1, 1});
  std::vector<Var<T>> parts = split_channels(y, {h, h});
  std::vector<Var<T>> outs{parts[0], parts[1]};
  Var<T> cur = parts[1];
  for (int i = 0; i < cfg.n; ++i) {
    const std::string bp = msg(p, ".m", i);
    cur = cfg.variant == C2FConfig::Variant::Original
              ? bottleneck_forward(ctx, cur, bp, h, cfg.shortcut)
              : faster_ema_bottleneck_forward(ctx, cur, bp, h, cfg.ema_groups);
    outs.push_back(cur);
  }
  return cbs_forward(ctx, concat_channels(outs), p + ".cv2",
                     CbsConfig{(2 + cfg.n) * h, cfg.out_c, 1, 1, 1});
}

// ---------------------------------------------------------------------------
// SPPF and SPPF_CPCA.
// ---------------------------------------------------------------------------

template <typename T>
void sppf_init(WeightStore<T>& store, const std::string& p, const SppfConfig& cfg,
               Rng& rng) {
  cbs_init(store, p + ".cv1", CbsConfig{cfg.in_c, cfg.hidden(), 1, 1, 1}, rng);
  if (cfg.with_cpca) {
    cpca_init(store, p + ".cpca", CPCAConfig{cfg.concat_c(), cfg.cpca_reduction}, rng);
  }
  cbs_init(store, p + ".cv2", CbsConfig{cfg.concat_c(), cfg.out_c, 1, 1, 1}, rng);
}

template <typename T>
Var<T> sppf_forward(BlockCtx<T>& ctx, Var<T> x, const std::string& p,
                    const SppfConfig& cfg) {
  Var<T> h = cbs_forward(ctx, x, p + ".cv1", CbsConfig{cfg.in_c, cfg.hidden(), 1, 1, 1});
  Var<T> p1 = pool2d(h, PoolKind::Max, 5, 1, 2);
  Var<T> p2 = pool2d(p1, PoolKind::Max, 5, 1, 2);
  Var<T> p3 = pool2d(p2, PoolKind::Max, 5, 1, 2);
  Var<T> cat = concat_channels<T>({h, p1, p2, p3});
  if (cfg.with_cpca) {
    cat = cpca_forward(ctx, cat, p + ".cpca", CPCAConfig{cfg.concat_c(), cfg.cpca_reduction});
  }
  return cbs_forward(ctx, cat, p + ".cv2", CbsConfig{cfg.concat_c(), cfg.out_c, 1, 1, 1});
}

// ---------------------------------------------------------------------------
// Decoupled anchor-free head. Box branch emits softplus distances
// (l, t, r, b) in cell units; class branch emits logits.
// ---------------------------------------------------------------------------

template <typename T>
struct HeadMaps {
  Var<T> box;  // (N, 4, H, W)
  Var<T> cls;  // (N, num_classes, H, W)
};

template <typename T>
void head_init(WeightStore<T>& store, const std::string& p, const HeadConfig& cfg,
               Rng& rng) {
  const int c2 = cfg.box_width(), c3 = cfg.cls_width();
  for (int i = 0; i < 3; ++i) {
    const std::string bp = msg(p, ".box", i);
    cbs_init(store, bp + ".cv1", CbsConfig{cfg.in_c[i], c2, 3, 1, 1}, rng);
    cbs_init(store, bp + ".cv2", CbsConfig{c2, c2, 3, 1, 1}, rng);
    conv1x1_init(store, bp + ".out", c2, 4, rng);
    const std::string cp = msg(p, ".cls", i);
    cbs_init(store, cp + ".cv1", CbsConfig{cfg.in_c[i], c3, 3, 1, 1}, rng);
    cbs_init(store, cp + ".cv2", CbsConfig{c3, c3, 3, 1, 1}, rng);
    conv1x1_init(store, cp + ".out", c3, cfg.num_classes, rng);
    // Mild negative prior: start confidences low without saturating the
    // sigmoid gradient for the sparse positive cells.
    auto& bias = store.at(cp + ".out.b");
    for (auto& v : bias.data) v = static_cast<T>(-2.0);
  }
}

template <typename T>
HeadMaps<T> head_forward_scale(BlockCtx<T>& ctx, Var<T> x, const std::string& p, int scale,
                               const HeadConfig& cfg) {
  const int c2 = cfg.box_width(), c3 = cfg.cls_width();
  const std::string bp = msg(p, ".box", scale);
  Var<T> b = cbs_forward(ctx, x, bp + ".cv1", CbsConfig{cfg.in_c[scale], c2, 3, 1, 1});
  b = cbs_forward(ctx, b, bp + ".cv2", CbsConfig{c2, c2, 3, 1, 1});
  b = softplus(conv1x1_forward(ctx, b, bp + ".out", c2, 4));
  const std::string cp = msg(p, ".cls", scale);
  Var<T> c = cbs_forward(ctx, x, cp + ".cv1", CbsConfig{cfg.in_c[scale], c3, 3, 1, 1});
  c = cbs_forward(ctx, c, cp + ".cv2", CbsConfig{c3, c3, 3, 1, 1});
  c = conv1x1_forward(ctx, c, cp + ".out", c3, cfg.num_classes);
  return HeadMaps<T>{b, c};
}

}  // namespace pec
