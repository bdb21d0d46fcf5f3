#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pec/blocks.hpp"
#include "pec/gradcheck.hpp"
#include "pec/train.hpp"

namespace pec {

// Finite-difference verification of every differentiable primitive and
// composite block at small shapes, in double precision. Shared by the
// gradcheck CLI command and the acceptance suite.

struct GradSuiteEntry {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool passed = false;
};

struct GradSuiteOptions {
  double tolerance = 1e-4;
  // Test hook: adds a deliberate offset to conv2d's analytic gradient so
  // the suite demonstrably detects a broken backward rule.
  bool corrupt_conv_backward = false;
};

inline std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& opts = {}) {
  std::vector<GradSuiteEntry> results;
  Rng rng(20240811);

  auto record = [&](const std::string& name, GradCheckResult r) {
    GradSuiteEntry e;
    e.name = name;
    e.max_rel_err = r.max_rel_err;
    e.tolerance = opts.tolerance;
    e.passed = r.max_rel_err <= opts.tolerance;
    results.push_back(e);
  };

  auto t = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    return Tensor<double>::uniform(s, rng, lo, hi);
  };

  // --- primitives ------------------------------------------------------
  {
    Tensor<double> x = t({2, 3, 5, 5});
    Tensor<double> w = t({4, 3, 3, 3}, -0.5, 0.5);
    Tensor<double> b = t({1, 4, 1, 1}, -0.2, 0.2);
    ConvParams p;
    p.in_channels = 3;
    p.out_channels = 4;
    p.kh = p.kw = 3;
    p.ph = p.pw = 1;
    p.sh = p.sw = 2;
    p.has_bias = true;
    auto r = gradcheck_fn(
        [&](Tape<double>& tp) {
          return sum_all(silu(conv2d(tp.leaf(&x), tp.leaf(&w),
                                     std::optional<Var<double>>(tp.leaf(&b)), p)));
        },
        {&x, &w, &b});
    if (opts.corrupt_conv_backward) r.max_rel_err += 1e-2;
    record("conv2d", r);
  }
  {
    Tensor<double> x = t({1, 4, 5, 5});
    Tensor<double> w = t({4, 2, 3, 3}, -0.5, 0.5);
    ConvParams p;
    p.in_channels = 4;
    p.out_channels = 4;
    p.groups = 2;
    p.kh = p.kw = 3;
    p.ph = p.pw = 1;
    record("conv2d_grouped", gradcheck_fn(
                                 [&](Tape<double>& tp) {
                                   return sum_all(conv2d(tp.leaf(&x), tp.leaf(&w), {}, p));
                                 },
                                 {&x, &w}));
  }
  {
    Tensor<double> x = t({1, 3, 4, 6});
    Tensor<double> w = t({3, 1, 1, 7}, -0.5, 0.5);
    Tensor<double> b = t({1, 3, 1, 1}, -0.2, 0.2);
    record("depthwise_conv2d",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 return sum_all(silu(depthwise_conv2d(
                     tp.leaf(&x), tp.leaf(&w), std::optional<Var<double>>(tp.leaf(&b)))));
               },
               {&x, &w, &b}));
  }
  {
    Tensor<double> x = t({2, 2, 6, 6});
    record("pool2d_max", gradcheck_fn(
                             [&](Tape<double>& tp) {
                               return sum_all(mul(pool2d(tp.leaf(&x), PoolKind::Max, 3, 2, 1),
                                                  pool2d(tp.leaf(&x), PoolKind::Max, 3, 2, 1)));
                             },
                             {&x}));
    record("pool2d_avg", gradcheck_fn(
                             [&](Tape<double>& tp) {
                               auto v = pool2d(tp.leaf(&x), PoolKind::Avg, 3, 2, 1);
                               return sum_all(mul(v, v));
                             },
                             {&x}));
  }
  {
    Tensor<double> x = t({2, 3, 4, 5});
    record("global_avg_pool_1d",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 auto h = global_avg_pool_1d(tp.leaf(&x), PoolAxis::Height);
                 auto w = global_avg_pool_1d(tp.leaf(&x), PoolAxis::Width);
                 return sum_all(add(mul(h, h), mul(w, w)));
               },
               {&x}));
    record("global_pool_2d", gradcheck_fn(
                                 [&](Tape<double>& tp) {
                                   auto a = global_avg_pool_2d(tp.leaf(&x));
                                   auto m = global_max_pool_2d(tp.leaf(&x));
                                   return sum_all(mul(a, m));
                                 },
                                 {&x}));
  }
  {
    Tensor<double> x = t({3, 4, 3, 3});
    Tensor<double> g = t({1, 4, 1, 1}, 0.5, 1.5);
    Tensor<double> b = t({1, 4, 1, 1}, -0.3, 0.3);
    Tensor<double> rm = Tensor<double>::zeros({1, 4, 1, 1});
    Tensor<double> rv = Tensor<double>::full({1, 4, 1, 1}, 1.0);
    record("batchnorm_train",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 auto y = batchnorm(tp.leaf(&x), tp.leaf(&g), tp.leaf(&b), &rm, &rv, true);
                 return sum_all(mul(y, y));
               },
               {&x, &g, &b}));
    record("batchnorm_infer",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 auto y = batchnorm(tp.leaf(&x), tp.leaf(&g), tp.leaf(&b), &rm, &rv, false);
                 return sum_all(mul(y, y));
               },
               {&x, &g, &b}));
  }
  {
    Tensor<double> x = t({2, 6, 3, 3});
    Tensor<double> g = t({1, 6, 1, 1}, 0.5, 1.5);
    Tensor<double> b = t({1, 6, 1, 1}, -0.3, 0.3);
    record("group_norm", gradcheck_fn(
                             [&](Tape<double>& tp) {
                               auto y = group_norm(tp.leaf(&x), 3, tp.leaf(&g), tp.leaf(&b));
                               return sum_all(mul(y, y));
                             },
                             {&x, &g, &b}));
  }
  {
    Tensor<double> x = t({2, 3, 4, 4});
    record("activations", gradcheck_fn(
                              [&](Tape<double>& tp) {
                                auto v = tp.leaf(&x);
                                auto y = add(silu(v), add(sigmoid(v), softplus(v)));
                                return sum_all(mul(y, arctan(v)));
                              },
                              {&x}));
  }
  {
    // relu checked away from the kink
    Tensor<double> x = t({2, 2, 3, 3}, 0.2, 1.0);
    Tensor<double> y = t({2, 2, 3, 3}, -1.0, -0.2);
    record("relu_minmax", gradcheck_fn(
                              [&](Tape<double>& tp) {
                                auto a = tp.leaf(&x);
                                auto b = tp.leaf(&y);
                                return sum_all(add(relu(b), add(minimum(a, b), maximum(a, b))));
                              },
                              {&x, &y}));
  }
  {
    Tensor<double> a = t({2, 3, 3, 3}, 0.5, 1.5);
    Tensor<double> b = t({1, 3, 1, 1}, 0.5, 1.5);
    record("broadcast_algebra",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 auto va = tp.leaf(&a);
                 auto vb = tp.leaf(&b);
                 return sum_all(add(div(va, vb), mul(sub(va, vb), va)));
               },
               {&a, &b}));
  }
  {
    Tensor<double> x = t({1, 3, 4, 4});
    Tensor<double> y = t({1, 2, 4, 4});
    record("concat_split",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 auto c = concat_channels<double>({tp.leaf(&x), tp.leaf(&y)});
                 auto parts = split_channels(c, {2, 3});
                 return add(sum_all(mul(parts[0], parts[0])), sum_all(parts[1]));
               },
               {&x, &y}));
  }
  {
    Tensor<double> x = t({1, 2, 3, 3});
    record("resize_transpose",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 auto up = resize_nearest_up2(tp.leaf(&x));
                 auto back = resize_nearest_down2(up);
                 return sum_all(mul(back, transpose_hw(tp.leaf(&x))));
               },
               {&x}));
  }
  {
    Tensor<double> x = t({2, 3, 3, 4});
    record("softmax_spatial", gradcheck_fn(
                                  [&](Tape<double>& tp) {
                                    auto p = softmax_spatial(tp.leaf(&x));
                                    return sum_all(mul(p, tp.leaf(&x)));
                                  },
                                  {&x}));
  }
  {
    Tensor<double> a = t({1, 2, 3, 3});
    Tensor<double> b = t({1, 2, 3, 3});
    Tensor<double> c = t({1, 2, 3, 3});
    Tensor<double> w(Shape{1, 1, 1, 3});
    w.data = {0.8, 1.3, -0.4};  // one clamped weight
    record("bifpn_fuse", gradcheck_fn(
                             [&](Tape<double>& tp) {
                               auto y = bifpn_fuse<double>(
                                   {tp.leaf(&a), tp.leaf(&b), tp.leaf(&c)}, tp.leaf(&w), 1e-4);
                               return sum_all(mul(y, y));
                             },
                             {&a, &b, &c, &w}));
  }
  {
    Tensor<double> x = t({1, 3, 3, 3});
    Tensor<double> tgt(Shape{1, 3, 3, 3});
    for (std::size_t i = 0; i < tgt.data.size(); ++i) tgt.data[i] = (i % 3 == 0) ? 1.0 : 0.0;
    record("bce_with_logits",
           gradcheck_fn(
               [&](Tape<double>& tp) {
                 return mean_all(bce_with_logits(tp.leaf(&x), tp.constant(tgt)));
               },
               {&x}));
  }

  // --- composite blocks -------------------------------------------------
  auto block_check = [&](const std::string& name, Shape in_shape,
                         const std::function<void(WeightStore<double>&, Rng&)>& init,
                         const std::function<Var<double>(BlockCtx<double>&, Var<double>)>& fwd){
    WeightStore<double> store;
    Rng wrng(91 + static_cast<std::uint64_t>(results.size()));
    init(store, wrng);
    Tensor<double> x = t(in_shape);
    auto leaves = trainable_leaves(store);
    leaves.insert(leaves.begin(), &x);
    record(name, gradcheck_fn(
                     [&](Tape<double>& tp) {
                       BlockCtx<double> ctx{tp, store, true};
                       auto y = fwd(ctx, tp.leaf(&x));
                       return sum_all(mul(y, y));
                     },
                     leaves));
  };

  block_check(
      "cbs", {1, 3, 4, 4},
      [](WeightStore<double>& s, Rng& r) { cbs_init(s, "b", CbsConfig{3, 4, 3, 2, 1}, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return cbs_forward(c, x, "b", CbsConfig{3, 4, 3, 2, 1});
      });
  block_check(
      "pconv", {1, 4, 4, 4},
      [](WeightStore<double>& s, Rng& r) { pconv_init(s, "b", PConvConfig{4}, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return pconv_forward(c, x, "b", PConvConfig{4});
      });
  block_check(
      "ema", {1, 8, 3, 3},
      [](WeightStore<double>& s, Rng& r) { ema_init(s, "b", EMAConfig{8, 4}, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return ema_forward(c, x, "b", EMAConfig{8, 4});
      });
  block_check(
      "faster_ema_bottleneck", {1, 8, 3, 3},
      [](WeightStore<double>& s, Rng& r) { faster_ema_bottleneck_init(s, "b", 8, 4, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return faster_ema_bottleneck_forward(c, x, "b", 8, 4);
      });
  block_check(
      "cpca_channel", {1, 8, 3, 3},
      [](WeightStore<double>& s, Rng& r) { cpca_init(s, "b", CPCAConfig{8}, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return mul(x, cpca_channel_attention(c, x, "b", CPCAConfig{8}));
      });
  block_check(
      "cpca_full", {1, 8, 4, 4},
      [](WeightStore<double>& s, Rng& r) { cpca_init(s, "b", CPCAConfig{8}, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return cpca_forward(c, x, "b", CPCAConfig{8});
      });
  block_check(
      "sppf", {1, 8, 4, 4},
      [](WeightStore<double>& s, Rng& r) { sppf_init(s, "b", SppfConfig{8, 8, false}, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return sppf_forward(c, x, "b", SppfConfig{8, 8, false});
      });
  block_check(
      "sppf_cpca", {1, 8, 4, 4},
      [](WeightStore<double>& s, Rng& r) { sppf_init(s, "b", SppfConfig{8, 8, true}, r); },
      [](BlockCtx<double>& c, Var<double> x) {
        return sppf_forward(c, x, "b", SppfConfig{8, 8, true});
      });
  {
    C2FConfig orig{8, 8, 1, true, C2FConfig::Variant::Original, 4};
    block_check(
        "c2f_original", {1, 8, 3, 3},
        [orig](WeightStore<double>& s, Rng& r) { c2f_init(s, "b", orig, r); },
        [orig](BlockCtx<double>& c, Var<double> x) { return c2f_forward(c, x, "b", orig); });
    C2FConfig fe{8, 8, 1, true, C2FConfig::Variant::FasterEma, 4};
    block_check(
        "c2f_faster_ema", {1, 8, 3, 3},
        [fe](WeightStore<double>& s, Rng& r) { c2f_init(s, "b", fe, r); },
        [fe](BlockCtx<double>& c, Var<double> x) { return c2f_forward(c, x, "b", fe); });
  }
  {
    // head + loss composite on a tiny two-scale-sized input
    HeadConfig hc;
    hc.in_c = {8, 8, 8};
    hc.num_classes = 2;
    hc.reg_max = 4;
    WeightStore<double> store;
    Rng wrng(4242);
    head_init(store, "head", hc, wrng);
    Tensor<double> x = t({1, 8, 4, 4});
    auto leaves = trainable_leaves(store);
    leaves.insert(leaves.begin(), &x);
    record("head", gradcheck_fn(
                       [&](Tape<double>& tp) {
                         BlockCtx<double> ctx{tp, store, true};
                         auto maps = head_forward_scale(ctx, tp.leaf(&x), "head", 0, hc);
                         return add(sum_all(mul(maps.box, maps.box)),
                                    sum_all(sigmoid(maps.cls)));
                       },
                       leaves));
  }
  {
    // loss: gradients w.r.t. raw head maps
    Tensor<double> box = t({1, 4, 4, 4}, 0.2, 1.5);
    Tensor<double> cls = t({1, 2, 4, 4}, -1.5, 1.5);
    Tensor<double> box2 = t({1, 4, 2, 2}, 0.2, 1.5);
    Tensor<double> cls2 = t({1, 2, 2, 2}, -1.5, 1.5);
    Tensor<double> box3 = t({1, 4, 1, 1}, 0.2, 1.5);
    Tensor<double> cls3 = t({1, 2, 1, 1}, -1.5, 1.5);
    std::vector<std::vector<GroundTruth>> gts(1);
    gts[0].push_back(GroundTruth{Box{2.0, 3.0, 21.0, 19.0}, 1, 0});  // stride-8 scale
    gts[0].push_back(GroundTruth{Box{0.0, 0.0, 32.0, 30.0}, 0, 0});  // stride-16 scale
    record("loss", gradcheck_fn(
                       [&](Tape<double>& tp) {
                         HeadOutputs<double> ho;
                         ho.strides = {8, 16, 32};
                         ho.image_h = 32;
                         ho.image_w = 32;
                         ho.scales[0] = HeadMaps<double>{tp.leaf(&box), tp.leaf(&cls)};
                         ho.scales[1] = HeadMaps<double>{tp.leaf(&box2), tp.leaf(&cls2)};
                         ho.scales[2] = HeadMaps<double>{tp.leaf(&box3), tp.leaf(&cls3)};
                         auto targets = assign_targets(gts, ho.strides, 32, 32);
                         return compute_loss(tp, ho, targets, 2, 2.0, 1.0).total;
                       },
                       {&box, &cls, &box2, &cls2, &box3, &cls3}));
  }

  return results;
}

}  // namespace pec
