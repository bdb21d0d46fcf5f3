#include <cmath>

#include "doctest.h"
#include "pec/blocks.hpp"
#include "test_oracles.hpp"

using namespace pec;

namespace {

Tensor<double> rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(s, rng, lo, hi);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("cbs") {
  Rng rng(31);
  SUBCASE("zero conv weights give silu(0) = 0 everywhere") {
    WeightStore<double> store;
    Rng wrng(1);
    cbs_init(store, "b", CbsConfig{3, 4, 3, 1, 1}, wrng);
    for (auto& v : store.at("b.conv.w").data) v = 0.0;
    Tensor<double> x = rand_t({1, 3, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = cbs_forward(ctx, t.leaf(&x), "b", CbsConfig{3, 4, 3, 1, 1});
    for (double v : y.value().data) CHECK(v == 0.0);
  }
  SUBCASE("stride 2 halves even spatial extents") {
    WeightStore<double> store;
    Rng wrng(2);
    cbs_init(store, "b", CbsConfig{3, 8, 3, 2, 1}, wrng);
    Tensor<double> x = rand_t({1, 3, 8, 6}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, true};
    auto y = cbs_forward(ctx, t.leaf(&x), "b", CbsConfig{3, 8, 3, 2, 1});
    CHECK(y.value().shape == Shape{1, 8, 4, 3});
  }
}

TEST_CASE("partial convolution") {
  Rng rng(37);
  SUBCASE("untouched channels are bit-identical to the input") {
    WeightStore<double> store;
    Rng wrng(3);
    pconv_init(store, "p", PConvConfig{8}, wrng);
    Tensor<double> x = rand_t({2, 8, 5, 5}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = pconv_forward(ctx, t.leaf(&x), "p", PConvConfig{8});
    CHECK(y.value().shape == x.shape);
    for (int n = 0; n < 2; ++n)
      for (int c = 2; c < 8; ++c)  // cp = 2 convolved, 6 untouched
        for (int h = 0; h < 5; ++h)
          for (int w = 0; w < 5; ++w) CHECK(y.value().at(n, c, h, w) == x.at(n, c, h, w));
  }
  SUBCASE("cp = c degenerates to a full convolution") {
    PConvConfig cfg{4, 1.0, 3};
    WeightStore<double> store;
    Rng wrng(4);
    pconv_init(store, "p", cfg, wrng);
    Tensor<double> x = rand_t({1, 4, 6, 6}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = pconv_forward(ctx, t.leaf(&x), "p", cfg);
    ConvParams p;
    p.in_channels = p.out_channels = 4;
    p.kh = p.kw = 3;
    p.ph = p.pw = 1;
    auto ref = oracle::naive_conv(x, store.at("p.conv.w"), nullptr, p);
    CHECK(max_abs_diff(y.value().data, ref.data) <= 1e-12);
  }
  SUBCASE("matches slice-convolve-copy oracle") {
    PConvConfig cfg{8};
    WeightStore<double> store;
    Rng wrng(5);
    pconv_init(store, "p", cfg, wrng);
    Tensor<double> x = rand_t({1, 8, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = pconv_forward(ctx, t.leaf(&x), "p", cfg);
    // oracle: convolve the first cp channels directly, copy the rest
    Tensor<double> slice(Shape{1, 2, 4, 4});
    for (int c = 0; c < 2; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) slice.at(0, c, h, w) = x.at(0, c, h, w);
    ConvParams p;
    p.in_channels = p.out_channels = 2;
    p.kh = p.kw = 3;
    p.ph = p.pw = 1;
    auto conv = oracle::naive_conv(slice, store.at("p.conv.w"), nullptr, p);
    for (int c = 0; c < 8; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) {
          const double want = c < 2 ? conv.at(0, c, h, w) : x.at(0, c, h, w);
          CHECK(y.value().at(0, c, h, w) == doctest::Approx(want).epsilon(1e-12));
        }
  }
  SUBCASE("identity kernel on the convolved slice makes the whole op identity") {
    PConvConfig cfg{4};
    WeightStore<double> store;
    Rng wrng(6);
    pconv_init(store, "p", cfg, wrng);
    auto& w = store.at("p.conv.w");
    for (auto& v : w.data) v = 0.0;
    w.at(0, 0, 1, 1) = 1.0;  // cp = 1
    Tensor<double> x = rand_t({1, 4, 5, 5}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = pconv_forward(ctx, t.leaf(&x), "p", cfg);
    CHECK(max_abs_diff(y.value().data, x.data) == 0.0);
  }
  SUBCASE("last-slice partition convolves the tail channels") {
    PConvConfig cfg{4, 0.25, 3, PConvConfig::Partition::Last};
    WeightStore<double> store;
    Rng wrng(7);
    pconv_init(store, "p", cfg, wrng);
    Tensor<double> x = rand_t({1, 4, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = pconv_forward(ctx, t.leaf(&x), "p", cfg);
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) CHECK(y.value().at(0, c, h, w) == x.at(0, c, h, w));
  }
}

TEST_CASE("faster EMA bottleneck") {
  Rng rng(41);
  SUBCASE("output shape equals input shape") {
    WeightStore<double> store;
    Rng wrng(8);
    faster_ema_bottleneck_init(store, "b", 16, 4, wrng);
    Tensor<double> x = rand_t({1, 16, 8, 8}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = faster_ema_bottleneck_forward(ctx, t.leaf(&x), "b", 16, 4);
    CHECK(y.value().shape == x.shape);
  }
  SUBCASE("fewer parameters than the original bottleneck at equal channels") {
    for (int c : {16, 32, 64}) {
      WeightStore<double> fast, orig;
      Rng r1(9), r2(9);
      faster_ema_bottleneck_init(fast, "b", c, 4, r1);
      bottleneck_init(orig, "b", c, r2);
      CHECK(fast.trainable_count() < orig.trainable_count());
    }
  }
  SUBCASE("every weight tensor receives a nonzero gradient") {
    WeightStore<double> store;
    Rng wrng(10);
    faster_ema_bottleneck_init(store, "b", 8, 4, wrng);
    Tensor<double> x = rand_t({2, 8, 4, 4}, rng);
    store.zero_grad();
    Tape<double> t;
    BlockCtx<double> ctx{t, store, true};
    auto y = faster_ema_bottleneck_forward(ctx, t.leaf(&x), "b", 8, 4);
    t.backward(sum_all(mul(y, y)));
    for (const auto& e : store.entries()) {
      if (!e.trainable) continue;
      double mag = 0.0;
      for (double g : e.tensor.grad) mag = std::max(mag, std::abs(g));
      INFO(e.name);
      CHECK(mag > 0.0);
    }
  }
}

TEST_CASE("EMA attention") {
  Rng rng(43);
  SUBCASE("output shape equals input shape") {
    WeightStore<double> store;
    Rng wrng(11);
    ema_init(store, "e", EMAConfig{8, 4}, wrng);
    Tensor<double> x = rand_t({2, 8, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = ema_forward(ctx, t.leaf(&x), "e", EMAConfig{8, 4});
    CHECK(y.value().shape == x.shape);
  }
  SUBCASE("1D average pooling of all-ones features is 1 per channel") {
    Tensor<double> x(Shape{1, 3, 4, 5}, 1.0);
    Tape<double> t;
    auto zh = global_avg_pool_1d(t.leaf(&x), PoolAxis::Height);
    auto zw = global_avg_pool_1d(t.leaf(&x), PoolAxis::Width);
    for (double v : zh.value().data) CHECK(v == doctest::Approx(1.0));
    for (double v : zw.value().data) CHECK(v == doctest::Approx(1.0));
  }
  SUBCASE("spatial softmax sums to 1 over HxW per sample and group") {
    Tensor<double> x = rand_t({4, 2, 3, 5}, rng, -2.0, 2.0);
    Tape<double> t;
    auto p = softmax_spatial(t.leaf(&x));
    for (int n = 0; n < 4; ++n)
      for (int c = 0; c < 2; ++c) {
        double acc = 0.0;
        for (int h = 0; h < 3; ++h)
          for (int w = 0; w < 5; ++w) acc += p.value().at(n, c, h, w);
        CHECK(std::abs(acc - 1.0) <= 1e-6);
      }
  }
  SUBCASE("indivisible groups are rejected") {
    const EMAConfig bad{6, 4};
    CHECK_THROWS_AS(bad.group_channels(), ConfigError);
  }
}

TEST_CASE("CPCA channel attention") {
  Rng rng(47);
  CPCAConfig cfg{8};
  SUBCASE("zero-initialized MLP gives sigmoid(0) = 0.5 everywhere") {
    WeightStore<double> store;
    Rng wrng(12);
    cpca_init(store, "c", cfg, wrng);
    for (auto* name : {"c.fc1.w", "c.fc1.b", "c.fc2.w", "c.fc2.b"}) {
      for (auto& v : store.at(name).data) v = 0.0;
    }
    Tensor<double> x = rand_t({1, 8, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto ca = cpca_channel_attention(ctx, t.leaf(&x), "c", cfg);
    CHECK(ca.value().shape == Shape{1, 8, 1, 1});
    for (double v : ca.value().data) CHECK(v == doctest::Approx(0.5));
  }
  SUBCASE("attention sees channels only through their value distribution") {
    // Pooling reduces each channel to (mean, max), so spatially permuting
    // any channel leaves the whole attention map unchanged.
    WeightStore<double> store;
    Rng wrng(13);
    cpca_init(store, "c", cfg, wrng);
    Tensor<double> x = rand_t({1, 8, 4, 4}, rng);
    Tensor<double> permuted = x;
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 4; ++w) {
        permuted.at(0, 2, h, w) = x.at(0, 2, 3 - h, 3 - w);
        permuted.at(0, 5, h, w) = x.at(0, 5, w, h);
      }
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto ca = cpca_channel_attention(ctx, t.leaf(&x), "c", cfg);
    auto ca2 = cpca_channel_attention(ctx, t.leaf(&permuted), "c", cfg);
    CHECK(max_abs_diff(ca.value().data, ca2.value().data) == 0.0);
  }
  SUBCASE("matches the explicit mean/max + tiny matmul oracle") {
    WeightStore<double> store;
    Rng wrng(14);
    cpca_init(store, "c", cfg, wrng);
    Tensor<double> x = rand_t({2, 8, 3, 3}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto ca = cpca_channel_attention(ctx, t.leaf(&x), "c", cfg);
    const auto& w1 = store.at("c.fc1.w");
    const auto& b1 = store.at("c.fc1.b");
    const auto& w2 = store.at("c.fc2.w");
    const auto& b2 = store.at("c.fc2.b");
    const int hid = cfg.hidden();
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 8; ++c) {
        auto mlp = [&](const std::vector<double>& desc) {
          std::vector<double> hidv(static_cast<std::size_t>(hid), 0.0);
          for (int i = 0; i < hid; ++i) {
            double acc = b1.data[static_cast<std::size_t>(i)];
            for (int j = 0; j < 8; ++j) acc += w1.at(i, j, 0, 0) * desc[static_cast<std::size_t>(j)];
            hidv[static_cast<std::size_t>(i)] = std::max(acc, 0.0);
          }
          double acc = b2.data[static_cast<std::size_t>(c)];
          for (int i = 0; i < hid; ++i) acc += w2.at(c, i, 0, 0) * hidv[static_cast<std::size_t>(i)];
          return acc;
        };
        std::vector<double> avg(8), mx(8);
        for (int j = 0; j < 8; ++j) {
          double a = 0.0, m = -1e300;
          for (int h = 0; h < 3; ++h)
            for (int w = 0; w < 3; ++w) {
              a += x.at(n, j, h, w);
              m = std::max(m, x.at(n, j, h, w));
            }
          avg[static_cast<std::size_t>(j)] = a / 9.0;
          mx[static_cast<std::size_t>(j)] = m;
        }
        const double want = 1.0 / (1.0 + std::exp(-(mlp(avg) + mlp(mx))));
        CHECK(std::abs(ca.value().at(n, c, 0, 0) - want) <= 1e-10);
      }
  }
}

TEST_CASE("CPCA spatial attention") {
  Rng rng(53);
  CPCAConfig cfg{8};
  SUBCASE("zeroed 1x1 mixing conv gives an all-zero map") {
    WeightStore<double> store;
    Rng wrng(15);
    cpca_init(store, "c", cfg, wrng);
    for (auto& v : store.at("c.mix.w").data) v = 0.0;
    for (auto& v : store.at("c.mix.b").data) v = 0.0;
    Tensor<double> x = rand_t({1, 8, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto sa = cpca_spatial_attention(ctx, t.leaf(&x), "c", cfg);
    for (double v : sa.value().data) CHECK(v == 0.0);
  }
  SUBCASE("shape is preserved") {
    WeightStore<double> store;
    Rng wrng(16);
    cpca_init(store, "c", cfg, wrng);
    Tensor<double> x = rand_t({1, 8, 16, 16}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto sa = cpca_spatial_attention(ctx, t.leaf(&x), "c", cfg);
    CHECK(sa.value().shape == x.shape);
  }
  SUBCASE("with strip branches zeroed and identity mixing, SA equals the 5x5 base") {
    WeightStore<double> store;
    Rng wrng(17);
    cpca_init(store, "c", cfg, wrng);
    for (auto* name : {"c.dw7a", "c.dw7b", "c.dw11a", "c.dw11b", "c.dw21a", "c.dw21b"}) {
      for (auto& v : store.at(std::string(name) + ".w").data) v = 0.0;
      for (auto& v : store.at(std::string(name) + ".b").data) v = 0.0;
    }
    auto& mix = store.at("c.mix.w");
    for (auto& v : mix.data) v = 0.0;
    for (int c = 0; c < 8; ++c) mix.at(c, c, 0, 0) = 1.0;
    for (auto& v : store.at("c.mix.b").data) v = 0.0;
    Tensor<double> x = rand_t({1, 8, 5, 5}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto sa = cpca_spatial_attention(ctx, t.leaf(&x), "c", cfg);
    auto base = depthwise_conv2d(t.leaf(&x), ctx.weight("c.dw5.w"),
                                 std::optional<Var<double>>(ctx.weight("c.dw5.b")));
    CHECK(max_abs_diff(sa.value().data, base.value().data) == 0.0);
  }
}

TEST_CASE("CPCA full pipeline") {
  Rng rng(59);
  CPCAConfig cfg{16};
  SUBCASE("shape preservation") {
    WeightStore<double> store;
    Rng wrng(18);
    cpca_init(store, "c", cfg, wrng);
    Tensor<double> x = rand_t({2, 16, 8, 8}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = cpca_forward(ctx, t.leaf(&x), "c", cfg);
    CHECK(y.value().shape == x.shape);
  }
  SUBCASE("forcing CA = 1 and SA = 1 makes the block the identity") {
    WeightStore<double> store;
    Rng wrng(19);
    cpca_init(store, "c", cfg, wrng);
    // CA: zero fc2 weights, huge bias -> sigmoid saturates to exactly 1.0
    for (auto& v : store.at("c.fc2.w").data) v = 0.0;
    for (auto& v : store.at("c.fc2.b").data) v = 60.0;
    // SA: zero mixing weights, bias 1 -> map of exact ones
    for (auto& v : store.at("c.mix.w").data) v = 0.0;
    for (auto& v : store.at("c.mix.b").data) v = 1.0;
    Tensor<double> x = rand_t({1, 16, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = cpca_forward(ctx, t.leaf(&x), "c", cfg);
    CHECK(max_abs_diff(y.value().data, x.data) == 0.0);
  }
  SUBCASE("attention gates lie in (0, 1)") {
    WeightStore<double> store;
    Rng wrng(20);
    cpca_init(store, "c", cfg, wrng);
    Tensor<double> x = rand_t({1, 16, 4, 4}, rng);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto ca = cpca_channel_attention(ctx, t.leaf(&x), "c", cfg);
    for (double v : ca.value().data) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("SPPF") {
  Rng rng(61);
  SUBCASE("concat stage has exactly four times the hidden width") {
    WeightStore<double> store;
    Rng wrng(21);
    sppf_init(store, "s", SppfConfig{16, 16, false}, wrng);
    CHECK(store.at("s.cv1.conv.w").shape == Shape{8, 16, 1, 1});
    CHECK(store.at("s.cv2.conv.w").shape == Shape{16, 32, 1, 1});  // 4 * hidden in
  }
  SUBCASE("serial pools equal parallel pools with kernels 5, 9, 13") {
    Tensor<double> x = Tensor<double>::uniform({1, 4, 9, 9}, rng);
    Tape<double> t;
    auto v = t.leaf(&x);
    auto s1 = pool2d(v, PoolKind::Max, 5, 1, 2);
    auto s2 = pool2d(s1, PoolKind::Max, 5, 1, 2);
    auto s3 = pool2d(s2, PoolKind::Max, 5, 1, 2);
    auto p9 = pool2d(v, PoolKind::Max, 9, 1, 4);
    auto p13 = pool2d(v, PoolKind::Max, 13, 1, 6);
    CHECK(max_abs_diff(s2.value().data, p9.value().data) == 0.0);
    CHECK(max_abs_diff(s3.value().data, p13.value().data) == 0.0);
  }
  SUBCASE("constant input keeps every pooled stage constant") {
    WeightStore<double> store;
    Rng wrng(22);
    sppf_init(store, "s", SppfConfig{8, 8, false}, wrng);
    Tensor<double> x(Shape{1, 8, 6, 6}, 0.7);
    Tape<double> t;
    BlockCtx<double> ctx{t, store, false};
    auto y = sppf_forward(ctx, t.leaf(&x), "s", SppfConfig{8, 8, false});
    // constant input -> cv1 output constant per channel -> pools identical
    // -> output constant per channel
    for (int c = 0; c < 8; ++c) {
      const double v0 = y.value().at(0, c, 0, 0);
      for (int h = 0; h < 6; ++h)
        for (int w = 0; w < 6; ++w) CHECK(y.value().at(0, c, h, w) == doctest::Approx(v0));
    }
  }
}

TEST_CASE("SPPF_CPCA") {
  Rng rng(67);
  SUBCASE("drop-in shape contract with plain SPPF") {
    WeightStore<double> a, b;
    Rng r1(23), r2(24);
    sppf_init(a, "s", SppfConfig{64, 64, false}, r1);
    sppf_init(b, "s", SppfConfig{64, 64, true}, r2);
    Tensor<double> x = rand_t({1, 64, 8, 8}, rng);
    Tape<double> t;
    BlockCtx<double> ca{t, a, false}, cb{t, b, false};
    auto ya = sppf_forward(ca, t.leaf(&x), "s", SppfConfig{64, 64, false});
    auto yb = sppf_forward(cb, t.leaf(&x), "s", SppfConfig{64, 64, true});
    CHECK(ya.value().shape == yb.value().shape);
  }
  SUBCASE("identity-forced attention reduces to plain SPPF exactly") {
    SppfConfig plain{16, 16, false}, with{16, 16, true};
    WeightStore<double> sa, sb;
    Rng r1(25), r2(26);
    sppf_init(sa, "s", plain, r1);
    sppf_init(sb, "s", with, r2);
    // share the conv weights
    for (auto* name : {"s.cv1.conv.w", "s.cv1.bn.g", "s.cv1.bn.b", "s.cv2.conv.w",
                       "s.cv2.bn.g", "s.cv2.bn.b"}) {
      sb.at(name).data = sa.at(name).data;
    }
    for (auto& v : sb.at("s.cpca.fc2.w").data) v = 0.0;
    for (auto& v : sb.at("s.cpca.fc2.b").data) v = 60.0;
    for (auto& v : sb.at("s.cpca.mix.w").data) v = 0.0;
    for (auto& v : sb.at("s.cpca.mix.b").data) v = 1.0;
    Tensor<double> x = rand_t({1, 16, 6, 6}, rng);
    Tape<double> t;
    BlockCtx<double> ca{t, sa, false}, cb{t, sb, false};
    auto ya = sppf_forward(ca, t.leaf(&x), "s", plain);
    auto yb = sppf_forward(cb, t.leaf(&x), "s", with);
    CHECK(max_abs_diff(ya.value().data, yb.value().data) == 0.0);
  }
  SUBCASE("parameter overhead is exactly the CPCA weight count") {
    WeightStore<double> sa, sb;
    Rng r1(27), r2(28);
    sppf_init(sa, "s", SppfConfig{32, 32, false}, r1);
    sppf_init(sb, "s", SppfConfig{32, 32, true}, r2);
    const int c = 64;  // concat channels = 4 * 16
    const std::int64_t hid = std::max(c / 16, 4);
    const std::int64_t cpca = (c * hid + hid) + (hid * c + c) + (25 * c + c) +
                              2 * (7 * c + c) + 2 * (11 * c + c) + 2 * (21 * c + c) +
                              (static_cast<std::int64_t>(c) * c + c);
    CHECK(sb.trainable_count() - sa.trainable_count() == cpca);
  }
}

TEST_CASE("C2F") {
  Rng rng(71);
  SUBCASE("concat width is (2 + n) * hidden") {
    C2FConfig cfg{16, 16, 2, true, C2FConfig::Variant::Original, 4};
    WeightStore<double> store;
    Rng wrng(29);
    c2f_init(store, "c", cfg, wrng);
    CHECK(store.at("c.cv2.conv.w").shape == Shape{16, (2 + 2) * 8, 1, 1});
  }
  SUBCASE("output shapes for both variants") {
    for (auto variant : {C2FConfig::Variant::Original, C2FConfig::Variant::FasterEma}) {
      C2FConfig cfg{16, 24, 1, true, variant, 4};
      WeightStore<double> store;
      Rng wrng(30);
      c2f_init(store, "c", cfg, wrng);
      Tensor<double> x = rand_t({2, 16, 4, 4}, rng);
      Tape<double> t;
      BlockCtx<double> ctx{t, store, false};
      auto y = c2f_forward(ctx, t.leaf(&x), "c", cfg);
      CHECK(y.value().shape == Shape{2, 24, 4, 4});
    }
  }
  SUBCASE("faster variant has strictly fewer parameters at matched config") {
    for (int c : {32, 64, 128}) {
      C2FConfig orig{c, c, 2, true, C2FConfig::Variant::Original, 4};
      C2FConfig fast{c, c, 2, true, C2FConfig::Variant::FasterEma, 4};
      WeightStore<double> so, sf;
      Rng r1(31), r2(31);
      c2f_init(so, "c", orig, r1);
      c2f_init(sf, "c", fast, r2);
      CHECK(sf.trainable_count() < so.trainable_count());
    }
  }
}

TEST_CASE("attention blocks preserve batch size and shape") {
  Rng rng(73);
  WeightStore<double> store;
  Rng wrng(32);
  ema_init(store, "e", EMAConfig{8, 4}, wrng);
  cpca_init(store, "c", CPCAConfig{8}, wrng);
  Tensor<double> x = rand_t({3, 8, 4, 6}, rng);
  Tape<double> t;
  BlockCtx<double> ctx{t, store, false};
  CHECK(ema_forward(ctx, t.leaf(&x), "e", EMAConfig{8, 4}).value().shape == x.shape);
  CHECK(cpca_forward(ctx, t.leaf(&x), "c", CPCAConfig{8}).value().shape == x.shape);
}
