#include <cmath>

#include "doctest.h"
#include "pec/gradcheck.hpp"
#include "pec/ops.hpp"
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

TEST_CASE("conv2d sums nine ones to 9") {
  Tensor<double> x(Shape{1, 1, 3, 3}, 1.0);
  Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
  Tape<double> t;
  ConvParams p;
  p.in_channels = p.out_channels = 1;
  p.kh = p.kw = 3;
  auto y = conv2d(t.leaf(&x), t.leaf(&w), {}, p);
  CHECK(y.value().shape == Shape{1, 1, 1, 1});
  CHECK(y.value().data[0] == doctest::Approx(9.0));
}

TEST_CASE("conv2d identity kernel reproduces the input") {
  Rng rng(3);
  Tensor<double> x = rand_t({2, 2, 5, 4}, rng);
  Tensor<double> w = Tensor<double>::zeros({2, 2, 3, 3});
  w.at(0, 0, 1, 1) = 1.0;
  w.at(1, 1, 1, 1) = 1.0;
  ConvParams p;
  p.in_channels = p.out_channels = 2;
  p.kh = p.kw = 3;
  p.ph = p.pw = 1;
  Tape<double> t;
  auto y = conv2d(t.leaf(&x), t.leaf(&w), {}, p);
  CHECK(max_abs_diff(y.value().data, x.data) == 0.0);
}

TEST_CASE("conv2d matches the naive direct-convolution oracle") {
  Rng rng(11);
  Tensor<double> x = rand_t({2, 3, 5, 5}, rng);
  Tensor<double> w = rand_t({4, 3, 3, 3}, rng);
  ConvParams p;
  p.in_channels = 3;
  p.out_channels = 4;
  p.kh = p.kw = 3;
  p.ph = p.pw = 1;
  Tape<double> t;
  auto y = conv2d(t.leaf(&x), t.leaf(&w), {}, p);
  auto ref = oracle::naive_conv(x, w, nullptr, p);
  CHECK(max_abs_diff(y.value().data, ref.data) <= 1e-12);
}

TEST_CASE("conv2d oracle sweep over strides, padding, groups and bias") {
  Rng rng(12);
  for (int groups : {1, 2}) {
    for (int sh : {1, 2}) {
      for (int ph : {0, 1, 2}) {
        for (int k : {1, 3}) {
          if (k == 1 && ph > 0) continue;
          ConvParams p;
          p.in_channels = 4;
          p.out_channels = 6;
          p.groups = groups;
          p.kh = p.kw = k;
          p.sh = p.sw = sh;
          p.ph = p.pw = ph;
          p.has_bias = true;
          Tensor<double> x = rand_t({2, 4, 6, 5}, rng);
          Tensor<double> w = rand_t({6, 4 / groups, k, k}, rng);
          Tensor<double> b = rand_t({1, 6, 1, 1}, rng);
          Tape<double> t;
          auto y = conv2d(t.leaf(&x), t.leaf(&w), std::optional<Var<double>>(t.leaf(&b)), p);
          std::vector<double> bias(b.data.begin(), b.data.end());
          auto ref = oracle::naive_conv(x, w, &bias, p);
          CHECK(max_abs_diff(y.value().data, ref.data) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("conv2d validates shapes and groups") {
  Tensor<double> x(Shape{1, 3, 4, 4}, 1.0);
  Tensor<double> w(Shape{4, 3, 3, 3}, 1.0);
  Tape<double> t;
  ConvParams p;
  p.in_channels = 4;  // disagrees with x
  p.out_channels = 4;
  p.kh = p.kw = 3;
  CHECK_THROWS_AS(conv2d(t.leaf(&x), t.leaf(&w), {}, p), DimensionError);
  ConvParams pg;
  pg.in_channels = 3;
  pg.out_channels = 4;
  pg.groups = 2;  // does not divide 3
  CHECK_THROWS_AS(conv2d(t.leaf(&x), t.leaf(&w), {}, pg), ConfigError);
  CHECK_THROWS_AS(ConvParams::same_padding(4), ConfigError);
}

TEST_CASE("depthwise convolution") {
  Rng rng(5);
  SUBCASE("convex weights preserve constant inputs") {
    Tensor<double> x(Shape{1, 2, 6, 6}, 3.5);
    Tensor<double> w(Shape{2, 1, 3, 3}, 1.0 / 9.0);
    Tape<double> t;
    auto y = depthwise_conv2d(t.leaf(&x), t.leaf(&w), {});
    // interior cells see the full window
    CHECK(y.value().at(0, 0, 3, 3) == doctest::Approx(3.5));
    CHECK(y.value().at(0, 1, 2, 2) == doctest::Approx(3.5));
  }
  SUBCASE("1x7 strip kernel preserves shape") {
    Tensor<double> x = rand_t({1, 2, 8, 8}, rng);
    Tensor<double> w = rand_t({2, 1, 1, 7}, rng);
    Tape<double> t;
    auto y = depthwise_conv2d(t.leaf(&x), t.leaf(&w), {});
    CHECK(y.value().shape == Shape{1, 2, 8, 8});
  }
  SUBCASE("equals grouped conv2d with groups == C") {
    Tensor<double> x = rand_t({2, 3, 5, 5}, rng);
    Tensor<double> w = rand_t({3, 1, 3, 3}, rng);
    Tape<double> t;
    auto a = depthwise_conv2d(t.leaf(&x), t.leaf(&w), {});
    ConvParams p;
    p.in_channels = p.out_channels = 3;
    p.groups = 3;
    p.kh = p.kw = 3;
    p.ph = p.pw = 1;
    auto b = conv2d(t.leaf(&x), t.leaf(&w), {}, p);
    CHECK(max_abs_diff(a.value().data, b.value().data) <= 1e-12);
  }
  SUBCASE("even kernel extent is rejected") {
    Tensor<double> x = rand_t({1, 2, 4, 4}, rng);
    Tensor<double> w = rand_t({2, 1, 2, 2}, rng);
    Tape<double> t;
    CHECK_THROWS_AS(depthwise_conv2d(t.leaf(&x), t.leaf(&w), {}), ConfigError);
  }
}

TEST_CASE("pooling") {
  Rng rng(7);
  SUBCASE("constant input stays constant") {
    Tensor<double> x(Shape{1, 2, 6, 6}, 2.25);
    Tape<double> t;
    for (auto kind : {PoolKind::Max, PoolKind::Avg}) {
      auto y = pool2d(t.leaf(&x), kind, 3, 1, 1);
      for (double v : y.value().data) CHECK(v == doctest::Approx(2.25));
    }
  }
  SUBCASE("5x5 max pool spreads a peak to Chebyshev distance 2") {
    Tensor<double> x(Shape{1, 1, 7, 7}, 0.0);
    x.at(0, 0, 3, 3) = 5.0;
    Tape<double> t;
    auto y = pool2d(t.leaf(&x), PoolKind::Max, 5, 1, 2);
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) {
        const bool in_reach = std::abs(i - 3) <= 2 && std::abs(j - 3) <= 2;
        CHECK(y.value().at(0, 0, i, j) == (in_reach ? 5.0 : 0.0));
      }
  }
  SUBCASE("two 5x5 pools equal one 9x9; three equal one 13x13") {
    Tensor<double> x = rand_t({1, 3, 10, 10}, rng);
    Tape<double> t;
    auto v = t.leaf(&x);
    auto p1 = pool2d(v, PoolKind::Max, 5, 1, 2);
    auto p2 = pool2d(p1, PoolKind::Max, 5, 1, 2);
    auto p3 = pool2d(p2, PoolKind::Max, 5, 1, 2);
    CHECK(max_abs_diff(p2.value().data, pool2d(v, PoolKind::Max, 9, 1, 4).value().data) ==
          0.0);
    CHECK(max_abs_diff(p3.value().data, pool2d(v, PoolKind::Max, 13, 1, 6).value().data) ==
          0.0);
  }
  SUBCASE("average pooling excludes padded cells from the divisor") {
    Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
    Tape<double> t;
    auto y = pool2d(t.leaf(&x), PoolKind::Avg, 3, 1, 1);
    // corner windows cover 4 real cells out of 9
    CHECK(y.value().at(0, 0, 0, 0) == doctest::Approx(1.0));
  }
  SUBCASE("window larger than padded input is rejected") {
    Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
    Tape<double> t;
    CHECK_THROWS_AS(pool2d(t.leaf(&x), PoolKind::Max, 5, 1, 0), DimensionError);
  }
}

TEST_CASE("1D global average pooling") {
  Rng rng(9);
  SUBCASE("all ones stay ones") {
    Tensor<double> x(Shape{1, 2, 3, 4}, 1.0);
    Tape<double> t;
    auto y = global_avg_pool_1d(t.leaf(&x), PoolAxis::Height);
    CHECK(y.value().shape == Shape{1, 2, 1, 4});
    for (double v : y.value().data) CHECK(v == doctest::Approx(1.0));
  }
  SUBCASE("mean of {1,3} is 2") {
    Tensor<double> x(Shape{1, 1, 2, 1});
    x.data = {1.0, 3.0};
    Tape<double> t;
    auto y = global_avg_pool_1d(t.leaf(&x), PoolAxis::Height);
    CHECK(y.value().data[0] == doctest::Approx(2.0));
  }
  SUBCASE("matches brute-force sum/count") {
    Tensor<double> x = rand_t({2, 3, 4, 5}, rng);
    Tape<double> t;
    auto yh = global_avg_pool_1d(t.leaf(&x), PoolAxis::Width);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int h = 0; h < 4; ++h) {
          double acc = 0;
          for (int w = 0; w < 5; ++w) acc += x.at(n, c, h, w);
          CHECK(std::abs(yh.value().at(n, c, h, 0) - acc / 5.0) <= 1e-12);
        }
  }
}

TEST_CASE("batchnorm") {
  Rng rng(13);
  SUBCASE("identity running statistics reproduce the input") {
    Tensor<double> x = rand_t({2, 3, 4, 4}, rng);
    Tensor<double> g(Shape{1, 3, 1, 1}, 1.0);
    Tensor<double> b = Tensor<double>::zeros({1, 3, 1, 1});
    Tensor<double> rm = Tensor<double>::zeros({1, 3, 1, 1});
    Tensor<double> rv = Tensor<double>::full({1, 3, 1, 1}, 1.0);
    Tape<double> t;
    auto y = batchnorm(t.leaf(&x), t.leaf(&g), t.leaf(&b), &rm, &rv, false);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      CHECK(std::abs(y.value().data[i] - x.data[i]) <=
            std::abs(x.data[i]) * 1e-5 / 2 + 1e-12);
    }
  }
  SUBCASE("train mode normalizes to zero mean, unit variance") {
    Tensor<double> x = rand_t({4, 2, 5, 5}, rng, -3.0, 5.0);
    Tensor<double> g(Shape{1, 2, 1, 1}, 1.0);
    Tensor<double> b = Tensor<double>::zeros({1, 2, 1, 1});
    Tape<double> t;
    auto y = batchnorm<double>(t.leaf(&x), t.leaf(&g), t.leaf(&b), nullptr, nullptr, true);
    for (int c = 0; c < 2; ++c) {
      double mean = 0, var = 0;
      const int m = 4 * 5 * 5;
      for (int n = 0; n < 4; ++n)
        for (int h = 0; h < 5; ++h)
          for (int w = 0; w < 5; ++w) mean += y.value().at(n, c, h, w);
      mean /= m;
      for (int n = 0; n < 4; ++n)
        for (int h = 0; h < 5; ++h)
          for (int w = 0; w < 5; ++w) {
            const double d = y.value().at(n, c, h, w) - mean;
            var += d * d;
          }
      var /= m;
      CHECK(std::abs(mean) <= 1e-6);
      CHECK(std::abs(var - 1.0) <= 1e-4);
    }
  }
  SUBCASE("running statistics update with momentum") {
    Tensor<double> x(Shape{1, 1, 2, 2});
    x.data = {1.0, 1.0, 3.0, 3.0};
    Tensor<double> g(Shape{1, 1, 1, 1}, 1.0);
    Tensor<double> b = Tensor<double>::zeros({1, 1, 1, 1});
    Tensor<double> rm = Tensor<double>::zeros({1, 1, 1, 1});
    Tensor<double> rv = Tensor<double>::full({1, 1, 1, 1}, 1.0);
    Tape<double> t;
    batchnorm(t.leaf(&x), t.leaf(&g), t.leaf(&b), &rm, &rv, true, 0.1);
    CHECK(rm.data[0] == doctest::Approx(0.1 * 2.0));
    CHECK(rv.data[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));  // batch var = 1
  }
}

TEST_CASE("activation values") {
  Tensor<double> x(Shape{1, 1, 1, 4});
  x.data = {0.0, -1.0, 2.0, 0.0};
  Tape<double> t;
  auto v = t.leaf(&x);
  CHECK(sigmoid(v).value().data[0] == doctest::Approx(0.5));
  CHECK(silu(v).value().data[0] == doctest::Approx(0.0));
  CHECK(relu(v).value().data[1] == 0.0);
  CHECK(relu(v).value().data[2] == 2.0);
  CHECK(softplus(v).value().data[0] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("concat and split") {
  Rng rng(17);
  Tensor<double> a = rand_t({1, 1, 3, 3}, rng);
  Tensor<double> b = rand_t({1, 3, 3, 3}, rng);
  SUBCASE("round trip is exact") {
    Tape<double> t;
    auto c = concat_channels<double>({t.leaf(&a), t.leaf(&b)});
    CHECK(c.value().shape.c == 4);
    auto parts = split_channels(c, {1, 3});
    CHECK(max_abs_diff(parts[0].value().data, a.data) == 0.0);
    CHECK(max_abs_diff(parts[1].value().data, b.data) == 0.0);
  }
  SUBCASE("backward of sum(concat) is all ones on both inputs") {
    a.requires_grad = b.requires_grad = true;
    a.zero_grad();
    b.zero_grad();
    Tape<double> t;
    auto s = sum_all(concat_channels<double>({t.leaf(&a), t.leaf(&b)}));
    t.backward(s);
    for (double g : a.grad) CHECK(g == 1.0);
    for (double g : b.grad) CHECK(g == 1.0);
  }
  SUBCASE("mismatched spatial extents are rejected") {
    Tensor<double> c = rand_t({1, 1, 2, 3}, rng);
    Tape<double> t;
    CHECK_THROWS_AS(concat_channels<double>({t.leaf(&a), t.leaf(&c)}), DimensionError);
  }
  SUBCASE("split sizes must cover the channels") {
    Tape<double> t;
    CHECK_THROWS_AS(split_channels(t.leaf(&b), {1, 1}), DimensionError);
  }
}

TEST_CASE("nearest resize") {
  SUBCASE("upsample replicates cells into 2x2 blocks") {
    Tensor<double> x(Shape{1, 1, 1, 2});
    x.data = {1.0, 2.0};
    Tape<double> t;
    auto y = resize_nearest_up2(t.leaf(&x));
    CHECK(y.value().shape == Shape{1, 1, 2, 4});
    const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2};
    CHECK(max_abs_diff(y.value().data, want) == 0.0);
  }
  SUBCASE("up after down restores block-constant inputs") {
    Rng rng(19);
    Tensor<double> small = rand_t({1, 2, 3, 3}, rng);
    Tape<double> t;
    auto blocky = resize_nearest_up2(t.leaf(&small));
    auto round = resize_nearest_up2(resize_nearest_down2(blocky));
    CHECK(max_abs_diff(round.value().data, blocky.value().data) == 0.0);
  }
  SUBCASE("odd extents cannot be downsampled") {
    Tensor<double> x(Shape{1, 1, 3, 4}, 1.0);
    Tape<double> t;
    CHECK_THROWS_AS(resize_nearest_down2(t.leaf(&x)), DimensionError);
  }
}

TEST_CASE("backward fundamentals") {
  Rng rng(23);
  SUBCASE("grad of sum is ones; grad of sum of squares is 2x") {
    Tensor<double> x = rand_t({1, 2, 3, 3}, rng);
    x.requires_grad = true;
    x.zero_grad();
    {
      Tape<double> t;
      auto v = t.leaf(&x);
      t.backward(sum_all(v));
      for (double g : x.grad) CHECK(g == 1.0);
    }
    x.zero_grad();
    {
      Tape<double> t;
      auto v = t.leaf(&x);
      t.backward(sum_all(mul(v, v)));
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        CHECK(x.grad[i] == doctest::Approx(2.0 * x.data[i]));
      }
    }
  }
  SUBCASE("repeated backward accumulates leaf gradients") {
    Tensor<double> x = rand_t({1, 1, 2, 2}, rng);
    x.requires_grad = true;
    x.zero_grad();
    Tape<double> t;
    auto root = sum_all(t.leaf(&x));
    t.backward(root);
    t.backward(root);
    for (double g : x.grad) CHECK(g == 2.0);
  }
  SUBCASE("non-scalar root is a usage error") {
    Tensor<double> x = rand_t({1, 1, 2, 2}, rng);
    Tape<double> t;
    auto v = t.leaf(&x);
    CHECK_THROWS_AS(t.backward(v), UsageError);
  }
}

TEST_CASE("forward computation is deterministic") {
  Rng rng(29);
  Tensor<double> x = rand_t({2, 3, 6, 6}, rng);
  Tensor<double> w = rand_t({4, 3, 3, 3}, rng);
  ConvParams p;
  p.in_channels = 3;
  p.out_channels = 4;
  p.kh = p.kw = 3;
  p.ph = p.pw = 1;
  Tape<double> t1, t2;
  auto y1 = conv2d(t1.leaf(&x), t1.leaf(&w), {}, p);
  auto y2 = conv2d(t2.leaf(&x), t2.leaf(&w), {}, p);
  CHECK(y1.value().data == y2.value().data);  // bit identical
}
