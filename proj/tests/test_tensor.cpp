#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "oracles.hpp"
#include "procnet/tensor.hpp"

using namespace procnet;

namespace {

Tensor random_tensor(std::vector<int> shape, uint32_t seed, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::mt19937 rng(seed);
  t.fill_uniform(rng, lo, hi);
  return t;
}

void check_close(const Tensor& a, const Tensor& b, double rel = 1e-5) {
  REQUIRE(a.shape == b.shape);
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double denom = std::max(1.0, std::abs((double)b.data[i]));
    REQUIRE(std::abs((double)a.data[i] - b.data[i]) / denom < rel);
  }
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces input") {
  Tensor x = random_tensor({1, 1, 3, 3}, 7);
  Tensor w({1, 1, 3, 3});
  w.at(0, 0, 1, 1) = 1.0f;
  Tensor b({1});
  Tensor y = conv2d(x, w, b);
  check_close(y, x, 1e-12);
}

TEST_CASE("conv2d all-ones kernel on constant image") {
  Tensor x({1, 1, 8, 8}, 5.0f);
  Tensor w({1, 1, 3, 3}, 1.0f);
  Tensor b({1});
  Tensor y = conv2d(x, w, b);
  CHECK(y.at(0, 0, 3, 3) == Catch::Approx(45.0));
  CHECK(y.at(0, 0, 0, 0) == Catch::Approx(20.0));
  CHECK(y.at(0, 0, 0, 7) == Catch::Approx(20.0));
  CHECK(y.at(0, 0, 7, 0) == Catch::Approx(20.0));
  CHECK(y.at(0, 0, 7, 7) == Catch::Approx(20.0));
}

TEST_CASE("conv2d matches direct convolution oracle") {
  Tensor x = random_tensor({2, 3, 8, 8}, 11);
  Tensor w = random_tensor({4, 3, 5, 5}, 12);
  Tensor b = random_tensor({4}, 13);
  check_close(conv2d(x, w, b), oracle::conv2d_direct(x, w, b), 1e-5);
}

TEST_CASE("conv2d rejects bad shapes") {
  Tensor x({1, 2, 4, 4});
  Tensor b({1});
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 3, 3, 3}), b), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 2, 4, 4}), b), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 2, 3, 3}), Tensor({2})), std::invalid_argument);
}

TEST_CASE("conv2d is linear in the input") {
  Tensor x = random_tensor({1, 2, 6, 6}, 21);
  Tensor y = random_tensor({1, 2, 6, 6}, 22);
  Tensor w = random_tensor({3, 2, 3, 3}, 23);
  Tensor b({3});
  const float a = 1.7f, c = -0.6f;
  Tensor lhs = conv2d(add(scale(x, a), scale(y, c)), w, b);
  Tensor rhs = add(scale(conv2d(x, w, b), a), scale(conv2d(y, w, b), c));
  check_close(lhs, rhs, 1e-5);
}

TEST_CASE("maxpool2 basics") {
  Tensor c({1, 1, 4, 4}, 3.25f);
  Tensor pc = maxpool2(c);
  REQUIRE(pc.shape == std::vector<int>{1, 1, 2, 2});
  for (float v : pc.data) CHECK(v == 3.25f);

  Tensor x({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  CHECK(maxpool2(x).scalar() == 4.0f);

  CHECK_THROWS_AS(maxpool2(Tensor({1, 1, 3, 4})), std::invalid_argument);
}

TEST_CASE("maxpool2 matches block-scan oracle") {
  Tensor x = random_tensor({1, 1, 6, 6}, 31);
  check_close(maxpool2(x), oracle::maxpool2_direct(x), 1e-12);
}

TEST_CASE("maxpool2 backward routes gradient to argmax only") {
  Tensor x = random_tensor({1, 2, 6, 6}, 41);
  GradientGraph g;
  Tensor tx = g.track(x);
  Tensor loss = reduce_mean(maxpool2(tx, &g), &g);
  g.backward(loss);
  const std::vector<float>& dx = g.grad_of(tx);

  Tensor pooled = oracle::maxpool2_direct(x);
  double routed = 0.0;
  int nonzero = 0;
  for (size_t i = 0; i < dx.size(); ++i) {
    if (dx[i] != 0.0f) {
      ++nonzero;
      routed += dx[i];
    }
  }
  CHECK(nonzero == (int)pooled.size());  // one source element per block
  CHECK(routed == Catch::Approx(1.0).margin(1e-6));
  // every nonzero gradient sits on an element equal to its block max
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 6; ++y)
      for (int xx = 0; xx < 6; ++xx) {
        const size_t i = ((size_t)c * 6 + y) * 6 + xx;
        if (dx[i] != 0.0f) CHECK(x.data[i] == pooled.at(0, c, y / 2, xx / 2));
      }
}

TEST_CASE("upsample2 duplicates and inverts under maxpool2") {
  Tensor one({1, 1, 1, 1}, {7.0f});
  Tensor up = upsample2(one);
  REQUIRE(up.shape == std::vector<int>{1, 1, 2, 2});
  for (float v : up.data) CHECK(v == 7.0f);

  Tensor x = random_tensor({1, 2, 3, 3}, 51);
  check_close(upsample2(x), oracle::upsample2_direct(x), 1e-12);
  check_close(maxpool2(upsample2(x)), x, 1e-12);
}

TEST_CASE("concat_channels ordering and degenerate operand") {
  Tensor a = random_tensor({1, 1, 4, 4}, 61);
  Tensor b = random_tensor({1, 1, 4, 4}, 62);
  Tensor cat = concat_channels(a, b);
  REQUIRE(cat.dim(1) == 2);
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) {
      CHECK(cat.at(0, 0, y, xx) == a.at(0, 0, y, xx));
      CHECK(cat.at(0, 1, y, xx) == b.at(0, 0, y, xx));
    }

  Tensor empty({1, 0, 4, 4});
  check_close(concat_channels(a, empty), a, 1e-12);

  CHECK_THROWS_AS(concat_channels(a, Tensor({1, 1, 2, 4})), std::invalid_argument);
}

TEST_CASE("pointwise values") {
  Tensor x({1, 1, 1, 4}, {-1.0f, 2.0f, 0.0f, -3.0f});
  Tensor r = relu(x);
  CHECK(r.data[0] == 0.0f);
  CHECK(r.data[1] == 2.0f);
  CHECK(r.data[2] == 0.0f);

  Tensor z({1}, {0.0f});
  CHECK(sigmoid(z).scalar() == Catch::Approx(0.5));
  CHECK(tanh_op(z).scalar() == Catch::Approx(0.0));

  CHECK_THROWS_AS(add(Tensor({2}), Tensor({3})), std::invalid_argument);
}

TEST_CASE("reduce_mean values and errors") {
  CHECK(reduce_mean(Tensor({3}, {1.0f, 2.0f, 3.0f})).scalar() == Catch::Approx(2.0));
  CHECK(reduce_mean(Tensor({4, 4}, 0.75f)).scalar() == Catch::Approx(0.75));

  Tensor x = random_tensor({4, 4}, 71);
  double s = 0.0;
  for (float v : x.data) s += v;
  CHECK(reduce_mean(x).scalar() == Catch::Approx(s / 16.0));

  CHECK_THROWS_AS(reduce_mean(Tensor({0})), std::invalid_argument);
}

TEST_CASE("softmax_channels normalises per pixel") {
  Tensor x = random_tensor({2, 3, 4, 4}, 81, -2.0f, 2.0f);
  Tensor p = softmax_channels(x);
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 4; ++xx) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) {
          CHECK(p.at(n, c, y, xx) >= 0.0f);
          s += p.at(n, c, y, xx);
        }
        CHECK(s == Catch::Approx(1.0).epsilon(1e-5));
      }
  Tensor zeros({1, 4, 2, 2});
  Tensor u = softmax_channels(zeros);
  for (float v : u.data) CHECK(v == Catch::Approx(0.25));
}

TEST_CASE("backward basics") {
  SECTION("mean distributes uniform gradient") {
    Tensor x = random_tensor({2, 8}, 91);
    GradientGraph g;
    Tensor tx = g.track(x);
    Tensor loss = reduce_mean(tx, &g);
    g.backward(loss);
    for (float v : g.grad_of(tx)) CHECK(v == Catch::Approx(1.0 / 16.0));
  }
  SECTION("disconnected parameter keeps zero gradient") {
    Tensor x = random_tensor({4}, 92);
    Tensor unused = random_tensor({4}, 93);
    GradientGraph g;
    Tensor tx = g.track(x);
    Tensor tu = g.track(unused);
    Tensor loss = reduce_mean(tx, &g);
    g.backward(loss);
    for (float v : g.grad_of(tu)) CHECK(v == 0.0f);
  }
  SECTION("non-scalar loss rejected") {
    Tensor x = random_tensor({4}, 94);
    GradientGraph g;
    Tensor tx = g.track(x);
    CHECK_THROWS_AS(g.backward(tx), std::invalid_argument);
  }
}

TEST_CASE("grad_check on affine graph is near exact") {
  GradCheckCase c;
  c.make_inputs = [](std::mt19937& rng) {
    Tensor x({1, 2, 4, 4});
    x.fill_uniform(rng, -1.0f, 1.0f);
    return std::vector<Tensor>{x};
  };
  c.loss = [](std::vector<Tensor>& in, GradientGraph* g) {
    return reduce_mean(scale(in[0], 3.0f, g), g);
  };
  CHECK(grad_check(c, 1234) < 1e-8);
}

TEST_CASE("grad_check conv + relu + mean") {
  GradCheckCase c;
  c.make_inputs = [](std::mt19937& rng) {
    Tensor x({1, 2, 6, 6}), w({3, 2, 3, 3}), b({3});
    x.fill_uniform(rng, -1.0f, 1.0f);
    w.fill_uniform(rng, -0.5f, 0.5f);
    b.fill_uniform(rng, -0.2f, 0.2f);
    return std::vector<Tensor>{x, w, b};
  };
  c.loss = [](std::vector<Tensor>& in, GradientGraph* g) {
    return reduce_mean(relu(conv2d(in[0], in[1], in[2], g), g), g);
  };
  CHECK(grad_check(c, 42, 1e-3) < 1e-3);
}

TEST_CASE("grad_check composite pointwise graph") {
  GradCheckCase c;
  c.make_inputs = [](std::mt19937& rng) {
    Tensor a({1, 2, 4, 4}), b({1, 2, 4, 4}), s({2});
    a.fill_uniform(rng, -1.0f, 1.0f);
    b.fill_uniform(rng, -1.0f, 1.0f);
    s.fill_uniform(rng, 0.3f, 1.2f);
    return std::vector<Tensor>{a, b, s};
  };
  c.loss = [](std::vector<Tensor>& in, GradientGraph* g) {
    Tensor m = mul(sigmoid(in[0], g), tanh_op(in[1], g), g);
    Tensor cs = channel_scale(m, in[2], g);
    Tensor cb = channel_bias(cs, in[2], g);
    Tensor sm = softmax_channels(cb, g);
    Tensor cat = concat_channels(sm, sub(in[0], in[1], g), g);
    return reduce_mean(mul(cat, cat, g), g);
  };
  CHECK(grad_check(c, 77, 1e-3) < 1e-3);
}

TEST_CASE("grad_check pooling and upsampling") {
  GradCheckCase c;
  c.make_inputs = [](std::mt19937& rng) {
    Tensor x({1, 2, 6, 6});
    x.fill_uniform(rng, -1.0f, 1.0f);
    return std::vector<Tensor>{x};
  };
  c.loss = [](std::vector<Tensor>& in, GradientGraph* g) {
    Tensor u = upsample2(maxpool2(in[0], g), g);
    return reduce_mean(mul(u, u, g), g);
  };
  CHECK(grad_check(c, 7, 1e-3) < 1e-3);
}

TEST_CASE("ops are deterministic across repeat runs") {
  Tensor x1 = random_tensor({2, 3, 8, 8}, 1001);
  Tensor x2 = random_tensor({2, 3, 8, 8}, 1001);
  REQUIRE(x1.data == x2.data);
  Tensor w = random_tensor({4, 3, 5, 5}, 1002);
  Tensor b = random_tensor({4}, 1003);
  Tensor y1 = conv2d(x1, w, b);
  Tensor y2 = conv2d(x2, w, b);
  CHECK(y1.data == y2.data);
  CHECK(softmax_channels(y1).data == softmax_channels(y2).data);
}
