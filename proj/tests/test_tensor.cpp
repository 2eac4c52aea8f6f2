// Copyright (c) 2026 The rpdiar Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "rpdiar/tensor.hpp"
#include "test_util.hpp"

using namespace rpdiar;
using rpdiar::testing::check_op_gradient;
using rpdiar::testing::random_vector;

namespace {

// Independent O(n^4) convolution: plain nested loops over every output cell
// and kernel tap, no sharing with the library implementation.
std::vector<double> conv2d_loop_oracle(const std::vector<double>& x, int cin,
                                       int H, int W, const std::vector<double>& w,
                                       int cout, int kh, int kw, int stride,
                                       int pad) {
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(cout * Ho * Wo, 0.0);
  for (int oc = 0; oc < cout; ++oc)
    for (int oh = 0; oh < Ho; ++oh)
      for (int ow = 0; ow < Wo; ++ow) {
        double acc = 0.0;
        for (int ic = 0; ic < cin; ++ic)
          for (int r = 0; r < kh; ++r)
            for (int c = 0; c < kw; ++c) {
              int ih = oh * stride - pad + r;
              int iw = ow * stride - pad + c;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += w[((oc * cin + ic) * kh + r) * kw + c] *
                     x[(ic * H + ih) * W + iw];
            }
        out[(oc * Ho + oh) * Wo + ow] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d identity and zero cases") {
  Graph g;
  Tensor x = Tensor::from_data({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor y = g.conv2d(x, w, Tensor(), 1, 1, 0, 0);
  REQUIRE(y.shape() == std::vector<std::size_t>{1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == x[i]);

  Rng rng(3);
  Tensor z = Tensor::zeros({1, 4, 4});
  Tensor w2 = Tensor::from_data({2, 1, 3, 3}, random_vector(rng, 18, -1, 1));
  Tensor y2 = g.conv2d(z, w2, Tensor(), 1, 1, 1, 1);
  for (std::size_t i = 0; i < y2.size(); ++i) CHECK(y2[i] == 0.0);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    int stride = 1 + static_cast<int>(rng.bounded(2));
    int pad = static_cast<int>(rng.bounded(2));
    auto xv = random_vector(rng, 1 * 5 * 5, -2, 2);
    auto wv = random_vector(rng, 2 * 1 * 3 * 3, -1, 1);
    Graph g;
    Tensor x = Tensor::from_data({1, 5, 5}, xv);
    Tensor w = Tensor::from_data({2, 1, 3, 3}, wv);
    Tensor y = g.conv2d(x, w, Tensor(), stride, stride, pad, pad);
    auto expect = conv2d_loop_oracle(xv, 1, 5, 5, wv, 2, 3, 3, stride, pad);
    REQUIRE(y.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(y[i] == Catch::Approx(expect[i]).margin(1e-12));
    }
  }
}

TEST_CASE("conv2d rejects shape mismatches") {
  Graph g;
  Tensor x = Tensor::zeros({2, 4, 4});
  Tensor w = Tensor::zeros({1, 3, 2, 2});  // C_in mismatch
  CHECK_THROWS_AS(g.conv2d(x, w, Tensor(), 1, 1, 0, 0), DimensionError);
  Tensor wbig = Tensor::zeros({1, 2, 7, 7});
  CHECK_THROWS_AS(g.conv2d(x, wbig, Tensor(), 1, 1, 0, 0), DimensionError);
}

TEST_CASE("activation basics") {
  Graph g;
  Tensor x = Tensor::from_data({3}, {0.0, 0.0, 0.0});
  Tensor s = g.softmax(x, 0);
  for (int i = 0; i < 3; ++i) CHECK(s[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));

  Tensor z = Tensor::from_data({1}, {0.0});
  CHECK(g.sigmoid(z)[0] == 0.5);

  Tensor v = Tensor::from_data({4}, {-2, -0.5, 0.5, 2});
  Tensor r = g.relu(v);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 0.5);
  CHECK(r[3] == 2.0);

  CHECK_THROWS_AS(g.softmax(Tensor::zeros({3, 0}), 1), DimensionError);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  Graph g;
  Tensor x = Tensor::from_data({4, 7}, random_vector(rng, 28, -10, 10));
  Tensor s = g.softmax(x, 1);
  for (int r = 0; r < 4; ++r) {
    double total = 0.0;
    for (int c = 0; c < 7; ++c) total += s[r * 7 + c];
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("linear with identity weight leaves input unchanged") {
  Graph g;
  Tensor x = Tensor::from_data({3}, {1.5, -2.0, 0.25});
  Tensor w = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b = Tensor::zeros({3});
  Tensor y = g.linear(x, w, b);
  for (int i = 0; i < 3; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("backward basics") {
  SECTION("sum gives ones") {
    Graph g;
    Tensor x = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    g.backward(g.sum(x));
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == 1.0);
  }
  SECTION("sum of squares") {
    Graph g;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor loss = g.sum(g.mul(x, x));
    g.backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(2.0));
    CHECK(x.grad()[1] == Catch::Approx(4.0));
  }
  SECTION("non-scalar loss rejected") {
    Graph g;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(g.backward(x), DimensionError);
  }
  SECTION("unreachable leaf keeps zero grad") {
    Graph g;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = Tensor::from_data({2}, {5, 6}, true);
    g.backward(g.sum(x));
    CHECK(y.grad()[0] == 0.0);
    CHECK(y.grad()[1] == 0.0);
  }
}

TEST_CASE("gradient accumulates additively across uses") {
  Graph g;
  Tensor x = Tensor::from_data({2}, {3, -1}, true);
  Tensor loss = g.sum(g.add(x, x));  // d/dx = 2
  g.backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(11);
  auto xv = random_vector(rng, 6, -1, 1);
  const double a = 2.5, b = -0.75;

  auto grads_of = [&](double ca, double cb) {
    Graph g;
    Tensor x = Tensor::from_data({6}, xv, true);
    Tensor f = g.sum(g.mul(x, x));
    Tensor h = g.sum(g.sigmoid(x));
    Tensor loss = g.add(g.scale(f, ca), g.scale(h, cb));
    g.backward(loss);
    return x.grad();
  };

  auto combined = grads_of(a, b);
  auto gf = grads_of(1.0, 0.0);
  auto gh = grads_of(0.0, 1.0);
  for (std::size_t i = 0; i < combined.size(); ++i) {
    CHECK(std::abs(combined[i] - (a * gf[i] + b * gh[i])) <= 1e-12);
  }
}

TEST_CASE("forward is deterministic under identical seeds") {
  auto run = [] {
    Rng rng(99);
    Graph g;
    Tensor x = Tensor::randn({2, 6, 6}, rng, 1.0, false);
    Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 0.5, false);
    Tensor y = g.sigmoid(g.conv2d(x, w, Tensor(), 2, 2, 1, 1));
    return y.values();
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // bit-identical
}

TEST_CASE("grad_check on sum is exact") {
  Rng rng(7);
  auto xv = random_vector(rng, 8, -2, 2);
  Graph g;
  Tensor x = Tensor::from_data({8}, xv, true);
  g.backward(g.sum(x));
  auto fn = [](const std::vector<double>& v) {
    double s = 0;
    for (double t : v) s += t;
    return s;
  };
  CHECK(grad_check(fn, xv, x.grad(), 1e-5) <= 1e-10);
}

TEST_CASE("every differentiable op passes finite-difference checks") {
  Rng rng(2024);
  const int kPoints = 20;
  const double kTol = 1e-4;

  auto scalarize = [](Graph& g, const Tensor& t) {
    // sum of sigmoid keeps the probe scalar sensitive to every coordinate
    return g.sum(g.sigmoid(t));
  };

  for (int p = 0; p < kPoints; ++p) {
    // relu points kept away from the kink at 0
    {
      auto at = random_vector(rng, 6, 0.1, 2.0);
      for (std::size_t i = 0; i < at.size(); ++i)
        if (i % 2) at[i] = -at[i];
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) { return scalarize(g, g.relu(x)); }, {6},
          at);
      CHECK(err <= kTol);
    }
    {
      auto at = random_vector(rng, 5, -2, 2);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) { return scalarize(g, g.sigmoid(x)); },
          {5}, at);
      CHECK(err <= kTol);
    }
    {
      auto at = random_vector(rng, 8, -3, 3);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) { return scalarize(g, g.softmax(x, 1)); },
          {2, 4}, at);
      CHECK(err <= kTol);
    }
    {
      auto at = random_vector(rng, 12, -1, 1);
      auto wv = random_vector(rng, 8, -1, 1);
      auto bv = random_vector(rng, 2, -1, 1);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            Tensor w = Tensor::from_data({2, 4}, wv);
            Tensor b = Tensor::from_data({2}, bv);
            return scalarize(g, g.linear(x, w, b));
          },
          {3, 4}, at);
      CHECK(err <= kTol);
      // and through the weights
      double werr = check_op_gradient(
          [&](Graph& g, const Tensor& w) {
            Tensor x = Tensor::from_data({3, 4}, at);
            return scalarize(g, g.linear(x, w, Tensor()));
          },
          {2, 4}, wv);
      CHECK(werr <= kTol);
    }
    {
      auto xv = random_vector(rng, 2 * 5 * 5, -1, 1);
      auto wv = random_vector(rng, 3 * 2 * 3 * 3, -0.5, 0.5);
      double xerr = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            Tensor w = Tensor::from_data({3, 2, 3, 3}, wv);
            return scalarize(g, g.conv2d(x, w, Tensor(), 2, 1, 1, 0));
          },
          {2, 5, 5}, xv);
      CHECK(xerr <= kTol);
      double werr = check_op_gradient(
          [&](Graph& g, const Tensor& w) {
            Tensor x = Tensor::from_data({2, 5, 5}, xv);
            return scalarize(g, g.conv2d(x, w, Tensor(), 1, 2, 0, 1));
          },
          {3, 2, 3, 3}, wv);
      CHECK(werr <= kTol);
    }
    {
      auto at = random_vector(rng, 3 * 2 * 4, -2, 2);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) { return scalarize(g, g.mean_pool(x)); },
          {3, 2, 4}, at);
      CHECK(err <= kTol);
    }
    {
      auto at = random_vector(rng, 10, -2, 2);
      std::vector<std::size_t> idx{0, 3, 3, 9, 5};
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) { return scalarize(g, g.gather(x, idx)); },
          {10}, at);
      CHECK(err <= kTol);
    }
    {
      auto at = random_vector(rng, 12, -2, 2);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            Tensor rows = g.gather_rows(x, {2, 0, 2});
            return scalarize(g, g.reshape(rows, {9}));
          },
          {4, 3}, at);
      CHECK(err <= kTol);
    }
    {
      auto at = random_vector(rng, 6, -2, 2);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            Tensor twice = g.stack_rows({x, g.scale(x, 2.0)});
            return scalarize(g, twice);
          },
          {6}, at);
      CHECK(err <= kTol);
    }
    {
      auto at = random_vector(rng, 5, -2, 2);
      auto bv = random_vector(rng, 5, -2, 2);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            Tensor other = Tensor::from_data({5}, bv);
            Tensor m = g.mul(g.sub(x, other), g.add(x, other));
            return g.mean(m);
          },
          {5}, at);
      CHECK(err <= kTol);
    }
  }
}

TEST_CASE("two-layer net gradients match finite differences") {
  Rng rng(31);
  auto xv = random_vector(rng, 4, -1, 1);
  auto w1 = random_vector(rng, 12, -1, 1);
  auto w2 = random_vector(rng, 3, -1, 1);

  auto loss_fn = [&](const std::vector<double>& params) {
    std::vector<double> w1v(params.begin(), params.begin() + 12);
    std::vector<double> w2v(params.begin() + 12, params.end());
    Graph g;
    Tensor x = Tensor::from_data({4}, xv);
    Tensor a = g.sigmoid(g.linear(x, Tensor::from_data({3, 4}, w1v), Tensor()));
    Tensor out = g.linear(a, Tensor::from_data({1, 3}, w2v), Tensor());
    return g.sum(g.mul(out, out)).scalar();
  };

  std::vector<double> params = w1;
  params.insert(params.end(), w2.begin(), w2.end());

  Graph g;
  Tensor x = Tensor::from_data({4}, xv);
  Tensor w1t = Tensor::from_data({3, 4}, w1, true);
  Tensor w2t = Tensor::from_data({1, 3}, w2, true);
  Tensor a = g.sigmoid(g.linear(x, w1t, Tensor()));
  Tensor out = g.linear(a, w2t, Tensor());
  g.backward(g.sum(g.mul(out, out)));

  std::vector<double> analytic = w1t.grad();
  auto g2 = w2t.grad();
  analytic.insert(analytic.end(), g2.begin(), g2.end());

  CHECK(grad_check(loss_fn, params, analytic, 1e-5) <= 1e-4);
}
