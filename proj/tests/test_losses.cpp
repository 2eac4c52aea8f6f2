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

#include "rpdiar/losses.hpp"
#include "test_util.hpp"

using namespace rpdiar;
using rpdiar::testing::check_op_gradient;
using rpdiar::testing::random_vector;

TEST_CASE("binary cross-entropy closed forms") {
  CHECK(binary_cls_loss(1.0, 1) == Catch::Approx(0.0).margin(1e-6));
  CHECK(binary_cls_loss(0.0, 0) == Catch::Approx(0.0).margin(1e-6));
  CHECK(binary_cls_loss(0.5, 1) == Catch::Approx(std::log(2.0)).margin(1e-12));
  CHECK(binary_cls_loss(0.5, 0) == Catch::Approx(std::log(2.0)).margin(1e-12));
  CHECK_THROWS_AS(binary_cls_loss(0.5, 2), DataError);

  SECTION("analytic gradient at p=0.5, target 1 is -2") {
    // d/dp of -log(p) at 0.5
    double eps = 1e-6;
    double fd = (binary_cls_loss(0.5 + eps, 1) - binary_cls_loss(0.5 - eps, 1)) /
                (2 * eps);
    CHECK(fd == Catch::Approx(-2.0).margin(1e-5));
  }
  SECTION("minimized exactly at p == p*") {
    for (double p : {0.05, 0.3, 0.77, 0.95}) {
      CHECK(binary_cls_loss(p, 1) > binary_cls_loss(1.0, 1));
      CHECK(binary_cls_loss(p, 0) > binary_cls_loss(0.0, 0));
    }
  }
}

TEST_CASE("smooth L1 closed forms and C1 junction") {
  CHECK(smooth_l1_term(0.0) == 0.0);
  CHECK(smooth_l1_term(0.5) == 0.125);
  CHECK(smooth_l1_term(2.0) == 1.5);
  CHECK(smooth_l1_term(-2.0) == 1.5);

  CoordDelta a{0.5, 0.0}, b{0.0, 0.0};
  CHECK(smooth_l1(a, a) == 0.0);
  CHECK(smooth_l1(a, b) == 0.125);
  CHECK(smooth_l1(CoordDelta{2.0, 0.0}, b) == 1.5);
  CHECK(smooth_l1(CoordDelta{0.5, -0.5}, b) == 0.25);

  SECTION("both branches meet at |d| = 1 in value and slope") {
    CHECK(smooth_l1_term(1.0) == 0.5);
    CHECK(std::abs(smooth_l1_term(1.0 - 1e-9) - 0.5) <= 2e-9);
    CHECK(smooth_l1_slope(1.0 - 1e-9) == Catch::Approx(1.0).margin(1e-8));
    CHECK(smooth_l1_slope(1.0) == 1.0);
  }
}

TEST_CASE("speaker cross-entropy closed forms") {
  CHECK(speaker_cls_loss({1.0, 0.0, 0.0}, 0) == Catch::Approx(0.0).margin(2e-7));
  for (std::size_t k : {2, 5, 16}) {
    std::vector<double> uniform(k, 1.0 / k);
    CHECK(speaker_cls_loss(uniform, 0) ==
          Catch::Approx(std::log(static_cast<double>(k))).margin(1e-12));
  }
  CHECK(speaker_cls_loss({0.9, 0.1}, 0) == Catch::Approx(-std::log(0.9)).margin(1e-12));
  CHECK_THROWS_AS(speaker_cls_loss({0.5, 0.2}, 0), DataError);
  CHECK_THROWS_AS(speaker_cls_loss({0.5, 0.5}, 2), DataError);
}

TEST_CASE("total loss combines linearly in alpha") {
  LossBreakdown parts;
  parts.rpn_cls = 0.4;
  parts.rpn_reg = 0.3;
  parts.rcnn_cls = 0.2;
  parts.rcnn_reg = 0.1;
  parts.spk_cls = 0.7;

  LossBreakdown zero;
  CHECK(total_loss(zero) == 0.0);

  parts.alpha = 1.0;
  double at_one = total_loss(parts);
  parts.alpha = 0.1;
  double at_tenth = total_loss(parts);
  CHECK(at_one == Catch::Approx(1.0 + 0.7).margin(1e-12));
  CHECK(at_tenth == Catch::Approx(1.0 + 0.07).margin(1e-12));
  // slope in alpha equals spk_cls
  CHECK((at_one - at_tenth) / (1.0 - 0.1) == Catch::Approx(0.7).margin(1e-12));
}

TEST_CASE("batched bce matches per-sample closed form") {
  Graph g;
  std::vector<double> p{0.5, 0.9, 0.2, 0.5};
  std::vector<int> t{1, 1, 0, 0};
  Tensor probs = Tensor::from_data({4}, p, true);
  Tensor loss = bce_loss(g, probs, t);
  double want = 0;
  for (std::size_t i = 0; i < p.size(); ++i) want += binary_cls_loss(p[i], t[i]);
  want /= 4;
  CHECK(loss.scalar() == Catch::Approx(want).margin(1e-12));
  CHECK_THROWS_AS(bce_loss(g, probs, std::vector<int>{1}), DimensionError);
}

TEST_CASE("batched smooth l1 uses the shared denominator") {
  Graph g;
  Tensor pred = Tensor::from_data({2, 2}, {0.5, 0.0, 2.0, -0.25}, true);
  std::vector<double> target{0.0, 0.0, 0.0, 0.0};
  Tensor loss = smooth_l1_loss(g, pred, target, 128.0);
  double want = (0.125 + 0.0 + 1.5 + 0.03125) / 128.0;
  CHECK(loss.scalar() == Catch::Approx(want).margin(1e-15));
  CHECK_THROWS_AS(smooth_l1_loss(g, pred, target, 0.0), ConfigError);
}

TEST_CASE("batched cross entropy matches per-row closed form") {
  Graph g;
  Tensor probs = Tensor::from_data({2, 3}, {0.7, 0.2, 0.1, 1.0 / 3, 1.0 / 3, 1.0 / 3},
                                   true);
  Tensor loss = cross_entropy_loss(g, probs, {0, 2});
  double want = (-std::log(0.7) + std::log(3.0)) / 2.0;
  CHECK(loss.scalar() == Catch::Approx(want).margin(1e-12));
  CHECK_THROWS_AS(cross_entropy_loss(g, probs, {0, 3}), DataError);
}

TEST_CASE("loss gradients pass finite differences") {
  Rng rng(606);

  SECTION("bce") {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> at = random_vector(rng, 6, 0.05, 0.95);
      std::vector<int> targets;
      for (int i = 0; i < 6; ++i) targets.push_back(static_cast<int>(rng.bounded(2)));
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) { return bce_loss(g, x, targets); }, {6}, at);
      REQUIRE(err <= 1e-4);
    }
  }
  SECTION("smooth l1 away from the kink") {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> at = random_vector(rng, 8, -2.0, 2.0);
      for (auto& v : at) {
        if (std::abs(std::abs(v) - 1.0) < 0.05) v += 0.1;  // step off the junction
      }
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            return smooth_l1_loss(g, x, std::vector<double>(8, 0.0), 16.0);
          },
          {8}, at);
      REQUIRE(err <= 1e-4);
    }
  }
  SECTION("cross entropy through softmax") {
    std::vector<std::size_t> labels{2, 0, 1};
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> at = random_vector(rng, 12, -1.5, 1.5);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            return cross_entropy_loss(g, g.softmax(x, 1), labels);
          },
          {3, 4}, at);
      REQUIRE(err <= 1e-4);
    }
  }
  SECTION("combined objective") {
    std::vector<std::size_t> labels{1, 0};
    std::vector<int> bce_t{1, 0, 1};
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> at = random_vector(rng, 13, -1.2, 1.2);
      double err = check_op_gradient(
          [&](Graph& g, const Tensor& x) {
            Tensor rpn_p = g.sigmoid(g.gather(x, {0, 1, 2}));
            Tensor rpn_d = g.gather(x, {3, 4});
            Tensor rcnn_p = g.sigmoid(g.gather(x, {5, 6, 7}));
            Tensor rcnn_d = g.gather(x, {8, 9});
            Tensor spk = g.softmax(g.reshape(g.gather(x, {9, 10, 11, 12}), {2, 2}), 1);
            return combine_losses(g, bce_loss(g, rpn_p, bce_t),
                                  smooth_l1_loss(g, rpn_d, {0.2, 0.3}, 3.0),
                                  bce_loss(g, rcnn_p, bce_t),
                                  smooth_l1_loss(g, rcnn_d, {0.0, 0.1}, 3.0),
                                  cross_entropy_loss(g, spk, labels), 0.7);
          },
          {13}, at);
      REQUIRE(err <= 1e-4);
    }
  }
}

TEST_CASE("losses stay nonnegative and finite under extreme inputs") {
  Graph g;
  Tensor probs = Tensor::from_data({4}, {0.0, 1.0, 1e-12, 1.0 - 1e-12}, true);
  Tensor loss = bce_loss(g, probs, {0, 1, 1, 0});
  CHECK(std::isfinite(loss.scalar()));
  CHECK(loss.scalar() >= 0.0);

  Tensor spk = Tensor::from_data({1, 2}, {1.0, 0.0}, true);
  Tensor ce = cross_entropy_loss(g, spk, {1});
  CHECK(std::isfinite(ce.scalar()));
  CHECK(ce.scalar() >= 0.0);
}
