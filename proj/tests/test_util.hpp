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

#ifndef RPDIAR_TESTS_TEST_UTIL_HPP_
#define RPDIAR_TESTS_TEST_UTIL_HPP_

#include <functional>
#include <vector>

#include "rpdiar/rng.hpp"
#include "rpdiar/tensor.hpp"

namespace rpdiar::testing {

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo,
                                         double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Checks d(scalar_fn)/d(input) against central differences for one op wiring.
// `build` gets a graph plus the leaf tensor and must return a scalar tensor.
// Returns the max relative error over all coordinates.
inline double check_op_gradient(
    const std::function<Tensor(Graph&, const Tensor&)>& build,
    const std::vector<std::size_t>& shape, const std::vector<double>& at,
    double eps = 1e-5) {
  Graph g;
  Tensor x = Tensor::from_data(shape, at, /*requires_grad=*/true);
  Tensor loss = build(g, x);
  g.backward(loss);
  std::vector<double> analytic = x.grad();
  auto value_fn = [&](const std::vector<double>& v) {
    Graph g2;
    Tensor x2 = Tensor::from_data(shape, v, false);
    return build(g2, x2).scalar();
  };
  return grad_check(value_fn, at, analytic, eps);
}

}  // namespace rpdiar::testing

#endif  // RPDIAR_TESTS_TEST_UTIL_HPP_
