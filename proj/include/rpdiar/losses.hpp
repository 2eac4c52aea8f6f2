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

#ifndef RPDIAR_LOSSES_HPP_
#define RPDIAR_LOSSES_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "rpdiar/common.hpp"
#include "rpdiar/proposals.hpp"
#include "rpdiar/tensor.hpp"

namespace rpdiar {

// Probabilities are clamped into [kProbEps, 1 - kProbEps] inside losses
// only; reported probabilities stay untouched.
inline constexpr double kProbEps = 1e-7;

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

// ---- closed-form scalar losses (single samples) ----

inline double binary_cls_loss(double p, int p_star) {
  if (p_star != 0 && p_star != 1) throw DataError("binary_cls_loss: target not 0/1");
  double q = clamp_prob(p);
  return -(p_star * std::log(q) + (1 - p_star) * std::log(1.0 - q));
}

// 0.5 d^2 inside |d| < 1, |d| - 0.5 outside; C1 at the junction.
inline double smooth_l1_term(double d) {
  double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

inline double smooth_l1_slope(double d) {
  double a = std::abs(d);
  return a < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
}

inline double smooth_l1(const CoordDelta& t, const CoordDelta& t_star) {
  if (!std::isfinite(t.dx) || !std::isfinite(t.dw) || !std::isfinite(t_star.dx) ||
      !std::isfinite(t_star.dw))
    throw DataError("smooth_l1: non-finite delta");
  return smooth_l1_term(t.dx - t_star.dx) + smooth_l1_term(t.dw - t_star.dw);
}

inline double speaker_cls_loss(const std::vector<double>& s, std::size_t true_idx) {
  if (true_idx >= s.size()) throw DataError("speaker_cls_loss: index out of range");
  double total = 0;
  for (double v : s) total += v;
  if (std::abs(total - 1.0) > 1e-9)
    throw DataError("speaker_cls_loss: distribution does not sum to 1");
  return -std::log(std::max(s[true_idx], kProbEps));
}

// The five Eq.-style terms. Regularities: every term >= 0; total is linear
// in alpha with slope spk_cls.
struct LossBreakdown {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double rcnn_cls = 0.0;
  double rcnn_reg = 0.0;
  double spk_cls = 0.0;
  double alpha = 1.0;

  double total() const {
    return rpn_cls + rpn_reg + rcnn_cls + rcnn_reg + alpha * spk_cls;
  }
};

inline double total_loss(const LossBreakdown& parts) { return parts.total(); }

// ---- differentiable batched losses ----

// Mean binary cross-entropy of `probs` (flat, in [0,1]) against 0/1
// targets. Clamped probabilities contribute zero gradient.
inline Tensor bce_loss(Graph& g, const Tensor& probs, const std::vector<int>& targets) {
  if (probs.size() != targets.size())
    throw DimensionError("bce_loss: probs and targets differ in length");
  if (probs.size() == 0) throw DimensionError("bce_loss: empty batch");
  const std::size_t n = probs.size();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += binary_cls_loss(probs[i], targets[i]);
  double inv = 1.0 / static_cast<double>(n);
  return g.make_op({1}, {acc * inv}, {probs}, [targets, inv](detail::TensorNode& n) {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      double p = n.parents[0]->value[i];
      if (p < kProbEps || p > 1.0 - kProbEps) continue;
      double d = targets[i] ? -1.0 / p : 1.0 / (1.0 - p);
      n.parents[0]->grad[i] += inv * d * n.grad[0];
    }
  });
}

// Sum of smooth-L1 terms over all elements of pred - target, divided by
// `denominator` (the paired classification batch size, not the fg count).
inline Tensor smooth_l1_loss(Graph& g, const Tensor& pred,
                             const std::vector<double>& target, double denominator) {
  if (pred.size() != target.size())
    throw DimensionError("smooth_l1_loss: pred and target differ in length");
  if (!(denominator > 0)) throw ConfigError("smooth_l1_loss: denominator must be > 0");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    acc += smooth_l1_term(pred[i] - target[i]);
  double inv = 1.0 / denominator;
  return g.make_op({1}, {acc * inv}, {pred}, [target, inv](detail::TensorNode& n) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      double d = n.parents[0]->value[i] - target[i];
      n.parents[0]->grad[i] += inv * smooth_l1_slope(d) * n.grad[0];
    }
  });
}

// Mean over rows of -log(probs[row][label]); probs is [n, K] of
// already-normalized distributions.
inline Tensor cross_entropy_loss(Graph& g, const Tensor& probs,
                                 const std::vector<std::size_t>& labels) {
  if (probs.rank() != 2) throw DimensionError("cross_entropy_loss: probs must be [n,K]");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (labels.size() != n)
    throw DimensionError("cross_entropy_loss: labels and rows differ in length");
  if (n == 0) throw DimensionError("cross_entropy_loss: empty batch");
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw DataError("cross_entropy_loss: label out of range");
    acc += -std::log(std::max(probs[i * k + labels[i]], kProbEps));
  }
  double inv = 1.0 / static_cast<double>(n);
  return g.make_op({1}, {acc * inv}, {probs}, [labels, k, inv](detail::TensorNode& n) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::size_t at = i * k + labels[i];
      double p = n.parents[0]->value[at];
      if (p < kProbEps) continue;
      n.parents[0]->grad[at] += -inv / p * n.grad[0];
    }
  });
}

// Eq.-1 style combination: four detection terms plus alpha * speaker term.
inline Tensor combine_losses(Graph& g, const Tensor& rpn_cls, const Tensor& rpn_reg,
                             const Tensor& rcnn_cls, const Tensor& rcnn_reg,
                             const Tensor& spk_cls, double alpha) {
  Tensor detection =
      g.add(g.add(rpn_cls, rpn_reg), g.add(rcnn_cls, rcnn_reg));
  return g.add(detection, g.scale(spk_cls, alpha));
}

}  // namespace rpdiar

#endif  // RPDIAR_LOSSES_HPP_
