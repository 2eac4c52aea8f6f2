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

#ifndef RPDIAR_TENSOR_HPP_
#define RPDIAR_TENSOR_HPP_

// Minimal dense-tensor numerics with reverse-mode differentiation. All values
// are 64-bit floats in row-major order. A Graph records executed ops on a tape
// and replays their adjoints in exact reverse order; leaves (parameters)
// outlive any single graph and accumulate gradient additively across uses.
//
// A Graph and the tensors recorded on it are confined to one thread.
// Independent graphs may run on independent threads; parameter values may be
// read concurrently as long as no graph is running backward on them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "rpdiar/common.hpp"
#include "rpdiar/rng.hpp"

namespace rpdiar {

namespace detail {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until gradient is first required
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backprop;

  std::size_t size() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad, 0.0);
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    return Tensor(std::move(shape), {}, false, v);
  }

  static Tensor scalar_value(double v) { return from_data({1}, {v}); }

  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (detail::shape_product(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + detail::shape_str(shape));
    }
    Tensor t(std::move(shape), std::move(data), requires_grad, 0.0);
    return t;
  }

  // Seeded gaussian initialization, scaled (for parameter tensors).
  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double scale,
                      bool requires_grad = true) {
    std::vector<double> data(detail::shape_product(shape));
    for (auto& v : data) v = scale * rng.gaussian();
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t flat) const { return node_->value[flat]; }
  double& operator[](std::size_t flat) { return node_->value[flat]; }

  double scalar() const {
    if (size() != 1) {
      throw DimensionError("expected scalar tensor, got shape " +
                           detail::shape_str(node_->shape));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  // Gradient buffer; zeros when backward has not touched this tensor.
  std::vector<double> grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return std::vector<double>(node_->value.size(), 0.0);
  }

  double grad_at(std::size_t flat) const {
    return node_->grad.size() == node_->value.size() ? node_->grad[flat] : 0.0;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  void check_finite_values(const std::string& what) const {
    for (double v : node_->value) {
      if (!std::isfinite(v)) throw DataError(what + ": non-finite value in tensor");
    }
  }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  friend class Graph;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data,
         bool requires_grad, double fill) {
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    if (data.empty()) {
      node_->value.assign(detail::shape_product(node_->shape), fill);
    } else {
      node_->value = std::move(data);
    }
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

  std::shared_ptr<detail::TensorNode> node_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t num_ops() const { return tape_.size(); }

  // Generic op constructor. `backprop` receives the result node with its grad
  // populated and must accumulate into parents' grads (which are allocated).
  // This is the hook custom ops (RoIAlign, fused losses) register through.
  Tensor make_op(std::vector<std::size_t> shape, std::vector<double> value,
                 std::vector<Tensor> parents,
                 std::function<void(detail::TensorNode&)> backprop) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (node->value.size() != detail::shape_product(node->shape)) {
      throw DimensionError("op result value/shape mismatch");
    }
    bool needs = false;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) {
      node->parents.push_back(p.node());
      needs = needs || p.node()->requires_grad;
    }
    node->requires_grad = needs;
    if (needs) node->backprop = std::move(backprop);
    tape_.push_back(node);
    return Tensor(node);
  }

  // ---- elementwise arithmetic ----

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.size(); ++i) {
        if (n.parents[0]->requires_grad) n.parents[0]->grad[i] += n.grad[i];
        if (n.parents[1]->requires_grad) n.parents[1]->grad[i] += n.grad[i];
      }
    });
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.size(); ++i) {
        if (n.parents[0]->requires_grad) n.parents[0]->grad[i] += n.grad[i];
        if (n.parents[1]->requires_grad) n.parents[1]->grad[i] -= n.grad[i];
      }
    });
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.size(); ++i) {
        if (n.parents[0]->requires_grad)
          n.parents[0]->grad[i] += n.grad[i] * n.parents[1]->value[i];
        if (n.parents[1]->requires_grad)
          n.parents[1]->grad[i] += n.grad[i] * n.parents[0]->value[i];
      }
    });
  }

  Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a[i];
    return make_op(a.shape(), std::move(out), {a}, [c](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.size(); ++i)
        n.parents[0]->grad[i] += c * n.grad[i];
    });
  }

  Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return make_op({1}, {s}, {a}, [](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.parents[0]->value.size(); ++i)
        n.parents[0]->grad[i] += n.grad[0];
    });
  }

  Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw DimensionError("mean over empty tensor");
    double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return make_op({1}, {s * inv}, {a}, [inv](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.parents[0]->value.size(); ++i)
        n.parents[0]->grad[i] += inv * n.grad[0];
    });
  }

  // ---- activations ----

  Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a[i]);
    return make_op(a.shape(), std::move(out), {a}, [](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.size(); ++i) {
        if (n.parents[0]->value[i] > 0.0) n.parents[0]->grad[i] += n.grad[i];
      }
    });
  }

  Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
    return make_op(a.shape(), std::move(out), {a}, [](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.size(); ++i) {
        double y = n.value[i];
        n.parents[0]->grad[i] += n.grad[i] * y * (1.0 - y);
      }
    });
  }

  // Softmax along `axis`. Supported for the last axis of 1-D and 2-D tensors;
  // each slice sums to 1 within 1e-12.
  Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw DimensionError("softmax: axis out of range");
    if (axis + 1 != a.rank() || a.rank() > 2) {
      throw DimensionError("softmax: only the last axis of 1-D/2-D tensors");
    }
    std::size_t cols = a.dim(axis);
    if (cols == 0) throw DimensionError("softmax over empty axis");
    std::size_t rows = a.size() / cols;
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = a.values().data() + r * cols;
      double* o = out.data() + r * cols;
      double m = *std::max_element(in, in + cols);
      double z = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        o[j] = std::exp(in[j] - m);
        z += o[j];
      }
      for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
    }
    return make_op(a.shape(), std::move(out), {a},
                   [rows, cols](detail::TensorNode& n) {
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* y = n.value.data() + r * cols;
                       const double* gy = n.grad.data() + r * cols;
                       double dot = 0.0;
                       for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
                       for (std::size_t j = 0; j < cols; ++j)
                         n.parents[0]->grad[r * cols + j] += y[j] * (gy[j] - dot);
                     }
                   });
  }

  // ---- linear algebra ----

  // x: [n, d] or [d]; w: [out, d]; b: [out] or undefined for no bias.
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2) throw DimensionError("linear: weight must be 2-D");
    std::size_t out_dim = w.dim(0), in_dim = w.dim(1);
    bool batched = x.rank() == 2;
    std::size_t n = batched ? x.dim(0) : 1;
    std::size_t d = batched ? x.dim(1) : (x.rank() == 1 ? x.dim(0) : 0);
    if (d != in_dim) {
      throw DimensionError("linear: input dim " + std::to_string(d) +
                           " vs weight in dim " + std::to_string(in_dim));
    }
    bool has_bias = b.defined();
    if (has_bias && (b.rank() != 1 || b.dim(0) != out_dim)) {
      throw DimensionError("linear: bias shape mismatch");
    }
    std::vector<double> out(n * out_dim, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* xr = x.values().data() + r * d;
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double* wo = w.values().data() + o * d;
        double acc = has_bias ? b[o] : 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += wo[j] * xr[j];
        out[r * out_dim + o] = acc;
      }
    }
    std::vector<std::size_t> oshape =
        batched ? std::vector<std::size_t>{n, out_dim} : std::vector<std::size_t>{out_dim};
    std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, w, b}
                                           : std::vector<Tensor>{x, w};
    return make_op(oshape, std::move(out), std::move(parents),
                   [n, d, out_dim, has_bias](detail::TensorNode& node) {
                     auto& xp = *node.parents[0];
                     auto& wp = *node.parents[1];
                     for (std::size_t r = 0; r < n; ++r) {
                       const double* gy = node.grad.data() + r * out_dim;
                       const double* xr = xp.value.data() + r * d;
                       for (std::size_t o = 0; o < out_dim; ++o) {
                         double g = gy[o];
                         if (g == 0.0) continue;
                         const double* wo = wp.value.data() + o * d;
                         if (xp.requires_grad) {
                           double* gx = xp.grad.data() + r * d;
                           for (std::size_t j = 0; j < d; ++j) gx[j] += g * wo[j];
                         }
                         if (wp.requires_grad) {
                           double* gw = wp.grad.data() + o * d;
                           for (std::size_t j = 0; j < d; ++j) gw[j] += g * xr[j];
                         }
                         if (has_bias && node.parents[2]->requires_grad)
                           node.parents[2]->grad[o] += g;
                       }
                     }
                   });
  }

  // x: [C_in, H, W]; w: [C_out, C_in, kh, kw]; b: [C_out] or undefined.
  // H' = floor((H + 2*pad_h - kh)/stride_h) + 1, likewise W'.
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h,
                int stride_w, int pad_h, int pad_w) {
    if (x.rank() != 3 || w.rank() != 4) {
      throw DimensionError("conv2d: expected x [C,H,W] and w [O,C,kh,kw]");
    }
    if (stride_h < 1 || stride_w < 1) throw DimensionError("conv2d: stride must be >= 1");
    if (pad_h < 0 || pad_w < 0) throw DimensionError("conv2d: negative padding");
    const std::size_t cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin) {
      throw DimensionError("conv2d: weight C_in " + std::to_string(w.dim(1)) +
                           " vs input C " + std::to_string(cin));
    }
    if (kh > H + 2 * static_cast<std::size_t>(pad_h) ||
        kw > W + 2 * static_cast<std::size_t>(pad_w)) {
      throw DimensionError("conv2d: kernel does not fit padded input");
    }
    bool has_bias = b.defined();
    if (has_bias && (b.rank() != 1 || b.dim(0) != cout)) {
      throw DimensionError("conv2d: bias shape mismatch");
    }
    const std::size_t Ho = (H + 2 * pad_h - kh) / stride_h + 1;
    const std::size_t Wo = (W + 2 * pad_w - kw) / stride_w + 1;
    std::vector<double> out(cout * Ho * Wo, 0.0);
    const auto& xv = x.values();
    const auto& wv = w.values();
    for (std::size_t oc = 0; oc < cout; ++oc) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        const long ih0 = static_cast<long>(oh) * stride_h - pad_h;
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const long iw0 = static_cast<long>(ow) * stride_w - pad_w;
          double acc = has_bias ? b[oc] : 0.0;
          for (std::size_t ic = 0; ic < cin; ++ic) {
            const double* xc = xv.data() + ic * H * W;
            const double* wc = wv.data() + ((oc * cin + ic) * kh) * kw;
            for (std::size_t r = 0; r < kh; ++r) {
              const long ih = ih0 + static_cast<long>(r);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              const double* xrow = xc + ih * W;
              const double* wrow = wc + r * kw;
              for (std::size_t c = 0; c < kw; ++c) {
                const long iw = iw0 + static_cast<long>(c);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                acc += wrow[c] * xrow[iw];
              }
            }
          }
          out[(oc * Ho + oh) * Wo + ow] = acc;
        }
      }
    }
    std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, w, b}
                                           : std::vector<Tensor>{x, w};
    auto bw = [cin, H, W, cout, kh, kw, Ho, Wo, stride_h, stride_w, pad_h, pad_w,
               has_bias](detail::TensorNode& node) {
      auto& xp = *node.parents[0];
      auto& wp = *node.parents[1];
      for (std::size_t oc = 0; oc < cout; ++oc) {
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih0 = static_cast<long>(oh) * stride_h - pad_h;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const double g = node.grad[(oc * Ho + oh) * Wo + ow];
            if (g == 0.0) continue;
            const long iw0 = static_cast<long>(ow) * stride_w - pad_w;
            for (std::size_t ic = 0; ic < cin; ++ic) {
              const double* xc = xp.value.data() + ic * H * W;
              double* gxc = xp.requires_grad ? xp.grad.data() + ic * H * W : nullptr;
              const double* wc = wp.value.data() + ((oc * cin + ic) * kh) * kw;
              double* gwc = wp.requires_grad
                                ? wp.grad.data() + ((oc * cin + ic) * kh) * kw
                                : nullptr;
              for (std::size_t r = 0; r < kh; ++r) {
                const long ih = ih0 + static_cast<long>(r);
                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                for (std::size_t c = 0; c < kw; ++c) {
                  const long iw = iw0 + static_cast<long>(c);
                  if (iw < 0 || iw >= static_cast<long>(W)) continue;
                  if (gxc) gxc[ih * W + iw] += g * wc[r * kw + c];
                  if (gwc) gwc[r * kw + c] += g * xc[ih * W + iw];
                }
              }
            }
            if (has_bias && node.parents[2]->requires_grad)
              node.parents[2]->grad[oc] += g;
          }
        }
      }
    };
    return make_op({cout, Ho, Wo}, std::move(out), std::move(parents), std::move(bw));
  }

  // Global average over the spatial axes: [C, H, W] -> [C].
  Tensor mean_pool(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("mean_pool: expected [C,H,W]");
    const std::size_t C = x.dim(0), plane = x.dim(1) * x.dim(2);
    if (plane == 0) throw DimensionError("mean_pool over empty plane");
    const double inv = 1.0 / static_cast<double>(plane);
    std::vector<double> out(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += x[c * plane + i];
      out[c] = s * inv;
    }
    return make_op({C}, std::move(out), {x}, [C, plane, inv](detail::TensorNode& n) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < plane; ++i)
          n.parents[0]->grad[c * plane + i] += inv * n.grad[c];
      }
    });
  }

  // ---- indexing / stacking ----

  // Selects flat elements -> 1-D tensor [indices.size()].
  Tensor gather(const Tensor& x, const std::vector<std::size_t>& indices) {
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= x.size()) throw DimensionError("gather: index out of range");
      out[i] = x[indices[i]];
    }
    auto idx = indices;
    return make_op({indices.size()}, std::move(out), {x},
                   [idx = std::move(idx)](detail::TensorNode& n) {
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       n.parents[0]->grad[idx[i]] += n.grad[i];
                   });
  }

  // Selects rows of a 2-D tensor -> [rows.size(), d].
  Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.rank() != 2) throw DimensionError("gather_rows: expected 2-D tensor");
    const std::size_t d = x.dim(1);
    std::vector<double> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= x.dim(0)) throw DimensionError("gather_rows: row out of range");
      std::copy_n(x.values().data() + rows[i] * d, d, out.data() + i * d);
    }
    auto idx = rows;
    return make_op({rows.size(), d}, std::move(out), {x},
                   [idx = std::move(idx), d](detail::TensorNode& n) {
                     for (std::size_t i = 0; i < idx.size(); ++i) {
                       for (std::size_t j = 0; j < d; ++j)
                         n.parents[0]->grad[idx[i] * d + j] += n.grad[i * d + j];
                     }
                   });
  }

  // Stacks equal-size tensors (flattened) into [n, d].
  Tensor stack_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("stack_rows: empty input");
    const std::size_t d = xs[0].size();
    std::vector<double> out;
    out.reserve(xs.size() * d);
    for (const auto& t : xs) {
      if (t.size() != d) throw DimensionError("stack_rows: ragged inputs");
      out.insert(out.end(), t.values().begin(), t.values().end());
    }
    return make_op({xs.size(), d}, std::move(out),
                   std::vector<Tensor>(xs.begin(), xs.end()),
                   [d](detail::TensorNode& n) {
                     for (std::size_t i = 0; i < n.parents.size(); ++i) {
                       if (!n.parents[i]->requires_grad) continue;
                       for (std::size_t j = 0; j < d; ++j)
                         n.parents[i]->grad[j] += n.grad[i * d + j];
                     }
                   });
  }

  // Same data, new shape (copying view).
  Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    if (detail::shape_product(shape) != x.size()) {
      throw DimensionError("reshape: element count mismatch");
    }
    std::vector<double> out = x.values();
    return make_op(std::move(shape), std::move(out), {x}, [](detail::TensorNode& n) {
      for (std::size_t i = 0; i < n.size(); ++i) n.parents[0]->grad[i] += n.grad[i];
    });
  }

  // ---- backward ----

  // Reverse-mode sweep from a scalar loss. Every requires_grad leaf reachable
  // from `loss` receives (additional) gradient; unreachable leaves are not
  // touched. Ops replay in exact reverse execution order.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw DimensionError("backward: loss must be scalar, got shape " +
                           detail::shape_str(loss.shape()));
    }
    // Mark the sub-DAG feeding the loss.
    std::unordered_set<const detail::TensorNode*> reachable;
    std::vector<const detail::TensorNode*> stack{loss.node().get()};
    while (!stack.empty()) {
      const auto* n = stack.back();
      stack.pop_back();
      if (!reachable.insert(n).second) continue;
      for (const auto& p : n->parents) {
        if (p->requires_grad) stack.push_back(p.get());
      }
    }
    for (auto& node : tape_) {
      if (reachable.count(node.get()) && node->requires_grad) {
        node->ensure_grad();
        for (const auto& p : node->parents) {
          if (p->requires_grad) p->ensure_grad();
        }
      }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      auto& node = **it;
      if (node.requires_grad && node.backprop && reachable.count(&node)) {
        node.backprop(node);
      }
    }
  }

 private:
  static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
      throw DimensionError(std::string(op) + ": shape mismatch " +
                           detail::shape_str(a.shape()) + " vs " +
                           detail::shape_str(b.shape()));
    }
  }

  std::vector<std::shared_ptr<detail::TensorNode>> tape_;
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// `fn` must be a pure scalar function of the input vector. Callers are
// responsible for keeping probe points away from non-smooth kinks (relu at 0,
// smooth-L1 at |d| = 1).
inline double grad_check(const std::function<double(const std::vector<double>&)>& fn,
                         const std::vector<double>& input,
                         const std::vector<double>& analytic_grad, double eps) {
  if (input.size() != analytic_grad.size()) {
    throw DimensionError("grad_check: gradient length mismatch");
  }
  double worst = 0.0;
  std::vector<double> probe = input;
  for (std::size_t i = 0; i < input.size(); ++i) {
    probe[i] = input[i] + eps;
    double up = fn(probe);
    probe[i] = input[i] - eps;
    double down = fn(probe);
    probe[i] = input[i];
    double numeric = (up - down) / (2.0 * eps);
    double denom = std::max(1.0, std::abs(analytic_grad[i]));
    worst = std::max(worst, std::abs(analytic_grad[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace rpdiar

#endif  // RPDIAR_TENSOR_HPP_
