// src/tensor.cc

// Copyright 2026  TO-RawNet Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "tensor.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace torawnet {

namespace {

bool g_grad_enabled = true;
bool g_checked = false;
int g_threads = 0;  // 0 = library default

int effective_threads() {
#ifdef _OPENMP
  return g_threads > 0 ? g_threads : omp_get_max_threads();
#else
  return 1;
#endif
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericalError(std::string("non-finite value produced by op '") +
                           op + "'");
    }
  }
}

NodePtr make_node(Shape shape, const char* op) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data.assign(shape_numel(n->shape), 0.0);
  n->op = op;
  return n;
}

// Wires a result node: grad tracking only when enabled and some input
// requires it. `parents` order defines gradient accumulation order.
Tensor finish(NodePtr out, std::vector<NodePtr> parents,
              std::function<void(TensorNode&)> backward) {
  if (g_checked) check_finite(out->data, out->op);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    out->requires_grad = true;
    out->is_leaf = false;
    out->parents = std::move(parents);
    out->backward_fn = std::move(backward);
  }
  return Tensor(out);
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }
bool checked_mode() { return g_checked; }
void set_checked_mode(bool on) { g_checked = on; }

void set_num_threads(int n) {
  g_threads = n;
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
}

int num_threads() { return effective_threads(); }

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = make_node(std::move(shape), "leaf");
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng,
                       bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.node_->data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor Tensor::kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng,
                               bool requires_grad, double negative_slope) {
  const double gain =
      std::sqrt(2.0 / (1.0 + negative_slope * negative_slope));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  return uniform(std::move(shape), bound, rng, requires_grad);
}

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf) {
    throw UsageError("mutable_data() on a non-leaf tensor");
  }
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const Shape& s = node_->shape;
  if (idx.size() != s.size()) throw ShapeError("at(): rank mismatch");
  int64_t flat = 0;
  int i = 0;
  for (int64_t v : idx) {
    flat = flat * s[i] + v;
    ++i;
  }
  return node_->data[flat];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->data = node_->data;
  n->requires_grad = node_->requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("reshape: " + shape_str(shape()) + " -> " +
                     shape_str(new_shape) + " changes element count");
  }
  auto out = make_node(new_shape, "reshape");
  out->data = node_->data;
  const int64_t n = numel();
  return finish(out, {node_}, [n](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (int64_t i = 0; i < n; ++i) p.grad[i] += self.grad[i];
  });
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     shape_str(shape()));
  }
  if (!node_->requires_grad) {
    throw UsageError(
        "backward() on a tensor detached from any grad-requiring graph");
  }
  // Topological order: parents strictly precede consumers.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      TensorNode* p = n->parents[i++].get();
      if (!seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior grads are scratch for this sweep; leaf grads persist and
  // accumulate across repeated backward() calls.
  for (TensorNode* n : order) {
    if (n->is_leaf) {
      if (n->requires_grad) n->ensure_grad();
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  TensorNode* root = node_.get();
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Convolution kernels. All fast paths assume a physically padded input
// buffer xp of width Tp = T + 2P so the tap loops carry no bounds checks.

namespace {

// y[b,o,:] (+)= sum_c sum_k w[o,c,k] * xp[b,c, t*S + k*d]
// Blocked over taps; S == 1 only.
void conv_fwd_s1(const double* xp, const double* w, const double* bias,
                 double* y, int64_t B, int64_t Ci, int64_t Tp, int64_t Co,
                 int64_t K, int64_t d, int64_t To, bool parallel) {
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t o = 0; o < Co; ++o) {
      double* yb = y + (b * Co + o) * To;
      const double b0 = bias ? bias[o] : 0.0;
      for (int64_t t = 0; t < To; ++t) yb[t] = b0;
      for (int64_t c = 0; c < Ci; ++c) {
        const double* xb = xp + (b * Ci + c) * Tp;
        const double* wk = w + (o * Ci + c) * K;
        int64_t k = 0;
        if (K == 3) {
          const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
          #pragma omp simd
          for (int64_t t = 0; t < To; ++t)
            yb[t] += w0 * xb[t] + w1 * xb[t + d] + w2 * xb[t + 2 * d];
          continue;
        }
        for (; k + 8 <= K; k += 8) {
          const double w0 = wk[k], w1 = wk[k + 1], w2 = wk[k + 2],
                       w3 = wk[k + 3], w4 = wk[k + 4], w5 = wk[k + 5],
                       w6 = wk[k + 6], w7 = wk[k + 7];
          const double* xs = xb + k * d;
          #pragma omp simd
          for (int64_t t = 0; t < To; ++t)
            yb[t] += w0 * xs[t] + w1 * xs[t + d] + w2 * xs[t + 2 * d] +
                     w3 * xs[t + 3 * d] + w4 * xs[t + 4 * d] +
                     w5 * xs[t + 5 * d] + w6 * xs[t + 6 * d] +
                     w7 * xs[t + 7 * d];
        }
        for (; k < K; ++k) {
          const double wv = wk[k];
          const double* xs = xb + k * d;
          #pragma omp simd
          for (int64_t t = 0; t < To; ++t) yb[t] += wv * xs[t];
        }
      }
    }
  }
}

// Generic stride: plain loops, used by small/strided cases only.
void conv_fwd_generic(const double* xp, const double* w, const double* bias,
                      double* y, int64_t B, int64_t Ci, int64_t Tp, int64_t Co,
                      int64_t K, int64_t S, int64_t d, int64_t To) {
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t o = 0; o < Co; ++o) {
      double* yb = y + (b * Co + o) * To;
      const double b0 = bias ? bias[o] : 0.0;
      for (int64_t t = 0; t < To; ++t) {
        double acc = b0;
        for (int64_t c = 0; c < Ci; ++c) {
          const double* xb = xp + (b * Ci + c) * Tp + t * S;
          const double* wk = w + (o * Ci + c) * K;
          for (int64_t k = 0; k < K; ++k) acc += wk[k] * xb[k * d];
        }
        yb[t] = acc;
      }
    }
  }
}

// dw[o,c,k] += sum_b sum_t dy[b,o,t] * xp[b,c, t*S + k*d]
void conv_dw(const double* xp, const double* dy, double* dw, int64_t B,
             int64_t Ci, int64_t Tp, int64_t Co, int64_t K, int64_t S,
             int64_t d, int64_t To, bool parallel) {
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (int64_t o = 0; o < Co; ++o) {
    for (int64_t c = 0; c < Ci; ++c) {
      double* dwk = dw + (o * Ci + c) * K;
      if (K == 3 && S == 1) {
        double s0 = 0, s1 = 0, s2 = 0;
        for (int64_t b = 0; b < B; ++b) {
          const double* xs = xp + (b * Ci + c) * Tp;
          const double* dyb = dy + (b * Co + o) * To;
          #pragma omp simd reduction(+ : s0, s1, s2)
          for (int64_t t = 0; t < To; ++t) {
            const double v = dyb[t];
            s0 += v * xs[t];
            s1 += v * xs[t + d];
            s2 += v * xs[t + 2 * d];
          }
        }
        dwk[0] += s0;
        dwk[1] += s1;
        dwk[2] += s2;
        continue;
      }
      for (int64_t b = 0; b < B; ++b) {
        const double* xb = xp + (b * Ci + c) * Tp;
        const double* dyb = dy + (b * Co + o) * To;
        int64_t k = 0;
        for (; k + 4 <= K; k += 4) {
          const double* xs = xb + k * d;
          double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
          if (S == 1) {
            #pragma omp simd reduction(+ : s0, s1, s2, s3)
            for (int64_t t = 0; t < To; ++t) {
              const double v = dyb[t];
              s0 += v * xs[t];
              s1 += v * xs[t + d];
              s2 += v * xs[t + 2 * d];
              s3 += v * xs[t + 3 * d];
            }
          } else {
            for (int64_t t = 0; t < To; ++t) {
              const double v = dyb[t];
              s0 += v * xs[t * S];
              s1 += v * xs[t * S + d];
              s2 += v * xs[t * S + 2 * d];
              s3 += v * xs[t * S + 3 * d];
            }
          }
          dwk[k] += s0;
          dwk[k + 1] += s1;
          dwk[k + 2] += s2;
          dwk[k + 3] += s3;
        }
        for (; k < K; ++k) {
          const double* xs = xb + k * d;
          double s = 0;
          if (S == 1) {
            #pragma omp simd reduction(+ : s)
            for (int64_t t = 0; t < To; ++t) s += dyb[t] * xs[t];
          } else {
            for (int64_t t = 0; t < To; ++t) s += dyb[t] * xs[t * S];
          }
          dwk[k] += s;
        }
      }
    }
  }
}

// dxp[b,c,j] = sum_o sum_k w[o,c,k] * dy[b,o, (j - k*d)/S]; for S == 1 this
// is a convolution of zero-extended dy with the (o<->c, k-flipped) kernel,
// so it reuses the blocked forward shape.
void conv_dx_s1(const double* dy, const double* w, double* dxp, int64_t B,
                int64_t Ci, int64_t Tp, int64_t Co, int64_t K, int64_t d,
                int64_t To, bool parallel) {
  const int64_t M = (K - 1) * d;
  const int64_t Te = To + 2 * M;
  // Zero-extend dy once per call.
  std::vector<double> dye(static_cast<size_t>(B) * Co * Te, 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < Co; ++o)
      std::memcpy(&dye[(b * Co + o) * Te + M], dy + (b * Co + o) * To,
                  sizeof(double) * To);
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < Ci; ++c) {
      double* dst = dxp + (b * Ci + c) * Tp;
      for (int64_t o = 0; o < Co; ++o) {
        const double* src = &dye[(b * Co + o) * Te];
        const double* wk = w + (o * Ci + c) * K;
        if (K == 3) {
          const double w2 = wk[2], w1 = wk[1], w0 = wk[0];
          #pragma omp simd
          for (int64_t j = 0; j < Tp; ++j)
            dst[j] += w2 * src[j] + w1 * src[j + d] + w0 * src[j + 2 * d];
          continue;
        }
        int64_t k = 0;
        for (; k + 8 <= K; k += 8) {
          const double w0 = wk[K - 1 - k], w1 = wk[K - 2 - k],
                       w2 = wk[K - 3 - k], w3 = wk[K - 4 - k],
                       w4 = wk[K - 5 - k], w5 = wk[K - 6 - k],
                       w6 = wk[K - 7 - k], w7 = wk[K - 8 - k];
          const double* xs = src + k * d;
          #pragma omp simd
          for (int64_t j = 0; j < Tp; ++j)
            dst[j] += w0 * xs[j] + w1 * xs[j + d] + w2 * xs[j + 2 * d] +
                      w3 * xs[j + 3 * d] + w4 * xs[j + 4 * d] +
                      w5 * xs[j + 5 * d] + w6 * xs[j + 6 * d] +
                      w7 * xs[j + 7 * d];
        }
        for (; k < K; ++k) {
          const double wv = wk[K - 1 - k];
          const double* xs = src + k * d;
          #pragma omp simd
          for (int64_t j = 0; j < Tp; ++j) dst[j] += wv * xs[j];
        }
      }
    }
  }
}

void conv_dx_generic(const double* dy, const double* w, double* dxp,
                     int64_t B, int64_t Ci, int64_t Tp, int64_t Co, int64_t K,
                     int64_t S, int64_t d, int64_t To) {
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < Co; ++o) {
      const double* dyb = dy + (b * Co + o) * To;
      for (int64_t c = 0; c < Ci; ++c) {
        const double* wk = w + (o * Ci + c) * K;
        double* dst = dxp + (b * Ci + c) * Tp;
        for (int64_t t = 0; t < To; ++t)
          for (int64_t k = 0; k < K; ++k)
            dst[t * S + k * d] += wk[k] * dyb[t];
      }
    }
}

std::vector<double> pad_input(const std::vector<double>& x, int64_t B,
                              int64_t Ci, int64_t T, int64_t P) {
  const int64_t Tp = T + 2 * P;
  std::vector<double> xp(static_cast<size_t>(B) * Ci * Tp, 0.0);
  for (int64_t bc = 0; bc < B * Ci; ++bc)
    std::memcpy(&xp[bc * Tp + P], &x[bc * T], sizeof(double) * T);
  return xp;
}

}  // namespace

int64_t conv1d_out_len(int64_t T, int64_t K, const ConvSpec& spec) {
  return (T + 2 * spec.padding - spec.dilation * (K - 1) - 1) / spec.stride + 1;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  return conv1d(x, w, Tensor(), spec);
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias,
              const ConvSpec& spec) {
  if (x.ndim() != 3 || w.ndim() != 3) {
    throw ShapeError("conv1d: expected x[B,C,T], w[O,C,K], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const int64_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2);
  const int64_t Co = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Ci) {
    throw ShapeError("conv1d: input channels " + std::to_string(Ci) +
                     " vs kernel channels " + std::to_string(w.dim(1)));
  }
  if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0) {
    throw UsageError("conv1d: invalid stride/padding/dilation");
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Co)) {
    throw ShapeError("conv1d: bias must be [C_out]");
  }
  const int64_t To = conv1d_out_len(T, K, spec);
  if (To < 1) {
    throw ShapeError("conv1d: non-positive output length for T=" +
                     std::to_string(T) + ", K=" + std::to_string(K));
  }
  const int64_t S = spec.stride, P = spec.padding, d = spec.dilation;
  const int64_t Tp = T + 2 * P;

  const std::vector<double>* xin = &x.node()->data;
  std::vector<double> xp_store;
  if (P > 0) {
    xp_store = pad_input(x.node()->data, B, Ci, T, P);
    xin = &xp_store;
  }
  auto out = make_node({B, Co, To}, "conv1d");
  const bool par = B * Co * Ci * K * To > (1 << 16) && num_threads() > 1;
  const double* bias_ptr = bias.defined() ? bias.node()->data.data() : nullptr;
  if (S == 1) {
    conv_fwd_s1(xin->data(), w.node()->data.data(), bias_ptr,
                out->data.data(), B, Ci, Tp, Co, K, d, To, par);
  } else {
    conv_fwd_generic(xin->data(), w.node()->data.data(), bias_ptr,
                     out->data.data(), B, Ci, Tp, Co, K, S, d, To);
  }

  std::vector<NodePtr> parents = {x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  const bool has_bias = bias.defined();
  auto backward = [B, Ci, T, Co, K, S, P, d, To, Tp, par,
                   has_bias](TensorNode& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    const double* dy = self.grad.data();
    if (wn.requires_grad) {
      wn.ensure_grad();
      std::vector<double> xp_store;
      const std::vector<double>* xin = &xn.data;
      if (P > 0) {
        xp_store = pad_input(xn.data, B, Ci, T, P);
        xin = &xp_store;
      }
      conv_dw(xin->data(), dy, wn.grad.data(), B, Ci, Tp, Co, K, S, d, To,
              par);
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      std::vector<double> dxp(static_cast<size_t>(B) * Ci * Tp, 0.0);
      if (S == 1) {
        conv_dx_s1(dy, wn.data.data(), dxp.data(), B, Ci, Tp, Co, K, d, To,
                   par);
      } else {
        conv_dx_generic(dy, wn.data.data(), dxp.data(), B, Ci, Tp, Co, K, S,
                        d, To);
      }
      for (int64_t bc = 0; bc < B * Ci; ++bc) {
        const double* src = &dxp[bc * Tp + P];
        double* dst = &xn.grad[bc * T];
        for (int64_t t = 0; t < T; ++t) dst[t] += src[t];
      }
    }
    if (has_bias) {
      auto& bn = *self.parents[2];
      if (bn.requires_grad) {
        bn.ensure_grad();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t o = 0; o < Co; ++o) {
            const double* dyb = dy + (b * Co + o) * To;
            double s = 0;
            #pragma omp simd reduction(+ : s)
            for (int64_t t = 0; t < To; ++t) s += dyb[t];
            bn.grad[o] += s;
          }
      }
    }
  };
  return finish(out, std::move(parents), std::move(backward));
}

// ---------------------------------------------------------------------------
// Affine

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1) {
    throw ShapeError("affine: expected x[B,Fin], w[Fout,Fin], b[Fout]");
  }
  const int64_t B = x.dim(0), Fi = x.dim(1), Fo = w.dim(0);
  if (w.dim(1) != Fi || b.dim(0) != Fo) {
    throw ShapeError("affine: inner dimensions disagree: x" +
                     shape_str(x.shape()) + " w" + shape_str(w.shape()) +
                     " b" + shape_str(b.shape()));
  }
  auto out = make_node({B, Fo}, "affine");
  const double* xd = x.node()->data.data();
  const double* wd = w.node()->data.data();
  const double* bd = b.node()->data.data();
  double* yd = out->data.data();
  const bool par = B * Fo * Fi > (1 << 16) && num_threads() > 1;
#pragma omp parallel for schedule(static) if (par)
  for (int64_t f = 0; f < Fo; ++f) {
    const double* wr = wd + f * Fi;
    for (int64_t bi = 0; bi < B; ++bi) {
      const double* xr = xd + bi * Fi;
      double s = 0;
      #pragma omp simd reduction(+ : s)
      for (int64_t i = 0; i < Fi; ++i) s += xr[i] * wr[i];
      yd[bi * Fo + f] = s + bd[f];
    }
  }
  auto backward = [B, Fi, Fo, par](TensorNode& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    const double* dy = self.grad.data();
    if (xn.requires_grad) {
      xn.ensure_grad();
      // dx[b,:] += sum_f dy[b,f] * w[f,:]
      for (int64_t bi = 0; bi < B; ++bi) {
        double* dx = &xn.grad[bi * Fi];
        for (int64_t f = 0; f < Fo; ++f) {
          const double g = dy[bi * Fo + f];
          const double* wr = &wn.data[f * Fi];
          #pragma omp simd
          for (int64_t i = 0; i < Fi; ++i) dx[i] += g * wr[i];
        }
      }
    }
    if (wn.requires_grad) {
      wn.ensure_grad();
#pragma omp parallel for schedule(static) if (par)
      for (int64_t f = 0; f < Fo; ++f) {
        double* dwr = &wn.grad[f * Fi];
        for (int64_t bi = 0; bi < B; ++bi) {
          const double g = dy[bi * Fo + f];
          const double* xr = &xn.data[bi * Fi];
          #pragma omp simd
          for (int64_t i = 0; i < Fi; ++i) dwr[i] += g * xr[i];
        }
      }
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t f = 0; f < Fo; ++f) bn.grad[f] += dy[bi * Fo + f];
    }
  };
  return finish(out, {x.node(), w.node(), b.node()}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class Unary { kSigmoid, kTanh, kLeakyRelu };

Tensor unary_op(Unary kind, const Tensor& x, double slope, const char* name) {
  auto out = make_node(x.shape(), name);
  const auto& xd = x.node()->data;
  auto& yd = out->data;
  const int64_t n = x.numel();
  switch (kind) {
    case Unary::kSigmoid:
      for (int64_t i = 0; i < n; ++i) yd[i] = 1.0 / (1.0 + std::exp(-xd[i]));
      break;
    case Unary::kTanh:
      for (int64_t i = 0; i < n; ++i) yd[i] = std::tanh(xd[i]);
      break;
    case Unary::kLeakyRelu: {
      const bool par = n > (1 << 18) && num_threads() > 1;
#pragma omp parallel for schedule(static) if (par)
      for (int64_t i = 0; i < n; ++i)
        yd[i] = xd[i] >= 0.0 ? xd[i] : slope * xd[i];
      break;
    }
  }
  auto backward = [kind, slope, n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* dy = self.grad.data();
    const double* y = self.data.data();
    const double* xv = p.data.data();
    double* dx = p.grad.data();
    switch (kind) {
      case Unary::kSigmoid:
        for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
        break;
      case Unary::kTanh:
        for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (1.0 - y[i] * y[i]);
        break;
      case Unary::kLeakyRelu: {
        const bool par = n > (1 << 18) && num_threads() > 1;
#pragma omp parallel for schedule(static) if (par)
        for (int64_t i = 0; i < n; ++i)
          dx[i] += dy[i] * (xv[i] >= 0.0 ? 1.0 : slope);
        break;
      }
    }
  };
  return finish(out, {x.node()}, std::move(backward));
}

// Broadcast layout: rhs shape equals lhs on a leading prefix, all remaining
// rhs dims are 1. Returns the repeat count (= numel(lhs)/numel(rhs)).
int64_t broadcast_tail(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw ShapeError("broadcast: rank mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  }
  bool tail = false;
  int64_t rep = 1;
  for (size_t i = 0; i < a.size(); ++i) {
    if (tail || a[i] != b[i]) {
      if (b[i] != 1) {
        throw ShapeError("broadcast limited to trailing singleton dims: " +
                         shape_str(a) + " vs " + shape_str(b));
      }
      tail = true;
      rep *= a[i];
    }
  }
  return rep;
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary_op(Binary kind, const Tensor& a, const Tensor& b,
                 const char* name) {
  const int64_t rep = broadcast_tail(a.shape(), b.shape());
  auto out = make_node(a.shape(), name);
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  auto& yd = out->data;
  const int64_t nb = b.numel();
  const int64_t n = a.numel();
  const bool par = n > (1 << 18) && num_threads() > 1;
  switch (kind) {
    case Binary::kAdd:
#pragma omp parallel for schedule(static) if (par)
      for (int64_t j = 0; j < nb; ++j) {
        const double bv = bd[j];
        for (int64_t r = 0; r < rep; ++r) yd[j * rep + r] = ad[j * rep + r] + bv;
      }
      break;
    case Binary::kSub:
#pragma omp parallel for schedule(static) if (par)
      for (int64_t j = 0; j < nb; ++j) {
        const double bv = bd[j];
        for (int64_t r = 0; r < rep; ++r) yd[j * rep + r] = ad[j * rep + r] - bv;
      }
      break;
    case Binary::kMul:
#pragma omp parallel for schedule(static) if (par)
      for (int64_t j = 0; j < nb; ++j) {
        const double bv = bd[j];
        for (int64_t r = 0; r < rep; ++r) yd[j * rep + r] = ad[j * rep + r] * bv;
      }
      break;
  }
  auto backward = [kind, rep, nb](TensorNode& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const double* dy = self.grad.data();
    if (an.requires_grad) {
      an.ensure_grad();
      double* da = an.grad.data();
      const int64_t n = static_cast<int64_t>(an.data.size());
      switch (kind) {
        case Binary::kAdd:
        case Binary::kSub:
          for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
          break;
        case Binary::kMul:
          for (int64_t j = 0; j < nb; ++j) {
            const double bv = bn.data[j];
            for (int64_t r = 0; r < rep; ++r)
              da[j * rep + r] += dy[j * rep + r] * bv;
          }
          break;
      }
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      double* db = bn.grad.data();
      const double sign = kind == Binary::kSub ? -1.0 : 1.0;
      switch (kind) {
        case Binary::kAdd:
        case Binary::kSub:
          for (int64_t j = 0; j < nb; ++j) {
            double s = 0;
            for (int64_t r = 0; r < rep; ++r) s += dy[j * rep + r];
            db[j] += sign * s;
          }
          break;
        case Binary::kMul:
          for (int64_t j = 0; j < nb; ++j) {
            double s = 0;
            for (int64_t r = 0; r < rep; ++r)
              s += dy[j * rep + r] * an.data[j * rep + r];
            db[j] += s;
          }
          break;
      }
    }
  };
  return finish(out, {a.node(), b.node()}, std::move(backward));
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary_op(Unary::kSigmoid, x, 0.0, "sigmoid");
}
Tensor tanh(const Tensor& x) { return unary_op(Unary::kTanh, x, 0.0, "tanh"); }
Tensor leaky_relu(const Tensor& x, double negative_slope) {
  return unary_op(Unary::kLeakyRelu, x, negative_slope, "leaky_relu");
}
Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(Binary::kAdd, a, b, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(Binary::kSub, a, b, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(Binary::kMul, a, b, "mul");
}

Tensor scale(const Tensor& x, double c) {
  auto out = make_node(x.shape(), "scale");
  const auto& xd = x.node()->data;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out->data[i] = c * xd[i];
  auto backward = [c, n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < n; ++i) p.grad[i] += c * self.grad[i];
  };
  return finish(out, {x.node()}, std::move(backward));
}

Tensor sqrt(const Tensor& x) {
  auto out = make_node(x.shape(), "sqrt");
  const auto& xd = x.node()->data;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (xd[i] < 0.0) throw NumericalError("sqrt of a negative value");
    out->data[i] = std::sqrt(xd[i]);
  }
  auto backward = [n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      // Subgradient 0 at the origin.
      if (self.data[i] > 0.0) p.grad[i] += self.grad[i] * 0.5 / self.data[i];
    }
  };
  return finish(out, {x.node()}, std::move(backward));
}

Tensor elementwise(std::string_view op_name, const Tensor& x) {
  if (op_name == "sigmoid") return sigmoid(x);
  if (op_name == "tanh") return tanh(x);
  if (op_name == "leaky_relu") return leaky_relu(x);
  if (op_name == "sqrt") return sqrt(x);
  throw UsageError("elementwise: unknown unary op '" + std::string(op_name) +
                   "'");
}

Tensor elementwise(std::string_view op_name, const Tensor& a,
                   const Tensor& b) {
  if (op_name == "add") return add(a, b);
  if (op_name == "sub") return sub(a, b);
  if (op_name == "mul") return mul(a, b);
  throw UsageError("elementwise: unknown binary op '" + std::string(op_name) +
                   "'");
}

Tensor elementwise(std::string_view op_name, const Tensor& x, double c) {
  if (op_name == "scale") return scale(x, c);
  if (op_name == "leaky_relu") return leaky_relu(x, c);
  throw UsageError("elementwise: unknown parametric op '" +
                   std::string(op_name) + "'");
}

// ---------------------------------------------------------------------------
// Reductions / structure

Tensor sum(const Tensor& x) {
  auto out = make_node({1}, "sum");
  const auto& xd = x.node()->data;
  double s = 0;
  for (double v : xd) s += v;
  out->data[0] = s;
  const int64_t n = x.numel();
  auto backward = [n](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    for (int64_t i = 0; i < n; ++i) p.grad[i] += g;
  };
  return finish(out, {x.node()}, std::move(backward));
}

Tensor mean_lastdim(const Tensor& x) {
  if (x.ndim() < 1) throw ShapeError("mean_lastdim: rank-0 input");
  const int64_t T = x.shape().back();
  Shape os(x.shape().begin(), x.shape().end() - 1);
  if (os.empty()) os = {1};
  auto out = make_node(os, "mean_lastdim");
  const int64_t rows = out->numel();
  const auto& xd = x.node()->data;
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    const double* row = &xd[r * T];
    #pragma omp simd reduction(+ : s)
    for (int64_t t = 0; t < T; ++t) s += row[t];
    out->data[r] = s / static_cast<double>(T);
  }
  auto backward = [rows, T](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double g = self.grad[r] / static_cast<double>(T);
      double* dst = &p.grad[r * T];
      for (int64_t t = 0; t < T; ++t) dst[t] += g;
    }
  };
  return finish(out, {x.node()}, std::move(backward));
}

Tensor slice_lastdim(const Tensor& x, int64_t t) {
  const int64_t T = x.shape().back();
  if (t < 0 || t >= T) throw ShapeError("slice_lastdim: index out of range");
  Shape os(x.shape().begin(), x.shape().end() - 1);
  if (os.empty()) os = {1};
  auto out = make_node(os, "slice_lastdim");
  const int64_t rows = out->numel();
  const auto& xd = x.node()->data;
  for (int64_t r = 0; r < rows; ++r) out->data[r] = xd[r * T + t];
  auto backward = [rows, T, t](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) p.grad[r * T + t] += self.grad[r];
  };
  return finish(out, {x.node()}, std::move(backward));
}

Tensor max_pool1d(const Tensor& x, int64_t factor) {
  if (x.ndim() != 3) throw ShapeError("max_pool1d: expected [B,C,T]");
  if (factor < 1) throw UsageError("max_pool1d: factor must be >= 1");
  const int64_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  const int64_t To = T / factor;
  if (To < 1) throw ShapeError("max_pool1d: time dimension too short");
  auto out = make_node({B, C, To}, "max_pool1d");
  auto argmax = std::make_shared<std::vector<int64_t>>(B * C * To);
  const auto& xd = x.node()->data;
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* row = &xd[bc * T];
    for (int64_t t = 0; t < To; ++t) {
      int64_t best = t * factor;
      double bv = row[best];
      for (int64_t k = 1; k < factor; ++k) {
        const int64_t i = t * factor + k;
        if (row[i] > bv) {
          bv = row[i];
          best = i;
        }
      }
      out->data[bc * To + t] = bv;
      (*argmax)[bc * To + t] = best;
    }
  }
  auto backward = [B, C, T, To, argmax](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t t = 0; t < To; ++t)
        p.grad[bc * T + (*argmax)[bc * To + t]] += self.grad[bc * To + t];
  };
  return finish(out, {x.node()}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Batch normalization

Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, bool train, double eps,
                   double momentum) {
  if (x.ndim() != 3) throw ShapeError("batchnorm1d: expected [B,C,T]");
  const int64_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  if (gamma.numel() != C || beta.numel() != C ||
      static_cast<int64_t>(state.running_mean.size()) != C) {
    throw ShapeError("batchnorm1d: channel width mismatch");
  }
  if (train && B * T < 2) {
    throw UsageError("batchnorm1d: train mode needs B*T >= 2");
  }
  const int64_t N = B * T;
  auto mean = std::make_shared<std::vector<double>>(C, 0.0);
  auto invstd = std::make_shared<std::vector<double>>(C, 0.0);
  const bool par_stats = B * C * T > (1 << 18) && num_threads() > 1;
  if (train) {
    std::atomic<int64_t> bad_channel{-1};
#pragma omp parallel for schedule(static) if (par_stats)
    for (int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (int64_t b = 0; b < B; ++b) {
        const double* row = &x.node()->data[(b * C + c) * T];
        #pragma omp simd reduction(+ : s)
        for (int64_t t = 0; t < T; ++t) s += row[t];
      }
      const double m = s / static_cast<double>(N);
      double v = 0;
      for (int64_t b = 0; b < B; ++b) {
        const double* row = &x.node()->data[(b * C + c) * T];
        #pragma omp simd reduction(+ : v)
        for (int64_t t = 0; t < T; ++t) v += (row[t] - m) * (row[t] - m);
      }
      v /= static_cast<double>(N);
      if (v + eps <= 0.0) {
        bad_channel = c;
        continue;
      }
      (*mean)[c] = m;
      (*invstd)[c] = 1.0 / std::sqrt(v + eps);
      state.running_mean[c] =
          (1.0 - momentum) * state.running_mean[c] + momentum * m;
      state.running_var[c] =
          (1.0 - momentum) * state.running_var[c] + momentum * v;
    }
    if (bad_channel >= 0) {
      throw NumericalError(
          "batchnorm1d: zero variance with eps=0 in channel " +
          std::to_string(bad_channel));
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      const double v = state.running_var[c];
      if (v + eps <= 0.0) {
        throw NumericalError("batchnorm1d: zero variance with eps=0 in channel " +
                             std::to_string(c));
      }
      (*mean)[c] = state.running_mean[c];
      (*invstd)[c] = 1.0 / std::sqrt(v + eps);
    }
  }
  auto out = make_node({B, C, T}, "batchnorm1d");
  const bool par = B * C * T > (1 << 18) && num_threads() > 1;
  {
    const double* xd = x.node()->data.data();
    const double* gd = gamma.node()->data.data();
    const double* bd = beta.node()->data.data();
    double* yd = out->data.data();
#pragma omp parallel for collapse(2) schedule(static) if (par)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double m = (*mean)[c], is = (*invstd)[c];
        const double g = gd[c], be = bd[c];
        const double* row = xd + (b * C + c) * T;
        double* orow = yd + (b * C + c) * T;
        #pragma omp simd
        for (int64_t t = 0; t < T; ++t) orow[t] = g * (row[t] - m) * is + be;
      }
  }
  auto backward = [B, C, T, N, mean, invstd, train, par](TensorNode& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    const double* dy = self.grad.data();
    const double* xd = xn.data.data();
    // Per-channel sums of dy and dy*xhat (also the gamma/beta grads).
    std::vector<double> sum_dy(C, 0.0), sum_dyx(C, 0.0);
#pragma omp parallel for schedule(static) if (par)
    for (int64_t c = 0; c < C; ++c) {
      const double m = (*mean)[c], is = (*invstd)[c];
      double s1 = 0, s2 = 0;
      for (int64_t b = 0; b < B; ++b) {
        const double* row = xd + (b * C + c) * T;
        const double* drow = dy + (b * C + c) * T;
        #pragma omp simd reduction(+ : s1, s2)
        for (int64_t t = 0; t < T; ++t) {
          s1 += drow[t];
          s2 += drow[t] * (row[t] - m) * is;
        }
      }
      sum_dy[c] = s1;
      sum_dyx[c] = s2;
    }
    if (gn.requires_grad) {
      gn.ensure_grad();
      for (int64_t c = 0; c < C; ++c) gn.grad[c] += sum_dyx[c];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t c = 0; c < C; ++c) bn.grad[c] += sum_dy[c];
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      double* dx = xn.grad.data();
      if (train) {
#pragma omp parallel for collapse(2) schedule(static) if (par)
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c) {
            const double m = (*mean)[c], is = (*invstd)[c];
            const double g = gn.data[c];
            const double k1 = sum_dy[c] / static_cast<double>(N);
            const double k2 = sum_dyx[c] / static_cast<double>(N);
            const double* row = xd + (b * C + c) * T;
            const double* drow = dy + (b * C + c) * T;
            double* dst = dx + (b * C + c) * T;
            #pragma omp simd
            for (int64_t t = 0; t < T; ++t) {
              const double xh = (row[t] - m) * is;
              dst[t] += g * is * (drow[t] - k1 - xh * k2);
            }
          }
      } else {
#pragma omp parallel for collapse(2) schedule(static) if (par)
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c) {
            const double gis = gn.data[c] * (*invstd)[c];
            const double* drow = dy + (b * C + c) * T;
            double* dst = dx + (b * C + c) * T;
            #pragma omp simd
            for (int64_t t = 0; t < T; ++t) dst[t] += gis * drow[t];
          }
      }
    }
  };
  return finish(out, {x.node(), gamma.node(), beta.node()},
                std::move(backward));
}

// ---------------------------------------------------------------------------
// Cross entropy

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  return cross_entropy(logits, labels, {});
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>& class_weights) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: expected [B,n]");
  const int64_t B = logits.dim(0), n = logits.dim(1);
  if (B == 0) throw UsageError("cross_entropy: empty batch");
  if (static_cast<int64_t>(labels.size()) != B) {
    throw ShapeError("cross_entropy: labels size mismatch");
  }
  for (int l : labels) {
    if (l < 0 || l >= n) throw DataError("cross_entropy: label out of range");
  }
  auto softmax = std::make_shared<std::vector<double>>(B * n);
  auto wts = std::make_shared<std::vector<double>>(B, 1.0);
  double wsum = 0.0;
  if (!class_weights.empty()) {
    for (int64_t b = 0; b < B; ++b) (*wts)[b] = class_weights[labels[b]];
  }
  for (int64_t b = 0; b < B; ++b) wsum += (*wts)[b];
  auto out = make_node({1}, "cross_entropy");
  const auto& ld = logits.node()->data;
  double loss = 0;
  for (int64_t b = 0; b < B; ++b) {
    const double* row = &ld[b * n];
    double m = row[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, row[i]);
    double z = 0;
    for (int64_t i = 0; i < n; ++i) z += std::exp(row[i] - m);
    const double lse = m + std::log(z);
    for (int64_t i = 0; i < n; ++i)
      (*softmax)[b * n + i] = std::exp(row[i] - m) / z;
    loss += (*wts)[b] * (lse - row[labels[b]]);
  }
  out->data[0] = loss / wsum;
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  auto backward = [B, n, softmax, labels_copy, wts, wsum](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0] / wsum;
    for (int64_t b = 0; b < B; ++b) {
      const double wb = (*wts)[b] * g;
      for (int64_t i = 0; i < n; ++i) {
        const double ind = i == (*labels_copy)[b] ? 1.0 : 0.0;
        p.grad[b * n + i] += wb * ((*softmax)[b * n + i] - ind);
      }
    }
  };
  return finish(out, {logits.node()}, std::move(backward));
}

}  // namespace torawnet
