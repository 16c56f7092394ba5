// src/tensor.h

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

#ifndef TORAWNET_TENSOR_H_
#define TORAWNET_TENSOR_H_

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rng.h"

namespace torawnet {

// Error taxonomy shared by the whole library; the CLI maps these onto its
// exit codes (usage=1, data=2, numerical=3).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the reverse-mode tape. Nodes are created in program order;
// `parents` keeps the saved inputs alive for the backward pass.
class TensorNode {
 public:
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same shape as data
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<NodePtr> parents;
  // Consumes this->grad, accumulates into parents' grad buffers.
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantic handle over a shared tape node. Copying a Tensor aliases
// the same storage; data is immutable once the tensor has been consumed by
// an op (only gradient accumulators and explicit leaf mutation via
// mutable_data() change afterwards).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // U(-bound, bound)
  static Tensor uniform(Shape shape, double bound, Rng& rng,
                        bool requires_grad = false);
  // Kaiming-uniform for layers followed by leaky-ReLU.
  static Tensor kaiming_uniform(Shape shape, int64_t fan_in, Rng& rng,
                                bool requires_grad = false,
                                double negative_slope = 0.01);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(int i) const { return node_->shape[i]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  std::span<const double> data() const { return node_->data; }
  // Direct mutation is reserved for leaves (parameter updates, input
  // staging); mutating an interior node would invalidate saved activations.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<int64_t> idx) const;

  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  // Reverse-mode sweep from a scalar; leaf grads accumulate across calls.
  void backward() const;

  Tensor detach() const;
  Tensor reshape(Shape new_shape) const;
  Tensor clone() const;

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Global modes

// When true (default), ops with grad-requiring inputs record the tape.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }

 private:
  bool prev_;
};

// Checked mode: every op output is scanned for NaN/Inf and raises
// NumericalError instead of propagating silently. Off by default (training
// loops opt in at the adam_step boundary instead).
bool checked_mode();
void set_checked_mode(bool on);

void set_num_threads(int n);
int num_threads();

// ---------------------------------------------------------------------------
// Primitive ops

struct ConvSpec {
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t dilation = 1;
};

// Cross-correlation (no kernel flip):
//   y[b,o,t] = sum_c sum_k w[o,c,k] * x_padded[b,c, t*S + k*d]  (+ bias[o])
// x: [B, C_in, T], w: [C_out, C_in, K] -> [B, C_out, T_out].
Tensor conv1d(const Tensor& x, const Tensor& w, const ConvSpec& spec);
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias,
              const ConvSpec& spec);
int64_t conv1d_out_len(int64_t T, int64_t K, const ConvSpec& spec);

// y = x * W^T + b; x: [B, F_in], W: [F_out, F_in], b: [F_out].
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope = 0.01);
// Binary ops broadcast the second operand over trailing singleton dims
// ([B,C,T] op [B,C,1]); ranks must match.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// Name-based dispatcher for the elementwise family.
Tensor elementwise(std::string_view op_name, const Tensor& x);
Tensor elementwise(std::string_view op_name, const Tensor& a, const Tensor& b);
Tensor elementwise(std::string_view op_name, const Tensor& x, double c);

Tensor sum(const Tensor& x);                    // -> scalar [1]
Tensor mean_lastdim(const Tensor& x);           // [..., T] -> [...]
Tensor slice_lastdim(const Tensor& x, int64_t t);  // [..., T] -> [...]
Tensor max_pool1d(const Tensor& x, int64_t factor);  // [B,C,T] -> [B,C,T/f]

// Mutable per-channel normalization statistics (not part of the tape).
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  explicit BatchNormState(int64_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// x: [B, C, T]. Train mode normalizes with batch statistics over (B, T) and
// updates the running state; eval mode consumes the running state.
Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, bool train, double eps = 1e-5,
                   double momentum = 0.1);

// Mean softmax cross-entropy; labels index the class dimension of [B, n].
// With class_weights the mean is weighted by the label's weight.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>& class_weights);

}  // namespace torawnet

#endif  // TORAWNET_TENSOR_H_
