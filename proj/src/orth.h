// src/orth.h

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

#ifndef TORAWNET_ORTH_H_
#define TORAWNET_ORTH_H_

#include <vector>

#include "tensor.h"

namespace torawnet {

// Orthogonal-convolution regularizer. A conv kernel [O, I, K] is (row-)
// orthogonal as a doubly block-Toeplitz operator exactly when its
// self-convolution equals an identity-centered target; the loss penalizes
// the Frobenius distance between the two.
struct OrthRegConfig {
  int64_t stride = 1;
  double lambda = 0.1;
  // The squared Frobenius norm is the canonical loss; the plain norm is the
  // ablation variant.
  enum class Norm { kSquared, kPlain };
  Norm norm = Norm::kSquared;
};

// P = floor((K-1)/S) * S; divisible by S by construction.
int64_t compute_padding(int64_t kernel_size, int64_t stride);

// Z = Conv(K, K, padding = compute_padding(K, S), stride = S): the kernel is
// treated as a batch of O inputs with I channels and convolved with itself.
// Output is [O, O, L] with L = 2P/S + 1 (odd); Z[i, j, center] is the Gram
// matrix of the flattened filters.
Tensor self_convolution(const Tensor& kernel, int64_t stride = 1);

// Zeros except an O x O identity in the center time slice.
Tensor identity_target(int64_t out_channels, int64_t out_len);

// || Z - I_r0 ||_F^2 (or the plain norm under cfg.norm), differentiable
// through the kernel.
Tensor orth_loss(const Tensor& kernel, const OrthRegConfig& cfg);

// Explicit doubly block-Toeplitz matrix realizing conv1d: flattening an
// input x[I, T1] row-major gives  M * flat(x) == flat(conv1d(x, kernel)).
struct DbtMatrix {
  Tensor matrix;  // [(O*T2), (I*T1)], no gradient tracking
  int64_t out_channels = 0;
  int64_t in_channels = 0;
  int64_t t1 = 0;
  int64_t t2 = 0;
};

DbtMatrix build_dbt_matrix(const Tensor& kernel, int64_t t1,
                           const ConvSpec& spec);

// || M M^T - I ||_F^2 over rows: distance from exact row orthonormality.
// Verification tool only (quadratic in O*T2), not a training loss.
double dbt_orthogonality_residual(const DbtMatrix& m);

// L = L_task + lambda * sum(orth_loss(k)) over the regularized kernel set.
// lambda == 0 returns task_loss unchanged.
Tensor total_loss(const Tensor& task_loss, const std::vector<Tensor>& kernels,
                  const OrthRegConfig& cfg);

}  // namespace torawnet

#endif  // TORAWNET_ORTH_H_
