// src/orth.cc

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

#include "orth.h"

#include <cmath>

namespace torawnet {

int64_t compute_padding(int64_t kernel_size, int64_t stride) {
  if (kernel_size < 1 || stride < 1) {
    throw UsageError("compute_padding: kernel_size and stride must be >= 1");
  }
  return ((kernel_size - 1) / stride) * stride;
}

Tensor self_convolution(const Tensor& kernel, int64_t stride) {
  if (kernel.ndim() != 3) {
    throw ShapeError("self_convolution: expected kernel [O,I,K]");
  }
  const int64_t K = kernel.dim(2);
  const int64_t P = compute_padding(K, stride);
  return conv1d(kernel, kernel, ConvSpec{stride, P, 1});
}

Tensor identity_target(int64_t out_channels, int64_t out_len) {
  Tensor t = Tensor::zeros({out_channels, out_channels, out_len});
  const int64_t center = out_len / 2;
  auto d = t.mutable_data();
  for (int64_t i = 0; i < out_channels; ++i) {
    d[(i * out_channels + i) * out_len + center] = 1.0;
  }
  return t;
}

Tensor orth_loss(const Tensor& kernel, const OrthRegConfig& cfg) {
  Tensor z = self_convolution(kernel, cfg.stride);
  Tensor target = identity_target(z.dim(0), z.dim(2));
  Tensor diff = sub(z, target);
  Tensor sq = sum(mul(diff, diff));
  if (cfg.norm == OrthRegConfig::Norm::kPlain) return sqrt(sq);
  return sq;
}

DbtMatrix build_dbt_matrix(const Tensor& kernel, int64_t t1,
                           const ConvSpec& spec) {
  if (kernel.ndim() != 3) {
    throw ShapeError("build_dbt_matrix: expected kernel [O,I,K]");
  }
  const int64_t O = kernel.dim(0), I = kernel.dim(1), K = kernel.dim(2);
  const int64_t t2 = conv1d_out_len(t1, K, spec);
  if (t2 < 1) {
    throw ShapeError("build_dbt_matrix: T1=" + std::to_string(t1) +
                     " gives empty output");
  }
  DbtMatrix m;
  m.out_channels = O;
  m.in_channels = I;
  m.t1 = t1;
  m.t2 = t2;
  m.matrix = Tensor::zeros({O * t2, I * t1});
  auto md = m.matrix.mutable_data();
  const auto kd = kernel.data();
  const int64_t cols = I * t1;
  for (int64_t o = 0; o < O; ++o) {
    for (int64_t t = 0; t < t2; ++t) {
      double* row = md.data() + (o * t2 + t) * cols;
      for (int64_t c = 0; c < I; ++c) {
        for (int64_t k = 0; k < K; ++k) {
          const int64_t i = t * spec.stride + k * spec.dilation - spec.padding;
          if (i >= 0 && i < t1) {
            row[c * t1 + i] = kd[(o * I + c) * K + k];
          }
        }
      }
    }
  }
  return m;
}

double dbt_orthogonality_residual(const DbtMatrix& m) {
  const int64_t rows = m.matrix.dim(0);
  const int64_t cols = m.matrix.dim(1);
  const auto md = m.matrix.data();
  double acc = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const double* a = md.data() + r * cols;
    for (int64_t s = 0; s < rows; ++s) {
      const double* b = md.data() + s * cols;
      double dot = 0.0;
      #pragma omp simd reduction(+ : dot)
      for (int64_t c = 0; c < cols; ++c) dot += a[c] * b[c];
      const double target = r == s ? 1.0 : 0.0;
      acc += (dot - target) * (dot - target);
    }
  }
  return acc;
}

Tensor total_loss(const Tensor& task_loss, const std::vector<Tensor>& kernels,
                  const OrthRegConfig& cfg) {
  if (cfg.lambda < 0.0) throw UsageError("total_loss: lambda must be >= 0");
  if (cfg.lambda == 0.0 || kernels.empty()) return task_loss;
  Tensor reg;
  for (const Tensor& k : kernels) {
    Tensor l = orth_loss(k, cfg);
    reg = reg.defined() ? add(reg, l) : l;
  }
  return add(task_loss, scale(reg, cfg.lambda));
}

}  // namespace torawnet
