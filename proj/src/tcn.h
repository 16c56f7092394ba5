// src/tcn.h

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

#ifndef TORAWNET_TCN_H_
#define TORAWNET_TCN_H_

#include <cstdint>
#include <vector>

#include "rng.h"
#include "tensor.h"

namespace torawnet {

// One dilated residual unit: BN -> leaky ReLU -> dilated conv -> 1x1 conv,
// added to an identity (or 1x1-projected) shortcut. Symmetric padding
// dilation*(K-1)/2 keeps the time length.
struct DilatedBlockConfig {
  int64_t channels_in = 0;
  int64_t channels_out = 0;
  int64_t kernel_size = 3;  // odd
  int64_t dilation = 1;
  bool use_residual = true;
  double leaky_slope = 0.01;
};

struct DilatedBlockParams {
  Tensor bn_gamma, bn_beta;
  BatchNormState bn_state;
  Tensor w_dil, b_dil;      // [C_out, C_in, K]
  Tensor w_pw, b_pw;        // [C_out, C_out, 1]
  Tensor w_short, b_short;  // [C_out, C_in, 1], only when C_in != C_out
};

DilatedBlockParams init_dilated_block(const DilatedBlockConfig& cfg, Rng& rng);

Tensor dilated_block_forward(const Tensor& x, const DilatedBlockConfig& cfg,
                             DilatedBlockParams& params, bool train);

// Doubling-then-repeat dilation plan: (1, 2, 4, ..., max) cycled to n_blocks.
// A partial final cycle is truncated (with a warning on stderr).
std::vector<int64_t> dilation_schedule(int64_t n_blocks = 12,
                                       int64_t max_dilation = 32);

struct ReceptiveField {
  int64_t no_pool = 1;
  int64_t with_pool = 1;
};

// 1 + sum_b (K-1) * dilation_b; the with_pool figure scales each block's
// contribution by the pooling accumulated in front of it.
ReceptiveField receptive_field(const std::vector<int64_t>& schedule,
                               int64_t kernel_size, int64_t pool_factor = 3,
                               int64_t blocks_per_residual = 2);

// Sigmoid-gated per-channel scale-and-add attention on a residual block
// output: s = sigmoid(affine(mean_t x)); y = x * s + s.
struct FmsParams {
  Tensor weight;  // [C, C]
  Tensor bias;    // [C]
};

FmsParams init_fms(int64_t channels, Rng& rng);
Tensor fms(const Tensor& x, const FmsParams& params);

// Six residual blocks of two dilated units each, max-pool by pool_factor and
// FMS after every residual block. Channel plan: first two residual blocks at
// c1, the last four at c2.
struct StackConfig {
  int64_t in_channels = 128;
  int64_t c1 = 32;
  int64_t c2 = 64;
  int64_t n_residual_blocks = 6;
  int64_t dilated_per_residual = 2;
  int64_t kernel_size = 3;
  int64_t pool_factor = 3;  // 1 disables pooling
  int64_t max_dilation = 32;
  bool use_tcn = true;  // false: all dilations 1 (plain RawNet-style blocks)
  double leaky_slope = 0.01;

  int64_t n_blocks() const { return n_residual_blocks * dilated_per_residual; }
  std::vector<DilatedBlockConfig> block_configs() const;
};

struct StackParams {
  std::vector<DilatedBlockParams> blocks;
  std::vector<FmsParams> fms;
};

StackParams init_stack(const StackConfig& cfg, Rng& rng);
Tensor stack_forward(const Tensor& x, const StackConfig& cfg,
                     StackParams& params, bool train);

}  // namespace torawnet

#endif  // TORAWNET_TCN_H_
