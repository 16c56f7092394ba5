// src/tcn.cc

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

#include "tcn.h"

#include <iostream>

namespace torawnet {

DilatedBlockParams init_dilated_block(const DilatedBlockConfig& cfg,
                                      Rng& rng) {
  if (cfg.kernel_size % 2 == 0) {
    throw UsageError("dilated block: kernel_size must be odd");
  }
  if (cfg.dilation < 1) throw UsageError("dilated block: dilation must be >= 1");
  DilatedBlockParams p;
  p.bn_gamma = Tensor::full({cfg.channels_in}, 1.0, true);
  p.bn_beta = Tensor::zeros({cfg.channels_in}, true);
  p.bn_state = BatchNormState(cfg.channels_in);
  p.w_dil = Tensor::kaiming_uniform(
      {cfg.channels_out, cfg.channels_in, cfg.kernel_size},
      cfg.channels_in * cfg.kernel_size, rng, true, cfg.leaky_slope);
  p.b_dil = Tensor::zeros({cfg.channels_out}, true);
  p.w_pw = Tensor::kaiming_uniform({cfg.channels_out, cfg.channels_out, 1},
                                   cfg.channels_out, rng, true,
                                   cfg.leaky_slope);
  p.b_pw = Tensor::zeros({cfg.channels_out}, true);
  if (cfg.channels_in != cfg.channels_out) {
    p.w_short = Tensor::kaiming_uniform({cfg.channels_out, cfg.channels_in, 1},
                                        cfg.channels_in, rng, true,
                                        cfg.leaky_slope);
    p.b_short = Tensor::zeros({cfg.channels_out}, true);
  }
  return p;
}

Tensor dilated_block_forward(const Tensor& x, const DilatedBlockConfig& cfg,
                             DilatedBlockParams& params, bool train) {
  if (x.ndim() != 3 || x.dim(1) != cfg.channels_in) {
    throw ShapeError("dilated block: expected [B," +
                     std::to_string(cfg.channels_in) + ",T], got " +
                     shape_str(x.shape()));
  }
  const int64_t T = x.dim(2);
  if (T <= cfg.dilation * (cfg.kernel_size - 1)) {
    throw ShapeError("dilated block: time length " + std::to_string(T) +
                     " too short for dilation " + std::to_string(cfg.dilation));
  }
  Tensor h = batchnorm1d(x, params.bn_gamma, params.bn_beta, params.bn_state,
                         train);
  h = leaky_relu(h, cfg.leaky_slope);
  const int64_t pad = cfg.dilation * (cfg.kernel_size - 1) / 2;
  h = conv1d(h, params.w_dil, params.b_dil, ConvSpec{1, pad, cfg.dilation});
  h = conv1d(h, params.w_pw, params.b_pw, ConvSpec{1, 0, 1});
  if (!cfg.use_residual) return h;
  Tensor shortcut =
      params.w_short.defined()
          ? conv1d(x, params.w_short, params.b_short, ConvSpec{1, 0, 1})
          : x;
  return add(shortcut, h);
}

std::vector<int64_t> dilation_schedule(int64_t n_blocks,
                                       int64_t max_dilation) {
  if (n_blocks < 1) throw UsageError("dilation_schedule: n_blocks must be >= 1");
  if (max_dilation < 1 || (max_dilation & (max_dilation - 1)) != 0) {
    throw UsageError("dilation_schedule: max_dilation must be a power of two");
  }
  std::vector<int64_t> cycle;
  for (int64_t d = 1; d <= max_dilation; d *= 2) cycle.push_back(d);
  if (n_blocks % static_cast<int64_t>(cycle.size()) != 0) {
    std::cerr << "warning: dilation_schedule truncates a partial cycle ("
              << n_blocks << " blocks, cycle length " << cycle.size() << ")\n";
  }
  std::vector<int64_t> sched(n_blocks);
  for (int64_t i = 0; i < n_blocks; ++i) sched[i] = cycle[i % cycle.size()];
  return sched;
}

ReceptiveField receptive_field(const std::vector<int64_t>& schedule,
                               int64_t kernel_size, int64_t pool_factor,
                               int64_t blocks_per_residual) {
  ReceptiveField rf;
  int64_t pool_mult = 1;
  for (size_t b = 0; b < schedule.size(); ++b) {
    const int64_t span = (kernel_size - 1) * schedule[b];
    rf.no_pool += span;
    rf.with_pool += span * pool_mult;
    if ((b + 1) % static_cast<size_t>(blocks_per_residual) == 0) {
      pool_mult *= pool_factor;
    }
  }
  return rf;
}

FmsParams init_fms(int64_t channels, Rng& rng) {
  FmsParams p;
  p.weight = Tensor::kaiming_uniform({channels, channels}, channels, rng, true);
  p.bias = Tensor::zeros({channels}, true);
  return p;
}

Tensor fms(const Tensor& x, const FmsParams& params) {
  if (x.ndim() != 3) throw ShapeError("fms: expected [B,C,T]");
  const int64_t B = x.dim(0), C = x.dim(1);
  if (params.weight.dim(0) != C) {
    throw ShapeError("fms: channel width mismatch");
  }
  Tensor s = sigmoid(affine(mean_lastdim(x), params.weight, params.bias));
  Tensor s3 = s.reshape({B, C, 1});
  return add(mul(x, s3), s3);
}

std::vector<DilatedBlockConfig> StackConfig::block_configs() const {
  const auto sched =
      use_tcn ? dilation_schedule(n_blocks(), max_dilation)
              : std::vector<int64_t>(n_blocks(), 1);
  std::vector<DilatedBlockConfig> cfgs(n_blocks());
  // First two residual blocks run at c1, the remaining four at c2.
  int64_t prev = in_channels;
  for (int64_t b = 0; b < n_blocks(); ++b) {
    const int64_t r = b / dilated_per_residual;
    DilatedBlockConfig c;
    c.channels_in = prev;
    c.channels_out = r < 2 ? c1 : c2;
    c.kernel_size = kernel_size;
    c.dilation = sched[b];
    c.leaky_slope = leaky_slope;
    cfgs[b] = c;
    prev = c.channels_out;
  }
  return cfgs;
}

StackParams init_stack(const StackConfig& cfg, Rng& rng) {
  StackParams p;
  const auto cfgs = cfg.block_configs();
  p.blocks.reserve(cfgs.size());
  for (const auto& bc : cfgs) p.blocks.push_back(init_dilated_block(bc, rng));
  for (int64_t r = 0; r < cfg.n_residual_blocks; ++r) {
    const int64_t c = cfgs[(r + 1) * cfg.dilated_per_residual - 1].channels_out;
    p.fms.push_back(init_fms(c, rng));
  }
  return p;
}

Tensor stack_forward(const Tensor& x, const StackConfig& cfg,
                     StackParams& params, bool train) {
  if (x.ndim() != 3 || x.dim(1) != cfg.in_channels) {
    throw ShapeError("stack_forward: expected [B," +
                     std::to_string(cfg.in_channels) + ",T]");
  }
  const auto cfgs = cfg.block_configs();
  Tensor h = x;
  for (int64_t r = 0; r < cfg.n_residual_blocks; ++r) {
    for (int64_t j = 0; j < cfg.dilated_per_residual; ++j) {
      const int64_t b = r * cfg.dilated_per_residual + j;
      h = dilated_block_forward(h, cfgs[b], params.blocks[b], train);
    }
    if (cfg.pool_factor > 1) h = max_pool1d(h, cfg.pool_factor);
    h = fms(h, params.fms[r]);
  }
  return h;
}

}  // namespace torawnet
