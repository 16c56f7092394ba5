// src/sinc.h

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

#ifndef TORAWNET_SINC_H_
#define TORAWNET_SINC_H_

#include <utility>
#include <vector>

#include "tensor.h"

namespace torawnet {

enum class Window { kHamming, kRectangular };

// Trainable band-pass filterbank. Raw parameters are per-filter low cutoff
// and bandwidth in Hz; the effective band is
//   f1 = min(f_min + |f_low|, sr/2),  f2 = min(f1 + f_min + |band|, sr/2)
// so any raw value maps into (0, sr/2] and f1 <= f2.
struct SincFilterbank {
  int64_t n_filters = 0;
  int64_t filter_length = 0;  // odd
  double sample_rate = 16000.0;
  double f_min = 30.0;
  Window window = Window::kHamming;
  bool freeze = false;  // when set, cutoff parameters take no gradient
  Tensor f_low;         // [n_filters]
  Tensor band;          // [n_filters]
  std::vector<double> window_taps;  // fixed taper, length filter_length
};

// Linear-scale initialization: band edges partition [f_min, sr/2] into
// n_filters equal widths W, f_low[i] = f_min + i*W, band[i] = W.
SincFilterbank init_linear_scale(int64_t n_filters, int64_t filter_length,
                                 double sample_rate, double f_min = 30.0,
                                 Window window = Window::kHamming,
                                 bool freeze = false);

// Effective (f1, f2) per filter after the clamping map.
std::vector<std::pair<double, double>> effective_cutoffs(
    const SincFilterbank& fb);

// Materializes the [n_filters, 1, filter_length] band-pass kernel
//   g_i[m] = (2 a2 sinc(2 a2 m) - 2 a1 sinc(2 a1 m)) * window[m]
// with a = f/sr and m the centered tap index; differentiable w.r.t. the
// cutoff parameters.
Tensor materialize_kernel(const SincFilterbank& fb);

// conv1d(waveform, materialize_kernel(fb), S=1, P=0, d=1).
Tensor sinc_forward(const SincFilterbank& fb, const Tensor& waveform);

}  // namespace torawnet

#endif  // TORAWNET_SINC_H_
