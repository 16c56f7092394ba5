// src/sinc.cc

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

#include "sinc.h"

#include <cmath>

namespace torawnet {

namespace {

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// phi(a, m) = 2a * sinc(2a m) = sin(2 pi a m) / (pi m), phi(a, 0) = 2a.
double phi(double a, double m) {
  if (m == 0.0) return 2.0 * a;
  return std::sin(2.0 * M_PI * a * m) / (M_PI * m);
}

// d phi / d a = 2 cos(2 pi a m), valid at m = 0 as well.
double dphi_da(double a, double m) { return 2.0 * std::cos(2.0 * M_PI * a * m); }

}  // namespace

SincFilterbank init_linear_scale(int64_t n_filters, int64_t filter_length,
                                 double sample_rate, double f_min,
                                 Window window, bool freeze) {
  if (n_filters < 1) throw UsageError("sinc: n_filters must be >= 1");
  if (filter_length % 2 == 0) {
    throw UsageError("sinc: filter_length must be odd, got " +
                     std::to_string(filter_length));
  }
  const double nyquist = sample_rate / 2.0;
  const double width = (nyquist - f_min) / static_cast<double>(n_filters);
  if (width <= 0.0 || static_cast<double>(n_filters) * f_min > nyquist - f_min) {
    throw UsageError("sinc: band plan does not fit below Nyquist");
  }
  SincFilterbank fb;
  fb.n_filters = n_filters;
  fb.filter_length = filter_length;
  fb.sample_rate = sample_rate;
  fb.f_min = f_min;
  fb.window = window;
  fb.freeze = freeze;
  std::vector<double> lo(n_filters), bw(n_filters);
  for (int64_t i = 0; i < n_filters; ++i) {
    lo[i] = f_min + static_cast<double>(i) * width;
    bw[i] = width;
  }
  fb.f_low = Tensor::from_data({n_filters}, std::move(lo), !freeze);
  fb.band = Tensor::from_data({n_filters}, std::move(bw), !freeze);
  fb.window_taps.resize(filter_length);
  for (int64_t n = 0; n < filter_length; ++n) {
    fb.window_taps[n] =
        window == Window::kHamming
            ? 0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<double>(n) /
                                     static_cast<double>(filter_length - 1))
            : 1.0;
  }
  return fb;
}

std::vector<std::pair<double, double>> effective_cutoffs(
    const SincFilterbank& fb) {
  const double nyq = fb.sample_rate / 2.0;
  std::vector<std::pair<double, double>> out(fb.n_filters);
  for (int64_t i = 0; i < fb.n_filters; ++i) {
    const double f1 = std::min(fb.f_min + std::abs(fb.f_low.data()[i]), nyq);
    const double f2 = std::min(f1 + fb.f_min + std::abs(fb.band.data()[i]), nyq);
    out[i] = {f1, f2};
  }
  return out;
}

Tensor materialize_kernel(const SincFilterbank& fb) {
  const int64_t n = fb.n_filters;
  const int64_t l = fb.filter_length;
  const double sr = fb.sample_rate;
  const double nyq = sr / 2.0;
  const int64_t half = (l - 1) / 2;

  struct FilterBand {
    double f1, f2;
    bool f1_clamped, f2_clamped;
  };
  auto bands = std::make_shared<std::vector<FilterBand>>(n);
  const auto& lo = fb.f_low.node()->data;
  const auto& bw = fb.band.node()->data;
  for (int64_t i = 0; i < n; ++i) {
    const double f1_raw = fb.f_min + std::abs(lo[i]);
    const double f1 = std::min(f1_raw, nyq);
    const double f2_raw = f1 + fb.f_min + std::abs(bw[i]);
    const double f2 = std::min(f2_raw, nyq);
    (*bands)[i] = {f1, f2, f1_raw > nyq, f2_raw > nyq};
  }

  auto out = std::make_shared<TensorNode>();
  out->shape = {n, 1, l};
  out->data.assign(n * l, 0.0);
  out->op = "sinc_materialize";
  auto window = std::make_shared<std::vector<double>>(fb.window_taps);
  for (int64_t i = 0; i < n; ++i) {
    const double a1 = (*bands)[i].f1 / sr;
    const double a2 = (*bands)[i].f2 / sr;
    for (int64_t j = 0; j < l; ++j) {
      const double m = static_cast<double>(j - half);
      out->data[i * l + j] = (phi(a2, m) - phi(a1, m)) * (*window)[j];
    }
  }

  if (checked_mode()) {
    for (double v : out->data) {
      if (!std::isfinite(v)) {
        throw NumericalError("sinc_materialize produced a non-finite tap");
      }
    }
  }
  const bool track = grad_enabled() && !fb.freeze &&
                     (fb.f_low.requires_grad() || fb.band.requires_grad());
  if (!track) return Tensor(out);

  out->requires_grad = true;
  out->is_leaf = false;
  out->parents = {fb.f_low.node(), fb.band.node()};
  out->backward_fn = [n, l, half, sr, bands, window](TensorNode& self) {
    auto& lo_n = *self.parents[0];
    auto& bw_n = *self.parents[1];
    lo_n.ensure_grad();
    bw_n.ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const auto& fbnd = (*bands)[i];
      const double a1 = fbnd.f1 / sr;
      const double a2 = fbnd.f2 / sr;
      // Chain through the clamping map: d f1/d f_low = sgn(f_low) unless
      // clamped; f2 tracks f1 when its own clamp is inactive.
      const double s_lo = sgn(lo_n.data[i]);
      const double s_bw = sgn(bw_n.data[i]);
      const double df1_dlow = fbnd.f1_clamped ? 0.0 : s_lo;
      const double df2_df1 = fbnd.f2_clamped ? 0.0 : 1.0;
      const double df2_dband = fbnd.f2_clamped ? 0.0 : s_bw;
      double acc_f1 = 0.0, acc_f2 = 0.0;
      for (int64_t j = 0; j < l; ++j) {
        const double m = static_cast<double>(j - half);
        const double g = self.grad[i * l + j] * (*window)[j];
        acc_f2 += g * dphi_da(a2, m);
        acc_f1 -= g * dphi_da(a1, m);
      }
      acc_f1 /= sr;
      acc_f2 /= sr;
      lo_n.grad[i] += (acc_f1 + acc_f2 * df2_df1) * df1_dlow;
      bw_n.grad[i] += acc_f2 * df2_dband;
    }
  };
  return Tensor(out);
}

Tensor sinc_forward(const SincFilterbank& fb, const Tensor& waveform) {
  if (waveform.ndim() != 3 || waveform.dim(1) != 1) {
    throw ShapeError("sinc_forward: expected waveform [B,1,T]");
  }
  if (waveform.dim(2) < fb.filter_length) {
    throw DataError("sinc_forward: waveform of length " +
                    std::to_string(waveform.dim(2)) +
                    " is shorter than the filter (" +
                    std::to_string(fb.filter_length) + ")");
  }
  return conv1d(waveform, materialize_kernel(fb), ConvSpec{1, 0, 1});
}

}  // namespace torawnet
