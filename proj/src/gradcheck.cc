// src/gradcheck.cc

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

#include "gradcheck.h"

#include <cmath>

namespace torawnet {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& point, double h) {
  if (h <= 0.0) throw UsageError("finite_diff_check: h must be positive");
  const int64_t n = point.numel();

  {
    NoGradGuard ng;
    const Tensor a = f(point.detach());
    const Tensor b = f(point.detach());
    if (a.numel() != 1) {
      throw UsageError("finite_diff_check: f must return a scalar");
    }
    if (a.item() != b.item()) {
      throw NumericalError(
          "finite_diff_check: f is non-deterministic (double evaluation "
          "mismatch)");
    }
  }

  Tensor p = point.detach();
  Tensor leaf = Tensor::from_data(p.shape(),
                                  std::vector<double>(p.data().begin(),
                                                      p.data().end()),
                                  /*requires_grad=*/true);
  Tensor loss = f(leaf);
  loss.backward();
  std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  double worst = 0.0;
  NoGradGuard ng;
  for (int64_t i = 0; i < n; ++i) {
    Tensor plus = point.detach();
    Tensor minus = point.detach();
    plus.mutable_data()[i] += h;
    minus.mutable_data()[i] -= h;
    const double fp = f(plus).item();
    const double fm = f(minus).item();
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace torawnet
