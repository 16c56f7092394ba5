// src/gradcheck.h

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

#ifndef TORAWNET_GRADCHECK_H_
#define TORAWNET_GRADCHECK_H_

#include <functional>

#include "tensor.h"

namespace torawnet {

// Compares the reverse-mode gradient of a scalar-valued function against
// central finite differences at `point`. Returns the max over coordinates of
//   |analytic - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |analytic|).
// The function is evaluated twice up front; a bitwise mismatch means f is
// non-deterministic and raises NumericalError.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& point, double h = 1e-5);

}  // namespace torawnet

#endif  // TORAWNET_GRADCHECK_H_
