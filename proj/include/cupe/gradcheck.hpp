// Copyright 2026 The CUPE Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>
#include <vector>

#include "cupe/layers.hpp"

namespace cupe::nn {

struct GradCheckResult {
  /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Builds a scalar from leaves created for `inputs` (in order).
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Compares the tape gradient of fn against central differences, for every
/// element of every input and of every parameter in `params`. Each
/// evaluation uses a fresh tape built from `opts`, so dropout masks repeat.
GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor> inputs, double epsilon = 1e-5,
                           const ParamList& params = {}, TapeOptions opts = {});

}  // namespace cupe::nn
