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

#include "cupe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cupe::nn {
namespace {

double evaluate(const ScalarFn& fn, const std::vector<Tensor>& inputs, TapeOptions opts) {
  opts.record = false;
  Tape tape(opts);
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.constant(t));
  return fn(tape, leaves).value().item();
}

void compare(double analytic, double numeric, GradCheckResult& r) {
  const double abs_err = std::abs(analytic - numeric);
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  r.max_abs_error = std::max(r.max_abs_error, abs_err);
  r.max_relative_error = std::max(r.max_relative_error, abs_err / denom);
  ++r.checked;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& fn, std::vector<Tensor> inputs, double epsilon, const ParamList& params,
                           TapeOptions opts) {
  std::vector<Tensor> analytic_inputs;
  std::vector<Tensor> analytic_params;
  {
    for (auto* p : params) p->zero_grad();
    opts.record = true;
    Tape tape(opts);
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    tape.backward(fn(tape, leaves));
    for (const auto& v : leaves) analytic_inputs.push_back(tape.grad(v));
    for (auto* p : params) analytic_params.push_back(p->frozen ? Tensor::zeros(p->value.shape()) : p->grad);
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].numel(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + epsilon;
      const double fp = evaluate(fn, inputs, opts);
      inputs[i][k] = orig - epsilon;
      const double fm = evaluate(fn, inputs, opts);
      inputs[i][k] = orig;
      compare(analytic_inputs[i][k], (fp - fm) / (2.0 * epsilon), result);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& value = params[i]->value;
    for (std::size_t k = 0; k < value.numel(); ++k) {
      const double orig = value[k];
      value[k] = orig + epsilon;
      const double fp = evaluate(fn, inputs, opts);
      value[k] = orig - epsilon;
      const double fm = evaluate(fn, inputs, opts);
      value[k] = orig;
      compare(analytic_params[i][k], (fp - fm) / (2.0 * epsilon), result);
    }
  }
  return result;
}

}  // namespace cupe::nn
