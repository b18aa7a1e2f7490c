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

#include <cstdint>
#include <vector>

#include "cupe/autograd.hpp"

namespace cupe::nn {

// Elementwise ops. The second operand broadcasts against the first:
// shapes are right-aligned and each of its dims is equal or 1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);

Var gelu(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var log(Var x, double floor = 1e-300);

/// rate in [0, 1); identity when the tape is not training or rate == 0.
Var dropout(Var x, double rate, std::uint32_t layer);

Var softmax(Var x);
Var log_softmax(Var x);

Var sum(Var x);
Var mean(Var x);
Var mean_axis(Var x, std::size_t axis, bool keepdim);

Var reshape(Var x, Shape shape);
Var permute(Var x, const std::vector<std::size_t>& perm);
Var concat(const std::vector<Var>& xs, std::size_t axis);
/// Rows of a [R, D] matrix (any leading dims are flattened into R).
Var gather_rows(Var x, const std::vector<std::size_t>& rows);
/// Replaces rows of x[R, D] where mask[r] is set with the vector fill[D].
Var replace_rows(Var x, const std::vector<bool>& mask, Var fill);

/// x[..., K] @ w[K, N] -> [..., N]
Var matmul(Var x, Var w);
/// a[G, M, K] @ b[G, K, N] (or b^T when transpose_b: b is [G, N, K]).
Var bmm(Var a, Var b, bool transpose_b);
/// x[..., in] @ w[in, out] + b[out]
Var linear(Var x, Var w, Var b);

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

std::size_t conv_out_length(std::size_t length, std::size_t kernel, const ConvSpec& spec);

/// x[B, C_in, L], w[C_out, C_in/groups, K], b[C_out] -> [B, C_out, L_out]
Var conv1d(Var x, Var w, Var b, const ConvSpec& spec);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Normalizes per channel (axis 1) of x[B, C] or x[B, C, L]. Training mode
/// uses batch statistics and updates the running stats in place.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats);

/// Scales each last-axis row to unit Euclidean norm.
Var l2_normalize(Var x, double eps = 1e-12);

/// Normalizes over the last axis.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

}  // namespace cupe::nn
