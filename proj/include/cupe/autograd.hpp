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
#include <functional>
#include <string>
#include <vector>

#include "cupe/tensor.hpp"

namespace cupe::nn {

/// A named trainable tensor. Frozen parameters carry no gradient buffer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  void zero_grad();
  void freeze();
  void unfreeze();
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct TapeOptions {
  bool training = false;
  bool record = true;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

/// Reverse-mode gradient tape for one forward/backward pass. Create one per
/// training step and drop it afterwards; tapes share no state.
class Tape {
 public:
  /// Called with the output gradient; implementations push into the input
  /// gradients returned by Tape::grad_for (nullptr when not needed).
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(TapeOptions opts = {});
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const { return opts_.training; }
  bool recording() const { return opts_.record; }
  std::uint64_t step() const { return opts_.step; }

  Var constant(Tensor value);
  /// Leaf that receives a gradient (used for gradient checks on inputs).
  Var leaf(Tensor value);
  /// Refers to p.value without copying; p must not change while the tape
  /// is in use.
  Var param(Parameter& p);

  /// Adds an op node. The backward closure is kept only when recording and
  /// at least one input requires a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].value(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value(); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator for an input during backward, or nullptr.
  Tensor* grad_for(Var v);

  /// Seeds d(root)/d(root) = 1 and propagates to every leaf, then adds leaf
  /// gradients into their Parameter::grad buffers.
  void backward(Var root);

  /// Gradient of the last backward() w.r.t. v (zeros if v was unreached).
  Tensor grad(Var v) const;

  /// Counter-based seed for a dropout site: (tape seed, step, layer, call).
  std::uint64_t dropout_seed(std::uint32_t layer);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor own;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
    const Tensor* ref = nullptr;  // parameter leaves read the live value

    const Tensor& value() const { return ref ? *ref : own; }
  };

  TapeOptions opts_;
  std::vector<Node> nodes_;
  std::uint64_t dropout_calls_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace cupe::nn
