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

#include "cupe/autograd.hpp"

#include <algorithm>
#include <stdexcept>

namespace cupe::nn {
namespace {

// A default Tensor has the scalar shape but no storage.
bool same_layout(const Tensor& a, const Tensor& b) {
  return a.numel() == b.numel() && a.shape() == b.shape();
}

}  // namespace

void Parameter::zero_grad() {
  if (frozen) return;
  if (!same_layout(grad, value)) {
    grad = Tensor::zeros(value.shape());
  } else {
    std::fill(grad.storage().begin(), grad.storage().end(), 0.0);
  }
}

void Parameter::freeze() {
  frozen = true;
  grad = Tensor();
}

void Parameter::unfreeze() {
  frozen = false;
  grad = Tensor::zeros(value.shape());
}

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Tape::Tape(TapeOptions opts) : opts_(opts) {}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, opts_.record, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  const bool needs = opts_.record && !p.frozen;
  nodes_.push_back(Node{Tensor(), {}, needs, {}, needs ? &p : nullptr, &p.value});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool needs = false;
  if (opts_.record) {
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw std::logic_error("op mixes variables from different tapes");
      needs = needs || nodes_[in.id_].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{},
                        nullptr});
  return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_for(Var v) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return nullptr;
  if (!same_layout(n.grad, n.value())) n.grad = Tensor::zeros(n.value().shape());
  return &n.grad;
}

void Tape::backward(Var root) {
  if (!opts_.record) throw std::logic_error("backward on a tape that does not record");
  if (root.tape_ != this) throw std::logic_error("backward root belongs to another tape");
  Node& r = nodes_[root.id_];
  if (r.value().numel() != 1) {
    throw ShapeError("backward root must be a scalar, got " + shape_str(r.value().shape()));
  }
  if (!r.requires_grad) return;
  for (auto& n : nodes_) n.grad = Tensor();
  r.grad = Tensor(r.value().shape(), 1.0);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    // Inputs always precede their op, so the closure never touches n.grad.
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (!same_layout(p.grad, p.value)) p.grad = Tensor::zeros(p.value.shape());
      auto dst = p.grad.values();
      auto src = n.grad.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  if (same_layout(n.grad, n.value())) return n.grad;
  return Tensor::zeros(n.value().shape());
}

std::uint64_t Tape::dropout_seed(std::uint32_t layer) {
  std::uint64_t h = splitmix64(opts_.seed);
  h = splitmix64(h ^ opts_.step);
  h = splitmix64(h ^ layer);
  return splitmix64(h ^ dropout_calls_++);
}

}  // namespace cupe::nn
