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
#include <random>
#include <string>
#include <vector>

#include "cupe/ops.hpp"

namespace cupe::nn {

/// Deterministic parameter initializer.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  /// U(-bound, bound)
  Tensor uniform(Shape shape, double bound);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

using ParamList = std::vector<Parameter*>;

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Initializer& init, bool with_bias = true);
  Var operator()(Var x);
  void collect(ParamList& out);
  std::size_t in_features() const { return weight_.value.dim(0); }
  std::size_t out_features() const { return weight_.value.dim(1); }

 private:
  Parameter weight_;  // [in, out]
  Parameter bias_;
  bool with_bias_ = true;
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, ConvSpec spec,
         Initializer& init);
  Var operator()(Var x);
  void collect(ParamList& out);
  const ConvSpec& spec() const { return spec_; }
  std::size_t kernel() const { return weight_.value.dim(2); }
  std::size_t out_channels() const { return weight_.value.dim(0); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  Parameter weight_;  // [out, in/groups, kernel]
  Parameter bias_;
  ConvSpec spec_;
};

class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(const std::string& name, std::size_t channels);
  Var operator()(Var x);
  void collect(ParamList& out);
  BatchNormStats& stats() { return stats_; }
  const BatchNormStats& stats() const { return stats_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  Parameter gamma_;
  Parameter beta_;
  BatchNormStats stats_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim);
  Var operator()(Var x);
  void collect(ParamList& out);

 private:
  Parameter gamma_;
  Parameter beta_;
};

struct AttentionConfig {
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  double dropout = 0.25;
};

/// Multi-head self-attention over x[N, F, D]; every sequence attends only
/// within itself. The key projection has no bias (softmax cancels it).
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(const std::string& name, const AttentionConfig& cfg, std::uint32_t dropout_id,
                         Initializer& init);
  /// When `weights` is non-null it receives the post-softmax, pre-dropout
  /// attention weights [N, heads, F, F].
  Var operator()(Var x, Tensor* weights = nullptr);
  void collect(ParamList& out);

 private:
  AttentionConfig cfg_;
  std::uint32_t dropout_id_ = 0;
  Linear query_, key_, value_, output_;
};

/// Pre-norm residual attention: x + dropout(attention(norm(x))).
class SelfAttentionBlock {
 public:
  SelfAttentionBlock() = default;
  SelfAttentionBlock(const std::string& name, const AttentionConfig& cfg, std::uint32_t dropout_id,
                     Initializer& init);
  Var operator()(Var x, Tensor* weights = nullptr);
  void collect(ParamList& out);

 private:
  AttentionConfig cfg_;
  std::uint32_t dropout_id_ = 0;
  LayerNorm norm_;
  MultiHeadSelfAttention attention_;
};

class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(const std::string& name, const AttentionConfig& cfg, std::size_t ffn_dim,
                   std::uint32_t dropout_id, Initializer& init);
  Var operator()(Var x);
  void collect(ParamList& out);

 private:
  AttentionConfig cfg_;
  std::uint32_t dropout_id_ = 0;
  SelfAttentionBlock attention_;
  LayerNorm ffn_norm_;
  Linear ffn_in_, ffn_out_;
};

std::size_t count_parameters(const ParamList& params);

}  // namespace cupe::nn
