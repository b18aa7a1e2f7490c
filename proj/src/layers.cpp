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

#include "cupe/layers.hpp"

#include <cmath>

namespace cupe::nn {

Tensor Initializer::uniform(Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) {
    const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    v = (2.0 * u - 1.0) * bound;
  }
  return t;
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Initializer& init, bool with_bias)
    : with_bias_(with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = Parameter{name + ".weight", init.uniform({in, out}, bound), {}, false};
  if (with_bias) bias_ = Parameter{name + ".bias", init.uniform({out}, bound), {}, false};
}

Var Linear::operator()(Var x) {
  Tape& t = x.tape();
  if (!with_bias_) return matmul(x, t.param(weight_));
  return linear(x, t.param(weight_), t.param(bias_));
}

void Linear::collect(ParamList& out) {
  out.push_back(&weight_);
  if (with_bias_) out.push_back(&bias_);
}

Conv1d::Conv1d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, ConvSpec spec,
               Initializer& init)
    : spec_(spec) {
  if (spec.groups == 0 || in % spec.groups != 0 || out % spec.groups != 0) {
    throw ShapeError(name + ": channels " + std::to_string(in) + "->" + std::to_string(out) +
                     " not divisible by groups " + std::to_string(spec.groups));
  }
  const std::size_t fan_in = in / spec.groups * kernel;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  weight_ = Parameter{name + ".weight", init.uniform({out, in / spec.groups, kernel}, bound), {}, false};
  bias_ = Parameter{name + ".bias", init.uniform({out}, bound), {}, false};
}

Var Conv1d::operator()(Var x) {
  Tape& t = x.tape();
  return conv1d(x, t.param(weight_), t.param(bias_), spec_);
}

void Conv1d::collect(ParamList& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

BatchNorm1d::BatchNorm1d(const std::string& name, std::size_t channels) : name_(name) {
  gamma_ = Parameter{name + ".gamma", Tensor({channels}, 1.0), {}, false};
  beta_ = Parameter{name + ".beta", Tensor({channels}, 0.0), {}, false};
  stats_.running_mean = Tensor({channels}, 0.0);
  stats_.running_var = Tensor({channels}, 1.0);
}

Var BatchNorm1d::operator()(Var x) {
  Tape& t = x.tape();
  return batch_norm(x, t.param(gamma_), t.param(beta_), stats_);
}

void BatchNorm1d::collect(ParamList& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

LayerNorm::LayerNorm(const std::string& name, std::size_t dim) {
  gamma_ = Parameter{name + ".gamma", Tensor({dim}, 1.0), {}, false};
  beta_ = Parameter{name + ".beta", Tensor({dim}, 0.0), {}, false};
}

Var LayerNorm::operator()(Var x) {
  Tape& t = x.tape();
  return layer_norm(x, t.param(gamma_), t.param(beta_));
}

void LayerNorm::collect(ParamList& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

MultiHeadSelfAttention::MultiHeadSelfAttention(const std::string& name, const AttentionConfig& cfg,
                                               std::uint32_t dropout_id, Initializer& init)
    : cfg_(cfg), dropout_id_(dropout_id) {
  if (cfg.heads == 0 || cfg.model_dim % cfg.heads != 0) {
    throw ShapeError(name + ": model_dim " + std::to_string(cfg.model_dim) + " not divisible by heads " +
                     std::to_string(cfg.heads));
  }
  query_ = Linear(name + ".query", cfg.model_dim, cfg.model_dim, init);
  key_ = Linear(name + ".key", cfg.model_dim, cfg.model_dim, init, /*with_bias=*/false);
  value_ = Linear(name + ".value", cfg.model_dim, cfg.model_dim, init);
  output_ = Linear(name + ".output", cfg.model_dim, cfg.model_dim, init);
}

Var MultiHeadSelfAttention::operator()(Var x, Tensor* weights) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] != cfg_.model_dim) {
    throw ShapeError("attention expects [N, F, " + std::to_string(cfg_.model_dim) + "], got " + shape_str(s));
  }
  const std::size_t N = s[0], F = s[1], H = cfg_.heads, dh = cfg_.model_dim / H;
  if (F == 0) throw ShapeError("attention over zero frames");

  auto split = [&](Var v) {
    // [N, F, D] -> [N*H, F, dh]
    return reshape(permute(reshape(v, {N, F, H, dh}), {0, 2, 1, 3}), {N * H, F, dh});
  };
  Var q = split(query_(x));
  Var k = split(key_(x));
  Var v = split(value_(x));
  Var scores = scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var attn = softmax(scores);
  if (weights != nullptr) *weights = attn.value().reshaped({N, H, F, F});
  attn = dropout(attn, cfg_.dropout, dropout_id_);
  Var ctx = bmm(attn, v, false);
  ctx = reshape(permute(reshape(ctx, {N, H, F, dh}), {0, 2, 1, 3}), {N, F, cfg_.model_dim});
  return output_(ctx);
}

void MultiHeadSelfAttention::collect(ParamList& out) {
  query_.collect(out);
  key_.collect(out);
  value_.collect(out);
  output_.collect(out);
}

SelfAttentionBlock::SelfAttentionBlock(const std::string& name, const AttentionConfig& cfg,
                                       std::uint32_t dropout_id, Initializer& init)
    : cfg_(cfg),
      dropout_id_(dropout_id),
      norm_(name + ".norm", cfg.model_dim),
      attention_(name + ".attn", cfg, dropout_id + 1, init) {}

Var SelfAttentionBlock::operator()(Var x, Tensor* weights) {
  Var h = attention_(norm_(x), weights);
  return add(x, dropout(h, cfg_.dropout, dropout_id_));
}

void SelfAttentionBlock::collect(ParamList& out) {
  norm_.collect(out);
  attention_.collect(out);
}

TransformerLayer::TransformerLayer(const std::string& name, const AttentionConfig& cfg, std::size_t ffn_dim,
                                   std::uint32_t dropout_id, Initializer& init)
    : cfg_(cfg),
      dropout_id_(dropout_id),
      attention_(name, cfg, dropout_id, init),
      ffn_norm_(name + ".ffn_norm", cfg.model_dim),
      ffn_in_(name + ".ffn_in", cfg.model_dim, ffn_dim, init),
      ffn_out_(name + ".ffn_out", ffn_dim, cfg.model_dim, init) {}

Var TransformerLayer::operator()(Var x) {
  x = attention_(x);
  Var h = dropout(gelu(ffn_in_(ffn_norm_(x))), cfg_.dropout, dropout_id_ + 2);
  h = ffn_out_(h);
  return add(x, dropout(h, cfg_.dropout, dropout_id_ + 3));
}

void TransformerLayer::collect(ParamList& out) {
  attention_.collect(out);
  ffn_norm_.collect(out);
  ffn_in_.collect(out);
  ffn_out_.collect(out);
}

std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.numel();
  return n;
}

}  // namespace cupe::nn
