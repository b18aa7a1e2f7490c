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

#include "cupe/model.hpp"

#include <cmath>
#include <stdexcept>

namespace cupe::model {

namespace {

// Dropout site ids. Transformer layers use four consecutive ids each.
constexpr std::uint32_t kConvDropout = 1;
constexpr std::uint32_t kTransformerDropout = 100;
constexpr std::uint32_t kClassifierDropout = 200;
constexpr std::uint32_t kProjectionDropout = 300;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError("model config: " + what);
}

Var conv_bn_gelu(nn::Conv1d& conv, nn::BatchNorm1d& bn, Var x) { return nn::gelu(bn(conv(x))); }

}  // namespace

ModelConfig ModelConfig::desk() {
  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.model_dim = 64;
  cfg.ffn_dim = 256;
  cfg.classifier_hidden = 256;
  cfg.projection_hidden = 256;
  return cfg;
}

void ModelConfig::validate() const {
  window.validate();
  require(base_channels > 0, "base_channels must be positive");
  require(heads > 0 && model_dim % heads == 0, "model_dim " + std::to_string(model_dim) +
                                                   " not divisible by heads " + std::to_string(heads));
  require(base_channels >= heads, "base_channels " + std::to_string(base_channels) + " smaller than heads " +
                                      std::to_string(heads));
  require(stream_groups > 0 && feature_channels() % stream_groups == 0 &&
              (feature_channels() * 3 / 2) % stream_groups == 0,
          "stream channels not divisible by groups " + std::to_string(stream_groups));
  require(attention_reduction > 0 && feature_channels() % attention_reduction == 0,
          "feature channels not divisible by attention reduction");
  require(transformer_layers > 0, "transformer_layers must be positive");
  require(num_classes > 0, "num_classes must be positive");
  require(ffn_dim > 0 && classifier_hidden > 0 && projection_hidden > 0 && projection_dim > 0,
          "head widths must be positive");
  require(frames_per_window() > 0, "window too short for the feature stages");
}

FeatureExtractor::FeatureExtractor(const ModelConfig& cfg, nn::Initializer& init) : cfg_(cfg) {
  const std::size_t n = cfg.base_channels;
  const std::size_t channels[5] = {1, n, 2 * n, 4 * n, 8 * n};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& g = window::kFeatureStages[i];
    const std::string name = "features.conv" + std::to_string(i + 1);
    stages_[i] = nn::Conv1d(name, channels[i], channels[i + 1], g.kernel, {g.stride, g.padding, 1}, init);
    stage_norms_[i] = nn::BatchNorm1d(name + ".bn", channels[i + 1]);
  }
  const std::size_t c = 8 * n;
  const std::size_t groups = cfg.stream_groups;
  squeeze_ = nn::Conv1d("features.freq.squeeze", c, c / cfg.attention_reduction, 1, {}, init);
  excite_ = nn::Conv1d("features.freq.excite", c / cfg.attention_reduction, c, 1, {}, init);
  temporal1_ = nn::Conv1d("features.temporal.conv1", c, c, 7, {1, 3, groups}, init);
  temporal_norm1_ = nn::BatchNorm1d("features.temporal.bn1", c);
  temporal2_ = nn::Conv1d("features.temporal.conv2", c, c, 3, {1, 1, groups}, init);
  temporal_norm2_ = nn::BatchNorm1d("features.temporal.bn2", c);
  spectral1_ = nn::Conv1d("features.spectral.conv1", c, c * 3 / 2, 1, {1, 0, groups}, init);
  spectral_norm1_ = nn::BatchNorm1d("features.spectral.bn1", c * 3 / 2);
  spectral2_ = nn::Conv1d("features.spectral.conv2", c * 3 / 2, c, 1, {1, 0, groups}, init);
  spectral_norm2_ = nn::BatchNorm1d("features.spectral.bn2", c);
  fusion_ = nn::Conv1d("features.fusion", 2 * c, c, 1, {}, init);
  fusion_norm_ = nn::BatchNorm1d("features.fusion.bn", c);
}

Var FeatureExtractor::operator()(Var x, EncodeTrace* trace) {
  for (std::size_t i = 0; i < 4; ++i) {
    x = nn::dropout(conv_bn_gelu(stages_[i], stage_norms_[i], x), cfg_.conv_dropout,
                    kConvDropout + static_cast<std::uint32_t>(i));
    if (trace) trace->stage_lengths[i] = x.dim(2);
  }
  // Squeeze-excitation style channel gates from the frame-averaged features.
  Var pooled = nn::mean_axis(x, 2, /*keepdim=*/true);
  Var gates = nn::sigmoid(excite_(nn::gelu(squeeze_(pooled))));
  x = nn::mul(x, gates);

  Var temporal = conv_bn_gelu(temporal2_, temporal_norm2_, conv_bn_gelu(temporal1_, temporal_norm1_, x));
  Var spectral = conv_bn_gelu(spectral2_, spectral_norm2_, conv_bn_gelu(spectral1_, spectral_norm1_, x));
  Var fused = conv_bn_gelu(fusion_, fusion_norm_, nn::concat({temporal, spectral}, 1));
  if (trace) trace->features = fused.shape();
  return fused;
}

void FeatureExtractor::collect(ParamList& out) {
  for (std::size_t i = 0; i < 4; ++i) {
    stages_[i].collect(out);
    stage_norms_[i].collect(out);
  }
  squeeze_.collect(out);
  excite_.collect(out);
  temporal1_.collect(out);
  temporal_norm1_.collect(out);
  temporal2_.collect(out);
  temporal_norm2_.collect(out);
  spectral1_.collect(out);
  spectral_norm1_.collect(out);
  spectral2_.collect(out);
  spectral_norm2_.collect(out);
  fusion_.collect(out);
  fusion_norm_.collect(out);
}

void FeatureExtractor::collect_norms(std::vector<nn::BatchNorm1d*>& out) {
  for (auto& bn : stage_norms_) out.push_back(&bn);
  for (auto* bn : {&temporal_norm1_, &temporal_norm2_, &spectral_norm1_, &spectral_norm2_, &fusion_norm_}) {
    out.push_back(bn);
  }
}

Classifier::Classifier(const ModelConfig& cfg, nn::Initializer& init)
    : dropout_(cfg.classifier_dropout),
      hidden_("classifier.hidden", cfg.model_dim, cfg.classifier_hidden, init),
      output_("classifier.output", cfg.classifier_hidden, cfg.num_classes + 1, init) {}

Var Classifier::operator()(Var x) {
  return output_(nn::dropout(nn::gelu(hidden_(x)), dropout_, kClassifierDropout));
}

void Classifier::collect(ParamList& out) {
  hidden_.collect(out);
  output_.collect(out);
}

ProjectionHead::ProjectionHead(const ModelConfig& cfg, nn::Initializer& init)
    : dropout_(cfg.projection_dropout),
      expand_("projection.expand", cfg.model_dim, cfg.projection_hidden, init),
      contract_("projection.contract", cfg.projection_hidden, cfg.projection_dim, init),
      skip_("projection.skip", cfg.model_dim, cfg.projection_dim, init, /*with_bias=*/false),
      norm_("projection.norm", cfg.projection_hidden) {}

Var ProjectionHead::operator()(Var x) {
  Var h = nn::dropout(nn::gelu(norm_(expand_(x))), dropout_, kProjectionDropout);
  return nn::add(contract_(h), skip_(x));
}

void ProjectionHead::collect(ParamList& out) {
  expand_.collect(out);
  norm_.collect(out);
  contract_.collect(out);
  skip_.collect(out);
}

Tensor sinusoidal_positions(std::size_t frames, std::size_t dim) {
  Tensor pe({frames, dim});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe[t * dim + i] = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < dim) pe[t * dim + i + 1] = std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

Cupe::Cupe(const ModelConfig& cfg, std::uint64_t seed, Heads heads) : cfg_(cfg) {
  cfg_.validate();
  nn::Initializer init(seed);
  extractor_ = FeatureExtractor(cfg_, init);
  input_ = nn::Linear("encoder.input", cfg_.feature_channels(), cfg_.model_dim, init);
  nn::AttentionConfig attn{cfg_.model_dim, cfg_.heads, cfg_.transformer_dropout};
  for (std::size_t l = 0; l < cfg_.transformer_layers; ++l) {
    layers_.emplace_back("encoder.layer" + std::to_string(l), attn, cfg_.ffn_dim,
                         kTransformerDropout + 4 * static_cast<std::uint32_t>(l), init);
  }
  final_norm_ = nn::LayerNorm("encoder.norm", cfg_.model_dim);
  positions_ = sinusoidal_positions(cfg_.frames_per_window(), cfg_.model_dim);
  // Heads draw from their own streams so attaching one later reproduces the
  // same weights as building it up front.
  if (heads.classifier) attach_classifier(seed ^ 0xc1a5);
  if (heads.projection) attach_projection_head(seed ^ 0x9e37);
}

void Cupe::attach_classifier(std::uint64_t seed) {
  nn::Initializer init(seed);
  classifier_ = Classifier(cfg_, init);
  has_classifier_ = true;
}

void Cupe::attach_projection_head(std::uint64_t seed) {
  nn::Initializer init(seed);
  projection_ = ProjectionHead(cfg_, init);
  mask_embedding_ = Parameter{"ssl.mask_embedding", init.uniform({cfg_.feature_channels()}, 1.0), {}, false};
  quantizer_ = nn::Linear("ssl.quantizer", cfg_.feature_channels(), cfg_.projection_dim, init);
  has_projection_ = true;
}

void Cupe::drop_projection_head() {
  projection_ = ProjectionHead();
  mask_embedding_ = Parameter();
  quantizer_ = nn::Linear();
  has_projection_ = false;
}

Var Cupe::features(Var windows, EncodeTrace* trace) {
  const Shape& s = windows.shape();
  const std::size_t W = cfg_.window.window_samples;
  const bool flat = s.size() == 2 && s[1] == W;
  const bool channel = s.size() == 3 && s[1] == 1 && s[2] == W;
  if (!flat && !channel) {
    throw ShapeError("encode_window expects windows [N, 1, " + std::to_string(W) + "], got " + shape_str(s));
  }
  if (flat) windows = nn::reshape(windows, {s[0], 1, W});
  if (!frozen_) return extractor_(windows, trace);
  Tape eval({.training = false, .record = false});
  Var f = extractor_(eval.constant(windows.value()), trace);
  return windows.tape().constant(f.value());
}

Var Cupe::contextualize(Var features) {
  const std::size_t frames = features.dim(2);
  if (frames != positions_.dim(0)) {
    throw ShapeError("contextualize expects " + std::to_string(positions_.dim(0)) + " frames, got " +
                     std::to_string(frames));
  }
  Tape& t = features.tape();
  Var x = input_(nn::permute(features, {0, 2, 1}));
  x = nn::add(x, t.constant(positions_));
  for (auto& layer : layers_) x = layer(x);
  return final_norm_(x);
}

Var Cupe::encode_window(Var windows, EncodeTrace* trace) {
  Var e = contextualize(features(windows, trace));
  if (trace) trace->embeddings = e.shape();
  return e;
}

Var Cupe::classify(Var embeddings) {
  if (!has_classifier_) throw std::logic_error("classifier head is not attached");
  return classifier_(embeddings);
}

Var Cupe::project(Var embeddings) {
  if (!has_projection_) throw std::logic_error("projection head is not attached");
  return projection_(embeddings);
}

Var Cupe::apply_mask(Var features, const std::vector<bool>& mask) {
  if (!has_projection_) throw std::logic_error("projection head is not attached");
  const std::size_t n = features.dim(0), c = features.dim(1), frames = features.dim(2);
  if (mask.size() != n * frames) {
    throw ShapeError("mask covers " + std::to_string(mask.size()) + " frames, features have " +
                     std::to_string(n * frames));
  }
  Tape& t = features.tape();
  Var rows = nn::reshape(nn::permute(features, {0, 2, 1}), {n * frames, c});
  Var replaced = nn::replace_rows(rows, mask, t.param(mask_embedding_));
  return nn::permute(nn::reshape(replaced, {n, frames, c}), {0, 2, 1});
}

Var Cupe::quantizer_input(Var frames) {
  if (!has_projection_) throw std::logic_error("projection head is not attached");
  return quantizer_(frames);
}

void Cupe::set_frozen_feature_extractor(bool frozen) {
  frozen_ = frozen;
  for (auto* p : feature_parameters()) {
    if (frozen) {
      p->freeze();
    } else {
      p->unfreeze();
    }
  }
}

ParamList Cupe::feature_parameters() {
  ParamList out;
  extractor_.collect(out);
  return out;
}

ParamList Cupe::encoder_parameters() {
  ParamList out;
  input_.collect(out);
  for (auto& layer : layers_) layer.collect(out);
  final_norm_.collect(out);
  return out;
}

ParamList Cupe::classifier_parameters() {
  ParamList out;
  if (has_classifier_) classifier_.collect(out);
  return out;
}

ParamList Cupe::projection_parameters() {
  ParamList out;
  if (has_projection_) projection_.collect(out);
  return out;
}

ParamList Cupe::ssl_parameters() {
  ParamList out;
  if (has_projection_) {
    out.push_back(&mask_embedding_);
    quantizer_.collect(out);
  }
  return out;
}

ParamList Cupe::parameters() {
  ParamList out = feature_parameters();
  for (auto& group : {encoder_parameters(), classifier_parameters(), projection_parameters(), ssl_parameters()}) {
    out.insert(out.end(), group.begin(), group.end());
  }
  return out;
}

ParamList Cupe::trainable_parameters() {
  ParamList out;
  for (auto* p : parameters()) {
    if (!p->frozen) out.push_back(p);
  }
  return out;
}

ParameterReport Cupe::parameter_report() {
  ParameterReport r;
  r.feature_extractor = nn::count_parameters(feature_parameters());
  ParamList input;
  input_.collect(input);
  r.input_projection = nn::count_parameters(input);
  r.transformer = nn::count_parameters(encoder_parameters()) - r.input_projection;
  r.classifier = nn::count_parameters(classifier_parameters());
  r.projection_head = nn::count_parameters(projection_parameters());
  r.ssl = nn::count_parameters(ssl_parameters());
  return r;
}

std::vector<std::pair<std::string, Tensor*>> Cupe::state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto* p : parameters()) out.emplace_back(p->name, &p->value);
  std::vector<nn::BatchNorm1d*> norms;
  extractor_.collect_norms(norms);
  for (auto* bn : norms) {
    out.emplace_back(bn->name() + ".running_mean", &bn->stats().running_mean);
    out.emplace_back(bn->name() + ".running_var", &bn->stats().running_var);
  }
  return out;
}

Tensor window_logits(Cupe& model, const window::WindowBatch& batch) {
  Tape tape({.training = false, .record = false});
  return model.classify(model.encode_window(tape.constant(batch.windows))).value();
}

window::StitchedPosteriors forward_clip(Cupe& model, std::span<const double> audio, window::StitchMode mode) {
  const auto& wcfg = model.config().window;
  const auto batch = window::slice(audio, wcfg);
  Tensor logits = window_logits(model, batch);
  if (mode == window::StitchMode::kLogits) return window::stitch(logits, batch, wcfg, mode);
  Tape tape({.training = false, .record = false});
  Tensor probs = nn::softmax(tape.constant(std::move(logits))).value();
  return window::stitch(probs, batch, wcfg, mode);
}

}  // namespace cupe::model
