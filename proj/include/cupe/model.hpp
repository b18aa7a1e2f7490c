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

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cupe/layers.hpp"
#include "cupe/window.hpp"

namespace cupe::model {

using nn::Parameter;
using nn::ParamList;
using nn::Tape;
using nn::Var;

struct ModelConfig {
  std::size_t base_channels = 256;  // n
  std::size_t model_dim = 512;
  std::size_t transformer_layers = 4;
  std::size_t heads = 8;
  std::size_t ffn_dim = 2048;
  double transformer_dropout = 0.25;
  double conv_dropout = 0.1;
  std::size_t stream_groups = 8;
  std::size_t attention_reduction = 4;  // frequency-attention bottleneck factor
  std::size_t classifier_hidden = 2048;
  double classifier_dropout = 0.25;
  std::size_t projection_hidden = 2048;
  std::size_t projection_dim = 256;
  double projection_dropout = 0.1;
  std::size_t num_classes = 65;  // C; logits carry C + 1 with blank last
  window::WindowConfig window;

  /// Small configuration used for CPU-scale training runs.
  static ModelConfig desk();

  void validate() const;
  std::size_t feature_channels() const { return 8 * base_channels; }
  std::size_t blank() const { return num_classes; }
  std::size_t frames_per_window() const { return window::frames_per_window(window); }
};

/// Intermediate frame counts seen by the last encode_window call that asked
/// for them.
struct EncodeTrace {
  std::array<std::size_t, 4> stage_lengths{};
  Shape features;    // [N, 8n, F_w] after fusion
  Shape embeddings;  // [N, F_w, model_dim]
};

struct ParameterReport {
  std::size_t feature_extractor = 0;
  std::size_t input_projection = 0;
  std::size_t transformer = 0;  // attention/FFN layers and the final norm
  std::size_t classifier = 0;
  std::size_t projection_head = 0;
  std::size_t ssl = 0;  // mask embedding and quantizer
  std::size_t total() const {
    return feature_extractor + input_projection + transformer + classifier + projection_head + ssl;
  }
};

/// Four strided convolutions, frequency attention, temporal and spectral
/// streams and their fusion: [N, 1, W] -> [N, 8n, F_w].
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const ModelConfig& cfg, nn::Initializer& init);
  Var operator()(Var windows, EncodeTrace* trace = nullptr);
  void collect(ParamList& out);
  void collect_norms(std::vector<nn::BatchNorm1d*>& out);

 private:
  ModelConfig cfg_;
  std::array<nn::Conv1d, 4> stages_;
  std::array<nn::BatchNorm1d, 4> stage_norms_;
  nn::Conv1d squeeze_, excite_;
  nn::Conv1d temporal1_, temporal2_;
  nn::BatchNorm1d temporal_norm1_, temporal_norm2_;
  nn::Conv1d spectral1_, spectral2_;
  nn::BatchNorm1d spectral_norm1_, spectral_norm2_;
  nn::Conv1d fusion_;
  nn::BatchNorm1d fusion_norm_;
};

/// Frame-level supervised head: Linear -> GELU -> Dropout -> Linear.
class Classifier {
 public:
  Classifier() = default;
  Classifier(const ModelConfig& cfg, nn::Initializer& init);
  Var operator()(Var x);
  void collect(ParamList& out);

 private:
  double dropout_ = 0.0;
  nn::Linear hidden_, output_;
};

/// Pretraining head: out = W2 Dropout(GELU(LN(W1 x))) + S x, with a linear
/// skip S to match the output width.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(const ModelConfig& cfg, nn::Initializer& init);
  Var operator()(Var x);
  void collect(ParamList& out);

 private:
  double dropout_ = 0.0;
  nn::Linear expand_, contract_, skip_;
  nn::LayerNorm norm_;
};

/// Fixed sinusoidal encoding over the frames of one window, [frames, dim].
Tensor sinusoidal_positions(std::size_t frames, std::size_t dim);

class Cupe {
 public:
  struct Heads {
    bool classifier = true;
    bool projection = false;
  };

  Cupe(const ModelConfig& cfg, std::uint64_t seed, Heads heads = {true, false});

  const ModelConfig& config() const { return cfg_; }
  bool has_classifier() const { return has_classifier_; }
  bool has_projection() const { return has_projection_; }

  /// Conv features of windows [N, 1, W] (or [N, W]) as [N, 8n, F_w]. With a
  /// frozen feature extractor the features are computed in eval mode and
  /// enter the tape as constants.
  Var features(Var windows, EncodeTrace* trace = nullptr);
  /// Transformer over fused features [N, 8n, F_w] -> [N, F_w, model_dim].
  Var contextualize(Var features);
  Var encode_window(Var windows, EncodeTrace* trace = nullptr);
  Var classify(Var embeddings);
  Var project(Var embeddings);

  /// Fusion-output frame vectors replaced by the learned mask embedding
  /// where mask is set; features [N, 8n, F_w], mask over N * F_w frames.
  Var apply_mask(Var features, const std::vector<bool>& mask);
  /// Quantizer input projection 8n -> projection_dim.
  Var quantizer_input(Var frames);

  void set_frozen_feature_extractor(bool frozen);
  bool frozen_feature_extractor() const { return frozen_; }

  void attach_classifier(std::uint64_t seed);
  void drop_projection_head();
  void attach_projection_head(std::uint64_t seed);

  ParamList feature_parameters();
  /// Input projection, transformer layers and final norm.
  ParamList encoder_parameters();
  ParamList classifier_parameters();
  ParamList projection_parameters();
  ParamList ssl_parameters();
  ParamList parameters();
  ParamList trainable_parameters();
  ParameterReport parameter_report();

  /// Every persistent tensor (parameters and batch-norm statistics) by name.
  std::vector<std::pair<std::string, Tensor*>> state();

 private:
  ModelConfig cfg_;
  bool frozen_ = false;
  bool has_classifier_ = false;
  bool has_projection_ = false;
  FeatureExtractor extractor_;
  nn::Linear input_;
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm final_norm_;
  Tensor positions_;
  Classifier classifier_;
  ProjectionHead projection_;
  Parameter mask_embedding_;
  nn::Linear quantizer_;
};

/// Eval-mode clip inference: slice, encode, classify, softmax, stitch.
window::StitchedPosteriors forward_clip(Cupe& model, std::span<const double> audio,
                                        window::StitchMode mode = window::StitchMode::kProbabilities);

/// Per-window logits [N, F_w, C + 1] in eval mode.
Tensor window_logits(Cupe& model, const window::WindowBatch& batch);

}  // namespace cupe::model
