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
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cupe/checkpoint.hpp"
#include "cupe/config.hpp"
#include "cupe/data.hpp"
#include "cupe/metrics.hpp"
#include "cupe/model.hpp"
#include "cupe/objectives.hpp"
#include "cupe/phonemap.hpp"

namespace cupe::pipeline {

using Corpus = std::vector<data::Utterance>;

/// Line-delimited JSON run records. Every record goes to the sink; the
/// console (stderr) sees summaries at "info" and every step at "debug".
class RunLog {
 public:
  enum class Level { kQuiet, kInfo, kDebug };

  explicit RunLog(std::ostream* sink = nullptr, Level console = level_from_env());
  void write(const nlohmann::json& record, bool summary = false);

  /// CUPE_LOG=quiet|info|debug, default info.
  static Level level_from_env();

 private:
  std::ostream* sink_;
  Level console_;
};

/// Raised on a non-finite loss or gradient. dump() describes the batch.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, nlohmann::json dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const nlohmann::json& dump() const { return dump_; }

 private:
  nlohmann::json dump_;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double ctc = 0.0;
  double silence = 0.0;
  double grad_norm = 0.0;     // before clipping
  double clipped_norm = 0.0;  // after clipping
  double momentum = 0.0;
  std::vector<double> lrs;    // per parameter group
};

struct SslStepRecord {
  std::size_t step = 0;
  objectives::SslComponents parts;
  double perplexity = 0.0;  // hard code usage over the batch
  double mask_ratio = 0.0;
  double grad_norm = 0.0;
  std::vector<double> lrs;
};

struct TrainResult {
  model::Checkpoint checkpoint;
  std::vector<StepRecord> history;
  std::vector<std::pair<std::size_t, double>> validation;  // (step, PER)
  std::size_t steps_run = 0;
  bool stopped_early = false;
};

struct SslResult {
  model::Checkpoint checkpoint;
  std::vector<SslStepRecord> history;
  objectives::CodebookState codebook;
};

/// Rebuilds the model described by a checkpoint: config from its snapshot,
/// heads from the tensors present.
model::Cupe model_from_checkpoint(const model::Checkpoint& ckpt, TrainConfig* cfg_out = nullptr);

/// Model state, optimizer moments and config snapshot.
model::Checkpoint make_checkpoint(model::Cupe& model, const TrainConfig& cfg, std::size_t step);

/// Corpus-level PER of greedy decoding (total edits over total true length).
double corpus_per(model::Cupe& model, const Corpus& corpus);

/// Supervised optimisation of an existing model at the given peak rate.
TrainResult fit(model::Cupe& model, const TrainConfig& cfg, double peak_lr, std::size_t steps, const Corpus& train,
                const Corpus* valid, RunLog& log, const std::string& mode = "supervised");

/// Fresh model trained with CTC plus the silence term.
TrainResult train_supervised(const TrainConfig& cfg, const Corpus& train, const Corpus* valid, RunLog& log);

/// Masked prediction against an EMA codebook with hierarchical rates.
SslResult pretrain_ssl(const TrainConfig& cfg, const Corpus& train, RunLog& log);

/// Drops the pretraining head, attaches a fresh classifier for num_classes
/// and trains at lr_scale times the supervised rate.
TrainResult finetune(const TrainConfig& cfg, const model::Checkpoint& pretrained, std::size_t num_classes,
                     const Corpus& train, const Corpus* valid, RunLog& log);

struct UtteranceResult {
  std::string id;
  std::vector<std::size_t> truth;
  std::vector<std::size_t> predicted;
  double per = 0.0;
};

struct MetricsReport {
  std::size_t utterances = 0;
  std::size_t true_phonemes = 0;
  std::size_t edits = 0;
  double per = 0.0;
  double mean_utterance_per = 0.0;
  std::optional<double> gp_macro;
  std::optional<double> gp_weighted;
  double f1_macro = 0.0;
  std::optional<double> group_per;  // on broad groups when the inventory has them
  metrics::ConfusionMatrix confusion{0};
  std::vector<UtteranceResult> details;

  nlohmann::json to_json(const std::vector<std::string>& labels) const;
};

struct EvalOptions {
  std::filesystem::path timeline_dir;  // empty: no timelines
};

MetricsReport evaluate(model::Cupe& model, const Corpus& corpus, const phonemap::PhonemeInventory& inv,
                       const EvalOptions& opt = {});

/// report.json and confusion.tsv under dir.
void write_report(const MetricsReport& report, const phonemap::PhonemeInventory& inv, const std::filesystem::path& dir);

struct Inference {
  window::StitchedPosteriors posteriors;
  metrics::Decoded decoded;
};

Inference infer(model::Cupe& model, std::span<const double> audio);

}  // namespace cupe::pipeline
