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

#include "cupe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include "cupe/ops.hpp"
#include "cupe/optim.hpp"

namespace cupe::pipeline {

using nlohmann::json;
using nn::Var;

RunLog::RunLog(std::ostream* sink, Level console) : sink_(sink), console_(console) {}

RunLog::Level RunLog::level_from_env() {
  const char* v = std::getenv("CUPE_LOG");
  if (!v) return Level::kInfo;
  const std::string s(v);
  if (s == "quiet") return Level::kQuiet;
  if (s == "debug") return Level::kDebug;
  return Level::kInfo;
}

void RunLog::write(const json& record, bool summary) {
  const std::string line = record.dump();
  if (sink_) *sink_ << line << '\n';
  if (console_ == Level::kDebug || (summary && console_ == Level::kInfo)) std::cerr << line << '\n';
}

namespace {

// Everything about an utterance that does not change between steps.
struct Prepared {
  const data::Utterance* utt = nullptr;
  window::WindowBatch batch;
  window::StitchPlan plan;
  objectives::SilenceMask silence;
};

std::vector<Prepared> prepare(const Corpus& corpus, const model::ModelConfig& cfg) {
  std::vector<Prepared> out;
  const std::size_t fw = cfg.frames_per_window();
  for (const auto& u : corpus) {
    for (std::size_t c : u.classes)
      if (c >= cfg.num_classes)
        throw std::invalid_argument("utterance " + u.id + " has class " + std::to_string(c) + " but the model has " +
                                    std::to_string(cfg.num_classes));
    Prepared p;
    p.utt = &u;
    p.batch = window::slice(u.audio, cfg.window);
    p.plan = window::make_stitch_plan(p.batch.windows_per_item(), fw, p.batch, cfg.window);
    p.silence = objectives::silence_mask_from_energy(u.audio, p.plan.global_frames, cfg.window);
    out.push_back(std::move(p));
  }
  return out;
}

// Shuffled passes over the corpus; deterministic for a seed.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::vector<std::size_t> next(std::size_t size) {
    std::vector<std::size_t> out;
    while (out.size() < std::min(size, order_.size())) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

Tensor stack_windows(const std::vector<const window::WindowBatch*>& batches, std::size_t W) {
  std::size_t total = 0;
  for (const auto* b : batches) total += b->windows.dim(0);
  Tensor out({total, 1, W});
  double* dst = out.data();
  for (const auto* b : batches) dst = std::copy(b->windows.data(), b->windows.data() + b->windows.numel(), dst);
  return out;
}

json ids_of(const std::vector<const Prepared*>& batch) {
  json ids = json::array();
  for (const auto* p : batch) ids.push_back(p->utt->id);
  return ids;
}

json rates_json(const std::vector<ParamGroup>& groups, const std::vector<double>& lrs) {
  json r = json::object();
  for (std::size_t i = 0; i < groups.size(); ++i) r[groups[i].name] = lrs[i];
  return r;
}

bool has_tensor_prefix(const model::Checkpoint& ckpt, const std::string& prefix) {
  return std::any_of(ckpt.tensors.begin(), ckpt.tensors.end(),
                     [&](const auto& t) { return t.first.rfind(prefix, 0) == 0; });
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) { return nn::splitmix64(seed ^ nn::splitmix64(salt)); }

}  // namespace

model::Cupe model_from_checkpoint(const model::Checkpoint& ckpt, TrainConfig* cfg_out) {
  TrainConfig cfg = parse_config(ckpt.config);
  model::Cupe m(cfg.model, cfg.seed,
                {has_tensor_prefix(ckpt, "model.classifier."), has_tensor_prefix(ckpt, "model.projection.")});
  model::import_model(m, ckpt);
  if (cfg_out) *cfg_out = cfg;
  return m;
}

model::Checkpoint make_checkpoint(model::Cupe& model, const TrainConfig& cfg, std::size_t step) {
  model::Checkpoint ckpt;
  ckpt.step = step;
  TrainConfig snap = cfg;
  snap.model = model.config();
  ckpt.config = to_ini(snap);
  model::export_model(model, ckpt);
  return ckpt;
}

double corpus_per(model::Cupe& model, const Corpus& corpus) {
  std::size_t edits = 0, total = 0;
  for (const auto& u : corpus) {
    const auto post = model::forward_clip(model, u.audio);
    const auto dec = metrics::greedy_decode(post);
    edits += metrics::align(u.classes, dec.sequence).cost();
    total += u.classes.size();
  }
  return static_cast<double>(edits) / static_cast<double>(std::max<std::size_t>(total, 1));
}

TrainResult fit(model::Cupe& model, const TrainConfig& cfg, double peak_lr, std::size_t steps, const Corpus& train,
                const Corpus* valid, RunLog& log, const std::string& mode) {
  if (!model.has_classifier()) throw std::logic_error("fit: model has no classifier");
  if (train.empty()) throw std::invalid_argument("fit: empty training corpus");
  const auto& mcfg = model.config();
  const auto prepared = prepare(train, mcfg);
  const Corpus& check_set = valid && !valid->empty() ? *valid : train;

  std::vector<ParamGroup> groups{{"all", model.trainable_parameters(), peak_lr, cfg.optim.weight_decay}};
  AdamW opt(groups, cfg.optim, steps);
  const nn::ParamList params = model.trainable_parameters();
  BatchSampler sampler(prepared.size(), mix(cfg.seed, 0x5a));
  const std::size_t K = mcfg.num_classes + 1, fw = mcfg.frames_per_window(), W = mcfg.window.window_samples;

  TrainResult result;
  log.write({{"event", "start"}, {"mode", mode}, {"steps", steps}, {"utterances", train.size()}, {"peak_lr", peak_lr},
             {"parameters", nn::count_parameters(params)}},
            true);
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<const Prepared*> batch;
    std::vector<const window::WindowBatch*> wins;
    for (std::size_t i : sampler.next(cfg.train.batch_size)) {
      batch.push_back(&prepared[i]);
      wins.push_back(&prepared[i].batch);
    }

    nn::Tape tape({.training = true, .record = true, .seed = cfg.seed, .step = s});
    Var logits = model.classify(model.encode_window(tape.constant(stack_windows(wins, W))));
    Var flat = nn::reshape(logits, {logits.dim(0), fw * K});
    std::vector<Var> losses;
    double ctc = 0.0, sil = 0.0;
    json parts = json::array();
    std::size_t row = 0;
    for (const auto* p : batch) {
      const std::size_t n = p->batch.windows_per_item();
      std::vector<std::size_t> rows(n);
      std::iota(rows.begin(), rows.end(), row);
      row += n;
      Var per_window = nn::reshape(nn::gather_rows(flat, rows), {n, fw, K});
      Var lp = nn::log(window::stitch(nn::softmax(per_window), p->plan));
      auto cl = objectives::combined_loss(lp, p->utt->classes, p->silence, mcfg.blank(), cfg.train.alpha_s);
      ctc += cl.ctc;
      sil += cl.silence;
      parts.push_back({{"id", p->utt->id}, {"ctc", cl.ctc}, {"silence", cl.silence}});
      losses.push_back(cl.total);
    }
    Var loss = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) loss = nn::add(loss, losses[i]);
    loss = nn::scale(loss, 1.0 / static_cast<double>(batch.size()));
    StepRecord rec;
    rec.step = s;
    rec.loss = loss.value().item();
    rec.ctc = ctc / static_cast<double>(batch.size());
    rec.silence = sil / static_cast<double>(batch.size());
    if (!std::isfinite(rec.loss)) {
      throw TrainingAborted("non-finite loss at step " + std::to_string(s),
                            {{"step", s}, {"mode", mode}, {"loss", rec.loss}, {"utterances", parts}});
    }

    opt.zero_grad();
    tape.backward(loss);
    rec.grad_norm = clip_grad_norm(params, cfg.optim.grad_clip);
    if (!std::isfinite(rec.grad_norm)) {
      throw TrainingAborted("non-finite gradient at step " + std::to_string(s),
                            {{"step", s}, {"mode", mode}, {"loss", rec.loss}, {"utterances", parts}});
    }
    rec.clipped_norm = grad_norm(params);
    rec.momentum = opt.schedule().momentum(s);
    rec.lrs = opt.step();
    result.history.push_back(rec);
    result.steps_run = s + 1;

    if (s % cfg.log_every == 0 || s + 1 == steps) {
      log.write({{"event", "step"},
                 {"mode", mode},
                 {"step", s},
                 {"loss", rec.loss},
                 {"ctc", rec.ctc},
                 {"silence", rec.silence},
                 {"alpha_s", cfg.train.alpha_s},
                 {"grad_norm", rec.grad_norm},
                 {"clipped_norm", rec.clipped_norm},
                 {"momentum", rec.momentum},
                 {"lr", rates_json(opt.groups(), rec.lrs)}});
    }
    const bool last = s + 1 == steps;
    if (cfg.train.validate_every > 0 && ((s + 1) % cfg.train.validate_every == 0 || last)) {
      const double per = corpus_per(model, check_set);
      result.validation.emplace_back(s + 1, per);
      log.write({{"event", "validate"}, {"mode", mode}, {"step", s + 1}, {"per", per}, {"loss", rec.loss}}, true);
      if (cfg.train.target_per > 0.0 && per < cfg.train.target_per) {
        result.stopped_early = !last;
        break;
      }
    }
  }
  result.checkpoint = make_checkpoint(model, cfg, result.steps_run);
  opt.save(result.checkpoint);
  log.write({{"event", "done"}, {"mode", mode}, {"steps", result.steps_run}, {"hash", model::checkpoint_hash(result.checkpoint)}},
            true);
  return result;
}

TrainResult train_supervised(const TrainConfig& cfg, const Corpus& train, const Corpus* valid, RunLog& log) {
  cfg.validate();
  model::Cupe model(cfg.model, cfg.seed, {true, false});
  return fit(model, cfg, cfg.train.lr, cfg.train.steps, train, valid, log, "supervised");
}

namespace {

// Mean square of each frame's hop of samples inside every window, [N, F].
Tensor frame_energies(const Tensor& windows, std::size_t frames, std::size_t hop) {
  const std::size_t N = windows.dim(0), W = windows.numel() / N;
  Tensor e({N, frames});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < frames; ++f) {
      const std::size_t b = std::min(f * hop, W - 1), end = std::min((f + 1) * hop, W);
      double s = 0.0;
      for (std::size_t i = b; i < end; ++i) s += windows[n * W + i] * windows[n * W + i];
      e[n * frames + f] = s / static_cast<double>(std::max<std::size_t>(end - b, 1));
    }
  return e;
}

Tensor rows_of(const Tensor& m, const std::vector<std::size_t>& rows) {
  const std::size_t D = m.dim(m.rank() - 1);
  Tensor out({rows.size(), D});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(m.data() + rows[i] * D, D, out.data() + i * D);
  return out;
}

}  // namespace

SslResult pretrain_ssl(const TrainConfig& cfg, const Corpus& train, RunLog& log) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("pretrain_ssl: empty corpus");
  const auto& sc = cfg.ssl;
  model::Cupe model(cfg.model, cfg.seed, {false, true});
  const auto& mcfg = model.config();
  const auto prepared = prepare(train, mcfg);
  const std::size_t fw = mcfg.frames_per_window(), W = mcfg.window.window_samples, C8 = mcfg.feature_channels();

  nn::ParamList encoder = model.feature_parameters(), quantizer;
  for (auto* p : model.encoder_parameters()) encoder.push_back(p);
  for (auto* p : model.ssl_parameters()) (p->name.rfind("ssl.quantizer", 0) == 0 ? quantizer : encoder).push_back(p);
  std::vector<ParamGroup> groups{{"encoder", encoder, sc.encoder_lr, sc.weight_decay},
                                 {"quantizer", quantizer, sc.quantizer_lr, sc.weight_decay},
                                 {"head", model.projection_parameters(), sc.head_lr, sc.weight_decay}};
  AdamW opt(groups, cfg.optim, sc.steps);
  const nn::ParamList params = model.trainable_parameters();

  objectives::SslWeights weights;
  weights.reconstruction = sc.w_reconstruction;
  weights.contrastive = sc.w_contrastive;
  weights.diversity = sc.w_diversity;
  weights.similarity = sc.w_similarity;
  weights.temperature = sc.temperature;
  weights.min_negatives = sc.min_negatives;
  weights.max_negatives = sc.max_negatives;

  BatchSampler sampler(prepared.size(), mix(cfg.seed, 0x55));
  std::mt19937_64 rng(mix(cfg.seed, 0x5511));
  SslResult result;
  bool have_codebook = false;
  log.write({{"event", "start"}, {"mode", "pretrain"}, {"steps", sc.steps}, {"utterances", train.size()},
             {"parameters", nn::count_parameters(params)}},
            true);

  for (std::size_t s = 0; s < sc.steps; ++s) {
    std::vector<const Prepared*> batch;
    std::vector<const window::WindowBatch*> wins;
    for (std::size_t i : sampler.next(sc.batch_size)) {
      batch.push_back(&prepared[i]);
      wins.push_back(&prepared[i].batch);
    }
    const Tensor windows = stack_windows(wins, W);
    const std::size_t N = windows.dim(0), M = N * fw;

    nn::Tape tape({.training = true, .record = true, .seed = cfg.seed, .step = s});
    Var feats = model.features(tape.constant(windows));  // [N, 8n, F]
    const auto plan = objectives::select_mask(frame_energies(windows, fw, mcfg.window.frame_hop_samples), sc.mask_ratio, rng);
    Var pred = model.project(model.contextualize(model.apply_mask(feats, plan.masked)));

    // The quantizer sees the unmasked frames as constants.
    const Tensor& fv = feats.value();
    Tensor frames({M, C8});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C8; ++c)
        for (std::size_t f = 0; f < fw; ++f) frames[(n * fw + f) * C8 + c] = fv[(n * C8 + c) * fw + f];
    Var q = nn::l2_normalize(model.quantizer_input(tape.constant(std::move(frames))));
    if (!have_codebook) {
      std::vector<std::size_t> pick(M);
      std::iota(pick.begin(), pick.end(), 0);
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(std::min(M, sc.codebook_size));
      while (pick.size() < sc.codebook_size) pick.push_back(pick[pick.size() % std::min(M, sc.codebook_size)]);
      result.codebook = objectives::make_codebook(rows_of(q.value(), pick), sc.codebook_decay, sc.laplace_epsilon);
      have_codebook = true;
    }
    auto& cb = result.codebook;
    const auto codes = objectives::vq_assign(q.value(), cb);

    std::vector<std::size_t> masked_rows, masked_codes;
    for (std::size_t r = 0; r < M; ++r)
      if (plan.masked[r]) masked_rows.push_back(r), masked_codes.push_back(codes[r]);
    Var pred_rows = nn::gather_rows(pred, masked_rows);
    const Tensor targets = rows_of(cb.entries, masked_codes);
    const double progress = sc.steps > 1 ? static_cast<double>(s) / static_cast<double>(sc.steps - 1) : 1.0;
    auto loss = objectives::ssl_loss(pred_rows, targets, masked_codes, q, cb, weights, progress, rng);

    SslStepRecord rec;
    rec.step = s;
    rec.parts = loss.parts;
    rec.mask_ratio = plan.batch_ratio;
    if (!std::isfinite(loss.parts.total)) {
      throw TrainingAborted("non-finite loss at step " + std::to_string(s),
                            {{"step", s}, {"mode", "pretrain"}, {"utterances", ids_of(batch)}, {"loss", loss.parts.total}});
    }
    opt.zero_grad();
    tape.backward(loss.total);
    rec.grad_norm = clip_grad_norm(params, cfg.optim.grad_clip);
    if (!std::isfinite(rec.grad_norm)) {
      throw TrainingAborted("non-finite gradient at step " + std::to_string(s),
                            {{"step", s}, {"mode", "pretrain"}, {"utterances", ids_of(batch)}});
    }
    rec.lrs = opt.step();
    objectives::vq_ema_update(cb, q.value(), codes);
    rec.perplexity = objectives::code_perplexity(codes, cb.size());
    result.history.push_back(rec);

    if (s % cfg.log_every == 0 || s + 1 == sc.steps) {
      log.write({{"event", "step"},
                 {"mode", "pretrain"},
                 {"step", s},
                 {"loss", rec.parts.total},
                 {"reconstruction", rec.parts.reconstruction},
                 {"contrastive", rec.parts.contrastive},
                 {"diversity", rec.parts.diversity},
                 {"similarity", rec.parts.similarity},
                 {"negatives", rec.parts.negatives},
                 {"perplexity", rec.perplexity},
                 {"mask_ratio", rec.mask_ratio},
                 {"grad_norm", rec.grad_norm},
                 {"lr", rates_json(opt.groups(), rec.lrs)}},
                s + 1 == sc.steps);
    }
  }
  result.checkpoint = make_checkpoint(model, cfg, sc.steps);
  opt.save(result.checkpoint);
  if (have_codebook) {
    result.checkpoint.put("codebook.entries", result.codebook.entries);
    result.checkpoint.put("codebook.ema_cluster_size", result.codebook.ema_cluster_size);
    result.checkpoint.put("codebook.ema_embed_sum", result.codebook.ema_embed_sum);
  }
  log.write({{"event", "done"}, {"mode", "pretrain"}, {"steps", sc.steps}, {"hash", model::checkpoint_hash(result.checkpoint)}},
            true);
  return result;
}

TrainResult finetune(const TrainConfig& cfg, const model::Checkpoint& pretrained, std::size_t num_classes,
                     const Corpus& train, const Corpus* valid, RunLog& log) {
  cfg.validate();
  TrainConfig source;
  model::Cupe model = model_from_checkpoint(pretrained, &source);
  if (model.config().num_classes != num_classes) {
    throw std::invalid_argument("finetune: checkpoint expects " + std::to_string(model.config().num_classes) +
                                " classes, inventory has " + std::to_string(num_classes));
  }
  model.drop_projection_head();
  model.attach_classifier(mix(cfg.seed, 0xf1));
  model.set_frozen_feature_extractor(cfg.finetune.freeze_features);
  TrainConfig run = cfg;
  run.model = model.config();
  return fit(model, run, cfg.train.lr * cfg.finetune.lr_scale, cfg.finetune.steps, train, valid, log, "finetune");
}

json MetricsReport::to_json(const std::vector<std::string>& labels) const {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json utts = json::array();
  auto symbols = [&](const std::vector<std::size_t>& seq) {
    std::string s;
    for (std::size_t c : seq) s += (s.empty() ? "" : " ") + (c < labels.size() ? labels[c] : std::to_string(c));
    return s;
  };
  for (const auto& d : details) utts.push_back({{"id", d.id}, {"per", d.per}, {"truth", symbols(d.truth)}, {"predicted", symbols(d.predicted)}});
  return {{"utterances", utterances},
          {"true_phonemes", true_phonemes},
          {"edits", edits},
          {"per", per},
          {"mean_utterance_per", mean_utterance_per},
          {"gp_macro", opt(gp_macro)},
          {"gp_weighted", opt(gp_weighted)},
          {"f1_macro", f1_macro},
          {"group_per", opt(group_per)},
          {"details", utts}};
}

MetricsReport evaluate(model::Cupe& model, const Corpus& corpus, const phonemap::PhonemeInventory& inv,
                       const EvalOptions& opt) {
  const std::size_t C = model.config().num_classes;
  if (C != inv.size()) {
    throw std::invalid_argument("evaluate: model has " + std::to_string(C) + " classes, inventory " +
                                std::to_string(inv.size()));
  }
  const bool groups = inv.has_groups();
  const auto labels = inv.output_labels();
  if (!opt.timeline_dir.empty()) std::filesystem::create_directories(opt.timeline_dir);

  MetricsReport r;
  r.confusion = metrics::ConfusionMatrix(C);
  metrics::GpAccumulator gp;
  std::vector<metrics::AlignmentResult> alignments;
  std::size_t group_edits = 0;
  double per_sum = 0.0;
  for (const auto& u : corpus) {
    const auto post = model::forward_clip(model, u.audio);
    const auto dec = metrics::greedy_decode(post);
    auto ar = metrics::align(u.classes, dec.sequence);
    gp.add(post.frames, ar, dec.segments);
    r.confusion.add(ar);
    const double per = metrics::per(ar, u.classes.size());
    per_sum += per;
    r.edits += ar.cost();
    r.true_phonemes += u.classes.size();
    if (groups) {
      group_edits += metrics::align(phonemap::reduce_to_groups(u.classes, inv), phonemap::reduce_to_groups(dec.sequence, inv)).cost();
    }
    r.details.push_back({u.id, u.classes, dec.sequence, per});
    alignments.push_back(std::move(ar));
    if (!opt.timeline_dir.empty()) metrics::timeline_export(post, labels, {}, opt.timeline_dir / (u.id + ".tsv"));
  }
  r.utterances = corpus.size();
  const double denom = static_cast<double>(std::max<std::size_t>(r.true_phonemes, 1));
  r.per = static_cast<double>(r.edits) / denom;
  r.mean_utterance_per = corpus.empty() ? 0.0 : per_sum / static_cast<double>(corpus.size());
  r.gp_macro = gp.macro();
  r.gp_weighted = gp.weighted();
  r.f1_macro = metrics::f1(alignments).macro;
  if (groups) r.group_per = static_cast<double>(group_edits) / denom;
  return r;
}

void write_report(const MetricsReport& report, const phonemap::PhonemeInventory& inv, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "report.json");
  if (!f) throw std::runtime_error("cannot write " + (dir / "report.json").string());
  f << report.to_json(inv.output_labels()).dump(2) << '\n';
  metrics::write_confusion(report.confusion, inv.classes, dir / "confusion.tsv");
}

Inference infer(model::Cupe& model, std::span<const double> audio) {
  Inference out;
  out.posteriors = model::forward_clip(model, audio);
  out.decoded = metrics::greedy_decode(out.posteriors);
  return out;
}

}  // namespace cupe::pipeline
