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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "cupe/optim.hpp"
#include "cupe/pipeline.hpp"

namespace cupe::pipeline {
namespace {

namespace fs = std::filesystem;

// Small enough that a training step takes a few milliseconds.
TrainConfig tiny_config() {
  TrainConfig c = default_config("desk");
  c.model.base_channels = 4;
  c.model.model_dim = 16;
  c.model.heads = 2;
  c.model.ffn_dim = 32;
  c.model.transformer_layers = 1;
  c.model.stream_groups = 4;
  c.model.classifier_hidden = 16;
  c.model.projection_hidden = 16;
  c.model.projection_dim = 8;
  c.train.batch_size = 2;
  c.train.steps = 3;
  c.train.validate_every = 0;
  c.ssl.batch_size = 2;
  c.ssl.steps = 3;
  c.ssl.codebook_size = 16;
  c.ssl.min_negatives = 2;
  c.ssl.max_negatives = 4;
  c.finetune.steps = 2;
  c.seed = 11;
  return c;
}

const phonemap::PhonemeInventory& inventory() {
  static const auto inv = phonemap::default_inventory();
  return inv;
}

Corpus tiny_corpus(std::uint64_t seed = 3, std::size_t n = 4) {
  data::DatasetOptions opt;
  opt.n_utts = n;
  opt.n_classes = 8;
  opt.seed = seed;
  opt.mean_phonemes = 3.0;
  opt.std_phonemes = 0.5;
  return data::synth_corpus(opt, data::default_recipes(), &inventory());
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

RunLog quiet_log(std::ostream* sink = nullptr) { return RunLog(sink, RunLog::Level::kQuiet); }

std::vector<nlohmann::json> parse_lines(const std::string& text) {
  std::vector<nlohmann::json> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

TEST(Config, IniRoundTripIsExact) {
  TrainConfig c = default_config("desk");
  apply_override(c, "train.lr=0.30000000000000004");
  apply_override(c, "ssl.mask_ratio=0.37");
  apply_override(c, "run.seed=18446744073709551615");
  apply_override(c, "data.fallback=ɐ");
  const std::string ini = to_ini(c);
  const TrainConfig back = parse_config(ini);
  EXPECT_EQ(to_ini(back), ini);
  EXPECT_EQ(back.train.lr, 0.1 + 0.2);
  EXPECT_EQ(back.seed, std::numeric_limits<std::uint64_t>::max());
  EXPECT_EQ(back.model.base_channels, 8u);
  EXPECT_EQ(back.data.fallback, "ɐ");
}

TEST(Config, PresetResetsModelAndLaterKeysApply) {
  const auto c = parse_config("[run]\npreset = desk\n[model]\nmodel_dim = 32\n");
  EXPECT_EQ(c.model.base_channels, 8u);
  EXPECT_EQ(c.model.model_dim, 32u);
  EXPECT_EQ(default_config().model.base_channels, 256u);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nlr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nsteps = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\npreset = huge\n"), ConfigError);
  EXPECT_THROW(parse_config("[ssl]\nmask_ratio = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nheads = 7\n"), ConfigError);
  EXPECT_THROW(parse_config("[train\nlr = 1\n"), ConfigError);
  TrainConfig c;
  EXPECT_THROW(apply_override(c, "train.lr"), ConfigError);
  EXPECT_THROW(apply_override(c, "nope.lr=1"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/cupe.ini"), ConfigError);
}

TEST(OneCycle, WarmupPeakAndAnneal) {
  OptimConfig o;
  const std::size_t total = 200;
  OneCycle sched(total, o);
  ASSERT_EQ(sched.warmup_steps(), 30u);
  EXPECT_NEAR(sched.lr_factor(0), 1.0 / 25.0, 1e-15);
  EXPECT_EQ(sched.lr_factor(30), 1.0);
  for (std::size_t s = 1; s <= 30; ++s) EXPECT_GT(sched.lr_factor(s), sched.lr_factor(s - 1)) << s;
  for (std::size_t s = 31; s < total; ++s) EXPECT_LT(sched.lr_factor(s), sched.lr_factor(s - 1)) << s;
  EXPECT_NEAR(sched.lr_factor(total - 1), 1.0 / 25.0 / 1e4, 1e-18);
  for (std::size_t s = 0; s < total; ++s) {
    const double m = sched.momentum(s), f = sched.lr_factor(s);
    EXPECT_GE(m, 0.8);
    EXPECT_LE(m, 0.9);
    if (s <= 30) EXPECT_NEAR((0.9 - m) / 0.1, (f - 1.0 / 25.0) / (1.0 - 1.0 / 25.0), 1e-12);
  }
  EXPECT_EQ(sched.momentum(30), 0.8);
  EXPECT_DOUBLE_EQ(sched.momentum(total - 1), 0.9);
}

TEST(AdamW, SingleStepMatchesHandComputation) {
  nn::Parameter w("w", Tensor({2, 1}, {1.0, -2.0}));
  nn::Parameter b("b", Tensor({2}, {0.5, 0.5}));
  w.grad = Tensor({2, 1}, {0.1, -0.3});
  b.grad = Tensor({2}, {0.2, 0.0});
  OptimConfig o;
  AdamW opt({{"g", {&w, &b}, 1e-2, 0.1}}, o, 10);
  const auto lrs = opt.step();
  const double lr = lrs.at(0), beta1 = 0.9;
  ASSERT_EQ(lrs.size(), 1u);
  EXPECT_NEAR(lr, 1e-2 / 25.0, 1e-17);
  auto expect = [&](double w0, double g, bool decay) {
    double x = w0;
    if (decay) x -= lr * 0.1 * x;
    const double m = (1 - beta1) * g / (1 - beta1), v = (1 - o.beta2) * g * g / (1 - o.beta2);
    return x - lr * m / (std::sqrt(v) + o.eps);
  };
  EXPECT_DOUBLE_EQ(w.value[0], expect(1.0, 0.1, true));
  EXPECT_DOUBLE_EQ(w.value[1], expect(-2.0, -0.3, true));
  EXPECT_DOUBLE_EQ(b.value[0], expect(0.5, 0.2, false));
  EXPECT_DOUBLE_EQ(b.value[1], 0.5);
}

TEST(AdamW, MomentsSurviveCheckpoint) {
  nn::Parameter w("w", Tensor({2, 2}, {1, 2, 3, 4}));
  w.grad = Tensor({2, 2}, {0.1, 0.2, 0.3, 0.4});
  OptimConfig o;
  AdamW a({{"g", {&w}, 1e-3, 0.0}}, o, 5);
  a.step();
  model::Checkpoint ck;
  a.save(ck);
  nn::Parameter w2("w", w.value);
  w2.grad = w.grad;
  AdamW b({{"g", {&w2}, 1e-3, 0.0}}, o, 5);
  b.load(ck);
  EXPECT_EQ(b.steps_taken(), 1u);
  a.step();
  b.step();
  EXPECT_TRUE(same(w.value, w2.value));
}

TEST(Clip, GlobalNormBounded) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 10.0);
  nn::Parameter a("a", Tensor({3, 4})), b("b", Tensor({5}));
  for (int trial = 0; trial < 20; ++trial) {
    a.grad = Tensor({3, 4});
    b.grad = Tensor({5});
    for (double& x : a.grad.values()) x = g(rng);
    for (double& x : b.grad.values()) x = g(rng);
    const nn::ParamList ps{&a, &b};
    const double before = clip_grad_norm(ps, 1.0);
    EXPECT_GT(before, 1.0);
    EXPECT_LE(grad_norm(ps), 1.0 + 1e-6);
  }
  a.grad = Tensor({3, 4});
  a.grad[0] = 0.5;
  b.grad = Tensor({5});
  clip_grad_norm({&a, &b}, 1.0);
  EXPECT_EQ(a.grad[0], 0.5);
}

TEST(RunLog, QuietWritesOnlyToSink) {
  std::ostringstream sink;
  RunLog log(&sink, RunLog::Level::kQuiet);
  log.write({{"event", "x"}, {"v", 1}}, true);
  EXPECT_EQ(sink.str(), "{\"event\":\"x\",\"v\":1}\n");
}

TEST(Supervised, LossDecomposesByAlpha) {
  const auto corpus = tiny_corpus();
  for (double alpha : {0.0, 0.5}) {
    auto cfg = tiny_config();
    cfg.train.alpha_s = alpha;
    auto log = quiet_log();
    const auto r = train_supervised(cfg, corpus, nullptr, log);
    ASSERT_EQ(r.history.size(), 3u);
    for (const auto& h : r.history) {
      if (alpha == 0.0) EXPECT_EQ(h.loss, h.ctc);
      EXPECT_NEAR(h.loss, h.ctc + alpha * h.silence, 1e-12);
      EXPECT_LE(h.clipped_norm, cfg.optim.grad_clip + 1e-6);
      EXPECT_GE(h.silence, 0.0);
    }
  }
}

TEST(Supervised, CheckpointSaveLoadSaveIsByteIdentical) {
  auto cfg = tiny_config();
  auto log = quiet_log();
  const auto r = train_supervised(cfg, tiny_corpus(), nullptr, log);
  const fs::path dir = fs::temp_directory_path() / "cupe_pipeline_ckpt";
  fs::create_directories(dir);
  model::save_checkpoint(dir / "a.ckpt", r.checkpoint);
  const auto back = model::load_checkpoint(dir / "a.ckpt");
  model::save_checkpoint(dir / "b.ckpt", back);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_NE(back.find("optim.step"), nullptr);

  auto m = model_from_checkpoint(back);
  EXPECT_TRUE(m.has_classifier());
  EXPECT_EQ(model::checkpoint_hash(make_checkpoint(m, cfg, r.steps_run)),
            model::checkpoint_hash([&] {
              auto c = r.checkpoint;
              std::erase_if(c.tensors, [](const auto& t) { return t.first.rfind("optim.", 0) == 0; });
              return c;
            }()));
  fs::remove_all(dir);
}

TEST(Supervised, SameSeedSameHash) {
  const auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  auto log = quiet_log();
  const auto a = train_supervised(cfg, corpus, nullptr, log);
  const auto b = train_supervised(cfg, corpus, nullptr, log);
  EXPECT_EQ(model::checkpoint_hash(a.checkpoint), model::checkpoint_hash(b.checkpoint));
  cfg.seed += 1;
  const auto c = train_supervised(cfg, corpus, nullptr, log);
  EXPECT_NE(model::checkpoint_hash(a.checkpoint), model::checkpoint_hash(c.checkpoint));
}

TEST(Supervised, NonFiniteInputAbortsWithDump) {
  auto corpus = tiny_corpus();
  for (auto& u : corpus) u.audio[u.audio.size() / 2] = std::numeric_limits<double>::quiet_NaN();
  auto cfg = tiny_config();
  auto log = quiet_log();
  try {
    train_supervised(cfg, corpus, nullptr, log);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.dump().at("step"), 0);
    EXPECT_EQ(e.dump().at("utterances").size(), cfg.train.batch_size);
  }
}

TEST(Supervised, ValidationAndEarlyStop) {
  auto cfg = tiny_config();
  cfg.train.steps = 4;
  cfg.train.validate_every = 2;
  cfg.train.target_per = 100.0;  // any PER satisfies it
  auto log = quiet_log();
  const auto corpus = tiny_corpus();
  const auto r = train_supervised(cfg, corpus, &corpus, log);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.steps_run, 2u);
  ASSERT_EQ(r.validation.size(), 1u);
  EXPECT_EQ(r.checkpoint.step, 2u);
}

TEST(Supervised, RejectsClassesOutsideModel) {
  auto cfg = tiny_config();
  cfg.model.num_classes = 4;
  auto log = quiet_log();
  EXPECT_THROW(train_supervised(cfg, tiny_corpus(), nullptr, log), std::invalid_argument);
}

struct Pretrained {
  SslResult result;
  std::string log;
};

const Pretrained& pretrained() {
  static const Pretrained p = [] {
    std::ostringstream sink;
    RunLog log(&sink, RunLog::Level::kQuiet);
    Pretrained out;
    out.result = pretrain_ssl(tiny_config(), tiny_corpus(), log);
    out.log = sink.str();
    return out;
  }();
  return p;
}

TEST(Ssl, LogsHierarchicalRatesPerGroup) {
  const auto cfg = tiny_config();
  const auto records = parse_lines(pretrained().log);
  std::size_t steps = 0;
  for (const auto& r : records) {
    if (r.at("event") != "step") continue;
    ++steps;
    const auto& lr = r.at("lr");
    const double e = lr.at("encoder"), q = lr.at("quantizer"), h = lr.at("head");
    EXPECT_NEAR(q / e, cfg.ssl.quantizer_lr / cfg.ssl.encoder_lr, 1e-12);
    EXPECT_NEAR(h / e, cfg.ssl.head_lr / cfg.ssl.encoder_lr, 1e-12);
    EXPECT_GT(r.at("perplexity").get<double>(), 0.0);
    EXPECT_GT(r.at("mask_ratio").get<double>(), 0.0);
  }
  EXPECT_EQ(steps, cfg.ssl.steps);
}

TEST(Ssl, CheckpointCarriesCodebookAndHeads) {
  const auto& ck = pretrained().result.checkpoint;
  ASSERT_NE(ck.find("codebook.entries"), nullptr);
  EXPECT_EQ(ck.find("codebook.entries")->dim(0), tiny_config().ssl.codebook_size);
  auto m = model_from_checkpoint(ck);
  EXPECT_TRUE(m.has_projection());
  EXPECT_FALSE(m.has_classifier());
}

TEST(Ssl, DropHeadRemovesExactlyHeadAndSslParameters) {
  auto m = model_from_checkpoint(pretrained().result.checkpoint);
  const std::size_t before = nn::count_parameters(m.parameters());
  const std::size_t head = nn::count_parameters(m.projection_parameters()) + nn::count_parameters(m.ssl_parameters());
  ASSERT_GT(head, 0u);
  m.drop_projection_head();
  EXPECT_EQ(nn::count_parameters(m.parameters()), before - head);
  EXPECT_FALSE(m.has_projection());
}

TEST(Ssl, CodebookDecayOneIsFrozen) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  Tensor entries({4, 3}), feats({10, 3});
  for (double& x : entries.values()) x = g(rng);
  for (double& x : feats.values()) x = g(rng);
  auto cb = objectives::make_codebook(entries, 1.0, 1e-5);
  const auto codes = objectives::vq_assign(feats, cb);
  for (int i = 0; i < 5; ++i) objectives::vq_ema_update(cb, feats, codes);
  EXPECT_TRUE(same(cb.entries, entries));
}

TEST(Finetune, FrozenFeaturesStayBitIdentical) {
  const auto& src = pretrained().result.checkpoint;
  auto cfg = tiny_config();
  auto log = quiet_log();
  const auto r = finetune(cfg, src, inventory().size(), tiny_corpus(), nullptr, log);
  auto m = model_from_checkpoint(r.checkpoint);
  EXPECT_TRUE(m.has_classifier());
  EXPECT_FALSE(m.has_projection());
  std::size_t checked = 0;
  for (const auto* p : m.feature_parameters()) {
    const Tensor* before = src.find("model." + p->name);
    ASSERT_NE(before, nullptr) << p->name;
    EXPECT_TRUE(same(*before, p->value)) << p->name;
    ++checked;
  }
  EXPECT_GT(checked, 0u);
  // The transformer did move.
  bool moved = false;
  for (const auto* p : m.encoder_parameters())
    if (!same(*src.find("model." + p->name), p->value)) moved = true;
  EXPECT_TRUE(moved);
}

TEST(Finetune, ClassCountMismatchIsAnError) {
  auto cfg = tiny_config();
  auto log = quiet_log();
  EXPECT_THROW(finetune(cfg, pretrained().result.checkpoint, 40, tiny_corpus(), nullptr, log), std::invalid_argument);
}

TEST(Evaluate, ReportFieldsInRangeAndFilesWritten) {
  auto cfg = tiny_config();
  auto log = quiet_log();
  const auto corpus = tiny_corpus(9, 3);
  const auto r = train_supervised(cfg, corpus, nullptr, log);
  auto m = model_from_checkpoint(r.checkpoint);
  const fs::path dir = fs::temp_directory_path() / "cupe_pipeline_eval";
  fs::remove_all(dir);
  const auto rep = evaluate(m, corpus, inventory(), {dir / "timelines"});
  EXPECT_EQ(rep.utterances, 3u);
  std::size_t truth = 0;
  for (const auto& u : corpus) truth += u.classes.size();
  EXPECT_EQ(rep.true_phonemes, truth);
  EXPECT_DOUBLE_EQ(rep.per, static_cast<double>(rep.edits) / static_cast<double>(truth));
  EXPECT_GE(rep.f1_macro, 0.0);
  EXPECT_LE(rep.f1_macro, 1.0);
  if (rep.gp_macro) {
    EXPECT_GE(*rep.gp_macro, 0.0);
    EXPECT_LE(*rep.gp_macro, 1.0);
  }
  ASSERT_TRUE(rep.group_per.has_value());
  EXPECT_LE(*rep.group_per, rep.per + 1e-12);
  EXPECT_EQ(corpus_per(m, corpus), rep.per);
  for (const auto& u : corpus) EXPECT_TRUE(fs::exists(dir / "timelines" / (u.id + ".tsv")));

  write_report(rep, inventory(), dir);
  std::ifstream f(dir / "report.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("utterances"), 3);
  EXPECT_EQ(j.at("details").size(), 3u);
  EXPECT_TRUE(fs::exists(dir / "confusion.tsv"));
  fs::remove_all(dir);

  auto small = phonemap::parse_inventory("a\ta\n");
  EXPECT_THROW(evaluate(m, corpus, small, {}), std::invalid_argument);
}

TEST(Infer, SilenceClipGivesNormalisedPosteriors) {
  auto cfg = tiny_config();
  model::Cupe m(cfg.model, cfg.seed);
  const std::vector<double> silence(16000, 0.0);
  const auto out = infer(m, silence);
  const std::size_t T = out.posteriors.num_frames();
  ASSERT_GT(T, 0u);
  EXPECT_EQ(out.posteriors.num_classes(), cfg.model.num_classes + 1);
  EXPECT_EQ(out.decoded.frame_labels.size(), T);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t k = 0; k <= cfg.model.num_classes; ++k) s += out.posteriors.frames[t * (cfg.model.num_classes + 1) + k];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

}  // namespace
}  // namespace cupe::pipeline
