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

// Command-line front end: dataset generation, training, evaluation and
// inference.
//
// Exit codes:
//   0  success
//   1  unexpected internal error
//   2  usage error (bad flags or arguments)
//   3  configuration error
//   4  input data error (file I/O, WAV, manifest, inventory, unknown symbol)
//   5  checkpoint error (unreadable, corrupt or incompatible file)
//   6  training aborted on a non-finite loss or gradient
//   7  model and data disagree (class count, labels outside the model)

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>

#include "cupe/audio.hpp"
#include "cupe/pipeline.hpp"

namespace {

using namespace cupe;
namespace fs = std::filesystem;

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kConfig = 3, kData = 4, kCheckpoint = 5, kAborted = 6, kMismatch = 7 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string preset;
  std::string log_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "INI config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "Override, section.key=value (repeatable)");
  app->add_option("--preset", c.preset, "paper or desk, applied before --set");
  app->add_option("--seed", c.seed, "Shorthand for --set run.seed=N");
  app->add_option("--log", c.log_path, "Append JSON-lines run records to this file");
}

pipeline::TrainConfig resolve_config(const Common& c) {
  pipeline::TrainConfig cfg = c.config.empty() ? pipeline::default_config() : pipeline::load_config(c.config);
  if (!c.preset.empty()) pipeline::apply_override(cfg, "run.preset=" + c.preset);
  for (const auto& s : c.sets) pipeline::apply_override(cfg, s);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

phonemap::PhonemeInventory inventory_for(const pipeline::DataConfig& d) {
  const fs::path dir = phonemap::default_data_dir();
  auto inv = phonemap::load_inventory(d.inventory.empty() ? dir / "phonemes.tsv" : fs::path(d.inventory));
  if (d.groups != "none") phonemap::load_groups(inv, d.groups.empty() ? dir / "groups.tsv" : fs::path(d.groups));
  return inv;
}

phonemap::MapOptions map_options(const pipeline::DataConfig& d, const phonemap::PhonemeInventory& inv) {
  phonemap::MapOptions o;
  o.strict = d.strict;
  if (!d.strict) o.fallback = inv.class_of(d.fallback);
  return o;
}

// Owns the optional log file behind a RunLog.
struct LogSink {
  std::unique_ptr<std::ofstream> file;
  pipeline::RunLog log;

  explicit LogSink(const std::string& path) : file(open(path)), log(file.get()) {}

  static std::unique_ptr<std::ofstream> open(const std::string& path) {
    if (path.empty()) return nullptr;
    if (const fs::path p(path); p.has_parent_path()) fs::create_directories(p.parent_path());
    auto f = std::make_unique<std::ofstream>(path, std::ios::app);
    if (!*f) throw std::ios_base::failure("cannot open log file " + path);
    return f;
  }
};

void save(const fs::path& out, const model::Checkpoint& ckpt) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  model::save_checkpoint(out, ckpt);
  std::cout << out.string() << "  sha256 " << model::checkpoint_hash(ckpt) << '\n';
}

pipeline::Corpus load_split(const std::string& manifest, const std::string& split, const pipeline::TrainConfig& cfg,
                            const phonemap::PhonemeInventory& inv) {
  const auto m = data::load_manifest(manifest);
  auto corpus = data::load_corpus(m, inv, split, map_options(cfg.data, inv));
  if (corpus.empty()) throw data::ManifestError(manifest + ": no records in split '" + split + "'");
  return corpus;
}

struct TrainArgs {
  Common common;
  std::string manifest, out, init;
};

int run_train(const TrainArgs& a, const std::string& verb) {
  auto cfg = resolve_config(a.common);
  const auto inv = inventory_for(cfg.data);
  LogSink sink(a.common.log_path);
  const auto train = load_split(a.manifest, cfg.data.train_split, cfg, inv);
  pipeline::Corpus valid;
  if (!cfg.data.valid_split.empty()) valid = load_split(a.manifest, cfg.data.valid_split, cfg, inv);
  const pipeline::Corpus* vp = valid.empty() ? nullptr : &valid;

  if (verb == "pretrain") {
    save(a.out, pipeline::pretrain_ssl(cfg, train, sink.log).checkpoint);
    return kOk;
  }
  if (cfg.model.num_classes != inv.size()) {
    throw std::invalid_argument("model.num_classes is " + std::to_string(cfg.model.num_classes) + " but the inventory has " +
                                std::to_string(inv.size()) + " classes");
  }
  if (verb == "train") {
    save(a.out, pipeline::train_supervised(cfg, train, vp, sink.log).checkpoint);
  } else {
    const auto pretrained = model::load_checkpoint(a.init);
    save(a.out, pipeline::finetune(cfg, pretrained, inv.size(), train, vp, sink.log).checkpoint);
  }
  return kOk;
}

model::Cupe load_model(const std::string& path, pipeline::TrainConfig* cfg) {
  const auto ckpt = model::load_checkpoint(path);
  try {
    auto m = pipeline::model_from_checkpoint(ckpt, cfg);
    if (!m.has_classifier()) throw model::CheckpointError(path + " has no classifier (pretraining checkpoint?)");
    return m;
  } catch (const pipeline::ConfigError& e) {
    throw model::CheckpointError(path + ": embedded config: " + e.what());
  }
}

// Data settings from the command line when given, else from the checkpoint.
pipeline::TrainConfig data_config(const Common& c, const pipeline::TrainConfig& snapshot) {
  if (c.config.empty() && c.sets.empty() && c.preset.empty()) return snapshot;
  return resolve_config(c);
}

struct EvalArgs {
  Common common;
  std::string checkpoint, manifest, out, split;
  bool timelines = false;
};

int run_eval(const EvalArgs& a) {
  pipeline::TrainConfig cfg;
  auto m = load_model(a.checkpoint, &cfg);
  const auto cli = data_config(a.common, cfg);
  const auto inv = inventory_for(cli.data);
  const auto corpus = load_split(a.manifest, a.split, cli, inv);
  pipeline::EvalOptions opt;
  if (a.timelines) opt.timeline_dir = fs::path(a.out) / "timelines";
  const auto report = pipeline::evaluate(m, corpus, inv, opt);
  pipeline::write_report(report, inv, a.out);
  std::cout << std::fixed << std::setprecision(4) << "utterances " << report.utterances << "  PER " << report.per
            << "  F1 " << report.f1_macro;
  if (report.gp_macro) std::cout << "  GPm " << *report.gp_macro << "  GPw " << *report.gp_weighted;
  if (report.group_per) std::cout << "  group PER " << *report.group_per;
  std::cout << '\n';
  return kOk;
}

struct InferArgs {
  Common common;
  std::string checkpoint, wav, timeline;
};

int run_infer(const InferArgs& a) {
  pipeline::TrainConfig cfg;
  auto m = load_model(a.checkpoint, &cfg);
  const auto cli = data_config(a.common, cfg);
  const auto inv = inventory_for(cli.data);
  if (m.config().num_classes != inv.size()) {
    throw std::invalid_argument("checkpoint has " + std::to_string(m.config().num_classes) + " classes, inventory " +
                                std::to_string(inv.size()));
  }
  const auto clip = audio::load_wav(a.wav);
  const auto out = pipeline::infer(m, clip.samples);
  const auto labels = inv.output_labels();
  const double hop = out.posteriors.frame_hop;
  std::cout << std::fixed << std::setprecision(3);
  for (const auto& s : out.decoded.segments) {
    std::cout << labels[s.label] << '\t' << s.begin << '\t' << s.end << '\t' << static_cast<double>(s.begin) * hop << '\t'
              << static_cast<double>(s.end) * hop << '\n';
  }
  std::string seq;
  for (std::size_t c : out.decoded.sequence) seq += (seq.empty() ? "" : " ") + labels[c];
  std::cout << "# " << seq << '\n';
  if (!a.timeline.empty()) metrics::timeline_export(out.posteriors, labels, {}, a.timeline);
  return kOk;
}

int run_inspect(const std::string& path) {
  const auto ckpt = model::load_checkpoint(path);
  std::size_t values = 0, model_values = 0;
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [name, t] : ckpt.tensors) {
    values += t.numel();
    const auto dot = name.find('.');
    const std::string top = name.substr(0, dot);
    std::string key = top;
    if (top == "model") {
      model_values += t.numel();
      const auto next = name.find('.', dot + 1);
      key = name.substr(0, next);
    }
    groups[key] = groups.value(key, std::size_t{0}) + t.numel();
  }
  const nlohmann::json info{{"path", path},
                            {"version", ckpt.version},
                            {"step", ckpt.step},
                            {"sha256", model::checkpoint_hash(ckpt)},
                            {"tensors", ckpt.tensors.size()},
                            {"values", values},
                            {"model_values", model_values},
                            {"by_prefix", groups}};
  std::cout << info.dump(2) << "\n\n" << ckpt.config;
  return kOk;
}

struct DatasetArgs {
  Common common;
  std::string out;
  data::DatasetOptions opt;
};

int run_dataset(const DatasetArgs& a) {
  const auto cfg = resolve_config(a.common);
  const auto inv = inventory_for(cfg.data);
  const auto book = data::default_recipes();
  const auto m = data::make_dataset(a.out, a.opt, inv, book);
  std::cout << m.records.size() << " utterances in " << a.out << '\n';
  return kOk;
}

template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const pipeline::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const pipeline::TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << '\n' << e.dump().dump(2) << '\n';
    return kAborted;
  } catch (const model::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const audio::WavError& e) {
    std::cerr << "wav error: " << e.what() << '\n';
    return kData;
  } catch (const data::ManifestError& e) {
    std::cerr << "manifest error: " << e.what() << '\n';
    return kData;
  } catch (const phonemap::InventoryError& e) {
    std::cerr << "inventory error: " << e.what() << '\n';
    return kData;
  } catch (const phonemap::UnknownSymbol& e) {
    std::cerr << "unknown symbol: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kData;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CUPE phoneme recogniser"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  DatasetArgs ds;
  auto* dataset = app.add_subcommand("dataset", "Synthetic corpus tools");
  dataset->require_subcommand(1);
  auto* make = dataset->add_subcommand("make", "Write synthetic WAVs and manifest.tsv");
  add_common(make, ds.common);
  make->add_option("--out", ds.out, "Output directory")->required();
  make->add_option("--utterances", ds.opt.n_utts, "Number of utterances")->capture_default_str();
  make->add_option("--classes", ds.opt.n_classes, "Classes drawn from the inventory head")->capture_default_str();
  make->add_option("--holdout", ds.opt.holdout_fraction, "Fraction tagged as split 'test'")->capture_default_str();
  make->add_option("--data-seed", ds.opt.seed, "Generator seed")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Supervised CTC training from scratch");
  auto* pretrain = app.add_subcommand("pretrain", "Self-supervised masked-prediction pretraining");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint with a fresh classifier");
  for (auto* sub : {train, pretrain, finetune}) {
    add_common(sub, tr.common);
    sub->add_option("--manifest", tr.manifest, "manifest.tsv")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", tr.out, "Checkpoint to write")->required();
  }
  finetune->add_option("--init", tr.init, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  add_common(eval, ev.common);
  eval->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", ev.manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--out", ev.out, "Report directory")->required();
  eval->add_option("--split", ev.split, "Split to evaluate (all when empty)");
  eval->add_flag("--timelines", ev.timelines, "Write per-utterance posterior timelines");

  InferArgs in;
  auto* infer = app.add_subcommand("infer", "Decode one WAV file");
  add_common(infer, in.common);
  infer->add_option("--checkpoint", in.checkpoint)->required()->check(CLI::ExistingFile);
  infer->add_option("wav", in.wav, "16 kHz mono WAV")->required();
  infer->add_option("--timeline", in.timeline, "Write the per-frame posterior table here");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Summarise a checkpoint");
  inspect->add_option("checkpoint", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  return guarded([&] {
    if (make->parsed()) return run_dataset(ds);
    if (train->parsed()) return run_train(tr, "train");
    if (pretrain->parsed()) return run_train(tr, "pretrain");
    if (finetune->parsed()) return run_train(tr, "finetune");
    if (eval->parsed()) return run_eval(ev);
    if (infer->parsed()) return run_infer(in);
    if (inspect->parsed()) return run_inspect(inspect_path);
    return static_cast<int>(kUsage);
  });
}
