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

#include "cupe/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace cupe::metrics {

Decoded greedy_decode(const Tensor& frames, std::size_t blank) {
  if (frames.rank() != 2) throw ShapeError("greedy_decode expects [T, K], got " + shape_str(frames.shape()));
  const std::size_t T = frames.dim(0), K = frames.dim(1);
  Decoded d;
  d.frame_labels.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = frames.data() + t * K;
    d.frame_labels[t] = static_cast<std::size_t>(std::max_element(row, row + K) - row);
  }
  for (std::size_t t = 0; t < T;) {
    std::size_t end = t + 1;
    while (end < T && d.frame_labels[end] == d.frame_labels[t]) ++end;
    if (d.frame_labels[t] != blank) {
      d.sequence.push_back(d.frame_labels[t]);
      d.segments.push_back({d.frame_labels[t], t, end});
    }
    t = end;
  }
  return d;
}

Decoded greedy_decode(const window::StitchedPosteriors& p) { return greedy_decode(p.frames, p.num_classes() - 1); }

AlignmentResult align(std::span<const std::size_t> truth, std::span<const std::size_t> pred) {
  const std::size_t n = truth.size(), m = pred.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      at(i, j) = std::min({at(i - 1, j - 1) + (truth[i - 1] != pred[j - 1]), at(i - 1, j) + 1, at(i, j - 1) + 1});
    }

  AlignmentResult r;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && truth[i - 1] == pred[j - 1] && at(i, j) == at(i - 1, j - 1)) {
      r.ops.push_back({OpKind::kMatch, i - 1, j - 1, truth[i - 1], pred[j - 1]});
      ++r.matches, --i, --j;
    } else if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + 1) {
      r.ops.push_back({OpKind::kSubstitute, i - 1, j - 1, truth[i - 1], pred[j - 1]});
      ++r.substitutions, --i, --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      r.ops.push_back({OpKind::kDelete, i - 1, kNone, truth[i - 1], kNone});
      ++r.deletions, --i;
    } else {
      r.ops.push_back({OpKind::kInsert, kNone, j - 1, kNone, pred[j - 1]});
      ++r.insertions, --j;
    }
  }
  std::reverse(r.ops.begin(), r.ops.end());
  return r;
}

double per(const AlignmentResult& ar, std::size_t true_len) {
  if (true_len != ar.matches + ar.substitutions + ar.deletions) {
    throw std::invalid_argument("per: true length " + std::to_string(true_len) + " does not match alignment");
  }
  return static_cast<double>(ar.cost()) / static_cast<double>(std::max<std::size_t>(true_len, 1));
}

void GpAccumulator::add(const Tensor& frames, const AlignmentResult& ar, std::span<const Segment> segments) {
  const std::size_t K = frames.dim(1);
  for (const auto& op : ar.ops) {
    if (op.kind != OpKind::kMatch && op.kind != OpKind::kSubstitute) continue;
    if (op.pred_index >= segments.size()) throw std::out_of_range("gp: alignment refers to a missing segment");
    const Segment& s = segments[op.pred_index];
    if (op.true_label >= K) throw std::out_of_range("gp: true label outside posterior classes");
    double score = 0.0;
    for (std::size_t t = s.begin; t < s.end; ++t) score += frames[t * K + op.true_label];
    score /= static_cast<double>(s.end - s.begin);
    auto& [sum, count] = per_class_[op.true_label];
    sum += score;
    ++count;
  }
}

void GpAccumulator::merge(const GpAccumulator& other) {
  for (const auto& [c, v] : other.per_class_) {
    per_class_[c].first += v.first;
    per_class_[c].second += v.second;
  }
}

std::optional<double> GpAccumulator::macro() const {
  if (per_class_.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& [c, v] : per_class_) s += v.first / static_cast<double>(v.second);
  return s / static_cast<double>(per_class_.size());
}

std::optional<double> GpAccumulator::weighted() const {
  if (per_class_.empty()) return std::nullopt;
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& [c, v] : per_class_) s += v.first, n += v.second;
  return s / static_cast<double>(n);
}

double ClassScores::precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
double ClassScores::recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
double ClassScores::f1() const {
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

F1Report f1(std::span<const AlignmentResult> ars) {
  F1Report r;
  for (const auto& ar : ars) {
    for (const auto& op : ar.ops) {
      switch (op.kind) {
        case OpKind::kMatch:
          ++r.per_class[op.true_label].tp;
          break;
        case OpKind::kSubstitute:
          ++r.per_class[op.pred_label].fp;
          ++r.per_class[op.true_label].fn;
          break;
        case OpKind::kDelete:
          ++r.per_class[op.true_label].fn;
          break;
        case OpKind::kInsert:
          ++r.per_class[op.pred_label].fp;
          break;
      }
    }
  }
  double s = 0.0;
  std::size_t present = 0;
  for (const auto& [c, sc] : r.per_class) {
    if (sc.tp + sc.fn == 0) continue;  // not in truth
    s += sc.f1();
    ++present;
  }
  r.macro = present ? s / static_cast<double>(present) : 0.0;
  return r;
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes)
    : classes_(classes), counts_((classes + 1) * (classes + 1), 0) {}

void ConfusionMatrix::add(const AlignmentResult& ar) {
  const std::size_t w = classes_ + 1;
  for (const auto& op : ar.ops) {
    const std::size_t t = op.kind == OpKind::kInsert ? classes_ : op.true_label;
    const std::size_t p = op.kind == OpKind::kDelete ? classes_ : op.pred_label;
    if (t > classes_ || p > classes_) throw std::out_of_range("confusion: label outside class range");
    ++counts_[t * w + p];
  }
}

std::size_t ConfusionMatrix::total() const {
  std::size_t s = 0;
  for (std::size_t c : counts_) s += c;
  return s;
}

ConfusionMatrix confusion(std::span<const AlignmentResult> ars, std::size_t classes) {
  ConfusionMatrix m(classes);
  for (const auto& ar : ars) m.add(ar);
  return m;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, '\t')) out.push_back(cell);
  return out;
}

}  // namespace

void write_confusion(const ConfusionMatrix& m, std::span<const std::string> labels, const std::filesystem::path& path) {
  if (labels.size() < m.classes()) throw std::invalid_argument("write_confusion: too few labels");
  auto f = open_out(path);
  auto name = [&](std::size_t i) { return i == m.unaligned() ? std::string("Un") : labels[i]; };
  f << "true\\pred";
  for (std::size_t p = 0; p <= m.classes(); ++p) f << '\t' << name(p);
  f << '\n';
  for (std::size_t t = 0; t <= m.classes(); ++t) {
    f << name(t);
    for (std::size_t p = 0; p <= m.classes(); ++p) f << '\t' << m.at(t, p);
    f << '\n';
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

void timeline_export(const window::StitchedPosteriors& post, std::span<const std::string> labels,
                     std::span<const std::string> truth, const std::filesystem::path& path) {
  const std::size_t T = post.num_frames(), K = post.num_classes();
  if (labels.size() != K) {
    throw std::invalid_argument("timeline_export: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(K) + " classes");
  }
  if (!truth.empty() && truth.size() != T) throw std::invalid_argument("timeline_export: truth length mismatch");
  auto f = open_out(path);
  f << "time_s";
  for (const auto& l : labels) f << "\tp_" << l;
  f << "\targmax";
  if (!truth.empty()) f << "\ttruth";
  f << '\n';
  f << std::setprecision(17);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = post.frames.data() + t * K;
    f << static_cast<double>(t) * post.frame_hop;
    for (std::size_t k = 0; k < K; ++k) f << '\t' << row[k];
    f << '\t' << labels[static_cast<std::size_t>(std::max_element(row, row + K) - row)];
    if (!truth.empty()) f << '\t' << truth[t];
    f << '\n';
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

Timeline read_timeline(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  Timeline tl;
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("timeline: missing header");
  tl.header = split_tabs(line);
  const bool has_truth = !tl.header.empty() && tl.header.back() == "truth";
  const std::size_t K = tl.header.size() - 2 - (has_truth ? 1 : 0);
  std::vector<double> probs;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto cells = split_tabs(line);
    if (cells.size() != tl.header.size()) throw std::runtime_error("timeline: ragged row");
    tl.times.push_back(std::stod(cells[0]));
    for (std::size_t k = 0; k < K; ++k) probs.push_back(std::stod(cells[1 + k]));
    tl.argmax.push_back(cells[1 + K]);
    if (has_truth) tl.truth.push_back(cells[2 + K]);
  }
  tl.probabilities = Tensor({tl.times.size(), K}, std::move(probs));
  return tl;
}

}  // namespace cupe::metrics
