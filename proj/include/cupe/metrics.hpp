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

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cupe/tensor.hpp"
#include "cupe/window.hpp"

namespace cupe::metrics {

/// Frames [begin, end) of one emitted phoneme before collapsing.
struct Segment {
  std::size_t label;
  std::size_t begin;
  std::size_t end;
};

struct Decoded {
  std::vector<std::size_t> sequence;      // collapsed, blanks removed
  std::vector<std::size_t> frame_labels;  // per-frame argmax
  std::vector<Segment> segments;          // one per sequence entry
};

/// Per-frame argmax, collapse repeats, drop blanks. frames is [T, K].
Decoded greedy_decode(const Tensor& frames, std::size_t blank);
Decoded greedy_decode(const window::StitchedPosteriors& posteriors);

enum class OpKind { kMatch, kSubstitute, kDelete, kInsert };

inline constexpr std::size_t kNone = static_cast<std::size_t>(-1);

struct AlignOp {
  OpKind kind;
  std::size_t true_index = kNone;
  std::size_t pred_index = kNone;
  std::size_t true_label = kNone;
  std::size_t pred_label = kNone;
};

struct AlignmentResult {
  std::vector<AlignOp> ops;
  std::size_t matches = 0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;

  std::size_t cost() const { return substitutions + deletions + insertions; }
};

/// Unit-cost edit alignment. Traceback prefers match, then substitution,
/// deletion, insertion.
AlignmentResult align(std::span<const std::size_t> truth, std::span<const std::size_t> pred);

/// (S + I + D) / max(true_len, 1).
double per(const AlignmentResult& ar, std::size_t true_len);

/// Ground-truth probability over the frames of the aligned predicted phoneme,
/// aggregated per true class across utterances.
class GpAccumulator {
 public:
  /// frames is [T, K]; segments come from greedy_decode of the same frames.
  void add(const Tensor& frames, const AlignmentResult& ar, std::span<const Segment> segments);
  void merge(const GpAccumulator& other);

  /// Unweighted mean over classes of their mean scores.
  std::optional<double> macro() const;
  /// Mean over aligned true-phoneme occurrences.
  std::optional<double> weighted() const;

 private:
  std::map<std::size_t, std::pair<double, std::size_t>> per_class_;
};

struct ClassScores {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision() const;
  double recall() const;
  double f1() const;
};

struct F1Report {
  double macro = 0.0;  // over classes present in truth
  std::map<std::size_t, ClassScores> per_class;
};

F1Report f1(std::span<const AlignmentResult> ars);

/// (C + 1) x (C + 1) counts; index C is the unaligned "Un" row/column.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  void add(const AlignmentResult& ar);
  std::size_t classes() const { return classes_; }
  std::size_t unaligned() const { return classes_; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * (classes_ + 1) + pred]; }
  std::size_t total() const;

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
};

ConfusionMatrix confusion(std::span<const AlignmentResult> ars, std::size_t classes);

/// Tab-separated matrix with a header row of predicted labels ("Un" last).
void write_confusion(const ConfusionMatrix& m, std::span<const std::string> labels, const std::filesystem::path& path);

/// Tab-separated, one row per frame:
///   time_s, p_<label> for every class and blank, argmax, [truth]
/// truth holds one label per frame or is empty.
void timeline_export(const window::StitchedPosteriors& posteriors, std::span<const std::string> labels,
                     std::span<const std::string> truth, const std::filesystem::path& path);

struct Timeline {
  std::vector<std::string> header;
  std::vector<double> times;
  Tensor probabilities;  // [T, K]
  std::vector<std::string> argmax;
  std::vector<std::string> truth;
};

Timeline read_timeline(const std::filesystem::path& path);

}  // namespace cupe::metrics
