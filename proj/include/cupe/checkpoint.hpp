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
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cupe/model.hpp"

namespace cupe::model {

/// On-disk layout, all integers little-endian:
///   "CUPECKPT" | u32 version | u64 step | u64 len, config text |
///   u64 count | count x (u32 len, name | u32 rank | u64 dims[rank] | f64 values)
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint64_t step = 0;
  std::string config;  // INI snapshot
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
  void put(const std::string& name, Tensor value);
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

/// Refuses to write non-finite tensors.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Hex SHA-256 of the serialized checkpoint.
std::string checkpoint_hash(const Checkpoint& ckpt);

/// Copies the model state under "model." names.
void export_model(Cupe& model, Checkpoint& ckpt);
/// Restores every model tensor; missing names or shape mismatches throw.
void import_model(Cupe& model, const Checkpoint& ckpt);

}  // namespace cupe::model
