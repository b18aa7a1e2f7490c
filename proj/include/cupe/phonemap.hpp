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
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cupe::phonemap {

class InventoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by strict mapping; symbol() names the offending token.
class UnknownSymbol : public std::runtime_error {
 public:
  UnknownSymbol(std::string symbol, std::size_t position);
  const std::string& symbol() const { return symbol_; }
  std::size_t position() const { return position_; }

 private:
  std::string symbol_;
  std::size_t position_;
};

struct PhonemeInventory {
  std::vector<std::string> classes;                       // canonical symbols, in output order
  std::unordered_map<std::string, std::size_t> mapping;   // raw symbol -> class
  std::vector<std::size_t> groups;                        // class -> group, empty when absent
  std::vector<std::string> group_names;
  std::size_t longest_raw_tokens = 1;                     // widest multi-token merge

  std::size_t size() const { return classes.size(); }
  std::size_t blank_id() const { return classes.size(); }
  bool has_groups() const { return !groups.empty(); }
  std::optional<std::size_t> find(const std::string& raw) const;
  std::size_t class_of(const std::string& canonical) const;  // throws InventoryError
  /// Labels for model outputs: classes followed by "<blank>".
  std::vector<std::string> output_labels() const;
};

/// One `raw<TAB>canonical` record per line, `#` comments. Identity records
/// declare the classes.
PhonemeInventory parse_inventory(const std::string& text);
PhonemeInventory load_inventory(const std::filesystem::path& path);

/// `canonical<TAB>group` records; every class must be assigned.
void parse_groups(PhonemeInventory& inv, const std::string& text);
void load_groups(PhonemeInventory& inv, const std::filesystem::path& path);

/// Shipped tables, located via CUPE_DATA_DIR or the build-time data path.
std::filesystem::path default_data_dir();
PhonemeInventory default_inventory(bool with_groups = true);

struct MapOptions {
  bool strict = true;
  std::optional<std::size_t> fallback;  // required when !strict
  bool merge_adjacent = true;           // e.g. [t, ʃ] -> tʃ
};

struct MappedSequence {
  std::vector<std::size_t> classes;
  std::size_t fallbacks = 0;
  std::size_t merges = 0;
};

/// Adjacent tokens whose concatenation is a known symbol are merged,
/// widest first, before single-token lookup.
MappedSequence map_sequence(std::span<const std::string> tokens, const PhonemeInventory& inv,
                            const MapOptions& opt = {});

/// Whitespace-separated token string.
std::vector<std::string> split_tokens(const std::string& text);

std::vector<std::size_t> reduce_to_groups(std::span<const std::size_t> seq, const PhonemeInventory& inv);

/// Inventory whose classes are the groups of inv, each its own group.
PhonemeInventory group_inventory(const PhonemeInventory& inv);

}  // namespace cupe::phonemap
