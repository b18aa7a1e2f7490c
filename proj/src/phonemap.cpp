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

#include "cupe/phonemap.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#ifndef CUPE_DATA_DIR
#define CUPE_DATA_DIR "data"
#endif

namespace cupe::phonemap {

UnknownSymbol::UnknownSymbol(std::string symbol, std::size_t position)
    : std::runtime_error("unknown phoneme symbol '" + symbol + "' at token " + std::to_string(position)),
      symbol_(std::move(symbol)),
      position_(position) {}

std::optional<std::size_t> PhonemeInventory::find(const std::string& raw) const {
  auto it = mapping.find(raw);
  if (it == mapping.end()) return std::nullopt;
  return it->second;
}

std::size_t PhonemeInventory::class_of(const std::string& canonical) const {
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i] == canonical) return i;
  throw InventoryError("no class named '" + canonical + "'");
}

std::vector<std::string> PhonemeInventory::output_labels() const {
  auto out = classes;
  out.push_back("<blank>");
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Record {
  std::size_t line;
  std::string left, right;
};

std::vector<Record> parse_records(const std::string& text, const char* what) {
  std::vector<Record> out;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw InventoryError(std::string(what) + " line " + std::to_string(n) + ": expected two tab-separated fields");
    }
    Record r{n, trim(line.substr(0, tab)), trim(line.substr(tab + 1))};
    if (r.left.empty() || r.right.empty())
      throw InventoryError(std::string(what) + " line " + std::to_string(n) + ": empty field");
    out.push_back(std::move(r));
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InventoryError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Number of single tokens a raw symbol may have been split into: one per
// base letter, where combining and modifier characters attach to the letter
// before them.
std::size_t token_width(const std::string& raw) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < raw.size();) {
    const auto c = static_cast<unsigned char>(raw[i]);
    const std::size_t len = c < 0x80 ? 1 : c < 0xE0 ? 2 : c < 0xF0 ? 3 : 4;
    std::string cp = raw.substr(i, len);
    // ':' , 'ʲ' (U+02B2), 'ː' (U+02D0) and combining marks (U+0300..036F).
    const bool modifier = cp == ":" || cp == "\xCA\xB2" || cp == "\xCB\x90" ||
                          (len == 2 && (c == 0xCC || (c == 0xCD && static_cast<unsigned char>(raw[i + 1]) < 0xB0)));
    if (!modifier || n == 0) ++n;
    i += len;
  }
  return n;
}

}  // namespace

PhonemeInventory parse_inventory(const std::string& text) {
  const auto records = parse_records(text, "inventory");
  if (records.empty()) throw InventoryError("inventory is empty");
  PhonemeInventory inv;
  for (const auto& r : records) {
    if (r.left != r.right) continue;
    if (inv.mapping.count(r.left)) throw InventoryError("inventory line " + std::to_string(r.line) + ": duplicate raw symbol '" + r.left + "'");
    inv.mapping[r.left] = inv.classes.size();
    inv.classes.push_back(r.left);
  }
  for (const auto& r : records) {
    if (r.left == r.right) continue;
    if (inv.mapping.count(r.left)) throw InventoryError("inventory line " + std::to_string(r.line) + ": duplicate raw symbol '" + r.left + "'");
    auto it = inv.mapping.find(r.right);
    if (it == inv.mapping.end() || inv.classes[it->second] != r.right) {
      throw InventoryError("inventory line " + std::to_string(r.line) + ": canonical '" + r.right + "' is not a declared class");
    }
    inv.mapping[r.left] = it->second;
  }
  for (const auto& [raw, c] : inv.mapping) inv.longest_raw_tokens = std::max(inv.longest_raw_tokens, token_width(raw));
  return inv;
}

PhonemeInventory load_inventory(const std::filesystem::path& path) {
  try {
    return parse_inventory(read_file(path));
  } catch (const InventoryError& e) {
    throw InventoryError(path.string() + ": " + e.what());
  }
}

void parse_groups(PhonemeInventory& inv, const std::string& text) {
  const auto records = parse_records(text, "groups");
  std::vector<std::size_t> groups(inv.size(), static_cast<std::size_t>(-1));
  std::vector<std::string> names;
  for (const auto& r : records) {
    std::size_t c;
    try {
      c = inv.class_of(r.left);
    } catch (const InventoryError&) {
      throw InventoryError("groups line " + std::to_string(r.line) + ": unknown class '" + r.left + "'");
    }
    if (groups[c] != static_cast<std::size_t>(-1))
      throw InventoryError("groups line " + std::to_string(r.line) + ": class '" + r.left + "' assigned twice");
    std::size_t g = 0;
    while (g < names.size() && names[g] != r.right) ++g;
    if (g == names.size()) names.push_back(r.right);
    groups[c] = g;
  }
  for (std::size_t c = 0; c < groups.size(); ++c)
    if (groups[c] == static_cast<std::size_t>(-1)) throw InventoryError("groups: class '" + inv.classes[c] + "' has no group");
  inv.groups = std::move(groups);
  inv.group_names = std::move(names);
}

void load_groups(PhonemeInventory& inv, const std::filesystem::path& path) { parse_groups(inv, read_file(path)); }

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("CUPE_DATA_DIR"); env && *env) return env;
  return CUPE_DATA_DIR;
}

PhonemeInventory default_inventory(bool with_groups) {
  const auto dir = default_data_dir();
  auto inv = load_inventory(dir / "phonemes.tsv");
  if (with_groups) load_groups(inv, dir / "groups.tsv");
  return inv;
}

MappedSequence map_sequence(std::span<const std::string> tokens, const PhonemeInventory& inv, const MapOptions& opt) {
  if (!opt.strict && (!opt.fallback || *opt.fallback >= inv.size())) {
    throw std::invalid_argument("map_sequence: lenient mode needs a fallback class inside the inventory");
  }
  MappedSequence out;
  for (std::size_t i = 0; i < tokens.size();) {
    bool merged = false;
    if (opt.merge_adjacent) {
      for (std::size_t w = std::min(inv.longest_raw_tokens, tokens.size() - i); w >= 2; --w) {
        std::string joined;
        for (std::size_t k = 0; k < w; ++k) joined += tokens[i + k];
        if (auto c = inv.find(joined)) {
          out.classes.push_back(*c);
          ++out.merges;
          i += w;
          merged = true;
          break;
        }
      }
    }
    if (merged) continue;
    if (auto c = inv.find(tokens[i])) {
      out.classes.push_back(*c);
    } else if (opt.strict) {
      throw UnknownSymbol(tokens[i], i);
    } else {
      out.classes.push_back(*opt.fallback);
      ++out.fallbacks;
    }
    ++i;
  }
  return out;
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

std::vector<std::size_t> reduce_to_groups(std::span<const std::size_t> seq, const PhonemeInventory& inv) {
  if (!inv.has_groups()) throw InventoryError("inventory has no group table");
  std::vector<std::size_t> out;
  out.reserve(seq.size());
  for (std::size_t c : seq) {
    if (c >= inv.groups.size()) throw std::out_of_range("reduce_to_groups: class " + std::to_string(c) + " out of range");
    out.push_back(inv.groups[c]);
  }
  return out;
}

PhonemeInventory group_inventory(const PhonemeInventory& inv) {
  if (!inv.has_groups()) throw InventoryError("inventory has no group table");
  PhonemeInventory g;
  g.classes = inv.group_names;
  for (std::size_t i = 0; i < g.classes.size(); ++i) {
    g.mapping[g.classes[i]] = i;
    g.groups.push_back(i);
  }
  g.group_names = g.classes;
  return g;
}

}  // namespace cupe::phonemap
