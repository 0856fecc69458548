// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "seemore/errors.hpp"

namespace seemore {

/// Architecture hyperparameters.
struct ModelConfig {
  std::size_t n_rg = 6;
  std::size_t channels = 36;
  std::size_t scale = 2;
  std::size_t n_experts = 3;
  std::vector<std::size_t> ranks{2, 4, 8};
  std::size_t topk = 1;
  std::size_t see_kernel = 11;
  std::size_t recursion = 2;
  std::size_t ffn_ratio = 2;
  bool rme_first = true;  // residual-group block order: RME then SME

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (n_rg == 0) fail("n_rg must be >= 1");
    if (channels == 0) fail("channels must be >= 1");
    if (scale < 2 || scale > 4) fail("scale must be 2, 3 or 4");
    if (n_experts == 0) fail("n_experts must be >= 1");
    if (ranks.size() != n_experts) fail("ranks must list exactly n_experts values");
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      if (ranks[i] == 0 || ranks[i] >= channels) fail("every rank must satisfy 1 <= rank < channels");
      if (i > 0 && ranks[i] <= ranks[i - 1]) fail("ranks must be strictly increasing");
    }
    if (topk == 0 || topk > n_experts) fail("topk must be in [1, n_experts]");
    if (see_kernel == 0 || see_kernel % 2 == 0) fail("see_kernel must be odd");
    if (recursion == 0) fail("recursion must be >= 1");
    if (ffn_ratio == 0 || (ffn_ratio * channels) % 2 != 0) fail("ffn_ratio * channels must be even");
  }

  /// Smallest LR side the context pyramid accepts.
  std::size_t min_input_side() const { return std::size_t{1} << recursion; }
};

/// Optimization recipe.
struct TrainConfig {
  std::size_t patch = 64;  // LR crop side
  std::size_t batch = 32;
  std::size_t iters = 500000;
  double lr0 = 1e-3;
  std::vector<std::size_t> milestones{250000, 400000, 450000, 475000};
  double fft_weight = 0.1;
  std::uint64_t seed = 0;
  std::size_t save_every = 0;  // 0: only at the end

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (patch == 0 || batch == 0 || iters == 0) fail("patch, batch and iters must be positive");
    if (!(lr0 > 0.0)) fail("lr0 must be positive");
    if (!(fft_weight >= 0.0)) fail("fft_weight must be >= 0");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] >= iters) fail("milestones must be < iters");
      if (i > 0 && milestones[i] <= milestones[i - 1]) fail("milestones must be strictly increasing");
    }
  }

  /// Milestones at 50/80/90/95% of `total`.
  static std::vector<std::size_t> scaled_milestones(std::size_t total) {
    std::vector<std::size_t> out;
    for (double f : {0.5, 0.8, 0.9, 0.95}) {
      auto m = static_cast<std::size_t>(f * static_cast<double>(total));
      if (m > 0 && m < total && (out.empty() || m > out.back())) out.push_back(m);
    }
    return out;
  }
};

/// Built-in architecture presets: T, B, L.
inline ModelConfig preset(const std::string& name, std::size_t scale = 2) {
  ModelConfig c;
  c.scale = scale;
  if (name == "T") {
    c.n_rg = 6;
    c.channels = 36;
    c.recursion = 2;
  } else if (name == "B") {
    c.n_rg = 8;
    c.channels = 48;
    c.recursion = 2;
  } else if (name == "L") {
    c.n_rg = 16;
    c.channels = 48;
    c.recursion = 1;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected T, B or L)");
  }
  return c;
}

namespace config_io {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_uint(key, item));
  }
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Ordered key/value pairs from `key = value` lines; '#' starts a comment.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues parse_text(const std::string& text) {
  KeyValues kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

inline KeyValues read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

/// Applies one key to whichever config owns it. Returns false for unknown keys.
inline bool apply(ModelConfig& m, TrainConfig& t, const std::string& key, const std::string& v) {
  if (key == "n_rg") m.n_rg = parse_uint(key, v);
  else if (key == "channels") m.channels = parse_uint(key, v);
  else if (key == "scale") m.scale = parse_uint(key, v);
  else if (key == "n_experts") m.n_experts = parse_uint(key, v);
  else if (key == "ranks") m.ranks = parse_list(key, v);
  else if (key == "topk") m.topk = parse_uint(key, v);
  else if (key == "see_kernel") m.see_kernel = parse_uint(key, v);
  else if (key == "recursion") m.recursion = parse_uint(key, v);
  else if (key == "ffn_ratio") m.ffn_ratio = parse_uint(key, v);
  else if (key == "block_order") {
    if (v == "rme_sme") m.rme_first = true;
    else if (v == "sme_rme") m.rme_first = false;
    else throw ConfigError("config: block_order must be rme_sme or sme_rme");
  }
  else if (key == "patch") t.patch = parse_uint(key, v);
  else if (key == "batch") t.batch = parse_uint(key, v);
  else if (key == "iters") t.iters = parse_uint(key, v);
  else if (key == "lr0") t.lr0 = parse_double(key, v);
  else if (key == "milestones") t.milestones = parse_list(key, v);
  else if (key == "fft_weight") t.fft_weight = parse_double(key, v);
  else if (key == "seed") t.seed = parse_uint(key, v);
  else if (key == "save_every") t.save_every = parse_uint(key, v);
  else return false;
  return true;
}

/// Resolves a preset (optional `preset` key, default T) and then every override in order.
/// When n_experts changes without explicit ranks, ranks follow the 2^i schedule.
inline std::pair<ModelConfig, TrainConfig> resolve(const KeyValues& kv,
                                                   const std::string& default_preset = "T") {
  std::string name = default_preset;
  std::size_t scale = 2;
  bool has_ranks = false;
  for (const auto& [k, v] : kv) {
    if (k == "preset") name = v;
    if (k == "scale") scale = parse_uint(k, v);
    if (k == "ranks") has_ranks = true;
  }
  ModelConfig m = preset(name, scale);
  TrainConfig t;
  for (const auto& [k, v] : kv) {
    if (k == "preset") continue;
    if (!apply(m, t, k, v)) throw ConfigError("config: unknown key '" + k + "'");
  }
  if (!has_ranks && m.ranks.size() != m.n_experts) {
    m.ranks.clear();
    for (std::size_t i = 1; i <= m.n_experts; ++i) m.ranks.push_back(std::size_t{1} << i);
  }
  return {m, t};
}

inline std::string to_text(const ModelConfig& m) {
  std::ostringstream os;
  os << "n_rg = " << m.n_rg << "\n"
     << "channels = " << m.channels << "\n"
     << "scale = " << m.scale << "\n"
     << "n_experts = " << m.n_experts << "\n"
     << "ranks = " << join(m.ranks) << "\n"
     << "topk = " << m.topk << "\n"
     << "see_kernel = " << m.see_kernel << "\n"
     << "recursion = " << m.recursion << "\n"
     << "ffn_ratio = " << m.ffn_ratio << "\n"
     << "block_order = " << (m.rme_first ? "rme_sme" : "sme_rme") << "\n";
  return os.str();
}

inline ModelConfig model_from_text(const std::string& text) {
  ModelConfig m;
  TrainConfig unused;
  for (const auto& [k, v] : parse_text(text)) {
    if (!apply(m, unused, k, v)) throw ConfigError("config: unknown model key '" + k + "'");
  }
  return m;
}

}  // namespace config_io

}  // namespace seemore
