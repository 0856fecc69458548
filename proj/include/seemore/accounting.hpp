// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include "seemore/blocks.hpp"
#include "seemore/config.hpp"

namespace seemore {

enum class CountMode { dense, sparse };

inline const char* to_string(CountMode m) { return m == CountMode::dense ? "dense" : "sparse"; }

struct CostEntry {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// Exact parameter and multiply-accumulate counts at a given output size.
struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::size_t out_h = 0, out_w = 0;
  CountMode mode = CountMode::sparse;
  std::vector<CostEntry> breakdown;  // one entry per parameterized layer, model order

  /// Breakdown with the residual-group index removed ("rg.3.rme.ffn.fc_in" -> "rme.ffn.fc_in").
  std::vector<CostEntry> grouped() const {
    static const std::regex rg_prefix(R"(^rg\.\d+\.)");
    static const std::regex expert_index(R"(\.expert\.\d+)");
    std::vector<CostEntry> out;
    std::map<std::string, std::size_t> slot;
    for (const auto& e : breakdown) {
      std::string key = std::regex_replace(e.name, rg_prefix, "");
      key = std::regex_replace(key, expert_index, ".experts");
      auto [it, fresh] = slot.emplace(key, out.size());
      if (fresh) out.push_back({key, 0, 0});
      out[it->second].params += e.params;
      out[it->second].macs += e.macs;
    }
    return out;
  }
};

namespace detail {

class CostCounter {
 public:
  explicit CostCounter(CostReport& r) : r_(r) {}

  // Returns the output spatial size.
  std::pair<std::size_t, std::size_t> conv(const std::string& name, std::size_t cin, std::size_t cout,
                                           std::size_t kh, std::size_t kw, std::size_t groups,
                                           std::size_t stride, std::size_t ph, std::size_t pw,
                                           std::size_t h, std::size_t w, bool counted = true) {
    const std::size_t ho = (h + 2 * ph - kh) / stride + 1;
    const std::size_t wo = (w + 2 * pw - kw) / stride + 1;
    const std::uint64_t params = static_cast<std::uint64_t>(cout) * (cin / groups) * kh * kw + cout;
    const std::uint64_t macs =
        counted ? static_cast<std::uint64_t>(cout) * ho * wo * (cin / groups) * kh * kw : 0;
    push(name, params, macs);
    return {ho, wo};
  }

  void linear(const std::string& name, std::size_t cin, std::size_t cout, std::uint64_t positions,
              bool counted = true) {
    push(name, static_cast<std::uint64_t>(cin) * cout + cout,
         counted ? static_cast<std::uint64_t>(cin) * cout * positions : 0);
  }

  void norm(const std::string& name, std::size_t c) { push(name, 2 * c, 0); }

 private:
  void push(const std::string& name, std::uint64_t params, std::uint64_t macs) {
    r_.breakdown.push_back({name, params, macs});
    r_.params += params;
    r_.macs += macs;
  }
  CostReport& r_;
};

/// `active[i]` says whether expert i's MACs are counted.
inline void count_rme(CostCounter& cc, const ModelConfig& cfg, const std::string& p, std::size_t h,
                      std::size_t w, const std::vector<bool>& active) {
  const std::size_t c = cfg.channels;
  const std::uint64_t px = static_cast<std::uint64_t>(h) * w;
  cc.norm(p + ".norm1", c);
  cc.conv(p + ".more.proj", c, c, 3, 3, 1, 1, 1, 1, h, w);
  cc.linear(p + ".more.proj_expand", c, 2 * c, px);
  cc.conv(p + ".more.local", c, c, 3, 3, c, 1, 1, 1, h, w);
  std::size_t ph = h, pw = w;
  for (std::size_t i = 0; i < cfg.recursion; ++i) {
    std::tie(ph, pw) = cc.conv(p + ".more.pyramid.down." + std::to_string(i), c, c, 3, 3, c, 2, 1, 1, ph, pw);
  }
  cc.conv(p + ".more.pyramid.refine", c, c, 3, 3, c, 1, 1, 1, ph, pw);
  cc.linear(p + ".more.pyramid.mix", c, c, static_cast<std::uint64_t>(ph) * pw);
  for (std::size_t i = 0; i < cfg.ranks.size(); ++i) {
    const std::size_t r = cfg.ranks[i];
    const std::string e = p + ".more.expert." + std::to_string(i);
    cc.linear(e + ".w1", c, r, px, active[i]);
    cc.linear(e + ".w2", c, r, px, active[i]);
    cc.linear(e + ".w3", r, c, px, active[i]);
  }
  cc.linear(p + ".more.router", c, cfg.n_experts, 1);
  cc.norm(p + ".norm2", c);
  const std::size_t hidden = c * cfg.ffn_ratio;
  cc.linear(p + ".ffn.fc_in", c, hidden, px);
  cc.conv(p + ".ffn.gate_dw", hidden / 2, hidden / 2, 3, 3, hidden / 2, 1, 1, 1, h, w);
  cc.linear(p + ".ffn.fc_out", hidden / 2, c, px);
}

inline void count_sme(CostCounter& cc, const ModelConfig& cfg, const std::string& p, std::size_t h,
                      std::size_t w) {
  const std::size_t c = cfg.channels, k = cfg.see_kernel;
  const std::uint64_t px = static_cast<std::uint64_t>(h) * w;
  cc.norm(p + ".norm1", c);
  cc.linear(p + ".see.w4", c, c, px);
  cc.linear(p + ".see.w5", c, c, px);
  cc.conv(p + ".see.stripe_h", c, c, 1, k, c, 1, 0, k / 2, h, w);
  cc.conv(p + ".see.stripe_v", c, c, k, 1, c, 1, k / 2, 0, h, w);
  cc.norm(p + ".norm2", c);
  const std::size_t hidden = c * cfg.ffn_ratio;
  cc.linear(p + ".ffn.fc_in", c, hidden, px);
  cc.conv(p + ".ffn.gate_dw", hidden / 2, hidden / 2, 3, 3, hidden / 2, 1, 1, 1, h, w);
  cc.linear(p + ".ffn.fc_out", hidden / 2, c, px);
}

inline CostReport count_with(const ModelConfig& cfg, std::size_t out_h, std::size_t out_w,
                             const std::vector<std::vector<bool>>& active_per_layer) {
  cfg.validate();
  if (out_h == 0 || out_w == 0 || out_h % cfg.scale != 0 || out_w % cfg.scale != 0) {
    throw ConfigError("count: output size " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                      " is not a positive multiple of scale " + std::to_string(cfg.scale));
  }
  const std::size_t h = out_h / cfg.scale, w = out_w / cfg.scale;
  CostReport r;
  r.out_h = out_h;
  r.out_w = out_w;
  CostCounter cc(r);
  cc.conv("shallow", 3, cfg.channels, 3, 3, 1, 1, 1, 1, h, w);
  for (std::size_t i = 0; i < cfg.n_rg; ++i) {
    const std::string p = "rg." + std::to_string(i);
    // Breakdown order follows parameter order (rme before sme) regardless of block order.
    count_rme(cc, cfg, p + ".rme", h, w, active_per_layer[i]);
    count_sme(cc, cfg, p + ".sme", h, w);
  }
  cc.conv("upsampler", cfg.channels, 3 * cfg.scale * cfg.scale, 3, 3, 1, 1, 1, 1, h, w);
  return r;
}

}  // namespace detail

/// Static count. Sparse mode charges each MoRE layer for its `topk` largest-rank
/// experts (an input-independent upper bound); dense mode charges every expert.
inline CostReport count_cost(const ModelConfig& cfg, std::size_t out_h, std::size_t out_w,
                             CountMode mode = CountMode::sparse) {
  cfg.validate();
  std::vector<bool> active(cfg.n_experts, mode == CountMode::dense);
  if (mode == CountMode::sparse) {
    for (std::size_t i = cfg.n_experts - cfg.topk; i < cfg.n_experts; ++i) active[i] = true;
  }
  auto r = detail::count_with(cfg, out_h, out_w, std::vector<std::vector<bool>>(cfg.n_rg, active));
  r.mode = mode;
  return r;
}

/// MACs for one image given the experts its routing actually selected.
/// `routes` holds that image's records, one per residual group.
inline CostReport count_cost_routed(const ModelConfig& cfg, std::size_t out_h, std::size_t out_w,
                                    const std::vector<RouteRecord>& routes) {
  std::vector<std::vector<bool>> active(cfg.n_rg, std::vector<bool>(cfg.n_experts, false));
  for (const auto& rec : routes) {
    if (rec.layer_index >= cfg.n_rg || rec.weights.size() != cfg.n_experts) {
      throw ConfigError("count_cost_routed: route record does not match the config");
    }
    std::vector<std::size_t> order(cfg.n_experts);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rec.weights[a] > rec.weights[b]; });
    for (std::size_t k = 0; k < cfg.topk; ++k) active[rec.layer_index][order[k]] = true;
  }
  auto r = detail::count_with(cfg, out_h, out_w, active);
  r.mode = CountMode::sparse;
  return r;
}

}  // namespace seemore
