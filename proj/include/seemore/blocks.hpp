// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "seemore/config.hpp"
#include "seemore/layers.hpp"

namespace seemore {

enum class Mode { train, infer };

/// Routing outcome for one sample at one MoRE layer.
struct RouteRecord {
  std::size_t layer_index = 0;
  std::size_t sample = 0;
  std::size_t chosen = 0;
  std::vector<double> weights;  // full softmax, before masking
};

// ---------------------------------------------------------------------------
// Parameter bundles

/// Rank-R bilinear modulation: expand(compress_a(a) ⊙ compress_b(b)).
template <class T>
struct LowRankExpert {
  Linear<T> w1;  // C -> R, applied to the local branch
  Linear<T> w2;  // C -> R, applied to the context branch
  Linear<T> w3;  // R -> C
  std::size_t rank = 0;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    w1.visit(prefix + ".w1", f);
    w2.visit(prefix + ".w2", f);
    w3.visit(prefix + ".w3", f);
  }
};

/// Pooled features -> one logit per expert.
template <class T>
struct Router {
  Linear<T> gate;  // weight [n, C]
  std::size_t experts() const { return gate.weight.dim(0); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    gate.visit(prefix, f);
  }
};

/// Strided depthwise downsampling, depthwise refinement, channel mix.
template <class T>
struct ContextPyramid {
  std::vector<Conv2d<T>> down;
  Conv2d<T> refine;
  Linear<T> mix;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < down.size(); ++i) down[i].visit(prefix + ".down." + std::to_string(i), f);
    refine.visit(prefix + ".refine", f);
    mix.visit(prefix + ".mix", f);
  }
};

template <class T>
struct MoRE {
  Conv2d<T> proj;         // 3x3, C -> C
  Linear<T> proj_expand;  // C -> 2C, then split into the local/context views
  Conv2d<T> local;        // depthwise 3x3 on the local view
  ContextPyramid<T> pyramid;
  std::vector<LowRankExpert<T>> experts;
  Router<T> router;
  std::size_t topk = 1;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(prefix + ".proj", f);
    proj_expand.visit(prefix + ".proj_expand", f);
    local.visit(prefix + ".local", f);
    pyramid.visit(prefix + ".pyramid", f);
    for (std::size_t i = 0; i < experts.size(); ++i) experts[i].visit(prefix + ".expert." + std::to_string(i), f);
    router.visit(prefix + ".router", f);
  }
};

/// Striped large-kernel depthwise gate.
template <class T>
struct SEE {
  Linear<T> w4;
  Linear<T> w5;
  Conv2d<T> stripe_h;  // depthwise 1×k
  Conv2d<T> stripe_v;  // depthwise k×1
  std::size_t kernel = 0;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    w4.visit(prefix + ".w4", f);
    w5.visit(prefix + ".w5", f);
    stripe_h.visit(prefix + ".stripe_h", f);
    stripe_v.visit(prefix + ".stripe_v", f);
  }
};

template <class T>
struct GatedFFN {
  Linear<T> fc_in;    // C -> r·C
  Conv2d<T> gate_dw;  // depthwise 3x3 on r·C/2
  Linear<T> fc_out;   // r·C/2 -> C

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc_in.visit(prefix + ".fc_in", f);
    gate_dw.visit(prefix + ".gate_dw", f);
    fc_out.visit(prefix + ".fc_out", f);
  }
};

template <class T>
struct RME {
  LayerNorm<T> norm1;
  MoRE<T> more;
  LayerNorm<T> norm2;
  GatedFFN<T> ffn;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    more.visit(prefix + ".more", f);
    norm2.visit(prefix + ".norm2", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

template <class T>
struct SME {
  LayerNorm<T> norm1;
  SEE<T> see;
  LayerNorm<T> norm2;
  GatedFFN<T> ffn;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    see.visit(prefix + ".see", f);
    norm2.visit(prefix + ".norm2", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

// ---------------------------------------------------------------------------
// Construction

template <class T>
LowRankExpert<T> make_expert(std::size_t channels, std::size_t rank, Rng& rng) {
  if (rank == 0 || rank >= channels) {
    throw ConfigError("low-rank expert: rank " + std::to_string(rank) + " must be in [1, " +
                      std::to_string(channels) + ")");
  }
  return {make_linear<T>(channels, rank, rng), make_linear<T>(channels, rank, rng),
          make_linear<T>(rank, channels, rng), rank};
}

template <class T>
ContextPyramid<T> make_pyramid(std::size_t channels, std::size_t steps, Rng& rng) {
  ContextPyramid<T> p;
  for (std::size_t i = 0; i < steps; ++i) {
    p.down.push_back(make_conv<T>(channels, channels, 3, 3, Conv2dOptions{{2, 2}, {1, 1}, channels}, rng));
  }
  p.refine = make_conv_same<T>(channels, channels, 3, rng, channels);
  p.mix = make_linear<T>(channels, channels, rng);
  return p;
}

template <class T>
MoRE<T> make_more(const ModelConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.channels;
  MoRE<T> m;
  m.proj = make_conv_same<T>(c, c, 3, rng);
  m.proj_expand = make_linear<T>(c, 2 * c, rng);
  m.local = make_conv_same<T>(c, c, 3, rng, c);
  m.pyramid = make_pyramid<T>(c, cfg.recursion, rng);
  for (std::size_t r : cfg.ranks) m.experts.push_back(make_expert<T>(c, r, rng));
  m.router.gate = make_linear<T>(c, cfg.n_experts, rng);
  m.topk = cfg.topk;
  return m;
}

template <class T>
SEE<T> make_see(std::size_t channels, std::size_t k, Rng& rng) {
  if (k % 2 == 0) throw ConfigError("SEE: kernel extent must be odd, got " + std::to_string(k));
  SEE<T> s;
  s.w4 = make_linear<T>(channels, channels, rng);
  s.w5 = make_linear<T>(channels, channels, rng);
  s.stripe_h = make_conv<T>(channels, channels, 1, k, Conv2dOptions{{1, 1}, {0, k / 2}, channels}, rng);
  s.stripe_v = make_conv<T>(channels, channels, k, 1, Conv2dOptions{{1, 1}, {k / 2, 0}, channels}, rng);
  s.kernel = k;
  return s;
}

template <class T>
GatedFFN<T> make_gated_ffn(std::size_t channels, std::size_t ratio, Rng& rng) {
  const std::size_t hidden = channels * ratio;
  if (hidden % 2 != 0) throw ConfigError("GatedFFN: hidden width " + std::to_string(hidden) + " is odd");
  return {make_linear<T>(channels, hidden, rng), make_conv_same<T>(hidden / 2, hidden / 2, 3, rng, hidden / 2),
          make_linear<T>(hidden / 2, channels, rng)};
}

template <class T>
RME<T> make_rme(const ModelConfig& cfg, Rng& rng) {
  RME<T> r;
  r.norm1 = make_layer_norm<T>(cfg.channels);
  r.more = make_more<T>(cfg, rng);
  r.norm2 = make_layer_norm<T>(cfg.channels);
  r.ffn = make_gated_ffn<T>(cfg.channels, cfg.ffn_ratio, rng);
  return r;
}

template <class T>
SME<T> make_sme(const ModelConfig& cfg, Rng& rng) {
  SME<T> s;
  s.norm1 = make_layer_norm<T>(cfg.channels);
  s.see = make_see<T>(cfg.channels, cfg.see_kernel, rng);
  s.norm2 = make_layer_norm<T>(cfg.channels);
  s.ffn = make_gated_ffn<T>(cfg.channels, cfg.ffn_ratio, rng);
  return s;
}

// ---------------------------------------------------------------------------
// Forward passes

/// Downsample `t` times with stride-2 depthwise convs, refine, mix channels,
/// then nearest-upsample back to the input resolution.
template <class T>
Tensor<T> context_pyramid(const Tensor<T>& xb, const ContextPyramid<T>& p, std::size_t t) {
  if (t != p.down.size()) {
    throw ConfigError("context_pyramid: t=" + std::to_string(t) + " but parameters hold " +
                      std::to_string(p.down.size()) + " strided steps");
  }
  detail::require_rank(xb, 4, "context_pyramid");
  const std::size_t h = xb.dim(2), w = xb.dim(3);
  if (t >= 32 || h < (std::size_t{1} << t) || w < (std::size_t{1} << t)) {
    throw ConfigError("context_pyramid: " + std::to_string(h) + "x" + std::to_string(w) +
                      " input too small for " + std::to_string(t) + " stride-2 steps");
  }
  Tensor<T> y = xb;
  for (const auto& d : p.down) y = d(y);
  y = p.mix(p.refine(y));
  return resize_nearest(y, h, w);
}

/// w3 · ((w1 · a) ⊙ (w2 · b)) at every pixel.
template <class T>
Tensor<T> low_rank_expert(const Tensor<T>& a, const Tensor<T>& b, const LowRankExpert<T>& e) {
  detail::require_same_shape(a, b, "low_rank_expert");
  const std::size_t c = a.dim(1);
  if (e.rank == 0 || e.rank >= c) {
    throw ConfigError("low_rank_expert: rank " + std::to_string(e.rank) + " must be < C = " +
                      std::to_string(c));
  }
  return e.w3(hadamard(e.w1(a), e.w2(b)));
}

template <class T>
struct RouteResult {
  Tensor<T> weights;  // [N, n], zero outside the top-k
  std::vector<RouteRecord> records;
};

/// softmax(router(avgpool(x))) with all but the top-k entries per sample zeroed.
/// The survivors keep their softmax values; ties go to the lowest index.
template <class T>
RouteResult<T> route(const Tensor<T>& xa, const Router<T>& router, std::size_t topk,
                     std::size_t layer_index = 0) {
  const std::size_t n_exp = router.experts();
  if (topk == 0 || topk > n_exp) {
    throw ConfigError("route: topk " + std::to_string(topk) + " outside [1, " + std::to_string(n_exp) + "]");
  }
  const Tensor<T> probs = softmax(linear(global_avg_pool(xa), router.gate.weight, router.gate.bias));
  const std::size_t batch = probs.dim(0);
  std::vector<T> mask(probs.numel(), T(0));
  RouteResult<T> result;
  std::vector<std::size_t> order(n_exp);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = probs.data().data() + b * n_exp;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [row](std::size_t i, std::size_t j) { return row[i] > row[j]; });
    for (std::size_t k = 0; k < topk; ++k) mask[b * n_exp + order[k]] = T(1);
    RouteRecord rec;
    rec.layer_index = layer_index;
    rec.sample = b;
    rec.chosen = order[0];
    rec.weights.assign(row, row + n_exp);
    result.records.push_back(std::move(rec));
  }
  result.weights = hadamard(probs, Tensor<T>(probs.shape(), std::move(mask)));
  return result;
}

template <class T>
struct MoREOutput {
  Tensor<T> y;
  std::vector<RouteRecord> records;
};

/// Mixture of low-rank experts plus the local-branch residual.
/// Train mode evaluates every expert and sums with the masked weights; infer
/// mode evaluates, per sample, only the experts whose masked weight is nonzero.
template <class T>
MoREOutput<T> more_forward(const Tensor<T>& x, const MoRE<T>& p, Mode mode, std::size_t layer_index = 0) {
  detail::require_rank(x, 4, "more_forward");
  const std::size_t c = x.dim(1);
  const Tensor<T> projected = p.proj_expand(p.proj(x));
  const Tensor<T> xa = p.local(slice_channels(projected, 0, c));
  const Tensor<T> xb = context_pyramid(slice_channels(projected, c, c), p.pyramid, p.pyramid.down.size());
  auto routed = route(xa, p.router, p.topk, layer_index);
  const Tensor<T>& w = routed.weights;

  Tensor<T> mix;
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < p.experts.size(); ++i) {
      Tensor<T> term = scale_by_column(low_rank_expert(xa, xb, p.experts[i]), w, i);
      mix = mix.defined() ? add(mix, term) : term;
    }
  } else {
    const std::size_t batch = x.dim(0), n_exp = p.experts.size();
    std::vector<Tensor<T>> parts;
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor<T> xa_b = batch == 1 ? xa : slice_batch(xa, b);
      const Tensor<T> xb_b = batch == 1 ? xb : slice_batch(xb, b);
      const Tensor<T> w_b = batch == 1 ? w : slice_batch(w, b);
      Tensor<T> acc;
      for (std::size_t i = 0; i < n_exp; ++i) {
        if (w[b * n_exp + i] == T(0)) continue;
        Tensor<T> term = scale_by_column(low_rank_expert(xa_b, xb_b, p.experts[i]), w_b, i);
        acc = acc.defined() ? add(acc, term) : term;
      }
      parts.push_back(acc.defined() ? acc : Tensor<T>::zeros(xa_b.shape()));
    }
    mix = batch == 1 ? parts.front() : concat_batch(parts);
  }
  return {add(mix, xa), std::move(routed.records)};
}

/// stripe_v(stripe_h(w4·x)) ⊙ (w5·x).
template <class T>
Tensor<T> see_forward(const Tensor<T>& x, const SEE<T>& p) {
  if (p.kernel % 2 == 0) throw ConfigError("see_forward: kernel extent must be odd");
  return hadamard(p.stripe_v(p.stripe_h(p.w4(x))), p.w5(x));
}

/// fc_out( gelu(gate_dw(h1)) ⊙ h2 ) with (h1, h2) the channel halves of fc_in(x).
template <class T>
Tensor<T> gated_ffn(const Tensor<T>& x, const GatedFFN<T>& p) {
  const Tensor<T> h = p.fc_in(x);
  const std::size_t hidden = h.dim(1);
  if (hidden % 2 != 0) throw ConfigError("gated_ffn: hidden width is odd");
  const std::size_t half = hidden / 2;
  return p.fc_out(hadamard(gelu(p.gate_dw(slice_channels(h, 0, half))), slice_channels(h, half, half)));
}

template <class T>
MoREOutput<T> rme_forward(const Tensor<T>& x, const RME<T>& p, Mode mode, std::size_t layer_index = 0) {
  auto mixed = more_forward(p.norm1(x), p.more, mode, layer_index);
  Tensor<T> y = add(x, mixed.y);
  y = add(y, gated_ffn(p.norm2(y), p.ffn));
  return {y, std::move(mixed.records)};
}

template <class T>
Tensor<T> sme_forward(const Tensor<T>& x, const SME<T>& p) {
  Tensor<T> y = add(x, see_forward(p.norm1(x), p.see));
  return add(y, gated_ffn(p.norm2(y), p.ffn));
}

}  // namespace seemore
