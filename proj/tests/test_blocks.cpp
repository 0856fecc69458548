// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace seemore;
using fixtures::randomize;
using fixtures::zero;
using oracle::random_tensor;
using TD = Tensor<double>;

namespace {

ModelConfig small_config(std::size_t c, std::vector<std::size_t> ranks, std::size_t topk, std::size_t t) {
  ModelConfig cfg;
  cfg.channels = c;
  cfg.n_experts = ranks.size();
  cfg.ranks = std::move(ranks);
  cfg.topk = topk;
  cfg.recursion = t;
  cfg.see_kernel = 5;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// context pyramid

TEST(ContextPyramid, ShapeContract) {
  Rng rng(1);
  const auto p = make_pyramid<double>(4, 2, rng);
  std::mt19937_64 g(1);
  const TD y = context_pyramid(random_tensor({1, 4, 16, 16}, g), p, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 16, 16}));
  // Pooled resolution after two stride-2 steps.
  TD x({1, 4, 16, 16}, 1.0);
  TD d = x;
  for (const auto& c : p.down) d = c(d);
  EXPECT_EQ(d.shape(), (Shape{1, 4, 4, 4}));
}

// Box kernels average zero padding in at the border, so constancy is exact
// only where no downsampling or refinement tap reaches outside the image.
TEST(ContextPyramid, BoxKernelsPreserveConstantsAwayFromBorder) {
  Rng rng(2);
  auto p = make_pyramid<double>(3, 2, rng);
  for (auto* conv : {&p.down[0], &p.down[1], &p.refine}) {
    for (auto& v : conv->weight.mutable_data()) v = 1.0 / 9;
    for (auto& v : conv->bias.mutable_data()) v = 0;
  }
  for (auto& v : p.mix.weight.mutable_data()) v = 0;
  for (std::size_t c = 0; c < 3; ++c) p.mix.weight.mutable_data()[c * 4] = 1;
  for (auto& v : p.mix.bias.mutable_data()) v = 0;
  const TD y = context_pyramid(TD({1, 3, 32, 32}, 0.6), p, 2);
  // Pooled 8x8 grid: rows/cols 2..5 depend only on interior taps -> HR rows 8..23.
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 8; r < 24; ++r)
      for (std::size_t q = 8; q < 24; ++q) EXPECT_NEAR(y[(c * 32 + r) * 32 + q], 0.6, 1e-15);
  // And the border does see the padding.
  EXPECT_LT(y[0], 0.6);
}

TEST(ContextPyramid, MatchesCompositionOracle) {
  std::mt19937_64 g(3);
  for (std::size_t t : {1u, 2u, 3u}) {
    Rng rng(t);
    const auto p = make_pyramid<double>(4, t, rng);
    for (Shape s : {Shape{1, 4, 8, 8}, Shape{2, 4, 9, 13}}) {
      const TD x = random_tensor(s, g);
      EXPECT_LT(oracle::max_abs_diff(context_pyramid(x, p, t).values(), oracle::pyramid(x, p).values()), 1e-12);
    }
  }
}

TEST(ContextPyramid, RejectsSmallInputsAndMismatchedDepth) {
  Rng rng(4);
  const auto p = make_pyramid<double>(2, 3, rng);
  EXPECT_THROW(context_pyramid(TD({1, 2, 7, 16}), p, 3), ConfigError);
  EXPECT_NO_THROW(context_pyramid(TD({1, 2, 8, 8}), p, 3));
  EXPECT_THROW(context_pyramid(TD({1, 2, 8, 8}), p, 2), ConfigError);
}

// ---------------------------------------------------------------------------
// low-rank expert

TEST(LowRankExpert, ZeroContextGivesBiasOnlyPath) {
  Rng rng(5);
  auto e = make_expert<double>(6, 2, rng);
  std::mt19937_64 g(5);
  const TD a = random_tensor({1, 6, 3, 3}, g);
  const TD y = low_rank_expert(a, TD({1, 6, 3, 3}, 0.0), e);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);  // all biases start at zero
}

TEST(LowRankExpert, SelectorMatricesCountCoordinates) {
  Rng rng(6);
  auto e = make_expert<double>(5, 3, rng);
  zero(e);
  for (std::size_t r = 0; r < 3; ++r) {
    e.w1.weight.mutable_data()[r * 5 + r] = 1;
    e.w2.weight.mutable_data()[r * 5 + r] = 1;
    e.w3.weight.mutable_data()[r * 3 + r] = 1;  // transpose of the selector
  }
  const TD ones({1, 5, 2, 2}, 1.0);
  const TD y = low_rank_expert(ones, ones, e);
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(y[c * 4 + p], c < 3 ? 1.0 : 0.0);
}

TEST(LowRankExpert, MatchesPerPixelMatmulOracle) {
  std::mt19937_64 g(7);
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(trial);
    auto e = make_expert<double>(6, 2, rng);
    randomize(e, g);
    const TD a = random_tensor({2, 6, 4, 3}, g), b = random_tensor({2, 6, 4, 3}, g);
    EXPECT_LT(oracle::max_abs_diff(low_rank_expert(a, b, e).values(), oracle::expert(a, b, e).values()), 1e-12);
  }
}

TEST(LowRankExpert, RankMustBeBelowChannels) {
  Rng rng(8);
  EXPECT_THROW(make_expert<double>(4, 4, rng), ConfigError);
  auto e = make_expert<double>(6, 2, rng);
  EXPECT_THROW(low_rank_expert(TD({1, 2, 2, 2}), TD({1, 2, 2, 2}), e), ConfigError);
}

// ---------------------------------------------------------------------------
// routing

TEST(Route, EqualLogitsTieToLowestIndex) {
  Router<double> r{Linear<double>{TD({3, 4}, 0.0), TD({3}, 0.0)}};
  const auto res = route(TD({1, 4, 2, 2}, 1.0), r, 1);
  EXPECT_NEAR(res.weights[0], 1.0 / 3, 1e-15);
  EXPECT_EQ(res.weights[1], 0.0);
  EXPECT_EQ(res.weights[2], 0.0);
  EXPECT_EQ(res.records[0].chosen, 0u);
}

TEST(Route, SoftmaxThenMaskWithoutRenormalization) {
  Router<double> r{Linear<double>{TD({3, 2}, 0.0), TD({3}, std::vector<double>{0.1, 0.5, 0.2})}};
  const auto res = route(TD({1, 2, 3, 3}, 0.3), r, 1, 4);
  EXPECT_EQ(res.weights[0], 0.0);
  EXPECT_NEAR(res.weights[1], oracle::softmax({0.1, 0.5, 0.2})[1], 1e-15);
  EXPECT_EQ(res.weights[2], 0.0);
  ASSERT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.records[0].chosen, 1u);
  EXPECT_EQ(res.records[0].layer_index, 4u);
  const auto& w = res.records[0].weights;
  EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-12);

  const auto full = route(TD({1, 2, 3, 3}, 0.3), r, 3);
  const auto expected = oracle::softmax({0.1, 0.5, 0.2});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(full.weights[i], expected[i], 1e-15);
}

TEST(Route, PerSampleChoiceIsArgmax) {
  std::mt19937_64 g(9);
  Router<double> r{Linear<double>{random_tensor({4, 3}, g, -3, 3), random_tensor({4}, g)}};
  const auto res = route(random_tensor({6, 3, 4, 4}, g, -2, 2), r, 2);
  for (std::size_t b = 0; b < 6; ++b) {
    const auto& w = res.records[b].weights;
    const auto best = std::max_element(w.begin(), w.end()) - w.begin();
    EXPECT_EQ(res.records[b].chosen, static_cast<std::size_t>(best));
    std::size_t kept = 0;
    for (std::size_t i = 0; i < 4; ++i) kept += res.weights[b * 4 + i] != 0.0;
    EXPECT_EQ(kept, 2u);
  }
  EXPECT_THROW(route(TD({1, 3, 2, 2}), r, 5), ConfigError);
}

// ---------------------------------------------------------------------------
// MoRE

TEST(MoRE, TrainAndInferAgreeForEveryTopk) {
  std::mt19937_64 g(10);
  for (std::size_t topk : {1u, 2u, 3u}) {
    Rng rng(topk);
    auto p = make_more<double>(small_config(6, {2, 3, 4}, topk, 1), rng);
    randomize(p, g);
    const TD x = random_tensor({3, 6, 6, 5}, g);
    const auto a = more_forward(x, p, Mode::train);
    const auto b = more_forward(x, p, Mode::infer);
    EXPECT_LT(oracle::max_abs_diff(a.y.values(), b.y.values()), 1e-12) << "topk " << topk;
    if (topk == 1) {
      EXPECT_EQ(a.y.values(), b.y.values());
    }
  }
}

TEST(MoRE, SingleExpertHasUnitWeight) {
  std::mt19937_64 g(11);
  Rng rng(11);
  auto p = make_more<double>(small_config(4, {2}, 1, 1), rng);
  randomize(p, g);
  const TD x = random_tensor({1, 4, 4, 4}, g);
  const auto out = more_forward(x, p, Mode::train);
  ASSERT_EQ(out.records.size(), 1u);
  EXPECT_EQ(out.records[0].weights[0], 1.0);
  const auto trace = oracle::more(x, p);
  EXPECT_LT(oracle::max_abs_diff(out.y.values(), trace.y.values()), 1e-12);
}

TEST(MoRE, MatchesLineByLineOracle) {
  std::mt19937_64 g(12);
  Rng rng(12);
  auto p = make_more<double>(small_config(4, {2, 3}, 1, 1), rng);
  randomize(p, g, 1.0);
  const TD x = random_tensor({1, 4, 8, 8}, g);
  const auto trace = oracle::more(x, p);
  for (Mode m : {Mode::train, Mode::infer}) {
    const auto out = more_forward(x, p, m);
    EXPECT_LT(oracle::max_abs_diff(out.y.values(), trace.y.values()), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(out.records[0].weights, trace.probs[0]), 1e-12);
  }
}

TEST(MoRE, UnselectedExpertsReceiveZeroGradient) {
  std::mt19937_64 g(13);
  Rng rng(13);
  auto p = make_more<double>(small_config(4, {1, 2, 3}, 1, 1), rng);
  randomize(p, g);
  p.visit("", [](const std::string&, TD& t) { t.set_requires_grad(true); });
  const TD x = random_tensor({1, 4, 4, 4}, g);
  const auto out = more_forward(x, p, Mode::train);
  backward(sum(out.y));
  const std::size_t chosen = out.records[0].chosen;
  for (std::size_t e = 0; e < 3; ++e) {
    double mag = 0;
    for (double v : p.experts[e].w1.weight.grad()) mag += std::abs(v);
    if (e == chosen) {
      EXPECT_GT(mag, 0.0);
    } else {
      EXPECT_EQ(mag, 0.0);
    }
  }
}

// ---------------------------------------------------------------------------
// SEE and GatedFFN

TEST(SEE, ZeroInputZeroBiasGivesZero) {
  Rng rng(14);
  const auto p = make_see<double>(4, 7, rng);
  for (double v : oracle::values_of(see_forward(TD({1, 4, 5, 5}, 0.0), p))) EXPECT_EQ(v, 0.0);
}

TEST(SEE, ImpulseKernelsAndIdentityProjectionsSquareTheInput) {
  Rng rng(15);
  auto p = make_see<double>(3, 5, rng);
  zero(p);
  for (std::size_t c = 0; c < 3; ++c) {
    p.w4.weight.mutable_data()[c * 4] = 1;
    p.w5.weight.mutable_data()[c * 4] = 1;
    p.stripe_h.weight.mutable_data()[c * 5 + 2] = 1;
    p.stripe_v.weight.mutable_data()[c * 5 + 2] = 1;
  }
  std::mt19937_64 g(15);
  const TD x = random_tensor({2, 3, 4, 6}, g);
  EXPECT_EQ(see_forward(x, p).values(), oracle::hadamard(x, x).values());
}

TEST(SEE, MatchesSequentialOracle) {
  std::mt19937_64 g(16);
  Rng rng(16);
  auto p = make_see<double>(4, 11, rng);
  randomize(p, g);
  const TD x = random_tensor({1, 4, 12, 9}, g);
  EXPECT_LT(oracle::max_abs_diff(see_forward(x, p).values(), oracle::see(x, p).values()), 1e-12);
}

TEST(SEE, EvenKernelRejected) {
  Rng rng(17);
  EXPECT_THROW(make_see<double>(4, 6, rng), ConfigError);
  auto p = make_see<double>(4, 5, rng);
  p.kernel = 4;
  EXPECT_THROW(see_forward(TD({1, 4, 5, 5}), p), ConfigError);
}

TEST(GatedFFN, ZeroOutputLayer) {
  Rng rng(18);
  auto p = make_gated_ffn<double>(4, 2, rng);
  for (auto& v : p.fc_out.weight.mutable_data()) v = 0;
  std::mt19937_64 g(18);
  for (double v : oracle::values_of(gated_ffn(random_tensor({1, 4, 3, 3}, g), p))) EXPECT_EQ(v, 0.0);
}

TEST(GatedFFN, ZeroGateAnnihilatesValues) {
  Rng rng(19);
  auto p = make_gated_ffn<double>(4, 2, rng);
  // Zero the first half of fc_in (the gate branch) and the depthwise bias.
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) p.fc_in.weight.mutable_data()[r * 4 + c] = 0;
  std::mt19937_64 g(19);
  for (auto& v : p.fc_out.bias.mutable_data()) v = std::uniform_real_distribution<double>(-1, 1)(g);
  const TD y = gated_ffn(random_tensor({1, 4, 3, 3}, g), p);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t q = 0; q < 9; ++q) EXPECT_EQ(y[c * 9 + q], p.fc_out.bias[c]);
}

TEST(GatedFFN, MatchesCompositionOracle) {
  std::mt19937_64 g(20);
  Rng rng(20);
  auto p = make_gated_ffn<double>(6, 2, rng);
  randomize(p, g);
  const TD x = random_tensor({2, 6, 5, 4}, g);
  EXPECT_LT(oracle::max_abs_diff(gated_ffn(x, p).values(), oracle::gated_ffn(x, p).values()), 1e-12);
  EXPECT_THROW(make_gated_ffn<double>(3, 1, rng), ConfigError);
}

// ---------------------------------------------------------------------------
// RME / SME

TEST(ResidualBlocks, ZeroParametersAreIdentity) {
  std::mt19937_64 g(21);
  Rng rng(21);
  const auto cfg = small_config(4, {1, 2}, 1, 1);
  auto rme = make_rme<double>(cfg, rng);
  auto sme = make_sme<double>(cfg, rng);
  zero(rme);
  zero(sme);
  const TD x = random_tensor({2, 4, 6, 6}, g);
  EXPECT_EQ(rme_forward(x, rme, Mode::train).y.values(), x.values());
  EXPECT_EQ(rme_forward(x, rme, Mode::infer).y.values(), x.values());
  EXPECT_EQ(sme_forward(x, sme).values(), x.values());
}

TEST(ResidualBlocks, ShapePreservedAndTwoStageOracle) {
  std::mt19937_64 g(22);
  Rng rng(22);
  const auto cfg = small_config(4, {1, 2}, 1, 1);
  auto rme = make_rme<double>(cfg, rng);
  auto sme = make_sme<double>(cfg, rng);
  randomize(rme, g);
  randomize(sme, g);
  for (Shape s : {Shape{1, 4, 5, 7}, Shape{2, 4, 8, 3}}) {
    const TD x = random_tensor(s, g);
    const TD r = rme_forward(x, rme, Mode::train).y;
    const TD q = sme_forward(x, sme);
    EXPECT_EQ(r.shape(), s);
    EXPECT_EQ(q.shape(), s);

    TD mid = oracle::add(x, oracle::more(oracle::layer_norm(x, rme.norm1.gamma, rme.norm1.beta, 1e-6), rme.more).y);
    TD want = oracle::add(mid, oracle::gated_ffn(oracle::layer_norm(mid, rme.norm2.gamma, rme.norm2.beta, 1e-6), rme.ffn));
    EXPECT_LT(oracle::max_abs_diff(r.values(), want.values()), 1e-12);

    mid = oracle::add(x, oracle::see(oracle::layer_norm(x, sme.norm1.gamma, sme.norm1.beta, 1e-6), sme.see));
    want = oracle::add(mid, oracle::gated_ffn(oracle::layer_norm(mid, sme.norm2.gamma, sme.norm2.beta, 1e-6), sme.ffn));
    EXPECT_LT(oracle::max_abs_diff(q.values(), want.values()), 1e-12);
  }
}

TEST(ResidualBlocks, Gradients) {
  std::mt19937_64 g(23);
  Rng rng(23);
  const auto cfg = small_config(4, {1, 2}, 2, 1);
  auto rme = make_rme<double>(cfg, rng);
  auto sme = make_sme<double>(cfg, rng);
  randomize(rme, g, 0.4);
  randomize(sme, g, 0.4);
  std::vector<oracle::Probe> probes;
  auto collect = [&](const std::string& name, TD& t) {
    t.set_requires_grad(true);
    for (std::size_t k = 0; k < t.numel(); k += 3) probes.push_back({name, t, k});
  };
  rme.visit("rme", collect);
  sme.visit("sme", collect);
  const TD x = random_tensor({1, 4, 4, 4}, g);
  const TD proj = random_tensor({1, 4, 4, 4}, g);
  const auto r = oracle::gradcheck(
      [&] { return sum(hadamard(sme_forward(rme_forward(x, rme, Mode::train).y, sme), proj)); }, probes);
  EXPECT_LT(r.worst_rel, 1e-4) << r.worst_name;
  EXPECT_GT(r.nonzero, r.checked / 2);
}
