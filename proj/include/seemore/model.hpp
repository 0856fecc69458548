// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "seemore/blocks.hpp"

namespace seemore {

template <class T>
struct ResidualGroup {
  RME<T> rme;
  SME<T> sme;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    rme.visit(prefix + ".rme", f);
    sme.visit(prefix + ".sme", f);
  }
};

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Shallow 3x3 conv -> residual groups -> global residual -> 3x3 conv + pixel shuffle.
template <class T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t c = config_.channels;
    shallow_ = make_conv_same<T>(3, c, 3, rng);
    for (std::size_t i = 0; i < config_.n_rg; ++i) {
      ResidualGroup<T> g;
      g.rme = make_rme<T>(config_, rng);
      g.sme = make_sme<T>(config_, rng);
      groups_.push_back(std::move(g));
    }
    upsampler_ = make_conv_same<T>(c, 3 * config_.scale * config_.scale, 3, rng);
    for (auto& [name, t] : parameters()) t.set_requires_grad(true);
  }

  const ModelConfig& config() const { return config_; }

  /// Every learnable tensor in a fixed order. Tensors share storage with the model.
  NamedTensors<T> parameters() {
    NamedTensors<T> out;
    visit([&out](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  template <class F>
  void visit(F&& f) {
    shallow_.visit("shallow", f);
    for (std::size_t i = 0; i < groups_.size(); ++i) groups_[i].visit("rg." + std::to_string(i), f);
    upsampler_.visit("upsampler", f);
  }

  std::size_t parameter_count() {
    std::size_t total = 0;
    visit([&total](const std::string&, Tensor<T>& t) { total += t.numel(); });
    return total;
  }

  void zero_grad() {
    visit([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }

  const Conv2d<T>& shallow() const { return shallow_; }
  const Conv2d<T>& upsampler() const { return upsampler_; }
  std::vector<ResidualGroup<T>>& groups() { return groups_; }
  const std::vector<ResidualGroup<T>>& groups() const { return groups_; }

  struct Output {
    Tensor<T> sr;
    std::vector<RouteRecord> routes;  // n_rg records per sample, depth-major
  };

  Output forward(const Tensor<T>& lr, Mode mode) const {
    detail::require_rank(lr, 4, "forward_sr");
    detail::require(lr.dim(1) == 3, "forward_sr: input must have 3 channels");
    const std::size_t min_side = config_.min_input_side();
    if (lr.dim(2) < min_side || lr.dim(3) < min_side) {
      throw ConfigError("forward_sr: input " + std::to_string(lr.dim(2)) + "x" + std::to_string(lr.dim(3)) +
                        " smaller than " + std::to_string(min_side) + " required by recursion depth");
    }
    Output out;
    const Tensor<T> shallow = shallow_(lr);
    Tensor<T> x = shallow;
    for (std::size_t i = 0; i < groups_.size(); ++i) {
      const auto& g = groups_[i];
      if (config_.rme_first) {
        auto r = rme_forward(x, g.rme, mode, i);
        x = sme_forward(r.y, g.sme);
        append(out.routes, r.records);
      } else {
        auto r = rme_forward(sme_forward(x, g.sme), g.rme, mode, i);
        x = r.y;
        append(out.routes, r.records);
      }
    }
    out.sr = pixel_shuffle(upsampler_(add(x, shallow)), config_.scale);
    if (!all_finite(out.sr)) throw NumericError("forward_sr: non-finite output");
    return out;
  }

 private:
  static void append(std::vector<RouteRecord>& dst, std::vector<RouteRecord>& src) {
    for (auto& r : src) dst.push_back(std::move(r));
  }

  ModelConfig config_;
  Conv2d<T> shallow_;
  std::vector<ResidualGroup<T>> groups_;
  Conv2d<T> upsampler_;
};

template <class T>
typename Model<T>::Output forward_sr(const Model<T>& model, const Tensor<T>& lr, Mode mode) {
  return model.forward(lr, mode);
}

}  // namespace seemore
