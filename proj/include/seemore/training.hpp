// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "seemore/checkpoint.hpp"
#include "seemore/fft.hpp"
#include "seemore/imaging.hpp"
#include "seemore/model.hpp"

namespace seemore {

// ---------------------------------------------------------------------------
// Loss

template <class T>
struct LossTerms {
  Tensor<T> total;  // differentiable scalar
  T pixel = T(0);
  T freq = T(0);
};

/// mean|sr - hr| + fft_weight * mean over real and imaginary parts of
/// |DFT(sr) - DFT(hr)| (full, unnormalized, non-centred 2-D DFT per channel).
template <class T>
LossTerms<T> combined_loss(const Tensor<T>& sr, const Tensor<T>& hr, T fft_weight) {
  detail::require_same_shape(sr, hr, "combined_loss");
  const Tensor<T> pixel = mean(abs(sub(sr, hr)));
  const Tensor<T> freq = mean(abs(sub(fft2d_packed(sr), fft2d_packed(hr))));
  return {add(pixel, scale(freq, fft_weight)), pixel.item(), freq.item()};
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam update. Missing gradients count as zero. Any
/// non-finite gradient aborts the step before a single parameter moves.
template <class T>
void adam_step(NamedTensors<T>& params, AdamState<T>& state, double lr) {
  for (const auto& [name, p] : params) {
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + name);
    }
  }
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    auto data = p.mutable_data();
    const auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      data[k] = static_cast<T>(data[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps));
    }
  }
}

/// lr0 halved once for every milestone <= iter.
inline double lr_at(std::size_t iter, const TrainConfig& cfg) {
  double lr = cfg.lr0;
  for (auto m : cfg.milestones)
    if (iter >= m) lr *= 0.5;
  return lr;
}

// ---------------------------------------------------------------------------
// Data

/// Element of the dihedral group: flips first, then `rot` quarter turns counter-clockwise.
struct Augment {
  unsigned rot = 0;
  bool hflip = false;
  bool vflip = false;
};

namespace detail {

inline ImagePlane rotate90(const ImagePlane& img) {
  ImagePlane out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(y, img.width - 1 - x, c) = img.at(x, y, c);
  return out;
}

inline ImagePlane flip(const ImagePlane& img, bool horizontal) {
  ImagePlane out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::size_t sx = horizontal ? img.width - 1 - x : x;
      const std::size_t sy = horizontal ? y : img.height - 1 - y;
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  return out;
}

}  // namespace detail

inline ImagePlane apply_augment(const ImagePlane& img, const Augment& a) {
  ImagePlane out = img;
  if (a.hflip) out = detail::flip(out, true);
  if (a.vflip) out = detail::flip(out, false);
  for (unsigned r = 0; r < a.rot % 4; ++r) out = detail::rotate90(out);
  return out;
}

inline ImagePlane invert_augment(const ImagePlane& img, const Augment& a) {
  ImagePlane out = img;
  for (unsigned r = 0; r < (4 - a.rot % 4) % 4; ++r) out = detail::rotate90(out);
  if (a.vflip) out = detail::flip(out, false);
  if (a.hflip) out = detail::flip(out, true);
  return out;
}

struct TrainingPair {
  std::string name;
  ImagePlane hr;
  ImagePlane lr;
};

struct Dataset {
  std::size_t scale = 2;
  std::vector<TrainingPair> items;
};

/// Pairs every HR image with a bicubic-downscaled LR (after cropping HR to a
/// multiple of the scale). Images whose LR side is below `patch` are skipped.
inline Dataset make_dataset(std::vector<std::pair<std::string, ImagePlane>> hr_images, std::size_t scale,
                            std::size_t patch, std::ostream* warn = &std::cerr) {
  Dataset ds;
  ds.scale = scale;
  for (auto& [name, img] : hr_images) {
    if (img.width < patch * scale || img.height < patch * scale) {
      if (warn) *warn << "warning: skipping " << name << " (" << img.width << "x" << img.height
                      << " smaller than " << patch * scale << ")\n";
      continue;
    }
    ImagePlane hr = mod_crop(img, scale);
    ImagePlane lr = bicubic_resize(hr, 1, scale);
    ds.items.push_back({name, std::move(hr), std::move(lr)});
  }
  if (ds.items.empty()) throw DataError("dataset: no usable images");
  return ds;
}

/// Sorted *.png paths in a directory.
inline std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Loads HR PNGs from `dir`. LR images come from the sibling `<dir>_lrx<scale>`
/// when present (same file names), otherwise from bicubic downscaling.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t scale, std::size_t patch,
                            std::ostream* warn = &std::cerr) {
  const auto files = list_pngs(dir);
  if (files.empty()) throw DataError("dataset: no PNG files in " + dir.string());
  auto clean = dir;
  if (!clean.has_filename()) clean = clean.parent_path();
  const auto lr_dir = clean.parent_path() / (clean.filename().string() + "_lrx" + std::to_string(scale));
  std::vector<std::pair<std::string, ImagePlane>> hr;
  for (const auto& f : files) hr.emplace_back(f.filename().string(), load_png(f));
  Dataset ds = make_dataset(std::move(hr), scale, patch, warn);
  if (std::filesystem::is_directory(lr_dir)) {
    for (auto& item : ds.items) {
      const auto lr_path = lr_dir / item.name;
      if (!std::filesystem::exists(lr_path)) continue;
      ImagePlane lr = load_png(lr_path);
      if (lr.width * scale != item.hr.width || lr.height * scale != item.hr.height) {
        throw DataError("dataset: " + lr_path.string() + " does not match its HR image at scale " +
                        std::to_string(scale));
      }
      item.lr = std::move(lr);
    }
  }
  return ds;
}

template <class T>
struct Batch {
  Tensor<T> lr;  // [B,3,p,p]
  Tensor<T> hr;  // [B,3,p*s,p*s]
};

/// Random aligned crops with the same dihedral augmentation on both members.
template <class T>
Batch<T> sample_batch(const Dataset& ds, const TrainConfig& cfg, Rng& rng) {
  if (ds.items.empty()) throw DataError("sample_batch: empty dataset");
  std::vector<ImagePlane> lrs, hrs;
  const std::size_t p = cfg.patch, s = ds.scale;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    const auto& item = ds.items[std::uniform_int_distribution<std::size_t>(0, ds.items.size() - 1)(rng)];
    const std::size_t x = std::uniform_int_distribution<std::size_t>(0, item.lr.width - p)(rng);
    const std::size_t y = std::uniform_int_distribution<std::size_t>(0, item.lr.height - p)(rng);
    Augment a;
    a.rot = static_cast<unsigned>(std::uniform_int_distribution<int>(0, 3)(rng));
    a.hflip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    a.vflip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    lrs.push_back(apply_augment(crop(item.lr, x, y, p, p), a));
    hrs.push_back(apply_augment(crop(item.hr, x * s, y * s, p * s, p * s), a));
  }
  return {to_tensor<T>(lrs), to_tensor<T>(hrs)};
}

/// Per-iteration generator: reproducible and independent of where a run resumed.
inline Rng iteration_rng(std::uint64_t seed, std::size_t iter) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iter), static_cast<std::uint32_t>(std::uint64_t(iter) >> 32)};
  return Rng(seq);
}

// ---------------------------------------------------------------------------
// Loop

struct TrainRecord {
  std::size_t iter = 0;
  double loss = 0, pixel_loss = 0, fft_loss = 0, lr = 0, wall_ms = 0;
};

inline std::string to_json_line(const TrainRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                R"({"iter":%zu,"loss":%.9g,"pixel_loss":%.9g,"fft_loss":%.9g,"lr":%.9g,"wall_ms":%.3f})", r.iter,
                r.loss, r.pixel_loss, r.fft_loss, r.lr, r.wall_ms);
  return buf;
}

struct TrainOptions {
  std::filesystem::path checkpoint;  // empty: never saved
  bool resume = false;
  std::function<void(const TrainRecord&)> on_step;
};

inline std::filesystem::path state_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".state";
  return p;
}

template <class T>
void save_training_state(const std::filesystem::path& checkpoint, Model<T>& model, const AdamState<T>& adam,
                         std::size_t done, const TrainConfig& cfg) {
  Archive<T> state;
  state.meta = {{"step", std::to_string(done)}, {"adam_step", std::to_string(adam.step)}};
  auto params = model.parameters();
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    state.tensors.emplace_back("adam.m." + params[i].first, Tensor<T>(params[i].second.shape(), adam.m[i]));
    state.tensors.emplace_back("adam.v." + params[i].first, Tensor<T>(params[i].second.shape(), adam.v[i]));
  }
  write_archive(state_path(checkpoint), state);
  save_checkpoint(model, checkpoint, {{"step", std::to_string(done)}, {"seed", std::to_string(cfg.seed)}});
}

namespace detail {

inline std::string meta_value(const std::vector<std::pair<std::string, std::string>>& meta, const std::string& key) {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw HeaderError("archive: missing meta key " + key);
}

}  // namespace detail

/// Runs (or resumes) the optimization loop, saving at `save_every` and at the end.
/// Returns the last step's record.
template <class T>
TrainRecord train(Model<T>& model, const Dataset& ds, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  if (ds.scale != model.config().scale) throw ConfigError("train: dataset scale differs from model scale");
  auto params = model.parameters();
  AdamState<T> adam;
  std::size_t start = 0;
  if (opt.resume && !opt.checkpoint.empty() && std::filesystem::exists(opt.checkpoint)) {
    const auto ckpt = read_archive<T>(opt.checkpoint);
    if (!ckpt.config || !(*ckpt.config == model.config())) throw ConfigError("resume: checkpoint config differs");
    Model<T> loaded = model_from_archive(ckpt);
    auto src = loaded.parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), params[i].second.mutable_data().begin());
    start = std::stoul(detail::meta_value(ckpt.meta, "step"));
    const auto state = read_archive<T>(state_path(opt.checkpoint));
    if (std::stoul(detail::meta_value(state.meta, "step")) != start) {
      throw HeaderError("resume: optimizer state is from a different step than the checkpoint");
    }
    adam.step = std::stoull(detail::meta_value(state.meta, "adam_step"));
    if (state.tensors.size() != 2 * params.size()) throw HeaderError("resume: optimizer state size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam.m.push_back(state.tensors[2 * i].second.values());
      adam.v.push_back(state.tensors[2 * i + 1].second.values());
    }
  }

  TrainRecord rec;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t iter = start; iter < cfg.iters; ++iter) {
    Rng rng = iteration_rng(cfg.seed, iter);
    const auto batch = sample_batch<T>(ds, cfg, rng);
    model.zero_grad();
    const auto out = model.forward(batch.lr, Mode::train);
    const auto loss = combined_loss(out.sr, batch.hr, static_cast<T>(cfg.fft_weight));
    if (!std::isfinite(loss.total.item())) throw NumericError("train: non-finite loss at iteration " + std::to_string(iter));
    backward(loss.total);
    const double lr = lr_at(iter, cfg);
    adam_step(params, adam, lr);

    rec.iter = iter;
    rec.loss = static_cast<double>(loss.total.item());
    rec.pixel_loss = static_cast<double>(loss.pixel);
    rec.fft_loss = static_cast<double>(loss.freq);
    rec.lr = lr;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (opt.on_step) opt.on_step(rec);

    const std::size_t done = iter + 1;
    if (!opt.checkpoint.empty() && ((cfg.save_every && done % cfg.save_every == 0) || done == cfg.iters)) {
      save_training_state(opt.checkpoint, model, adam, done, cfg);
    }
  }
  return rec;
}

/// Super-resolves one image in inference mode (no tape).
template <class T>
ImagePlane super_resolve(const Model<T>& model, const ImagePlane& lr, std::vector<RouteRecord>* routes = nullptr) {
  NoGradGuard guard;
  auto out = model.forward(to_tensor<T>(lr), Mode::infer);
  if (routes) *routes = std::move(out.routes);
  return from_tensor(out.sr);
}

}  // namespace seemore
