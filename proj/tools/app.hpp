// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `seemore` executable. Each command is a
// plain function so tests can drive it in-process.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "seemore/seemore.hpp"

namespace seemore::app {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kExpectation = 4 };

enum class Profile { verify, fast };

/// SMRE_PROFILE=verify selects double precision; anything else (or unset) is float.
inline Profile profile_from_env() {
  const char* v = std::getenv("SMRE_PROFILE");
  if (v && std::string(v) == "verify") return Profile::verify;
  if (v && *v && std::string(v) != "fast") {
    throw ConfigError(std::string("SMRE_PROFILE must be 'verify' or 'fast', got '") + v + "'");
  }
  return Profile::fast;
}

inline const char* to_string(Profile p) { return p == Profile::verify ? "verify" : "fast"; }

// ---------------------------------------------------------------------------
// Manifest

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct RunManifest {
  std::string command;
  std::string config;  // resolved key/value text
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::vector<std::string> artifacts;
  std::string profile;
  int exit_code = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    j["profile"] = profile;
    j["started"] = started;
    j["finished"] = finished;
    j["artifacts"] = artifacts;
    j["exit_code"] = exit_code;
    j["tool_version"] = kToolVersion;
    return j;
  }

  void write(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    detail::write_atomically(path, to_json().dump(2) + "\n");
  }
};

inline std::string train_to_text(const TrainConfig& t) {
  std::ostringstream os;
  os << "patch = " << t.patch << "\n"
     << "batch = " << t.batch << "\n"
     << "iters = " << t.iters << "\n"
     << "lr0 = " << std::setprecision(17) << t.lr0 << "\n"
     << "milestones = " << config_io::join(t.milestones) << "\n"
     << "fft_weight = " << t.fft_weight << "\n"
     << "seed = " << t.seed << "\n"
     << "save_every = " << t.save_every << "\n";
  return os.str();
}

/// Runs `body`, maps library errors to exit codes and writes the manifest either way.
template <class F>
int guarded(RunManifest& manifest, const std::filesystem::path& manifest_path, std::ostream& err, F&& body) {
  manifest.started = utc_now();
  int code = kOk;
  try {
    code = body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    code = kConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    code = kData;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    code = kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    code = kOther;
  }
  manifest.finished = utc_now();
  manifest.exit_code = code;
  if (!manifest_path.empty()) {
    try {
      manifest.write(manifest_path);
    } catch (const std::exception& e) {
      err << "error: cannot write manifest: " << e.what() << "\n";
      if (code == kOk) code = kOther;
    }
  }
  return code;
}

using Overrides = std::vector<std::string>;  // "key=value"

inline config_io::KeyValues gather_config(const std::string& preset_name, const std::string& config_file,
                                          const Overrides& overrides) {
  config_io::KeyValues kv;
  if (!preset_name.empty()) kv.emplace_back("preset", preset_name);
  if (!config_file.empty())
    for (auto& e : config_io::read_file(config_file)) kv.push_back(std::move(e));
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    kv.emplace_back(config_io::trim(o.substr(0, eq)), config_io::trim(o.substr(eq + 1)));
  }
  return kv;
}

inline bool has_key(const config_io::KeyValues& kv, const std::string& key) {
  for (const auto& [k, v] : kv)
    if (k == key) return true;
  return false;
}

// ---------------------------------------------------------------------------
// count

struct CountOptions {
  std::string preset;
  std::string config_file;
  Overrides overrides;
  std::optional<std::size_t> scale;
  std::size_t out_w = 1280, out_h = 720;
  CountMode mode = CountMode::sparse;
  std::optional<double> expect_params;
  std::optional<double> expect_macs;
  double tolerance = 0.15;
  bool json = false;
  std::filesystem::path manifest = "count.manifest.json";
};

inline nlohmann::ordered_json report_json(const CostReport& r) {
  nlohmann::ordered_json j;
  j["params"] = r.params;
  j["macs"] = r.macs;
  j["gmacs"] = static_cast<double>(r.macs) / 1e9;
  j["out_w"] = r.out_w;
  j["out_h"] = r.out_h;
  j["mode"] = to_string(r.mode);
  auto rows = nlohmann::ordered_json::array();
  for (const auto& e : r.grouped()) rows.push_back({{"module", e.name}, {"params", e.params}, {"macs", e.macs}});
  j["breakdown"] = rows;
  return j;
}

inline int cmd_count(const CountOptions& o, std::ostream& out, std::ostream& err) {
  RunManifest manifest;
  manifest.command = "count";
  return guarded(manifest, o.manifest, err, [&]() -> int {
    auto kv = gather_config(o.preset, o.config_file, o.overrides);
    if (o.scale) kv.emplace_back("scale", std::to_string(*o.scale));
    const auto [model, train] = config_io::resolve(kv);
    manifest.config = config_io::to_text(model);
    const CostReport r = count_cost(model, o.out_h, o.out_w, o.mode);
    if (o.json) {
      out << report_json(r).dump() << "\n";
    } else {
      out << "output " << r.out_w << "x" << r.out_h << ", scale " << model.scale << ", " << to_string(r.mode)
          << " experts\n";
      out << "params " << r.params << "\n";
      out << "macs   " << r.macs << " (" << std::fixed << std::setprecision(3) << static_cast<double>(r.macs) / 1e9
          << " G)\n";
      out << std::defaultfloat;
      for (const auto& e : r.grouped()) {
        out << "  " << std::left << std::setw(28) << e.name << std::right << std::setw(10) << e.params
            << std::setw(16) << e.macs << "\n";
      }
    }
    int code = kOk;
    auto check = [&](const char* what, double actual, const std::optional<double>& expect) {
      if (!expect) return;
      const double lo = *expect * (1.0 - o.tolerance), hi = *expect * (1.0 + o.tolerance);
      if (actual < lo || actual > hi) {
        err << what << " " << std::setprecision(12) << actual << " outside [" << lo << ", " << hi << "]\n";
        code = kExpectation;
      }
    };
    check("params", static_cast<double>(r.params), o.expect_params);
    check("macs", static_cast<double>(r.macs), o.expect_macs);
    return code;
  });
}

// ---------------------------------------------------------------------------
// train

struct TrainCliOptions {
  std::string preset;
  std::string config_file;
  Overrides overrides;
  std::filesystem::path data;
  std::optional<std::size_t> iters;
  std::optional<std::uint64_t> seed;
  std::filesystem::path checkpoint = "model.smre";
  std::filesystem::path log_file;
  bool resume = false;
  bool quiet = false;  // suppress per-step records on stdout
  std::filesystem::path manifest;  // default: <checkpoint>.manifest.json
};

template <class T>
int run_train(const TrainCliOptions& o, RunManifest& manifest, std::ostream& out, std::ostream& err) {
  auto kv = gather_config(o.preset, o.config_file, o.overrides);
  if (o.iters) kv.emplace_back("iters", std::to_string(*o.iters));
  if (o.seed) kv.emplace_back("seed", std::to_string(*o.seed));
  auto [model_cfg, train_cfg] = config_io::resolve(kv);
  if (!has_key(kv, "milestones")) train_cfg.milestones = TrainConfig::scaled_milestones(train_cfg.iters);
  train_cfg.validate();
  manifest.config = config_io::to_text(model_cfg) + train_to_text(train_cfg);
  manifest.seed = train_cfg.seed;

  const Dataset ds = load_dataset(o.data, model_cfg.scale, train_cfg.patch, &err);
  Model<T> model(model_cfg, train_cfg.seed);

  std::ofstream log;
  if (!o.log_file.empty()) {
    log.open(o.log_file, std::ios::trunc);
    if (!log) throw DataError("cannot open log file " + o.log_file.string());
  }
  TrainOptions topt;
  topt.checkpoint = o.checkpoint;
  topt.resume = o.resume;
  topt.on_step = [&](const TrainRecord& r) {
    const std::string line = to_json_line(r);
    if (!o.quiet) out << line << "\n";
    if (log) log << line << "\n";
  };
  if (o.checkpoint.has_parent_path()) std::filesystem::create_directories(o.checkpoint.parent_path());
  train(model, ds, train_cfg, topt);
  manifest.artifacts = {o.checkpoint.string(), state_path(o.checkpoint).string()};
  if (!o.log_file.empty()) manifest.artifacts.push_back(o.log_file.string());
  return kOk;
}

inline int cmd_train(const TrainCliOptions& o, std::ostream& out, std::ostream& err) {
  RunManifest manifest;
  manifest.command = "train";
  auto path = o.manifest;
  if (path.empty()) {
    path = o.checkpoint;
    path += ".manifest.json";
  }
  return guarded(manifest, path, err, [&]() -> int {
    const Profile p = profile_from_env();
    manifest.profile = to_string(p);
    return p == Profile::verify ? run_train<double>(o, manifest, out, err) : run_train<float>(o, manifest, out, err);
  });
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path input;  // PNG file or directory
  std::filesystem::path output_dir;
  std::optional<std::size_t> scale;
  std::filesystem::path routes_file;  // optional line-delimited route records
  std::filesystem::path manifest;     // default: <output_dir>/manifest.json
};

inline std::vector<std::filesystem::path> input_images(const std::filesystem::path& in) {
  if (std::filesystem::is_directory(in)) {
    auto files = list_pngs(in);
    if (files.empty()) throw DataError("no PNG files in " + in.string());
    return files;
  }
  if (!std::filesystem::exists(in)) throw DataError("input not found: " + in.string());
  return {in};
}

inline nlohmann::ordered_json route_json(const std::string& image, const RouteRecord& r) {
  return {{"image", image}, {"layer", r.layer_index}, {"expert", r.chosen}, {"weights", r.weights}};
}

template <class T>
Model<T> load_model_for_scale(const std::filesystem::path& ckpt, const std::optional<std::size_t>& scale) {
  Model<T> model = load_checkpoint<T>(ckpt);
  if (scale && *scale != model.config().scale) {
    throw ConfigError("checkpoint scale " + std::to_string(model.config().scale) + " does not match --scale " +
                      std::to_string(*scale));
  }
  return model;
}

template <class T>
int run_infer(const InferOptions& o, RunManifest& manifest, std::ostream& out) {
  const Model<T> model = load_model_for_scale<T>(o.checkpoint, o.scale);
  manifest.config = config_io::to_text(model.config());
  const auto files = input_images(o.input);
  std::filesystem::create_directories(o.output_dir);
  std::ofstream routes;
  if (!o.routes_file.empty()) {
    routes.open(o.routes_file, std::ios::trunc);
    if (!routes) throw DataError("cannot open " + o.routes_file.string());
  }
  for (const auto& f : files) {
    const ImagePlane lr = load_png(f);
    std::vector<RouteRecord> recs;
    const ImagePlane sr = super_resolve(model, lr, &recs);
    const auto dst = o.output_dir / f.filename();
    save_png(sr, dst);
    manifest.artifacts.push_back(dst.string());
    for (const auto& r : recs)
      if (routes) routes << route_json(f.filename().string(), r).dump() << "\n";
    out << f.filename().string() << " " << lr.width << "x" << lr.height << " -> " << sr.width << "x" << sr.height
        << "\n";
  }
  if (routes) manifest.artifacts.push_back(o.routes_file.string());
  return kOk;
}

inline int cmd_infer(const InferOptions& o, std::ostream& out, std::ostream& err) {
  RunManifest manifest;
  manifest.command = "infer";
  const auto path = o.manifest.empty() ? o.output_dir / "manifest.json" : o.manifest;
  return guarded(manifest, path, err, [&]() -> int {
    const Profile p = profile_from_env();
    manifest.profile = to_string(p);
    return p == Profile::verify ? run_infer<double>(o, manifest, out) : run_infer<float>(o, manifest, out);
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::filesystem::path checkpoint;  // either a checkpoint ...
  std::filesystem::path sr_dir;      // ... or precomputed SR images with matching names
  std::filesystem::path hr_dir;
  std::size_t scale = 2;
  std::optional<std::size_t> crop;  // default: scale
  bool round_y = false;
  std::filesystem::path json_file;  // line-delimited records
  std::filesystem::path manifest = "eval.manifest.json";
};

struct EvalRow {
  std::string image;
  double psnr = 0, ssim = 0, bicubic_psnr = 0, bicubic_ssim = 0;
};

/// Per-image rows followed by a final "mean" row.
struct EvalResult {
  std::vector<EvalRow> rows;
  EvalRow mean;
};

inline nlohmann::ordered_json metric_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline nlohmann::ordered_json eval_row_json(const EvalRow& r) {
  return {{"image", r.image},
          {"psnr_y", metric_value(r.psnr)},
          {"ssim_y", metric_value(r.ssim)},
          {"bicubic_psnr_y", metric_value(r.bicubic_psnr)},
          {"bicubic_ssim_y", metric_value(r.bicubic_ssim)}};
}

inline std::string format_metric(double v, int precision) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

template <class T>
EvalResult evaluate(const EvalOptions& o) {
  std::optional<Model<T>> model;
  if (!o.checkpoint.empty()) model.emplace(load_model_for_scale<T>(o.checkpoint, o.scale));
  else if (o.sr_dir.empty()) throw ConfigError("eval: need --ckpt or --sr");
  const auto files = list_pngs(o.hr_dir);
  if (files.empty()) throw DataError("eval: no PNG files in " + o.hr_dir.string());
  MetricOptions mopt;
  mopt.crop = o.crop.value_or(o.scale);
  mopt.round_y = o.round_y;

  EvalResult res;
  for (const auto& f : files) {
    const ImagePlane hr = mod_crop(load_png(f), o.scale);
    const ImagePlane lr = bicubic_resize(hr, 1, o.scale);
    const ImagePlane bic = bicubic_resize(lr, o.scale, 1);
    ImagePlane sr;
    if (model) {
      sr = super_resolve(*model, lr);
    } else {
      sr = load_png(o.sr_dir / f.filename());
      if (sr.width != hr.width || sr.height != hr.height) sr = mod_crop(sr, o.scale);
    }
    EvalRow row;
    row.image = f.filename().string();
    row.psnr = psnr_y(sr, hr, mopt);
    row.ssim = ssim_y(sr, hr, mopt);
    row.bicubic_psnr = psnr_y(bic, hr, mopt);
    row.bicubic_ssim = ssim_y(bic, hr, mopt);
    res.rows.push_back(row);
  }
  res.mean.image = "mean";
  for (const auto& r : res.rows) {
    res.mean.psnr += r.psnr;
    res.mean.ssim += r.ssim;
    res.mean.bicubic_psnr += r.bicubic_psnr;
    res.mean.bicubic_ssim += r.bicubic_ssim;
  }
  const double n = static_cast<double>(res.rows.size());
  res.mean.psnr /= n;
  res.mean.ssim /= n;
  res.mean.bicubic_psnr /= n;
  res.mean.bicubic_ssim /= n;
  return res;
}

inline int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  RunManifest manifest;
  manifest.command = "eval";
  return guarded(manifest, o.manifest, err, [&]() -> int {
    const Profile p = profile_from_env();
    manifest.profile = to_string(p);
    manifest.config = "scale = " + std::to_string(o.scale) + "\ncrop = " + std::to_string(o.crop.value_or(o.scale)) +
                      "\nround_y = " + (o.round_y ? "true" : "false") + "\n";
    const EvalResult res = p == Profile::verify ? evaluate<double>(o) : evaluate<float>(o);
    out << std::left << std::setw(24) << "image" << std::right << std::setw(10) << "psnr_y" << std::setw(9)
        << "ssim_y" << std::setw(12) << "bic_psnr" << std::setw(10) << "bic_ssim" << "\n";
    auto print = [&](const EvalRow& r) {
      out << std::left << std::setw(24) << r.image << std::right << std::setw(10) << format_metric(r.psnr, 4)
          << std::setw(9) << format_metric(r.ssim, 4) << std::setw(12) << format_metric(r.bicubic_psnr, 4)
          << std::setw(10) << format_metric(r.bicubic_ssim, 4) << "\n";
    };
    for (const auto& r : res.rows) print(r);
    print(res.mean);
    if (!o.json_file.empty()) {
      std::ostringstream lines;
      for (const auto& r : res.rows) lines << eval_row_json(r).dump() << "\n";
      lines << eval_row_json(res.mean).dump() << "\n";
      detail::write_atomically(o.json_file, lines.str());
      manifest.artifacts.push_back(o.json_file.string());
    }
    return kOk;
  });
}

// ---------------------------------------------------------------------------
// route-stats

struct RouteStatsOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path hr_dir;
  std::optional<std::size_t> scale;
  std::filesystem::path json_file;
  std::filesystem::path manifest = "route-stats.manifest.json";
};

/// histogram[layer][expert] = number of images whose top-ranked expert at that layer is `expert`.
struct RouteStats {
  std::size_t images = 0;
  std::vector<std::vector<std::size_t>> histogram;
};

template <class T>
RouteStats route_stats(const RouteStatsOptions& o) {
  const Model<T> model = load_model_for_scale<T>(o.checkpoint, o.scale);
  const auto& cfg = model.config();
  const auto files = list_pngs(o.hr_dir);
  if (files.empty()) throw DataError("route-stats: no PNG files in " + o.hr_dir.string());
  RouteStats stats;
  stats.histogram.assign(cfg.n_rg, std::vector<std::size_t>(cfg.n_experts, 0));
  for (const auto& f : files) {
    const ImagePlane hr = mod_crop(load_png(f), cfg.scale);
    const ImagePlane lr = bicubic_resize(hr, 1, cfg.scale);
    std::vector<RouteRecord> recs;
    super_resolve(model, lr, &recs);
    for (const auto& r : recs) ++stats.histogram.at(r.layer_index).at(r.chosen);
    ++stats.images;
  }
  return stats;
}

inline int cmd_route_stats(const RouteStatsOptions& o, std::ostream& out, std::ostream& err) {
  RunManifest manifest;
  manifest.command = "route-stats";
  return guarded(manifest, o.manifest, err, [&]() -> int {
    const Profile p = profile_from_env();
    manifest.profile = to_string(p);
    const RouteStats s = p == Profile::verify ? route_stats<double>(o) : route_stats<float>(o);
    out << "layer";
    for (std::size_t e = 0; e < (s.histogram.empty() ? 0 : s.histogram[0].size()); ++e) out << "  expert" << e;
    out << "\n";
    std::ostringstream lines;
    for (std::size_t l = 0; l < s.histogram.size(); ++l) {
      out << std::setw(5) << l;
      for (auto c : s.histogram[l]) out << std::setw(9) << c;
      out << "\n";
      nlohmann::ordered_json j;
      j["layer"] = l;
      j["images"] = s.images;
      j["counts"] = s.histogram[l];
      lines << j.dump() << "\n";
    }
    if (!o.json_file.empty()) {
      detail::write_atomically(o.json_file, lines.str());
      manifest.artifacts.push_back(o.json_file.string());
    }
    return kOk;
  });
}

}  // namespace seemore::app
