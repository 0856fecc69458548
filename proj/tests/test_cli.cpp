// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "app.hpp"
#include "support/fixtures.hpp"

using namespace seemore;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path root;
  explicit Workspace(const std::string& tag) : root(fixtures::temp_dir(tag)) {}
  ~Workspace() { fs::remove_all(root); }
  fs::path operator/(const std::string& p) const { return root / p; }
};

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(fixtures::read_bytes(p)); }

std::vector<nlohmann::json> read_lines(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::istringstream in(fixtures::read_bytes(p));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

fs::path tiny_checkpoint(const Workspace& ws, std::size_t scale, std::uint64_t seed = 3) {
  const auto path = ws / ("tiny_x" + std::to_string(scale) + ".smre");
  Model<double> m(fixtures::tiny_config(scale), seed);
  save_checkpoint(m, path);
  return path;
}

void write_images(const fs::path& dir, std::size_t n, std::size_t w, std::size_t h, std::uint64_t seed) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < n; ++i) save_png(fixtures::scene(w, h, seed + i), dir / ("img" + std::to_string(i) + ".png"));
}

}  // namespace

// ---------------------------------------------------------------------------
// count

TEST(CliCount, PresetTextAndJson) {
  Workspace ws("cli_count");
  app::CountOptions o;
  o.preset = "T";
  o.manifest = ws / "m.json";
  std::ostringstream out, err;
  EXPECT_EQ(app::cmd_count(o, out, err), app::kOk) << err.str();
  EXPECT_NE(out.str().find("params "), std::string::npos);

  o.json = true;
  std::ostringstream jout;
  EXPECT_EQ(app::cmd_count(o, jout, err), app::kOk);
  const auto j = nlohmann::json::parse(jout.str());
  EXPECT_EQ(j["params"].get<std::size_t>(), count_cost(preset("T", 2), 720, 1280).params);
  std::size_t sum = 0;
  for (const auto& row : j["breakdown"]) sum += row["params"].get<std::size_t>();
  EXPECT_EQ(sum, j["params"].get<std::size_t>());

  const auto m = read_json(ws / "m.json");
  EXPECT_EQ(m["command"], "count");
  EXPECT_EQ(m["exit_code"], 0);
  EXPECT_TRUE(m.contains("started"));
  EXPECT_TRUE(m.contains("finished"));
}

TEST(CliCount, DenseNotBelowSparse) {
  Workspace ws("cli_dense");
  for (const char* p : {"T", "B", "L"}) {
    app::CountOptions o;
    o.preset = p;
    o.json = true;
    o.manifest = ws / "m.json";
    std::ostringstream s, d, err;
    ASSERT_EQ(app::cmd_count(o, s, err), 0);
    o.mode = CountMode::dense;
    ASSERT_EQ(app::cmd_count(o, d, err), 0);
    const auto js = nlohmann::json::parse(s.str()), jd = nlohmann::json::parse(d.str());
    EXPECT_EQ(js["params"], jd["params"]);
    EXPECT_GT(jd["macs"].get<double>(), js["macs"].get<double>());  // topk < n_experts in every preset
  }
}

TEST(CliCount, ExitCodes) {
  Workspace ws("cli_codes");
  std::ostringstream out, err;
  app::CountOptions o;
  o.manifest = ws / "m.json";
  o.preset = "Q";
  EXPECT_EQ(app::cmd_count(o, out, err), app::kConfig);
  EXPECT_EQ(read_json(ws / "m.json")["exit_code"], 2);

  o.preset = "T";
  o.overrides = {"channels=4"};
  EXPECT_EQ(app::cmd_count(o, out, err), app::kConfig);
  o.overrides = {"no_equals_sign"};
  EXPECT_EQ(app::cmd_count(o, out, err), app::kConfig);
  o.overrides = {};
  o.config_file = ws / "missing.cfg";
  EXPECT_NE(app::cmd_count(o, out, err), app::kOk);
  o.config_file.clear();

  o.expect_params = 1e9;
  EXPECT_EQ(app::cmd_count(o, out, err), app::kExpectation);
  o.expect_params = static_cast<double>(count_cost(preset("T", 2), 720, 1280).params);
  EXPECT_EQ(app::cmd_count(o, out, err), app::kOk);
}

TEST(CliCount, ConfigFileAndOverrides) {
  Workspace ws("cli_cfg");
  fixtures::write_bytes(ws / "c.cfg", "# tiny\npreset = T\nchannels = 16\nn_rg = 2\n");
  app::CountOptions o;
  o.config_file = ws / "c.cfg";
  o.overrides = {"n_rg=3"};
  o.json = true;
  o.manifest = ws / "m.json";
  std::ostringstream out, err;
  ASSERT_EQ(app::cmd_count(o, out, err), 0) << err.str();
  auto cfg = preset("T", 2);
  cfg.channels = 16;
  cfg.n_rg = 3;
  EXPECT_EQ(nlohmann::json::parse(out.str())["params"].get<std::size_t>(), Model<float>(cfg, 0).parameter_count());
}

// ---------------------------------------------------------------------------
// infer

TEST(CliInfer, UpscalesAndIsReproducible) {
  Workspace ws("cli_infer");
  const auto ckpt = tiny_checkpoint(ws, 4);
  write_images(ws / "in", 2, 32, 32, 10);
  for (const char* run : {"a", "b"}) {
    app::InferOptions o;
    o.checkpoint = ckpt;
    o.input = ws / "in";
    o.output_dir = ws / run;
    o.routes_file = ws / (std::string(run) + ".routes.jsonl");
    std::ostringstream out, err;
    ASSERT_EQ(app::cmd_infer(o, out, err), 0) << err.str();
  }
  for (const char* name : {"img0.png", "img1.png"}) {
    const ImagePlane sr = load_png(ws / "a" / name);
    EXPECT_EQ(sr.width, 128u);
    EXPECT_EQ(sr.height, 128u);
    EXPECT_EQ(fixtures::read_bytes(ws / "a" / name), fixtures::read_bytes(ws / "b" / name));
  }
  const auto routes = read_lines(ws / "a.routes.jsonl");
  EXPECT_EQ(routes.size(), 2u * fixtures::tiny_config(4).n_rg);
  const auto m = read_json(ws / "a" / "manifest.json");
  EXPECT_EQ(m["command"], "infer");
  EXPECT_GE(m["artifacts"].size(), 2u);
}

TEST(CliInfer, SingleFileAndErrors) {
  Workspace ws("cli_infer2");
  const auto ckpt = tiny_checkpoint(ws, 2);
  write_images(ws / "in", 1, 20, 12, 1);
  app::InferOptions o;
  o.checkpoint = ckpt;
  o.input = ws / "in" / "img0.png";
  o.output_dir = ws / "out";
  std::ostringstream out, err;
  ASSERT_EQ(app::cmd_infer(o, out, err), 0) << err.str();
  EXPECT_EQ(load_png(ws / "out" / "img0.png").width, 40u);

  o.scale = 3;
  EXPECT_EQ(app::cmd_infer(o, out, err), app::kConfig);
  o.scale.reset();
  fs::create_directories(ws / "empty");
  o.input = ws / "empty";
  EXPECT_EQ(app::cmd_infer(o, out, err), app::kData);
  o.input = ws / "in";
  fixtures::write_bytes(ws / "bad.smre", "SMRE garbage");
  o.checkpoint = ws / "bad.smre";
  EXPECT_NE(app::cmd_infer(o, out, err), app::kOk);
  o.checkpoint = ws / "nothing.smre";
  EXPECT_NE(app::cmd_infer(o, out, err), app::kOk);
}

// ---------------------------------------------------------------------------
// eval

TEST(CliEval, SelfComparisonAndBicubicColumn) {
  Workspace ws("cli_eval");
  write_images(ws / "hr", 3, 40, 36, 20);
  app::EvalOptions o;
  o.sr_dir = ws / "hr";
  o.hr_dir = ws / "hr";
  o.scale = 2;
  o.json_file = ws / "eval.jsonl";
  o.manifest = ws / "m.json";
  std::ostringstream out, err;
  ASSERT_EQ(app::cmd_eval(o, out, err), 0) << err.str();
  const auto lines = read_lines(ws / "eval.jsonl");
  ASSERT_EQ(lines.size(), 4u);
  MetricOptions mopt;
  mopt.crop = 2;
  double bic_mean = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(lines[i]["psnr_y"], "inf");
    EXPECT_EQ(lines[i]["ssim_y"].get<double>(), 1.0);
    const ImagePlane hr = mod_crop(load_png(ws / "hr" / lines[i]["image"].get<std::string>()), 2);
    const double bic = psnr_y(bicubic_resize(bicubic_resize(hr, 1, 2), 2, 1), hr, mopt);
    EXPECT_DOUBLE_EQ(lines[i]["bicubic_psnr_y"].get<double>(), bic);
    bic_mean += bic / 3;
  }
  EXPECT_EQ(lines[3]["image"], "mean");
  EXPECT_NEAR(lines[3]["bicubic_psnr_y"].get<double>(), bic_mean, 1e-12);
  EXPECT_NE(out.str().find("inf"), std::string::npos);
}

TEST(CliEval, CheckpointMeanMatchesRows) {
  Workspace ws("cli_eval2");
  const auto ckpt = tiny_checkpoint(ws, 2);
  write_images(ws / "hr", 3, 48, 40, 30);
  app::EvalOptions o;
  o.checkpoint = ckpt;
  o.hr_dir = ws / "hr";
  o.manifest = ws / "m.json";
  const auto res = app::evaluate<double>(o);
  ASSERT_EQ(res.rows.size(), 3u);
  double p = 0, s = 0;
  for (const auto& r : res.rows) {
    p += r.psnr / 3;
    s += r.ssim / 3;
    EXPECT_TRUE(std::isfinite(r.psnr));
  }
  EXPECT_NEAR(res.mean.psnr, p, 1e-12);
  EXPECT_NEAR(res.mean.ssim, s, 1e-12);

  o.scale = 4;
  std::ostringstream out, err;
  EXPECT_EQ(app::cmd_eval(o, out, err), app::kConfig);
  o.scale = 2;
  o.hr_dir = ws / "nope";
  EXPECT_EQ(app::cmd_eval(o, out, err), app::kData);
  o.checkpoint.clear();
  EXPECT_EQ(app::cmd_eval(o, out, err), app::kConfig);
}

// ---------------------------------------------------------------------------
// route-stats and train

TEST(CliRouteStats, CountsSumToImages) {
  Workspace ws("cli_routes");
  const auto ckpt = tiny_checkpoint(ws, 2);
  write_images(ws / "hr", 5, 32, 32, 40);
  app::RouteStatsOptions o;
  o.checkpoint = ckpt;
  o.hr_dir = ws / "hr";
  o.json_file = ws / "r.jsonl";
  o.manifest = ws / "m.json";
  std::ostringstream out, err;
  ASSERT_EQ(app::cmd_route_stats(o, out, err), 0) << err.str();
  const auto lines = read_lines(ws / "r.jsonl");
  ASSERT_EQ(lines.size(), fixtures::tiny_config(2).n_rg);
  for (const auto& l : lines) {
    EXPECT_EQ(l["images"], 5);
    std::size_t total = 0;
    for (const auto& c : l["counts"]) total += c.get<std::size_t>();
    EXPECT_EQ(total, 5u);
  }
}

TEST(CliRouteStats, ForcedRouterTakesEveryImage) {
  Workspace ws("cli_forced");
  Model<double> m(fixtures::tiny_config(2), 8);
  for (auto& [name, t] : m.parameters())
    if (name.ends_with(".router.bias")) t.mutable_data()[0] += 100.0;
  save_checkpoint(m, ws / "forced.smre");
  write_images(ws / "hr", 4, 24, 24, 60);
  app::RouteStatsOptions o;
  o.checkpoint = ws / "forced.smre";
  o.hr_dir = ws / "hr";
  o.json_file = ws / "r.jsonl";
  o.manifest = ws / "m.json";
  std::ostringstream out, err;
  ASSERT_EQ(app::cmd_route_stats(o, out, err), 0) << err.str();
  for (const auto& l : read_lines(ws / "r.jsonl")) EXPECT_EQ(l["counts"], nlohmann::json::array({4, 0}));
  o.hr_dir = ws / "nope";
  EXPECT_EQ(app::cmd_route_stats(o, out, err), app::kData);
}

TEST(CliTrain, WritesCheckpointLogAndManifest) {
  Workspace ws("cli_train");
  fs::create_directories(ws / "data");
  save_png(fixtures::texture(32, 32), ws / "data" / "t.png");
  app::TrainCliOptions o;
  o.preset = "T";
  o.overrides = {"n_rg=2", "channels=8", "n_experts=2", "ranks=2,4", "patch=8", "batch=2", "seed=5"};
  o.data = ws / "data";
  o.iters = 3;
  o.checkpoint = ws / "m.smre";
  o.log_file = ws / "log.jsonl";
  o.quiet = true;
  std::ostringstream out, err;
  ASSERT_EQ(app::cmd_train(o, out, err), 0) << err.str();
  EXPECT_EQ(read_lines(ws / "log.jsonl").size(), 3u);
  EXPECT_NO_THROW(load_checkpoint<double>(ws / "m.smre"));
  const auto m = read_json(ws / "m.smre.manifest.json");
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["seed"], 5);

  o.data = ws / "missing";
  EXPECT_EQ(app::cmd_train(o, out, err), app::kData);
  o.data = ws / "data";
  o.overrides.push_back("fft_weight=-1");
  EXPECT_EQ(app::cmd_train(o, out, err), app::kConfig);
}

TEST(CliTrain, ManifestReplayReproducesCheckpoint) {
  Workspace ws("cli_replay");
  fs::create_directories(ws / "data");
  save_png(fixtures::texture(32, 32, 1.0), ws / "data" / "t.png");
  setenv("SMRE_PROFILE", "verify", 1);
  app::TrainCliOptions o;
  o.preset = "T";
  o.overrides = {"n_rg=1", "channels=8", "n_experts=2", "ranks=2,4", "patch=8", "batch=1", "seed=9"};
  o.data = ws / "data";
  o.iters = 4;
  o.checkpoint = ws / "first.smre";
  o.quiet = true;
  std::ostringstream out, err;
  ASSERT_EQ(app::cmd_train(o, out, err), 0) << err.str();
  const auto manifest = read_json(ws / "first.smre.manifest.json");
  EXPECT_EQ(manifest["profile"], "verify");
  fixtures::write_bytes(ws / "replay.cfg", manifest["config"].get<std::string>());

  app::TrainCliOptions replay;
  replay.config_file = ws / "replay.cfg";
  replay.data = ws / "data";
  replay.checkpoint = ws / "second.smre";
  replay.quiet = true;
  ASSERT_EQ(app::cmd_train(replay, out, err), 0) << err.str();
  unsetenv("SMRE_PROFILE");
  EXPECT_EQ(fixtures::read_bytes(ws / "first.smre"), fixtures::read_bytes(ws / "second.smre"));
}
