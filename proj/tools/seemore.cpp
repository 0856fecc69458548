// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "app.hpp"

namespace {

void parse_resolution(const std::string& text, std::size_t& w, std::size_t& h) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw seemore::ConfigError("--out-res must look like WxH, got '" + text + "'");
  w = seemore::config_io::parse_uint("out-res", text.substr(0, x));
  h = seemore::config_io::parse_uint("out-res", text.substr(x + 1));
}

}  // namespace

int main(int argc, char** argv) {
  using namespace seemore::app;
  CLI::App cli{"Mixture-of-experts image super-resolution toolkit"};
  cli.set_version_flag("--version", kToolVersion);
  cli.require_subcommand(1);

  // count
  CountOptions count;
  std::string out_res = "1280x720";
  std::size_t count_scale = 2;
  auto* c = cli.add_subcommand("count", "Parameter and MAC accounting");
  c->add_option("preset", count.preset, "Preset name (T, B or L)");
  c->add_option("--config", count.config_file, "Key/value config file")->check(CLI::ExistingFile);
  c->add_option("--set", count.overrides, "Override a config key (key=value), repeatable");
  auto* count_scale_opt = c->add_option("--scale", count_scale, "Upscaling factor");
  c->add_option("--out-res", out_res, "Output resolution WxH");
  c->add_option("--mode", count.mode, "Expert accounting: dense or sparse")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, seemore::CountMode>{{"dense", seemore::CountMode::dense},
                                                    {"sparse", seemore::CountMode::sparse}}));
  double expect_params = 0, expect_macs = 0;
  auto* ep = c->add_option("--expect-params", expect_params, "Expected parameter count");
  auto* em = c->add_option("--expect-macs", expect_macs, "Expected MAC count");
  c->add_option("--tolerance", count.tolerance, "Relative tolerance for expectations");
  c->add_flag("--json", count.json, "Emit one JSON record instead of text");
  c->add_option("--manifest", count.manifest, "Run manifest path");

  // train
  TrainCliOptions train;
  std::size_t train_iters = 0;
  std::uint64_t train_seed = 0;
  auto* t = cli.add_subcommand("train", "Train a model on a directory of HR PNGs");
  t->add_option("--preset", train.preset, "Preset name (T, B or L)");
  t->add_option("--config", train.config_file, "Key/value config file")->check(CLI::ExistingFile);
  t->add_option("--set", train.overrides, "Override a config key (key=value), repeatable");
  t->add_option("--data", train.data, "HR image directory")->required();
  auto* ti = t->add_option("--iters", train_iters, "Iterations (milestones rescale unless given)");
  auto* ts = t->add_option("--seed", train_seed, "Random seed");
  t->add_option("--ckpt", train.checkpoint, "Checkpoint path");
  t->add_option("--log", train.log_file, "Also write step records to this file");
  t->add_flag("--resume", train.resume, "Continue from an existing checkpoint");
  t->add_flag("--quiet", train.quiet, "Do not print step records");
  t->add_option("--manifest", train.manifest, "Run manifest path");

  // infer
  InferOptions infer;
  std::size_t infer_scale = 0;
  auto* i = cli.add_subcommand("infer", "Super-resolve PNG images");
  i->add_option("--ckpt", infer.checkpoint, "Checkpoint path")->required();
  i->add_option("--in", infer.input, "Input PNG or directory")->required();
  i->add_option("--out", infer.output_dir, "Output directory")->required();
  auto* is = i->add_option("--scale", infer_scale, "Expected checkpoint scale");
  i->add_option("--routes", infer.routes_file, "Write per-layer routing records here");
  i->add_option("--manifest", infer.manifest, "Run manifest path");

  // eval
  EvalOptions eval;
  std::size_t eval_crop = 0;
  auto* e = cli.add_subcommand("eval", "Y-channel PSNR/SSIM against HR images");
  e->add_option("--ckpt", eval.checkpoint, "Checkpoint path");
  e->add_option("--sr", eval.sr_dir, "Directory of precomputed SR images");
  e->add_option("--hr", eval.hr_dir, "HR image directory")->required();
  e->add_option("--scale", eval.scale, "Upscaling factor");
  auto* ec = e->add_option("--crop", eval_crop, "Border pixels ignored per side (default: scale)");
  e->add_flag("--round-y", eval.round_y, "Round Y to integers before comparing");
  e->add_option("--json", eval.json_file, "Write line-delimited records here");
  e->add_option("--manifest", eval.manifest, "Run manifest path");

  // route-stats
  RouteStatsOptions routes;
  std::size_t routes_scale = 0;
  auto* r = cli.add_subcommand("route-stats", "Per-layer expert selection histogram");
  r->add_option("--ckpt", routes.checkpoint, "Checkpoint path")->required();
  r->add_option("--hr", routes.hr_dir, "HR image directory")->required();
  auto* rs = r->add_option("--scale", routes_scale, "Expected checkpoint scale");
  r->add_option("--json", routes.json_file, "Write line-delimited records here");
  r->add_option("--manifest", routes.manifest, "Run manifest path");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = cli.exit(err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (c->parsed()) {
      if (*count_scale_opt) count.scale = count_scale;
      parse_resolution(out_res, count.out_w, count.out_h);
      if (*ep) count.expect_params = expect_params;
      if (*em) count.expect_macs = expect_macs;
      return cmd_count(count, std::cout, std::cerr);
    }
    if (t->parsed()) {
      if (*ti) train.iters = train_iters;
      if (*ts) train.seed = train_seed;
      return cmd_train(train, std::cout, std::cerr);
    }
    if (i->parsed()) {
      if (*is) infer.scale = infer_scale;
      return cmd_infer(infer, std::cout, std::cerr);
    }
    if (e->parsed()) {
      if (*ec) eval.crop = eval_crop;
      return cmd_eval(eval, std::cout, std::cerr);
    }
    if (r->parsed()) {
      if (*rs) routes.scale = routes_scale;
      return cmd_route_stats(routes, std::cout, std::cerr);
    }
  } catch (const seemore::ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kConfig;
  }
  return kOther;
}
