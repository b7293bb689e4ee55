// hdcnet: train, evaluate, ablate, infer and self-verify.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdc/checkpoint.hpp"
#include "hdc/config.hpp"
#include "hdc/data.hpp"
#include "hdc/kernels.hpp"
#include "hdc/ops.hpp"
#include "hdc/train.hpp"
#include "hdc/verify.hpp"

namespace fs = std::filesystem;
using namespace hdc;

namespace {

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::pair<int64_t, int64_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    size_t used = 0;
    const int64_t w = std::stoll(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    const int64_t h = std::stoll(s.substr(x + 1), &used);
    if (used != s.size() - x - 1 || w <= 0 || h <= 0) throw std::invalid_argument(s);
    return {w, h};
  } catch (const std::logic_error&) {
    throw CliError("size must look like WIDTHxHEIGHT, got '" + s + "'");
  }
}

/// Where samples come from: a manifest on disk or the synthetic generator.
struct DataSource {
  std::string root;
  std::string split = "train";
  int synthetic = 0;
  uint64_t data_seed = 1;
  double hole_ratio = 1.0;
  double noise = 0.002;
  std::string hole_mode = "zero";

  void add_to(CLI::App* app, const std::string& prefix = "") {
    const std::string p = prefix.empty() ? "--" : "--" + prefix + "-";
    app->add_option(p + "data", root, "dataset root holding <split>.manifest");
    app->add_option(p + "split", split, "manifest split name")->capture_default_str();
    app->add_option(p + "synthetic", synthetic, "generate this many synthetic scenes instead of reading a dataset");
    app->add_option(p + "data-seed", data_seed, "synthetic scene seed")->capture_default_str();
    app->add_option(p + "hole-ratio", hole_ratio, "synthetic fraction of transparent pixels without depth")
        ->capture_default_str();
    app->add_option(p + "noise", noise, "synthetic depth noise sigma in meters")->capture_default_str();
    app->add_option(p + "hole-mode", hole_mode, "zero, passthrough or mixed")->capture_default_str();
  }

  bool given() const { return synthetic > 0 || !root.empty(); }

  std::vector<DepthSample> load(int64_t width, int64_t height) const {
    std::vector<DepthSample> samples;
    if (synthetic > 0) {
      SceneSpec spec;
      spec.seed = data_seed;
      spec.width = width;
      spec.height = height;
      spec.hole_ratio = hole_ratio;
      spec.noise_sigma = noise;
      spec.hole_mode = parse_hole_mode(hole_mode);
      samples = gen_synthetic_set(spec, synthetic);
    } else if (!root.empty()) {
      DatasetLoad loaded = load_dataset(root, split);
      for (const std::string& msg : loaded.rejected) std::cerr << "skipped: " << msg << "\n";
      samples = std::move(loaded.samples);
    } else {
      throw CliError("no data: pass --data ROOT or --synthetic N");
    }
    if (samples.empty()) throw CliError("no usable samples");
    for (const DepthSample& s : samples)
      if (s.width != width || s.height != height)
        throw CliError("sample '" + s.id + "' is " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                       " but the model expects " + std::to_string(width) + "x" + std::to_string(height));
    return samples;
  }
};

/// Config file and flag overrides, in that order, on top of a preset.
struct ConfigFlags {
  std::string config_file;
  std::string preset;
  std::optional<int64_t> channels, batch, steps;
  std::optional<int> epochs;
  std::optional<double> lr, lambda, weight_decay;
  std::optional<uint64_t> seed;
  std::string size;
  bool no_smfm = false, no_btmfm = false;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file");
    app->add_option("--preset", preset, "desk or paper");
    app->add_option("--channels", channels, "base channel count");
    app->add_option("--size", size, "input size WIDTHxHEIGHT");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--steps", steps, "stop after this many optimizer steps");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--lambda", lambda, "normal loss weight");
    app->add_option("--weight-decay", weight_decay, "decoupled weight decay");
    app->add_option("--seed", seed, "initialisation and shuffling seed");
    app->add_flag("--no-smfm", no_smfm, "fuse shallow stages by addition");
    app->add_flag("--no-btmfm", no_btmfm, "fuse the bottleneck without the transformer/SSM block");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!preset.empty()) cfg.model = ModelConfig::preset(preset);
    if (!config_file.empty()) cfg = TrainConfig::from_kv(KeyValues::load(config_file), cfg);
    KeyValues kv;
    auto put = [&kv](const char* key, const auto& v) {
      if (v) kv.set(key, std::to_string(*v));
    };
    put("channels", channels);
    put("epochs", epochs);
    put("steps", steps);
    put("batch", batch);
    put("seed", seed);
    cfg = TrainConfig::from_kv(kv, cfg);
    if (lr) cfg.lr = *lr;
    if (lambda) cfg.lambda = *lambda;
    if (weight_decay) cfg.weight_decay = *weight_decay;
    if (!size.empty()) std::tie(cfg.model.width, cfg.model.height) = parse_size(size);
    if (no_smfm) cfg.model.use_smfm = false;
    if (no_btmfm) cfg.model.use_btmfm = false;
    cfg.validate();
    return cfg;
  }
};

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw CliError("cannot write " + path);
}

int cmd_train(const ConfigFlags& flags, const DataSource& data, const DataSource& val_data, const std::string& out) {
  const TrainConfig cfg = flags.resolve();
  const auto train = data.load(cfg.model.width, cfg.model.height);
  std::optional<std::vector<DepthSample>> val;
  if (val_data.given()) val = val_data.load(cfg.model.width, cfg.model.height);

  LoadedModel model = create_model(cfg.model, cfg.seed);
  fs::create_directories(out);
  write_text((fs::path(out) / "config.txt").string(), cfg.to_kv().str());
  std::ofstream log((fs::path(out) / "train_log.csv").string());
  log << epoch_log_header() << "\n";
  std::cout << epoch_log_header() << "\n";
  TrainOutputs hooks;
  hooks.dir = out;
  hooks.on_epoch = [&](const EpochLog& e) {
    log << epoch_log_row(e) << "\n" << std::flush;
    std::cout << epoch_log_row(e) << "\n" << std::flush;
  };
  hooks.on_message = [](const std::string& m) { std::cerr << m << "\n"; };
  const TrainResult res = train_model(cfg, model, train, val ? &*val : nullptr, hooks);
  if (res.diverged) {
    std::cerr << "training diverged: " << res.error << "\nlast good checkpoint: "
              << (fs::path(out) / "last_good.hdck").string() << "\n";
    return 3;
  }
  return 0;
}

LoadedModel open_checkpoint(const std::string& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

int cmd_eval(const std::string& ckpt, const DataSource& data, const std::string& out, bool per_sample,
             const std::string& error_maps, int64_t batch) {
  const LoadedModel model = open_checkpoint(ckpt);
  const auto samples = data.load(model.config.width, model.config.height);
  const EvalResult r = evaluate(*model.net, samples, batch);
  write_text(out, eval_csv(r, samples, per_sample));
  if (!error_maps.empty()) {
    fs::create_directories(error_maps);
    for (size_t i = 0; i < samples.size(); ++i)
      write_error_map((fs::path(error_maps) / (samples[i].id + "_error.pgm")).string(), samples[i].width,
                      samples[i].height, r.predictions[i], samples[i].gt_depth, samples[i].eval_mask());
  }
  return 0;
}

int cmd_ablate(const ConfigFlags& flags, const DataSource& train_data, const DataSource& test_data,
               const std::string& out) {
  const TrainConfig cfg = flags.resolve();
  const auto train = train_data.load(cfg.model.width, cfg.model.height);
  const auto test = test_data.load(cfg.model.width, cfg.model.height);
  TrainOutputs hooks;
  hooks.dir = out;
  hooks.on_message = [](const std::string& m) { std::cerr << m << "\n"; };
  const auto rows = run_ablation(cfg, train, test, hooks);
  const std::string csv = ablation_csv(rows);
  std::cout << csv;
  if (!out.empty()) write_text((fs::path(out) / "ablation.csv").string(), csv);
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& rgb_path, const std::string& raw_path,
              const std::string& gt_path, double depth_scale, const std::string& out, const std::string& error_map) {
  const LoadedModel model = open_checkpoint(ckpt);
  DepthSample s;
  s.id = fs::path(rgb_path).stem().string();
  s.rgb = read_rgb_ppm(rgb_path, &s.width, &s.height);
  int64_t w = 0, h = 0;
  s.raw_depth = read_depth_pgm(raw_path, depth_scale, &w, &h);
  if (w != s.width || h != s.height) throw CliError("raw depth and rgb sizes differ");
  if (s.width != model.config.width || s.height != model.config.height)
    throw CliError("input is " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                   " but the checkpoint expects " + std::to_string(model.config.width) + "x" +
                   std::to_string(model.config.height));
  if (!gt_path.empty()) {
    s.gt_depth = read_depth_pgm(gt_path, depth_scale, &w, &h);
    if (w != s.width || h != s.height) throw CliError("ground truth size differs from input");
  } else {
    s.gt_depth = s.raw_depth;
  }
  s.valid_mask.resize(s.gt_depth.size());
  for (size_t i = 0; i < s.gt_depth.size(); ++i) s.valid_mask[i] = s.gt_depth[i] > 0;
  s.transparent_mask.assign(s.gt_depth.size(), 0);
  const auto pred = predict(*model.net, {s}, 1).front();
  write_depth_pgm(out, s.width, s.height, pred, depth_scale);
  if (!gt_path.empty()) {
    const EvalResult r = evaluate_predictions({s}, {pred});
    std::cout << MetricsReport::csv_header() << "\n" << r.summary.csv_row() << "\n";
    if (!error_map.empty()) write_error_map(error_map, s.width, s.height, pred, s.gt_depth, s.valid_mask);
  }
  return 0;
}

int cmd_verify(const std::string& suite, bool quiet) {
  const CheckSink sink = [quiet](const CheckResult& c) {
    if (!quiet || !c.pass) std::cout << c.line() << "\n" << std::flush;
  };
  VerifyReport r;
  if (suite == "all") r = verify_all(sink);
  else if (suite == "gradients") r = verify_gradients(sink);
  else if (suite == "scan") r = verify_scan(sink);
  else if (suite == "metrics") r = verify_metrics(sink);
  else if (suite == "surgery") r = verify_surgery(sink);
  else throw CliError("unknown suite '" + suite + "'");
  const auto failed = r.failures();
  std::printf("%zu checks, %zu failed, %.1fs\n", r.checks.size(), failed.size(), r.seconds);
  for (const CheckResult* c : failed) std::printf("failed: %s/%s\n", c->module.c_str(), c->op.c_str());
  return failed.empty() ? 0 : 1;
}

int cmd_synth(const DataSource& data, const std::string& size, const std::string& out, double depth_scale) {
  const auto [w, h] = parse_size(size);
  if (data.synthetic <= 0) throw CliError("--synthetic N is required");
  write_dataset(out, data.split, data.load(w, h), depth_scale);
  std::printf("wrote %d samples to %s/%s.manifest\n", data.synthetic, out.c_str(), data.split.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* t = std::getenv("HDC_THREADS")) {
    const int n = std::atoi(t);
    if (n > 0) kernels::set_max_threads(n);
  }

  CLI::App app{"Depth completion for transparent objects"};
  app.require_subcommand(1);
  int rc = 0;

  ConfigFlags train_flags;
  DataSource train_data, val_data;
  std::string train_out = "runs/train";
  auto* train = app.add_subcommand("train", "train a model");
  train_flags.add_to(train);
  train_data.add_to(train);
  val_data.add_to(train, "val");
  train->add_option("--out", train_out, "checkpoint and log directory")->capture_default_str();

  std::string eval_ckpt, eval_out = "-", eval_maps;
  bool eval_per_sample = false;
  int64_t eval_batch = 8;
  DataSource eval_data;
  eval_data.split = "test";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_data.add_to(eval);
  eval->add_option("--out", eval_out, "metrics CSV, - for stdout")->capture_default_str();
  eval->add_flag("--per-sample", eval_per_sample, "one row per sample plus the mean");
  eval->add_option("--error-maps", eval_maps, "directory for per-sample error PGMs");
  eval->add_option("--batch", eval_batch, "inference batch size")->capture_default_str();

  ConfigFlags ablate_flags;
  DataSource ablate_train, ablate_test;
  ablate_test.split = "test";
  std::string ablate_out = "runs/ablate";
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the four fusion variants");
  ablate_flags.add_to(ablate);
  ablate_train.add_to(ablate);
  ablate_test.add_to(ablate, "test");
  ablate->add_option("--out", ablate_out, "output directory")->capture_default_str();

  std::string infer_ckpt, infer_rgb, infer_raw, infer_gt, infer_out, infer_err;
  double infer_scale = 1e-4;
  auto* infer = app.add_subcommand("infer", "complete one depth image");
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--rgb", infer_rgb, "RGB PPM")->required();
  infer->add_option("--raw", infer_raw, "raw depth PGM")->required();
  infer->add_option("--gt", infer_gt, "ground truth depth PGM");
  infer->add_option("--depth-scale", infer_scale, "meters per PGM unit")->capture_default_str();
  infer->add_option("--out", infer_out, "completed depth PGM")->required();
  infer->add_option("--error-map", infer_err, "error map PGM, needs --gt");

  std::string verify_suite = "all";
  bool verify_quiet = false, scan_fault = false;
  auto* verify = app.add_subcommand("verify", "run gradient checks, oracles and invariants");
  verify->add_option("--suite", verify_suite, "all, gradients, scan, metrics or surgery")->capture_default_str();
  verify->add_flag("--quiet", verify_quiet, "print failures only");
  verify->add_flag("--inject-scan-fault", scan_fault)->group("");

  DataSource synth_data;
  synth_data.synthetic = 16;
  std::string synth_size = "64x48", synth_out;
  double synth_scale = 1e-4;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset to disk");
  synth_data.add_to(synth);
  synth->add_option("--size", synth_size, "image size WIDTHxHEIGHT")->capture_default_str();
  synth->add_option("--out", synth_out, "dataset root")->required();
  synth->add_option("--depth-scale", synth_scale, "meters per PGM unit")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) rc = cmd_train(train_flags, train_data, val_data, train_out);
    else if (*eval) rc = cmd_eval(eval_ckpt, eval_data, eval_out, eval_per_sample, eval_maps, eval_batch);
    else if (*ablate) rc = cmd_ablate(ablate_flags, ablate_train, ablate_test, ablate_out);
    else if (*infer) rc = cmd_infer(infer_ckpt, infer_rgb, infer_raw, infer_gt, infer_scale, infer_out, infer_err);
    else if (*verify) {
      if (scan_fault) testing::set_scan_fault(true);
      rc = cmd_verify(verify_suite, verify_quiet);
    } else if (*synth) rc = cmd_synth(synth_data, synth_size, synth_out, synth_scale);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return rc;
}
