#include "hdc/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace hdc {
namespace {

std::vector<std::vector<size_t>> batches_of(size_t n, int64_t batch, const std::vector<size_t>& order) {
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < n; i += static_cast<size_t>(batch))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<size_t>(batch))));
  return out;
}

std::vector<size_t> identity_order(size_t n) {
  std::vector<size_t> v(n);
  std::iota(v.begin(), v.end(), size_t{0});
  return v;
}

void check_sizes(const ModelConfig& cfg, const std::vector<DepthSample>& samples, const char* what) {
  for (const auto& s : samples)
    if (s.width != cfg.width || s.height != cfg.height)
      throw std::invalid_argument(std::string(what) + " sample " + s.id + " is " + std::to_string(s.width) + "x" +
                                  std::to_string(s.height) + " but the model expects " + std::to_string(cfg.width) +
                                  "x" + std::to_string(cfg.height));
}

std::string join_path(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (batch < 1) throw std::invalid_argument("batch must be at least 1");
  if (epochs < 0 || steps < 0) throw std::invalid_argument("epochs and steps must be non-negative");
  if (!(lambda >= 0)) throw std::invalid_argument("lambda must be non-negative");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be non-negative");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  model.write(kv);
  kv.set("epochs", std::to_string(epochs));
  kv.set("steps", std::to_string(steps));
  kv.set("batch", std::to_string(batch));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", lr);
  kv.set("lr", buf);
  std::snprintf(buf, sizeof buf, "%.17g", lambda);
  kv.set("lambda", buf);
  std::snprintf(buf, sizeof buf, "%.17g", weight_decay);
  kv.set("weight_decay", buf);
  kv.set("seed", std::to_string(seed));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv, const TrainConfig& base) {
  TrainConfig c = base;
  c.model = ModelConfig::read(kv, base.model);
  c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
  c.steps = kv.get_int("steps", c.steps);
  c.batch = kv.get_int("batch", c.batch);
  c.lr = kv.get_double("lr", c.lr);
  c.lambda = kv.get_double("lambda", c.lambda);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(c.seed)));
  return c;
}

LoadedModel create_model(const ModelConfig& cfg, uint64_t seed) {
  LoadedModel m;
  m.config = cfg;
  m.params = std::make_unique<ParamStore<float>>();
  m.net = std::make_unique<HdcNet<float>>(cfg, ParamBuilder<float>::create(*m.params, seed));
  return m;
}

LoadedModel model_from_checkpoint(const Checkpoint& ck) {
  LoadedModel m;
  m.config = ModelConfig::read(ck.config());
  m.params = std::make_unique<ParamStore<float>>(ck.params.clone());
  m.net = std::make_unique<HdcNet<float>>(m.config, ParamBuilder<float>::bind(*m.params));
  return m;
}

std::string epoch_log_header() { return "epoch,step,mse,normal,total,wall_s"; }

std::string epoch_log_row(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%lld,%.9g,%.9g,%.9g,%.3f", e.epoch, static_cast<long long>(e.step), e.mse,
                e.normal, e.total, e.wall_seconds);
  return buf;
}

TrainResult train_model(const TrainConfig& cfg, LoadedModel& model, const std::vector<DepthSample>& train,
                        const std::vector<DepthSample>* val, const TrainOutputs& out) {
  cfg.validate();
  check_sizes(model.config, train, "training");
  if (val) check_sizes(model.config, *val, "validation");
  if (train.empty() && (cfg.epochs > 0 || cfg.steps > 0)) throw std::invalid_argument("no training samples");

  const std::string config_text = [&] {
    TrainConfig c = cfg;
    c.model = model.config;
    return c.to_kv().str();
  }();
  auto save = [&](const std::string& file) {
    if (!out.dir.empty()) save_checkpoint(join_path(out.dir, file), *model.params, config_text);
  };
  auto say = [&](const std::string& msg) {
    if (out.on_message) out.on_message(msg);
  };
  if (!out.dir.empty()) std::filesystem::create_directories(out.dir);

  TrainResult res;
  const int64_t per_epoch = train.empty() ? 0 : (static_cast<int64_t>(train.size()) + cfg.batch - 1) / cfg.batch;
  const int64_t epochs = cfg.steps > 0 ? (cfg.steps + per_epoch - 1) / per_epoch : cfg.epochs;
  save("last_good.hdck");
  if (epochs == 0) {
    save("final.hdck");
    save("best.hdck");
    return res;
  }

  AdamW opt(*model.params, AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dULL);
  double best = INFINITY;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<size_t> order = identity_order(train.size());
  for (int64_t epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = static_cast<int>(epoch);
    int64_t nb = 0;
    for (const auto& idx : batches_of(train.size(), cfg.batch, order)) {
      if (cfg.steps > 0 && res.steps >= cfg.steps) break;
      const Batch b = make_batch(train, idx);
      model.params->zero_grad();
      GradTape<float> tape;
      const Tensor<float> pred = (*model.net)(b.rgb, b.raw_depth);
      LossTerms<float> loss = total_loss(pred, b.gt_depth, b.train_mask, cfg.lambda);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        res.diverged = true;
        res.error = "non-finite loss at step " + std::to_string(res.steps + 1) + "; last good checkpoint kept";
        say(res.error);
        return res;
      }
      tape.backward(loss.total);
      if (!opt.step()) {
        res.diverged = true;
        res.error = opt.last_error() + "; last good checkpoint kept";
        say(res.error);
        return res;
      }
      ++res.steps;
      ++nb;
      log.mse += loss.mse.item();
      log.normal += loss.normal.item();
      log.total += total;
    }
    if (nb == 0) break;
    log.mse /= static_cast<double>(nb);
    log.normal /= static_cast<double>(nb);
    log.total /= static_cast<double>(nb);
    log.step = res.steps;
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(log);
    if (out.on_epoch) out.on_epoch(log);
    save("last_good.hdck");
    const double score = val && !val->empty() ? evaluate(*model.net, *val, cfg.batch).summary.rmse : log.total;
    if (score < best) {
      best = score;
      save("best.hdck");
    }
  }
  save("final.hdck");
  return res;
}

std::vector<std::vector<float>> predict(const HdcNet<float>& net, const std::vector<DepthSample>& samples,
                                        int64_t batch) {
  NoGradGuard<float> guard;
  std::vector<std::vector<float>> out;
  for (const auto& idx : batches_of(samples.size(), batch, identity_order(samples.size()))) {
    const Batch b = make_batch(samples, idx);
    const Tensor<float> pred = net(b.rgb, b.raw_depth);
    const int64_t P = pred.dim(2) * pred.dim(3);
    for (size_t j = 0; j < idx.size(); ++j)
      out.emplace_back(pred.ptr() + static_cast<int64_t>(j) * P, pred.ptr() + static_cast<int64_t>(j + 1) * P);
  }
  return out;
}

EvalResult evaluate_predictions(const std::vector<DepthSample>& samples,
                                const std::vector<std::vector<float>>& predictions) {
  if (samples.size() != predictions.size())
    throw std::invalid_argument("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(samples.size()) + " samples");
  EvalResult r;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto em = s.eval_mask();
    const std::vector<float> mask(em.begin(), em.end());
    try {
      r.per_sample.push_back(compute_metrics<float>(predictions[i], s.gt_depth, mask));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("sample " + s.id + ": " + e.what());
    }
  }
  r.summary = MetricsReport::mean_of(r.per_sample);
  r.predictions = predictions;
  return r;
}

EvalResult evaluate(const HdcNet<float>& net, const std::vector<DepthSample>& samples, int64_t batch) {
  check_sizes(net.config(), samples, "evaluation");
  return evaluate_predictions(samples, predict(net, samples, batch));
}

LossSummary dataset_losses(const HdcNet<float>& net, const std::vector<DepthSample>& samples, double lambda,
                           int64_t batch) {
  NoGradGuard<float> guard;
  LossSummary s;
  int64_t nb = 0;
  for (const auto& idx : batches_of(samples.size(), batch, identity_order(samples.size()))) {
    const Batch b = make_batch(samples, idx);
    const auto loss = total_loss(net(b.rgb, b.raw_depth), b.gt_depth, b.train_mask, lambda);
    s.mse += loss.mse.item();
    s.normal += loss.normal.item();
    s.total += loss.total.item();
    ++nb;
  }
  if (nb == 0) throw std::invalid_argument("dataset_losses: no samples");
  s.mse /= static_cast<double>(nb);
  s.normal /= static_cast<double>(nb);
  s.total /= static_cast<double>(nb);
  return s;
}

std::vector<AblationRow> run_ablation(const TrainConfig& cfg, const std::vector<DepthSample>& train,
                                      const std::vector<DepthSample>& test, const TrainOutputs& out) {
  struct Variant {
    const char* name;
    bool smfm, btmfm;
  };
  const Variant grid[] = {{"none", false, false}, {"smfm", true, false}, {"btmfm", false, true}, {"smfm+btmfm", true, true}};
  std::vector<AblationRow> rows;
  for (const auto& v : grid) {
    TrainConfig c = cfg;
    c.model.use_smfm = v.smfm;
    c.model.use_btmfm = v.btmfm;
    LoadedModel m = create_model(c.model, c.seed);
    TrainOutputs o = out;
    std::ofstream log;
    if (!out.dir.empty()) {
      o.dir = join_path(out.dir, v.name);
      std::filesystem::create_directories(o.dir);
      log.open(join_path(o.dir, "train_log.csv"));
      log << epoch_log_header() << "\n";
      o.on_epoch = [&log, &out](const EpochLog& e) {
        log << epoch_log_row(e) << "\n" << std::flush;
        if (out.on_epoch) out.on_epoch(e);
      };
    }
    if (out.on_message) out.on_message(std::string("ablation variant ") + v.name);
    const TrainResult tr = train_model(c, m, train, nullptr, o);
    if (tr.diverged) throw std::runtime_error(std::string("ablation variant ") + v.name + " diverged: " + tr.error);
    rows.push_back({v.name, v.smfm, v.btmfm, evaluate(*m.net, test, c.batch).summary, c.to_kv().str()});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "variant," + MetricsReport::csv_header() + "\n";
  for (const auto& r : rows) s += r.variant + "," + r.metrics.csv_row() + "\n";
  return s;
}

std::string eval_csv(const EvalResult& r, const std::vector<DepthSample>& samples, bool per_sample) {
  std::string out;
  if (per_sample) {
    out = "id," + MetricsReport::csv_header() + "\n";
    for (size_t i = 0; i < samples.size(); ++i) out += samples[i].id + "," + r.per_sample[i].csv_row() + "\n";
    out += "mean," + r.summary.csv_row() + "\n";
  } else {
    out = MetricsReport::csv_header() + "\n" + r.summary.csv_row() + "\n";
  }
  return out;
}

}  // namespace hdc
