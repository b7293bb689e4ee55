#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "hdc/train.hpp"

using namespace hdc;
namespace fs = std::filesystem;

namespace {

ParamStore<float> one_param(float value, float grad) {
  ParamStore<float> s;
  auto& t = s.add("w", Tensor<float>({3}, value));
  for (float& g : t.grad()) g = grad;
  return s;
}

TrainConfig small_config() {
  TrainConfig c;
  c.model = ModelConfig::desk();
  c.model.encoder.base_channels = 4;
  c.model.width = 32;
  c.model.height = 32;
  c.epochs = 2;
  c.batch = 2;
  c.seed = 7;
  return c;
}

std::vector<DepthSample> small_set(uint64_t seed, int n) {
  SceneSpec spec;
  spec.width = 32;
  spec.height = 32;
  spec.seed = seed;
  return gen_synthetic_set(spec, n);
}

bool same_params(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    const auto& u = b.at(name);
    if (u.shape() != t.shape() || std::memcmp(u.ptr(), t.ptr(), sizeof(float) * static_cast<size_t>(t.numel())) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("adamw") {
  TEST_CASE("zero gradient and zero decay leave parameters unchanged") {
    auto s = one_param(0.5f, 0.0f);
    AdamW opt(s, AdamWOptions{1e-3, 0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 5; ++i) REQUIRE(opt.step());
    for (float v : s.at("w").data()) CHECK(v == 0.5f);
  }

  TEST_CASE("first step moves by the learning rate") {
    auto s = one_param(1.0f, 0.3f);
    AdamW opt(s, AdamWOptions{1e-3, 0.9, 0.999, 1e-8, 0.0});
    REQUIRE(opt.step());
    for (float v : s.at("w").data()) CHECK(v == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
    CHECK(opt.steps() == 1);
  }

  TEST_CASE("decay alone shrinks by (1 - lr * wd)") {
    auto s = one_param(2.0f, 0.0f);
    AdamW opt(s, AdamWOptions{1e-2, 0.9, 0.999, 1e-8, 0.5});
    REQUIRE(opt.step());
    for (float v : s.at("w").data()) CHECK(v == doctest::Approx(2.0 * (1 - 1e-2 * 0.5)));
  }

  TEST_CASE("non-finite gradient is rejected without side effects") {
    auto s = one_param(1.0f, 0.1f);
    AdamW opt(s);
    REQUIRE(opt.step());
    const auto span = s.at("w").data();
    const std::vector<float> before(span.begin(), span.end());
    s.at("w").grad()[1] = NAN;
    CHECK_FALSE(opt.step());
    CHECK(opt.steps() == 1);
    CHECK(opt.last_error().find("w") != std::string::npos);
    for (size_t i = 0; i < 3; ++i) CHECK(s.at("w").data()[i] == before[i]);
  }

  TEST_CASE("bad options throw") {
    auto s = one_param(1.0f, 0.0f);
    CHECK_THROWS(AdamW(s, AdamWOptions{0.0}));
    CHECK_THROWS(AdamW(s, AdamWOptions{1e-3, 1.0}));
    CHECK_THROWS(AdamW(s, AdamWOptions{1e-3, 0.9, 0.999, 1e-8, -1.0}));
  }
}

TEST_SUITE("train config") {
  TEST_CASE("round trip through key values") {
    TrainConfig c = small_config();
    c.lr = 3.3e-4;
    c.lambda = 0.25;
    c.steps = 17;
    c.model.use_smfm = false;
    const TrainConfig back = TrainConfig::from_kv(KeyValues::parse(c.to_kv().str()));
    CHECK(back.to_kv() == c.to_kv());
    CHECK(back.lr == c.lr);
    CHECK_FALSE(back.model.use_smfm);
  }

  TEST_CASE("validation") {
    TrainConfig c = small_config();
    c.lr = 0;
    CHECK_THROWS(c.validate());
    c = small_config();
    c.batch = 0;
    CHECK_THROWS(c.validate());
    c = small_config();
    c.lambda = -0.1;
    CHECK_THROWS(c.validate());
  }
}

TEST_SUITE("training") {
  TEST_CASE("same seed gives identical logs and weights") {
    const auto data = small_set(1, 4);
    const TrainConfig cfg = small_config();
    LoadedModel a = create_model(cfg.model, cfg.seed), b = create_model(cfg.model, cfg.seed);
    const auto ra = train_model(cfg, a, data, nullptr, {});
    const auto rb = train_model(cfg, b, data, nullptr, {});
    REQUIRE(ra.log.size() == 2);
    REQUIRE(rb.log.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
      CHECK(ra.log[i].total == rb.log[i].total);
      CHECK(ra.log[i].step == rb.log[i].step);
    }
    CHECK(ra.steps == 4);
    CHECK(same_params(*a.params, *b.params));
  }

  TEST_CASE("step budget overrides epochs") {
    const auto data = small_set(2, 4);
    TrainConfig cfg = small_config();
    cfg.steps = 3;
    cfg.epochs = 100;
    LoadedModel m = create_model(cfg.model, cfg.seed);
    CHECK(train_model(cfg, m, data, nullptr, {}).steps == 3);
  }

  TEST_CASE("zero epochs saves the initial weights") {
    const fs::path dir = fs::temp_directory_path() / ("hdc_cli_" + std::to_string(::getpid()));
    TrainConfig cfg = small_config();
    cfg.epochs = 0;
    LoadedModel m = create_model(cfg.model, cfg.seed);
    const auto r = train_model(cfg, m, {}, nullptr, TrainOutputs{dir.string(), {}, {}});
    CHECK(r.steps == 0);
    const Checkpoint ck = load_checkpoint((dir / "final.hdck").string());
    CHECK(same_params(ck.params, *m.params));
    LoadedModel again = model_from_checkpoint(ck);
    CHECK(again.config.width == 32);
    const auto s = small_set(3, 1);
    CHECK(predict(*again.net, s)[0] == predict(*m.net, s)[0]);
    fs::remove_all(dir);
  }

  TEST_CASE("mismatched sample size is rejected before training") {
    SceneSpec spec;
    spec.width = 64;
    spec.height = 48;
    const auto data = gen_synthetic_set(spec, 2);
    const TrainConfig cfg = small_config();
    LoadedModel m = create_model(cfg.model, cfg.seed);
    CHECK_THROWS_AS(train_model(cfg, m, data, nullptr, {}), std::invalid_argument);
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("ground truth as prediction scores perfectly") {
    const auto data = small_set(4, 3);
    std::vector<std::vector<float>> preds;
    for (const auto& s : data) preds.push_back(s.gt_depth);
    const auto r = evaluate_predictions(data, preds);
    CHECK(r.summary.rmse == 0.0);
    CHECK(r.summary.rel == 0.0);
    CHECK(r.summary.d105 == 100.0);
    CHECK(r.per_sample.size() == 3);
    CHECK_THROWS(evaluate_predictions(data, {preds[0]}));
  }

  TEST_CASE("ablation grid covers four variants with one changed switch pair") {
    const auto train = small_set(5, 2), test = small_set(6, 2);
    TrainConfig cfg = small_config();
    cfg.epochs = 1;
    const auto rows = run_ablation(cfg, train, test, {});
    REQUIRE(rows.size() == 4);
    const char* names[] = {"none", "smfm", "btmfm", "smfm+btmfm"};
    for (size_t i = 0; i < 4; ++i) {
      CHECK(rows[i].variant == names[i]);
      const auto kv = KeyValues::parse(rows[i].config_text);
      CHECK(kv.get_bool("use_smfm", !rows[i].use_smfm) == rows[i].use_smfm);
      CHECK(kv.get_bool("use_btmfm", !rows[i].use_btmfm) == rows[i].use_btmfm);
      KeyValues a = kv, b = KeyValues::parse(rows[0].config_text);
      a.set("use_smfm", "false");
      a.set("use_btmfm", "false");
      b.set("use_smfm", "false");
      b.set("use_btmfm", "false");
      CHECK(a == b);
    }
    const std::string csv = ablation_csv(rows);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    CHECK(csv.rfind("variant,rmse,rel,mae,d105,d110,d125\n", 0) == 0);
  }
}
