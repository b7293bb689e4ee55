#include <doctest.h>

#include <cmath>
#include <random>

#include "hdc/decoder.hpp"
#include "hdc/gradcheck.hpp"
#include "hdc/model.hpp"

using namespace hdc;

namespace {

double max_diff(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.ptr()[i]) - double(b.ptr()[i])));
  return m;
}

bool has_prefix(const ParamStore<float>& s, const std::string& prefix) {
  for (const auto& [name, t] : s)
    if (name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

TEST_SUITE("alignment") {
  TEST_CASE("constant map stays constant") {
    const auto y = align_shallow(Tensor<float>({1, 2, 8, 6}, 3.25f), 4, 4, 3);
    REQUIRE(y.shape() == Shape{1, 4, 4, 3});
    for (float v : y.data()) CHECK(v == 3.25f);
  }

  TEST_CASE("window means duplicated into channels 2k and 2k+1") {
    std::mt19937_64 rng(1);
    const auto s = Tensor<float>::randn({2, 3, 6, 4}, rng);
    const auto y = align_shallow(s, 6, 3, 2);
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t k = 0; k < 3; ++k)
        for (int64_t i = 0; i < 3; ++i)
          for (int64_t j = 0; j < 2; ++j) {
            auto at = [&](int64_t yy, int64_t xx) { return double(s.ptr()[((n * 3 + k) * 6 + yy) * 4 + xx]); };
            const double m = (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1)) / 4;
            for (int64_t r = 0; r < 2; ++r) CHECK(std::abs(y.ptr()[((n * 6 + 2 * k + r) * 3 + i) * 2 + j] - m) < 1e-6);
          }
  }

  TEST_CASE("wrong scale is rejected") {
    CHECK_THROWS_AS(align_shallow(Tensor<float>({1, 2, 8, 8}), 4, 3, 4), ShapeError);
    CHECK_THROWS_AS(align_shallow(Tensor<float>({1, 3, 8, 8}), 4, 4, 4), ShapeError);
  }
}

TEST_SUITE("down fusion") {
  TEST_CASE("spatial attention matches a direct loop") {
    ParamStore<double> st;
    DownFusion<double> m(ParamBuilder<double>::create(st, 2), 8);
    jitter(st, 3, 0.2);
    std::mt19937_64 rng(4);
    const auto f = Tensor<double>::randn({2, 8, 5, 6}, rng);
    const auto a = m.spatial_attention(f);
    REQUIRE(a.shape() == Shape{2, 1, 5, 6});
    const double* w = m.spatial.weight.ptr();
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t y = 0; y < 5; ++y)
        for (int64_t x = 0; x < 6; ++x) {
          double acc = m.spatial.bias.ptr()[0];
          for (int64_t ky = 0; ky < 7; ++ky)
            for (int64_t kx = 0; kx < 7; ++kx) {
              const int64_t iy = y + ky - 3, ix = x + kx - 3;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              double mx = -INFINITY, mean = 0;
              for (int64_t c = 0; c < 8; ++c) {
                const double v = f.ptr()[((n * 8 + c) * 5 + iy) * 6 + ix];
                mx = std::max(mx, v);
                mean += v / 8;
              }
              acc += w[ky * 7 + kx] * mx + w[49 + ky * 7 + kx] * mean;
            }
          CHECK(std::abs(a.ptr()[(n * 5 + y) * 6 + x] - acc) < 1e-6);
        }
  }

  TEST_CASE("constant input gives a constant interior spatial map") {
    ParamStore<float> st;
    DownFusion<float> m(ParamBuilder<float>::create(st, 5), 4);
    const auto a = m.spatial_attention(Tensor<float>({1, 4, 9, 9}, 0.7f));
    for (int64_t y = 3; y < 6; ++y)
      for (int64_t x = 3; x < 6; ++x) CHECK(a.ptr()[y * 9 + x] == a.ptr()[4 * 9 + 4]);
  }

  TEST_CASE("channel attention matches two matrix products") {
    ParamStore<float> st;
    DownFusion<float> m(ParamBuilder<float>::create(st, 6), 8);
    jitter(st, 7, 0.2);
    std::mt19937_64 rng(8);
    const auto f = Tensor<float>::randn({1, 8, 3, 3}, rng);
    const auto a = m.channel_attention(f);
    REQUIRE(a.shape() == Shape{1, 8, 1, 1});
    std::vector<double> z(8), h(2);
    for (int64_t c = 0; c < 8; ++c) {
      for (int64_t i = 0; i < 9; ++i) z[c] += f.ptr()[c * 9 + i] / 9.0;
    }
    for (int64_t r = 0; r < 2; ++r) {
      double s = m.channel_reduce.bias.ptr()[r];
      for (int64_t c = 0; c < 8; ++c) s += m.channel_reduce.weight.ptr()[r * 8 + c] * z[c];
      h[r] = std::max(s, 0.0);
    }
    for (int64_t c = 0; c < 8; ++c) {
      double s = m.channel_expand.bias.ptr()[c];
      for (int64_t r = 0; r < 2; ++r) s += m.channel_expand.weight.ptr()[c * 2 + r] * h[r];
      CHECK(std::abs(a.ptr()[c] - s) < 1e-6);
    }
  }

  TEST_CASE("zero input gives zero channel vector") {
    ParamStore<float> st;
    DownFusion<float> m(ParamBuilder<float>::create(st, 9), 8);
    const auto a = m.channel_attention(Tensor<float>({2, 8, 4, 4}));
    CHECK(a.shape() == Shape{2, 8, 1, 1});
    for (float v : a.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("blend weights lie inside (0,1)") {
    ParamStore<float> st;
    DownFusion<float> m(ParamBuilder<float>::create(st, 10), 8);
    jitter(st, 11, 0.3);
    std::mt19937_64 rng(12);
    DownFusionTrace<float> tr;
    m(Tensor<float>::randn({2, 8, 4, 4}, rng), Tensor<float>::randn({2, 4, 8, 8}, rng), &tr);
    for (float v : tr.weight.data()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
    CHECK(max_diff(tr.merged, add(tr.aligned, sub(tr.merged, tr.aligned))) == 0.0);
  }

  TEST_CASE("gradcheck at C=4, 4x4") {
    ParamStore<double> st;
    DownFusion<double>(ParamBuilder<double>::create(st, 13), 4);
    jitter(st, 14, 0.1);
    std::mt19937_64 rng(15);
    st.add("deep", Tensor<double>::randn({1, 4, 4, 4}, rng));
    st.add("shallow", Tensor<double>::randn({1, 2, 8, 8}, rng));
    const auto r = gradcheck(st, [](const ParamStore<double>& p) {
      DownFusion<double> m(ParamBuilder<double>::bind(const_cast<ParamStore<double>&>(p)), 4);
      return random_projection(m(p.at("deep"), p.at("shallow")), 5);
    });
    CHECK(r.max_error() < 1e-4);
    CHECK(r.kinks() * 10 <= r.checked());
  }
}

TEST_SUITE("model") {
  TEST_CASE("64x64 input gives a positive full-resolution map") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.width = cfg.height = 64;
    ParamStore<float> st;
    HdcNet<float> net(cfg, ParamBuilder<float>::create(st, 16));
    std::mt19937_64 rng(17);
    const auto y = net(Tensor<float>::uniform({1, 3, 64, 64}, rng, 0, 1), Tensor<float>::uniform({1, 1, 64, 64}, rng, 0, 2));
    REQUIRE(y.shape() == Shape{1, 1, 64, 64});
    for (float v : y.data()) CHECK(v > 0.0f);
  }

  TEST_CASE("every switch combination and padded size keeps the contract") {
    std::mt19937_64 rng(18);
    for (bool smfm : {false, true})
      for (bool btmfm : {false, true})
        for (auto [w, h] : {std::pair<int64_t, int64_t>{64, 48}, {32, 40}}) {
          ModelConfig cfg = ModelConfig::desk();
          cfg.encoder.base_channels = 4;
          cfg.use_smfm = smfm;
          cfg.use_btmfm = btmfm;
          cfg.width = w;
          cfg.height = h;
          ParamStore<float> st;
          HdcNet<float> net(cfg, ParamBuilder<float>::create(st, 19));
          jitter(st, 20, 0.5);
          const auto y = net(Tensor<float>::uniform({2, 3, h, w}, rng, 0, 1), Tensor<float>::uniform({2, 1, h, w}, rng, 0, 2));
          REQUIRE(y.shape() == Shape{2, 1, h, w});
          for (float v : y.data()) CHECK(v > 0.0f);
          CHECK(has_prefix(st, "fusion.stage1.") == smfm);
          CHECK(has_prefix(st, "bottleneck.ssm") == btmfm);
        }
  }

  TEST_CASE("initial prediction sits at the depth prior") {
    ModelConfig cfg = ModelConfig::desk();
    ParamStore<float> st;
    HdcNet<float> net(cfg, ParamBuilder<float>::create(st, 21));
    std::mt19937_64 rng(22);
    const auto y = net(Tensor<float>::uniform({1, 3, 48, 64}, rng, 0, 1), Tensor<float>::uniform({1, 1, 48, 64}, rng, 0, 2));
    for (float v : y.data()) CHECK(v == doctest::Approx(1.0f).epsilon(1e-5));
  }

  TEST_CASE("paper preset pads 240 rows to 256") {
    const ModelConfig p = ModelConfig::paper();
    CHECK(p.encoder.base_channels == 24);
    CHECK(p.width == 320);
    CHECK(p.height == 240);
    CHECK(p.padded_height() == 256);
    CHECK(p.padded_width() == 320);
    const ModelConfig d = ModelConfig::desk();
    CHECK(d.padded_height() == 64);
    CHECK(d.padded_width() == 64);
  }

  TEST_CASE("config validation and round trip") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.encoder.base_channels = 6;
    CHECK_THROWS(cfg.validate());
    cfg = ModelConfig::desk();
    cfg.use_btmfm = false;
    cfg.decoder.upsample = UpsampleMode::Nearest;
    KeyValues kv;
    cfg.write(kv);
    KeyValues again;
    ModelConfig::read(kv).write(again);
    CHECK(kv == again);
    CHECK_THROWS(ModelConfig::preset("huge"));
  }

  TEST_CASE("wrong input size is rejected") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.encoder.base_channels = 4;
    ParamStore<float> st;
    HdcNet<float> net(cfg, ParamBuilder<float>::create(st, 23));
    CHECK_THROWS_AS(net(Tensor<float>({1, 3, 48, 64}), Tensor<float>({1, 1, 48, 60})), ShapeError);
  }
}
