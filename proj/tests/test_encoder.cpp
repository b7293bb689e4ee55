#include <doctest.h>

#include <cmath>
#include <random>

#include "hdc/encoder.hpp"
#include "hdc/gradcheck.hpp"

using namespace hdc;

namespace {

void zero(Tensor<float>& t) {
  for (float& v : t.data()) v = 0.0f;
}

double max_diff(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.ptr()[i]) - double(b.ptr()[i])));
  return m;
}

}  // namespace

TEST_SUITE("patch embed") {
  TEST_CASE("shape and zero input") {
    ParamStore<float> s;
    PatchEmbed<float> pe(ParamBuilder<float>::create(s, 1), 4, 24);
    std::mt19937_64 rng(1);
    CHECK(pe(Tensor<float>::randn({1, 4, 64, 64}, rng)).shape() == Shape{1, 24, 16, 16});
    const auto y = pe(Tensor<float>({1, 4, 8, 8}));
    for (float v : y.data()) CHECK(v == 0.0f);
    CHECK_THROWS_AS(pe(Tensor<float>({1, 4, 10, 8})), ShapeError);
  }

  TEST_CASE("equals a 4x4 stride-4 convolution on the same weights") {
    ParamStore<float> s;
    PatchEmbed<float> pe(ParamBuilder<float>::create(s, 2), 3, 6);
    jitter(s, 3, 0.2);
    std::mt19937_64 rng(2);
    const auto x = Tensor<float>::randn({2, 3, 8, 12}, rng);
    const auto ref = conv2d(x, pe.proj.weight, pe.proj.bias, Conv2dOptions{4, 0, 1});
    CHECK(max_diff(pe(x), ref) == 0.0);
  }
}

TEST_SUITE("window attention") {
  TEST_CASE("attention rows sum to one") {
    ParamStore<float> s;
    WindowAttentionBlock<float> blk(ParamBuilder<float>::create(s, 4), 8, 2, 4, false);
    std::mt19937_64 rng(3);
    Tensor<float> probs;
    blk(Tensor<float>::randn({1, 8, 8, 8}, rng), &probs);
    const int64_t L = probs.dim(-1);
    for (int64_t r = 0; r < probs.numel() / L; ++r) {
      double sum = 0;
      for (int64_t c = 0; c < L; ++c) sum += probs.ptr()[r * L + c];
      CHECK(std::abs(sum - 1) < 1e-5);
    }
  }

  TEST_CASE("zero value and output projections leave the MLP path") {
    ParamStore<float> s;
    WindowAttentionBlock<float> blk(ParamBuilder<float>::create(s, 5), 8, 2, 4, true);
    jitter(s, 6, 0.1);
    for (auto* l : {&blk.attn.v, &blk.attn.out}) {
      zero(l->weight);
      zero(l->bias);
    }
    std::mt19937_64 rng(4);
    const auto x = Tensor<float>::randn({2, 8, 8, 4}, rng);
    const auto tokens = permute(x, {0, 2, 3, 1});
    const auto ref = permute(add(tokens, blk.mlp(blk.norm2(tokens))), {0, 3, 1, 2});
    CHECK(max_diff(blk(x), ref) < 1e-6);
  }

  TEST_CASE("single 1x1 window with one head is plain attention over one token") {
    ParamStore<float> s;
    WindowAttentionBlock<float> blk(ParamBuilder<float>::create(s, 7), 4, 1, 1, false);
    jitter(s, 8, 0.2);
    std::mt19937_64 rng(5);
    const auto x = Tensor<float>::randn({1, 4, 1, 1}, rng);
    // One token: softmax weight 1, so attention returns out(v(LN(x))).
    const auto t = reshape(x, {1, 1, 4});
    const auto attn = blk.attn.out(blk.attn.v(blk.norm1(t)));
    const auto h = add(t, attn);
    const auto ref = reshape(add(h, blk.mlp(blk.norm2(h))), {1, 4, 1, 1});
    CHECK(max_diff(blk(x), ref) < 1e-6);
  }

  TEST_CASE("shifted mask blocks pixels that were not adjacent") {
    const auto mask = shifted_window_mask<float>(4, 4, WindowShape{2, 2}, WindowShape{1, 1});
    REQUIRE(mask.shape() == Shape{4, 4, 4});
    // The first window holds only unwrapped pixels; the last mixes all four bands.
    for (int64_t i = 0; i < 16; ++i) CHECK(mask.ptr()[i] == 0.0f);
    int blocked = 0;
    for (int64_t i = 48; i < 64; ++i) blocked += mask.ptr()[i] < -1.0f;
    CHECK(blocked == 12);
  }

  TEST_CASE("rectangular window fitting") {
    CHECK(fit_window(4, 16, 4).h == 4);
    CHECK(fit_window(6, 6, 4).h == 3);
    CHECK(fit_window(2, 2, 4).w == 2);
    CHECK(fit_window(5, 8, 4).h == 1);
  }
}

TEST_SUITE("resnet and merging") {
  TEST_CASE("zero residual weights give identity") {
    ParamStore<float> s;
    ResNetBlock<float> blk(ParamBuilder<float>::create(s, 9), 8);
    zero(blk.conv2.weight);
    zero(blk.conv2.bias);
    std::mt19937_64 rng(6);
    for (auto hw : {std::pair<int64_t, int64_t>{5, 7}, {8, 8}, {3, 2}}) {
      const auto x = Tensor<float>::randn({2, 8, hw.first, hw.second}, rng);
      const auto y = blk(x);
      CHECK(y.shape() == x.shape());
      CHECK(max_diff(y, x) == 0.0);
    }
  }

  TEST_CASE("resnet gradcheck at C=4, 6x6") {
    ParamStore<double> s;
    ResNetBlock<double> blk(ParamBuilder<double>::create(s, 10), 4);
    jitter(s, 11, 0.1);
    std::mt19937_64 rng(7);
    s.add("x", Tensor<double>::randn({1, 4, 6, 6}, rng));
    const auto r = gradcheck(s, [](const ParamStore<double>& p) {
      ResNetBlock<double> b(ParamBuilder<double>::bind(const_cast<ParamStore<double>&>(p)), 4);
      return random_projection(b(p.at("x")), 3);
    });
    CHECK(r.max_error() < 1e-4);
    CHECK(r.kinks() * 10 <= r.checked());
  }

  TEST_CASE("patch merging halves resolution and doubles channels") {
    ParamStore<float> s;
    PatchMerging<float> pm(ParamBuilder<float>::create(s, 12), 6);
    std::mt19937_64 rng(8);
    CHECK(pm(Tensor<float>::randn({2, 6, 8, 4}, rng)).shape() == Shape{2, 12, 4, 2});
    CHECK_THROWS_AS(pm(Tensor<float>({1, 6, 3, 4})), ShapeError);
  }
}

TEST_SUITE("dual encoder") {
  TEST_CASE("stage shapes") {
    EncoderConfig cfg;
    cfg.base_channels = 24;
    ParamStore<float> s;
    DualEncoder<float> enc(cfg, ParamBuilder<float>::create(s, 13));
    std::mt19937_64 rng(9);
    const auto pyr = enc.encode(Tensor<float>::uniform({1, 3, 64, 64}, rng, 0, 1),
                                Tensor<float>::uniform({1, 1, 64, 64}, rng, 0.5, 1.5));
    const std::vector<Shape> expected{{1, 24, 16, 16}, {1, 48, 8, 8}, {1, 96, 4, 4}, {1, 192, 2, 2}};
    REQUIRE(pyr.rgb.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
      CHECK(pyr.rgb[i].shape() == expected[i]);
      CHECK(pyr.depth[i].shape() == expected[i]);
    }
  }

  TEST_CASE("doubling the height doubles every stage height") {
    EncoderConfig cfg;
    cfg.base_channels = 4;
    ParamStore<float> s;
    DualEncoder<float> enc(cfg, ParamBuilder<float>::create(s, 14));
    const auto a = enc.encode(Tensor<float>({1, 3, 32, 32}, 0.5f), Tensor<float>({1, 1, 32, 32}, 1.0f));
    const auto b = enc.encode(Tensor<float>({1, 3, 64, 32}, 0.5f), Tensor<float>({1, 1, 64, 32}, 1.0f));
    for (size_t i = 0; i < a.rgb.size(); ++i) {
      CHECK(b.rgb[i].dim(2) == 2 * a.rgb[i].dim(2));
      CHECK(b.depth[i].dim(2) == 2 * a.depth[i].dim(2));
    }
  }

  TEST_CASE("input not divisible by the stride product is rejected") {
    EncoderConfig cfg;
    cfg.base_channels = 4;
    ParamStore<float> s;
    DualEncoder<float> enc(cfg, ParamBuilder<float>::create(s, 15));
    CHECK_THROWS_AS(enc.encode(Tensor<float>({1, 3, 48, 32}), Tensor<float>({1, 1, 48, 32})), ShapeError);
  }
}
