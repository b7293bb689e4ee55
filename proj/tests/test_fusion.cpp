#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "hdc/fusion.hpp"
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

std::vector<double> matvec(const Linear<float>& l, const std::vector<double>& x) {
  const int64_t out = l.weight.dim(0), in = l.weight.dim(1);
  std::vector<double> y(static_cast<size_t>(out));
  for (int64_t o = 0; o < out; ++o) {
    double s = l.bias.defined() ? l.bias.ptr()[o] : 0.0;
    for (int64_t i = 0; i < in; ++i) s += l.weight.ptr()[o * in + i] * x[static_cast<size_t>(i)];
    y[static_cast<size_t>(o)] = s;
  }
  return y;
}

/// Gate for sample n from pooled means through the four branches and W5.
std::vector<double> reference_excitation(const ChannelExcitation<float>& ex, const Tensor<float>& f, int64_t n) {
  const int64_t C = f.dim(1), HW = f.dim(2) * f.dim(3);
  std::vector<double> z(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    double s = 0;
    for (int64_t i = 0; i < HW; ++i) s += f.ptr()[(n * C + c) * HW + i];
    z[static_cast<size_t>(c)] = s / static_cast<double>(HW);
  }
  std::vector<double> cat;
  for (const auto& b : ex.branches)
    for (double v : matvec(b, z)) cat.push_back(std::max(v, 0.0));
  std::vector<double> s = matvec(ex.expand, cat);
  for (double& v : s) v = 1 / (1 + std::exp(-v));
  return s;
}

}  // namespace

TEST_SUITE("channel excitation") {
  TEST_CASE("zero input and zero biases give one half") {
    ParamStore<float> s;
    ChannelExcitation<float> ex(ParamBuilder<float>::create(s, 1), 8);
    const auto g = ex(Tensor<float>({2, 8, 3, 3}));
    REQUIRE(g.shape() == Shape{2, 8, 1, 1});
    for (float v : g.data()) CHECK(v == 0.5f);
  }

  TEST_CASE("gates lie strictly inside (0,1)") {
    ParamStore<float> s;
    ChannelExcitation<float> ex(ParamBuilder<float>::create(s, 2), 8);
    jitter(s, 3, 0.5);
    std::mt19937_64 rng(1);
    const auto g = ex(Tensor<float>::randn({4, 8, 5, 5}, rng, 3.0));
    for (float v : g.data()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }

  TEST_CASE("matches a scalar reference") {
    ParamStore<float> s;
    ChannelExcitation<float> ex(ParamBuilder<float>::create(s, 4), 8);
    jitter(s, 5, 0.3);
    std::mt19937_64 rng(2);
    const auto f = Tensor<float>::randn({2, 8, 4, 3}, rng);
    const auto g = ex(f);
    for (int64_t n = 0; n < 2; ++n) {
      const auto ref = reference_excitation(ex, f, n);
      for (int64_t c = 0; c < 8; ++c) CHECK(std::abs(g.ptr()[n * 8 + c] - ref[static_cast<size_t>(c)]) < 1e-6);
    }
  }

  TEST_CASE("channel count must split into four") {
    ParamStore<float> s;
    CHECK_THROWS_AS(ChannelExcitation<float>(ParamBuilder<float>::create(s, 1), 6), ShapeError);
  }
}

TEST_SUITE("smfm") {
  TEST_CASE("zero inputs give zero") {
    ParamStore<float> s;
    Smfm<float> m(ParamBuilder<float>::create(s, 6), 4);
    jitter(s, 7, 0.3);
    const auto y = m(Tensor<float>({1, 4, 5, 5}), Tensor<float>({1, 4, 5, 5}));
    for (float v : y.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("gradcheck at N=1, C=4, 5x5") {
    ParamStore<double> s;
    Smfm<double>(ParamBuilder<double>::create(s, 8), 4);
    jitter(s, 9, 0.2);
    std::mt19937_64 rng(3);
    s.add("fr", Tensor<double>::randn({1, 4, 5, 5}, rng));
    s.add("fd", Tensor<double>::randn({1, 4, 5, 5}, rng));
    const auto r = gradcheck(s, [](const ParamStore<double>& p) {
      Smfm<double> m(ParamBuilder<double>::bind(const_cast<ParamStore<double>&>(p)), 4);
      return random_projection(m(p.at("fr"), p.at("fd")), 4);
    });
    CHECK(r.max_error() < 1e-4);
    CHECK(r.kinks() * 10 <= r.checked());
  }

  TEST_CASE("mismatched modalities are rejected") {
    ParamStore<float> s;
    Smfm<float> m(ParamBuilder<float>::create(s, 6), 4);
    CHECK_THROWS_AS(m(Tensor<float>({1, 4, 5, 5}), Tensor<float>({1, 4, 4, 5})), ShapeError);
  }
}

TEST_SUITE("bottleneck blocks") {
  TEST_CASE("zero output projection reduces MHA residual to layer norm") {
    ParamStore<float> s;
    Btmfm<float> b(ParamBuilder<float>::create(s, 10), 8, 2, SsmConfig{});
    jitter(s, 11, 0.2);
    zero(b.mha.out.weight);
    zero(b.mha.out.bias);
    std::mt19937_64 rng(4);
    const auto t = Tensor<float>::randn({2, 6, 8}, rng);
    CHECK(max_diff(b.mha_residual(t), b.attn_norm(t)) == 0.0);
  }

  TEST_CASE("zero second MLP layer reduces FFN residual to layer norm") {
    ParamStore<float> s;
    Btmfm<float> b(ParamBuilder<float>::create(s, 12), 8, 2, SsmConfig{});
    jitter(s, 13, 0.2);
    zero(b.mlp.fc2.weight);
    zero(b.mlp.fc2.bias);
    std::mt19937_64 rng(5);
    const auto t = Tensor<float>::randn({2, 6, 8}, rng);
    const auto y = b.ffn_residual(t);
    CHECK(y.shape() == t.shape());
    CHECK(max_diff(y, b.ffn_norm(t)) == 0.0);
  }

  TEST_CASE("attention is permutation equivariant") {
    ParamStore<float> s;
    MultiHeadAttention<float> mha(ParamBuilder<float>::create(s, 14), 8, 2);
    jitter(s, 15, 0.3);
    std::mt19937_64 rng(6);
    const auto t = Tensor<float>::randn({1, 7, 8}, rng);
    std::vector<int64_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permuted = [&](const Tensor<float>& x) {
      Tensor<float> p(x.shape());
      for (int64_t i = 0; i < 7; ++i)
        for (int64_t c = 0; c < 8; ++c) p.ptr()[i * 8 + c] = x.ptr()[perm[static_cast<size_t>(i)] * 8 + c];
      return p;
    };
    CHECK(max_diff(mha(permuted(t)), permuted(mha(t))) < 1e-6);
  }

  TEST_CASE("single token attention is the value-output projection") {
    ParamStore<float> s;
    MultiHeadAttention<float> mha(ParamBuilder<float>::create(s, 16), 8, 2);
    jitter(s, 17, 0.3);
    std::mt19937_64 rng(7);
    const auto t = Tensor<float>::randn({3, 1, 8}, rng);
    CHECK(max_diff(mha(t), mha.out(mha.v(t))) < 1e-6);
  }

  TEST_CASE("zero up projection silences the SSM block") {
    ParamStore<float> s;
    SsmGatedBlock<float> blk(ParamBuilder<float>::create(s, 18), 4, SsmConfig{});
    jitter(s, 19, 0.2);
    zero(blk.up.weight);
    std::mt19937_64 rng(8);
    const auto t = Tensor<float>::randn({2, 6, 4}, rng);
    const auto y = blk(t);
    CHECK(y.shape() == t.shape());
    for (float v : y.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("state matrix is strictly negative") {
    ParamStore<float> s;
    SsmGatedBlock<float> blk(ParamBuilder<float>::create(s, 20), 4, SsmConfig{});
    const auto a = blk.state_matrix();
    for (float v : a.data()) CHECK(v < 0.0f);
    CHECK(a.ptr()[0] == doctest::Approx(-1.0f));
    CHECK(a.ptr()[3] == doctest::Approx(-4.0f));
  }

  TEST_CASE("btmfm keeps the shape and stays finite on zero input") {
    ParamStore<float> s;
    Btmfm<float> b(ParamBuilder<float>::create(s, 21), 16, 4, SsmConfig{});
    const auto y1 = b(Tensor<float>({1, 16, 2, 2}), Tensor<float>({1, 16, 2, 2}));
    const auto y2 = b(Tensor<float>({1, 16, 2, 2}), Tensor<float>({1, 16, 2, 2}));
    CHECK(y1.shape() == Shape{1, 16, 2, 2});
    for (int64_t i = 0; i < y1.numel(); ++i) {
      CHECK(std::isfinite(y1.ptr()[i]));
      CHECK(y1.ptr()[i] == y2.ptr()[i]);
    }
  }

  TEST_CASE("token round trip") {
    std::mt19937_64 rng(9);
    const auto x = Tensor<float>::randn({2, 3, 4, 5}, rng);
    const auto t = to_tokens(x);
    CHECK(t.shape() == Shape{2, 20, 3});
    CHECK(t.ptr()[(0 * 20 + 7) * 3 + 2] == x.ptr()[((0 * 3 + 2) * 4 + 1) * 5 + 2]);
    CHECK(max_diff(from_tokens(t, 4, 5), x) == 0.0);
  }
}

TEST_SUITE("selective scan") {
  namespace {
  std::vector<double> recurrence(const Tensor<float>& x, const Tensor<float>& dl, const Tensor<float>& a,
                                 const Tensor<float>& b, const Tensor<float>& c) {
    const int64_t N = x.dim(0), L = x.dim(1), E = x.dim(2), S = a.dim(1);
    std::vector<double> y(static_cast<size_t>(x.numel()));
    for (int64_t n = 0; n < N; ++n)
      for (int64_t e = 0; e < E; ++e) {
        std::vector<double> h(static_cast<size_t>(S));
        for (int64_t t = 0; t < L; ++t) {
          const int64_t i = (n * L + t) * E + e, j = (n * L + t) * S;
          double acc = 0;
          for (int64_t k = 0; k < S; ++k) {
            auto& hk = h[static_cast<size_t>(k)];
            hk = std::exp(double(dl.ptr()[i]) * a.ptr()[e * S + k]) * hk + double(dl.ptr()[i]) * b.ptr()[j + k] * x.ptr()[i];
            acc += c.ptr()[j + k] * hk;
          }
          y[static_cast<size_t>(i)] = acc;
        }
      }
    return y;
  }
  }  // namespace

  TEST_CASE("matches the loop recurrence at N=1, L=7, E=4, S=3") {
    std::mt19937_64 rng(10);
    const auto x = Tensor<float>::randn({1, 7, 4}, rng), b = Tensor<float>::randn({1, 7, 3}, rng);
    const auto c = Tensor<float>::randn({1, 7, 3}, rng);
    const auto dl = Tensor<float>::uniform({1, 7, 4}, rng, 0.05, 1.0);
    const auto a = Tensor<float>::uniform({4, 3}, rng, -2.0, -0.1);
    const auto y = selective_scan(x, dl, a, b, c);
    const auto ref = recurrence(x, dl, a, b, c);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.ptr()[i] - ref[i]) < 1e-5);
  }

  TEST_CASE("memoryless decay is tokenwise") {
    std::mt19937_64 rng(11);
    const auto x = Tensor<float>::randn({2, 5, 3}, rng), b = Tensor<float>::randn({2, 5, 2}, rng);
    const auto c = Tensor<float>::randn({2, 5, 2}, rng);
    const Tensor<float> dl({2, 5, 3}, 1.0f), a({3, 2}, -1e4f);
    const auto y = selective_scan(x, dl, a, b, c);
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t t = 0; t < 5; ++t)
        for (int64_t e = 0; e < 3; ++e) {
          double ref = 0;
          for (int64_t k = 0; k < 2; ++k)
            ref += double(c.ptr()[(n * 5 + t) * 2 + k]) * b.ptr()[(n * 5 + t) * 2 + k] * x.ptr()[(n * 5 + t) * 3 + e];
          CHECK(std::abs(y.ptr()[(n * 5 + t) * 3 + e] - ref) < 1e-5);
        }
  }

  TEST_CASE("single token equals the memoryless case") {
    std::mt19937_64 rng(12);
    const auto x = Tensor<float>::randn({1, 1, 4}, rng), b = Tensor<float>::randn({1, 1, 3}, rng);
    const auto c = Tensor<float>::randn({1, 1, 3}, rng);
    const auto dl = Tensor<float>::uniform({1, 1, 4}, rng, 0.1, 1.0);
    const auto a = Tensor<float>::uniform({4, 3}, rng, -2.0, -0.1);
    const auto y = selective_scan(x, dl, a, b, c);
    const auto y0 = selective_scan(x, dl, Tensor<float>({4, 3}, -1e4f), b, c);
    CHECK(max_diff(y, y0) == 0.0);
  }

  TEST_CASE("non-finite step size is rejected") {
    Tensor<float> dl({1, 2, 1}, 1.0f);
    dl.ptr()[1] = NAN;
    CHECK_THROWS(selective_scan(Tensor<float>({1, 2, 1}), dl, Tensor<float>({1, 1}, -1.0f), Tensor<float>({1, 2, 1}),
                                Tensor<float>({1, 2, 1})));
  }

  TEST_CASE("injected fault is caught by the oracle") {
    std::mt19937_64 rng(13);
    const auto x = Tensor<float>::randn({1, 6, 2}, rng), b = Tensor<float>::randn({1, 6, 2}, rng);
    const auto c = Tensor<float>::randn({1, 6, 2}, rng);
    const Tensor<float> dl({1, 6, 2}, 0.5f), a({2, 2}, -0.2f);
    testing::set_scan_fault(true);
    const auto y = selective_scan(x, dl, a, b, c);
    testing::set_scan_fault(false);
    const auto ref = recurrence(x, dl, a, b, c);
    double worst = 0;
    for (size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y.ptr()[i] - ref[i]));
    CHECK(worst > 1e-3);
  }
}
