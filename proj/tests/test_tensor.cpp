#include <doctest.h>

#include <cmath>
#include <random>

#include "hdc/gradcheck.hpp"
#include "hdc/kernels.hpp"
#include "hdc/ops.hpp"
#include "hdc/tape.hpp"

using namespace hdc;

namespace {

std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                               int64_t stride, int64_t pad, int64_t groups, Shape* out_shape) {
  const int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), K = w.dim(2), cig = Ci / groups, cog = Co / groups;
  const int64_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  *out_shape = {N, Co, Ho, Wo};
  std::vector<double> y(static_cast<size_t>(N * Co * Ho * Wo));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = b.defined() ? b.ptr()[co] : 0.0;
          const int64_t g = co / cog;
          for (int64_t ci = 0; ci < cig; ++ci)
            for (int64_t ky = 0; ky < K; ++ky)
              for (int64_t kx = 0; kx < K; ++kx) {
                const int64_t iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.ptr()[((n * Ci + g * cig + ci) * H + iy) * W + ix] * w.ptr()[((co * cig + ci) * K + ky) * K + kx];
              }
          y[static_cast<size_t>(((n * Co + co) * Ho + oy) * Wo + ox)] = acc;
        }
  return y;
}

template <typename T>
std::vector<T> random_vec(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<T> v(n);
  for (T& x : v) x = static_cast<T>(d(rng));
  return v;
}

struct ThreadCap {
  explicit ThreadCap(int n) : saved(kernels::max_threads()) { kernels::set_max_threads(n); }
  ~ThreadCap() { kernels::set_max_threads(saved); }
  int saved;
};

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction and shape errors") {
    Tensor<float> t({2, 3}, 1.5f);
    CHECK(t.numel() == 6);
    CHECK(t.dim(-1) == 3);
    CHECK(t.ptr()[5] == 1.5f);
    CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
    CHECK_THROWS_AS(add(Tensor<float>({2, 3}), Tensor<float>({3, 2})), ShapeError);
    CHECK_THROWS_AS(reshape(t, {4, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>({1, 2}).item(), std::exception);
  }

  TEST_CASE("broadcasting add") {
    Tensor<double> a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Tensor<double> b({1, 3}, std::vector<double>{10, 20, 30});
    const auto c = add(a, b);
    CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{11, 22, 33, 14, 25, 36});
  }
}

TEST_SUITE("conv2d") {
  TEST_CASE("all ones 3x3 gives nine") {
    const Tensor<float> x({1, 1, 3, 3}, 1.0f), w({1, 1, 3, 3}, 1.0f);
    const auto y = conv2d(x, w, Tensor<float>());
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 9.0f);
  }

  TEST_CASE("zero kernel annihilates") {
    std::mt19937_64 rng(1);
    const auto y = conv2d(Tensor<float>::randn({2, 3, 6, 6}, rng), Tensor<float>({4, 3, 3, 3}), Tensor<float>(),
                          Conv2dOptions{1, 1, 1});
    for (float v : y.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("matches direct loop") {
    std::mt19937_64 rng(2);
    struct Case {
      Shape x, w;
      int64_t stride, pad, groups;
    };
    for (const Case& c : {Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 0, 1}, Case{{2, 4, 8, 6}, {6, 2, 3, 3}, 1, 1, 2},
                          Case{{1, 3, 8, 8}, {5, 3, 4, 4}, 4, 0, 1}, Case{{1, 4, 7, 7}, {4, 1, 3, 3}, 2, 1, 4}}) {
      const auto x = Tensor<double>::randn(c.x, rng), w = Tensor<double>::randn(c.w, rng);
      const auto b = Tensor<double>::randn({c.w[0]}, rng);
      const auto y = conv2d(x, w, b, Conv2dOptions{c.stride, c.pad, c.groups});
      Shape ref_shape;
      const auto ref = naive_conv(x, w, b, c.stride, c.pad, c.groups, &ref_shape);
      REQUIRE(y.shape() == ref_shape);
      for (size_t i = 0; i < ref.size(); ++i) CHECK(y.ptr()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("non-integral output size is rejected") {
    CHECK_THROWS_AS(conv2d(Tensor<float>({1, 1, 16, 16}), Tensor<float>({1, 1, 3, 3}), Tensor<float>(),
                           Conv2dOptions{2, 1, 1}),
                    ShapeError);
  }
}

TEST_SUITE("pooling and activations") {
  TEST_CASE("global pools") {
    const Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 3, 5, 7});
    CHECK(global_avg_pool(x).item() == 4.0f);
    CHECK(global_max_pool(Tensor<float>({1, 1, 3, 3}, 2.5f)).item() == 2.5f);
  }

  TEST_CASE("adaptive average pool of a ramp") {
    std::vector<float> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[static_cast<size_t>(i)] = static_cast<float>(i);
    const auto y = adaptive_avg_pool(Tensor<float>({1, 1, 4, 4}, ramp), 2, 2);
    CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{2.5f, 4.5f, 10.5f, 12.5f});
  }

  TEST_CASE("pointwise identities") {
    const Tensor<double> z({1}, 0.0);
    CHECK(sigmoid(z).item() == 0.5);
    CHECK(silu(z).item() == 0.0);
    CHECK(softplus(z).item() == doctest::Approx(std::log(2.0)));
  }

  TEST_CASE("layer norm statistics") {
    const auto y = layer_norm(Tensor<double>({1, 3}, std::vector<double>{2, 4, 6}), Tensor<double>(), Tensor<double>());
    const double m = (y.ptr()[0] + y.ptr()[1] + y.ptr()[2]) / 3;
    double var = 0;
    for (int i = 0; i < 3; ++i) var += (y.ptr()[i] - m) * (y.ptr()[i] - m) / 3;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(var - 1) < 1e-5);
  }

  TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(3);
    const auto p = softmax(Tensor<double>::randn({4, 7}, rng, 3.0), -1);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) s += p.ptr()[r * 7 + c];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("gradient of sum of squares") {
    Tensor<double> x({2}, std::vector<double>{1, -2});
    x.set_requires_grad();
    GradTape<double> tape;
    Tensor<double> loss = sum(square(x));
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == -4.0);
  }

  TEST_CASE("unused parameter gets zero gradient") {
    Tensor<double> x({3}, 1.0), p({2}, 5.0);
    x.set_requires_grad();
    p.set_requires_grad();
    GradTape<double> tape;
    Tensor<double> loss = sum(mul(x, x));
    tape.backward(loss);
    if (p.has_grad())
      for (double g : p.grad()) CHECK(g == 0.0);
  }

  TEST_CASE("tape is consumed once") {
    Tensor<double> x({1}, 3.0);
    x.set_requires_grad();
    GradTape<double> tape;
    Tensor<double> loss = sum(x);
    tape.backward(loss);
    CHECK_THROWS(tape.backward(loss));
  }

  TEST_CASE("no-grad guard suspends recording") {
    Tensor<double> x({4}, 1.0);
    x.set_requires_grad();
    GradTape<double> tape;
    {
      NoGradGuard<double> guard;
      (void)sum(exp(x));
    }
    CHECK(tape.size() == 0);
    (void)sum(exp(x));
    CHECK(tape.size() > 0);
  }

  TEST_CASE("gradients accumulate across uses") {
    Tensor<double> x({1}, 2.0);
    x.set_requires_grad();
    GradTape<double> tape;
    Tensor<double> loss = sum(add(mul(x, x), mul_scalar(x, 3.0)));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(7.0));
  }

  TEST_CASE("finite differences on a composite") {
    ParamStore<double> in;
    std::mt19937_64 rng(4);
    in.add("x", Tensor<double>::randn({2, 3, 6, 6}, rng));
    in.add("w", Tensor<double>::randn({4, 3, 3, 3}, rng, 0.3));
    in.add("g", Tensor<double>::uniform({4}, rng, 0.5, 1.5));
    const auto r = gradcheck(in, [](const ParamStore<double>& p) {
      const auto y = conv2d(p.at("x"), p.at("w"), Tensor<double>(), Conv2dOptions{1, 1, 1});
      const auto n = group_norm(y, 2, p.at("g"), Tensor<double>());
      return random_projection(softplus(upsample_bilinear2x(n)), 9);
    });
    CHECK(r.max_error() < 1e-4);
    CHECK(r.kinks() == 0);
  }

  TEST_CASE("gradcheck catches a wrong gradient") {
    ParamStore<double> in;
    in.add("x", Tensor<double>({3}, std::vector<double>{0.3, -0.7, 1.1}));
    // detach() cuts the graph, so the analytic gradient of the second term is missing.
    const auto r = gradcheck(in, [](const ParamStore<double>& p) {
      return add(sum(square(p.at("x"))), sum(square(p.at("x").detach())));
    });
    CHECK(r.max_error() > 0.1);
  }
}

TEST_SUITE("kernels") {
  TEST_CASE("gemm matches a naive triple loop in every layout") {
    std::mt19937_64 rng(5);
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        const int64_t m = 7, n = 5, k = 9;
        const auto a = random_vec<double>(m * k, rng), b = random_vec<double>(k * n, rng);
        std::vector<double> c(m * n, 1.0), ref(m * n, 1.0);
        kernels::parallel::gemm<double>({m, n, k, ta, tb}, a.data(), b.data(), c.data(), true);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j)
            for (int64_t p = 0; p < k; ++p)
              ref[i * n + j] += (ta ? a[p * m + i] : a[i * k + p]) * (tb ? b[j * k + p] : b[p * n + j]);
        for (size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
      }
  }

  // Runs every parallel kernel once at the given thread count on fixed random data.
  struct KernelRun {
    std::vector<float> gemm, conv_y, conv_dx, conv_dw, conv_db, scan_y, scan_h, scan_g[5];
    std::vector<float> ref_conv_dx, ref_conv_dw, ref_conv_db, ref_scan_g[5];
    bool forward_equal = true;
  };

  KernelRun run_kernels(int threads, int trial) {
    ThreadCap cap(threads);
    std::mt19937_64 rng(600 + static_cast<uint64_t>(trial));
    KernelRun r;
    std::uniform_int_distribution<int64_t> small(1, 9);
    const int64_t m = small(rng) * 3, n = small(rng) * 2, k = small(rng) * 5;
    const auto a = random_vec<float>(static_cast<size_t>(m * k), rng);
    const auto b = random_vec<float>(static_cast<size_t>(k * n), rng);
    std::vector<float> cs(static_cast<size_t>(m * n));
    r.gemm.resize(cs.size());
    kernels::serial::gemm<float>({m, n, k, false, trial % 2 == 1}, a.data(), b.data(), cs.data(), false);
    kernels::parallel::gemm<float>({m, n, k, false, trial % 2 == 1}, a.data(), b.data(), r.gemm.data(), false);
    r.forward_equal = r.forward_equal && cs == r.gemm;

    kernels::ConvGeometry g{2, 4, 9, 7, 6, 3, 3, 1 + trial % 2, 1, trial % 2 == 0 ? 2 : 1};
    const auto x = random_vec<float>(static_cast<size_t>(g.batch * g.in_channels * g.in_h * g.in_w), rng);
    const auto w = random_vec<float>(static_cast<size_t>(g.out_channels * g.in_per_group() * 9), rng);
    const auto bias = random_vec<float>(static_cast<size_t>(g.out_channels), rng);
    const size_t ny = static_cast<size_t>(g.batch * g.out_channels * g.out_h() * g.out_w());
    std::vector<float> ys(ny);
    r.conv_y.resize(ny);
    kernels::serial::conv2d_forward(g, x.data(), w.data(), bias.data(), ys.data());
    kernels::parallel::conv2d_forward(g, x.data(), w.data(), bias.data(), r.conv_y.data());
    r.forward_equal = r.forward_equal && ys == r.conv_y;
    const auto dy = random_vec<float>(ny, rng);
    r.conv_dx.assign(x.size(), 0.0f);
    r.conv_dw.assign(w.size(), 0.0f);
    r.conv_db.assign(bias.size(), 0.0f);
    r.ref_conv_dx = r.conv_dx;
    r.ref_conv_dw = r.conv_dw;
    r.ref_conv_db = r.conv_db;
    kernels::serial::conv2d_backward(g, x.data(), w.data(), dy.data(), r.ref_conv_dx.data(), r.ref_conv_dw.data(),
                                     r.ref_conv_db.data());
    kernels::parallel::conv2d_backward(g, x.data(), w.data(), dy.data(), r.conv_dx.data(), r.conv_dw.data(),
                                       r.conv_db.data());

    const kernels::ScanDims d{2, 6 + trial, 5, 3};
    const size_t nx = static_cast<size_t>(d.batch * d.length * d.channels);
    const size_t nb = static_cast<size_t>(d.batch * d.length * d.state);
    auto sx = random_vec<float>(nx, rng), sdelta = random_vec<float>(nx, rng), sa = random_vec<float>(15, rng);
    for (float& v : sdelta) v = std::abs(v) * 0.5f;
    for (float& v : sa) v = -std::abs(v);
    const auto sb = random_vec<float>(nb, rng), sc = random_vec<float>(nb, rng);
    const kernels::ScanInputs<float> in{sx, sdelta, sa, sb, sc};
    std::vector<float> ss(nx), hs(nx * 3);
    r.scan_y.resize(nx);
    r.scan_h.resize(nx * 3);
    kernels::serial::selective_scan_forward(d, in, ss.data(), hs.data());
    kernels::parallel::selective_scan_forward(d, in, r.scan_y.data(), r.scan_h.data());
    r.forward_equal = r.forward_equal && ss == r.scan_y && hs == r.scan_h;
    const auto sdy = random_vec<float>(nx, rng);
    for (int i = 0; i < 5; ++i) {
      const size_t len = i == 2 ? sa.size() : (i < 2 ? nx : nb);
      r.scan_g[i].assign(len, 0.0f);
      r.ref_scan_g[i].assign(len, 0.0f);
    }
    auto& gs = r.ref_scan_g;
    auto& gp = r.scan_g;
    kernels::serial::selective_scan_backward(d, in, hs.data(), sdy.data(),
                                             kernels::ScanGrads<float>{gs[0], gs[1], gs[2], gs[3], gs[4]});
    kernels::parallel::selective_scan_backward(d, in, r.scan_h.data(), sdy.data(),
                                               kernels::ScanGrads<float>{gp[0], gp[1], gp[2], gp[3], gp[4]});
    return r;
  }

  void check_close(const std::vector<float>& a, const std::vector<float>& b) {
    REQUIRE(a.size() == b.size());
    float scale = 1.0f;
    for (float v : b) scale = std::max(scale, std::abs(v));
    for (size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-5f * scale);
  }

  TEST_CASE("parallel forward kernels are bit-identical to serial") {
    for (int trial = 0; trial < 5; ++trial) CHECK(run_kernels(4, trial).forward_equal);
  }

  TEST_CASE("parallel backward kernels agree with serial to rounding") {
    for (int trial = 0; trial < 5; ++trial) {
      const KernelRun r = run_kernels(4, trial);
      check_close(r.conv_dx, r.ref_conv_dx);
      check_close(r.conv_dw, r.ref_conv_dw);
      check_close(r.conv_db, r.ref_conv_db);
      for (int i = 0; i < 5; ++i) check_close(r.scan_g[i], r.ref_scan_g[i]);
    }
  }

  TEST_CASE("parallel results do not depend on thread count") {
    for (int trial = 0; trial < 5; ++trial) {
      const KernelRun one = run_kernels(1, trial), four = run_kernels(4, trial);
      CHECK(one.gemm == four.gemm);
      CHECK(one.conv_y == four.conv_y);
      CHECK(one.conv_dx == four.conv_dx);
      CHECK(one.conv_dw == four.conv_dw);
      CHECK(one.conv_db == four.conv_db);
      CHECK(one.scan_y == four.scan_y);
      for (int i = 0; i < 5; ++i) CHECK(one.scan_g[i] == four.scan_g[i]);
    }
  }

  TEST_CASE("thread cap round-trips") {
    ThreadCap cap(3);
    CHECK(kernels::max_threads() == 3);
  }
}
