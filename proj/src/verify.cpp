#include "hdc/verify.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "hdc/decoder.hpp"
#include "hdc/encoder.hpp"
#include "hdc/fusion.hpp"
#include "hdc/gradcheck.hpp"
#include "hdc/loss.hpp"
#include "hdc/model.hpp"

namespace hdc {
namespace {

constexpr double kGradTol = 1e-4;

enum class Fill { Normal, Positive, AwayFromZero, Distinct, Negative };

Tensor<double> make_input(const Shape& shape, Fill fill, std::mt19937_64& rng) {
  Tensor<double> t(shape);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (fill) {
    case Fill::Normal:
      for (double& v : t.data()) v = n(rng);
      break;
    case Fill::Positive:
      for (double& v : t.data()) v = 0.5 + u(rng);
      break;
    case Fill::Negative:
      for (double& v : t.data()) v = -(0.5 + u(rng));
      break;
    case Fill::AwayFromZero:
      for (double& v : t.data()) v = (u(rng) < 0.5 ? -1 : 1) * (0.1 + u(rng));
      break;
    case Fill::Distinct: {
      // A shuffled ramp with spacing well above the finite-difference step.
      std::vector<double> vals(static_cast<size_t>(t.numel()));
      for (size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05 * static_cast<double>(i);
      std::shuffle(vals.begin(), vals.end(), rng);
      std::copy(vals.begin(), vals.end(), t.data().begin());
      break;
    }
  }
  return t;
}

struct InputSpec {
  std::string name;
  Shape shape;
  Fill fill = Fill::Normal;
};

ParamStore<double> inputs_of(const std::vector<InputSpec>& specs, uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<double> s;
  for (const auto& sp : specs) s.add(sp.name, make_input(sp.shape, sp.fill, rng));
  return s;
}

template <typename T>
Tensor<T> constant_tensor(const Shape& shape, uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

class Runner {
 public:
  explicit Runner(const CheckSink& sink) : sink_(sink), t0_(std::chrono::steady_clock::now()) {}

  void add(CheckResult r) {
    if (sink_) sink_(r);
    report_.checks.push_back(std::move(r));
  }

  void check(const std::string& module, const std::string& op, bool pass, double value, double tol,
             const std::string& detail = {}) {
    add({module, op, pass, value, tol, detail});
  }

  template <typename F>
  void guarded(const std::string& module, const std::string& op, F&& f) {
    try {
      f();
    } catch (const std::exception& e) {
      add({module, op, false, 0, 0, std::string("threw: ") + e.what()});
    }
  }

  template <typename F>
  void grad(const std::string& module, const std::string& op, const ParamStore<double>& in, F&& f,
            int64_t max_coords = 12) {
    guarded(module, op, [&] {
      GradcheckOptions opt;
      opt.max_coords = max_coords;
      const GradcheckResult r = gradcheck(in, f, opt);
      const auto* w = r.worst();
      const double err = r.max_error();
      const int64_t kinks = r.kinks(), total = r.checked();
      const bool covered = kinks * 10 <= total;
      char buf[200];
      std::snprintf(buf, sizeof buf, "%zu tensors, %lld coords, %lld at kinks%s, worst %s", r.tensors.size(),
                    static_cast<long long>(total), static_cast<long long>(kinks), covered ? "" : " (too many)",
                    w ? w->name.c_str() : "-");
      check(module, op, err < kGradTol && covered, err, kGradTol, buf);
    });
  }

  VerifyReport finish() {
    report_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    return std::move(report_);
  }

 private:
  const CheckSink& sink_;
  std::chrono::steady_clock::time_point t0_;
  VerifyReport report_;
};

/// Parameters of `declare`'s module plus inputs, all jittered.
template <typename Declare>
ParamStore<double> module_store(Declare&& declare, const std::vector<InputSpec>& inputs, uint64_t seed) {
  ParamStore<double> s;
  declare(ParamBuilder<double>::create(s, seed));
  jitter(s, seed + 1, 0.1);
  std::mt19937_64 rng(seed + 2);
  for (const auto& sp : inputs) s.add(sp.name, make_input(sp.shape, sp.fill, rng));
  return s;
}

const char* kAutodiff = "tensor-autodiff";
const char* kEncoder = "encoder-backbones";
const char* kFusion = "fusion-modules";
const char* kDecoder = "decoder-multiscale";
const char* kLoss = "loss-metrics";

void primitive_gradients(Runner& run) {
  auto P = [](const auto& y, uint64_t seed = 17) { return random_projection(y, seed); };
  auto prim = [&](const std::string& op, const std::vector<InputSpec>& in, auto f) {
    run.grad(kAutodiff, op, inputs_of(in, std::hash<std::string>{}(op)), f);
  };
  prim("add", {{"a", {2, 3, 4}}, {"b", {3, 1}}}, [&](auto& s) { return P(add(s.at("a"), s.at("b"))); });
  prim("sub", {{"a", {2, 3, 4}}, {"b", {4}}}, [&](auto& s) { return P(sub(s.at("a"), s.at("b"))); });
  prim("mul", {{"a", {2, 3, 4}}, {"b", {2, 1, 4}}}, [&](auto& s) { return P(mul(s.at("a"), s.at("b"))); });
  prim("div", {{"a", {2, 3}}, {"b", {2, 3}, Fill::Positive}}, [&](auto& s) { return P(div(s.at("a"), s.at("b"))); });
  prim("add_scalar", {{"a", {5}}}, [&](auto& s) { return P(add_scalar(s.at("a"), 0.5)); });
  prim("mul_scalar", {{"a", {5}}}, [&](auto& s) { return P(mul_scalar(s.at("a"), -1.5)); });
  prim("relu", {{"x", {3, 4}, Fill::AwayFromZero}}, [&](auto& s) { return P(relu(s.at("x"))); });
  prim("sigmoid", {{"x", {3, 4}}}, [&](auto& s) { return P(sigmoid(s.at("x"))); });
  prim("silu", {{"x", {3, 4}}}, [&](auto& s) { return P(silu(s.at("x"))); });
  prim("gelu", {{"x", {3, 4}}}, [&](auto& s) { return P(gelu(s.at("x"))); });
  prim("softplus", {{"x", {3, 4}}}, [&](auto& s) { return P(softplus(s.at("x"))); });
  prim("exp", {{"x", {3, 4}}}, [&](auto& s) { return P(exp(s.at("x"))); });
  prim("sqrt", {{"x", {3, 4}, Fill::Positive}}, [&](auto& s) { return P(sqrt(s.at("x"))); });
  prim("square", {{"x", {3, 4}}}, [&](auto& s) { return P(square(s.at("x"))); });
  prim("sum", {{"x", {3, 4}}}, [&](auto& s) { return sum(square(s.at("x"))); });
  prim("mean", {{"x", {3, 4}}}, [&](auto& s) { return mean(square(s.at("x"))); });
  prim("reshape", {{"x", {2, 6}}}, [&](auto& s) { return P(reshape(s.at("x"), {3, 4})); });
  prim("permute", {{"x", {2, 3, 4}}}, [&](auto& s) { return P(permute(s.at("x"), {2, 0, 1})); });
  prim("concat", {{"a", {2, 3, 2}}, {"b", {2, 1, 2}}},
       [&](auto& s) { return P(concat<typename std::decay_t<decltype(s.at("a"))>::value_type>({s.at("a"), s.at("b")}, 1)); });
  prim("slice", {{"x", {2, 5, 3}}}, [&](auto& s) { return P(slice(s.at("x"), 1, 1, 3)); });
  prim("roll", {{"x", {2, 5, 3}}}, [&](auto& s) { return P(roll(s.at("x"), 1, 2)); });
  prim("repeat_channels", {{"x", {1, 3, 2, 2}}}, [&](auto& s) { return P(repeat_channels(s.at("x"), 2)); });
  prim("pad_replicate", {{"x", {1, 2, 3, 3}}}, [&](auto& s) { return P(pad_replicate(s.at("x"), 2, 1)); });
  prim("linear", {{"x", {2, 3, 4}}, {"w", {5, 4}}, {"b", {5}}},
       [&](auto& s) { return P(linear(s.at("x"), s.at("w"), s.at("b"))); });
  prim("bmm", {{"a", {2, 3, 4}}, {"b", {2, 4, 5}}}, [&](auto& s) { return P(bmm(s.at("a"), s.at("b"))); });
  prim("bmm_transposed", {{"a", {2, 4, 3}}, {"b", {2, 5, 4}}},
       [&](auto& s) { return P(bmm(s.at("a"), s.at("b"), true, true)); });
  prim("softmax", {{"x", {2, 3, 5}}}, [&](auto& s) { return P(softmax(s.at("x"), 1)); });
  prim("layer_norm", {{"x", {2, 3, 6}}, {"g", {6}}, {"b", {6}}},
       [&](auto& s) { return P(layer_norm(s.at("x"), s.at("g"), s.at("b"))); });
  prim("group_norm", {{"x", {2, 4, 3, 3}}, {"g", {4}}, {"b", {4}}},
       [&](auto& s) { return P(group_norm(s.at("x"), 2, s.at("g"), s.at("b"))); });
  prim("conv2d", {{"x", {2, 4, 5, 5}}, {"w", {6, 2, 3, 3}}, {"b", {6}}},
       [&](auto& s) { return P(conv2d(s.at("x"), s.at("w"), s.at("b"), Conv2dOptions{2, 1, 2})); });
  prim("causal_conv1d", {{"x", {2, 5, 4}}, {"w", {4, 3}}, {"b", {4}}},
       [&](auto& s) { return P(causal_conv1d(s.at("x"), s.at("w"), s.at("b"))); });
  prim("global_avg_pool", {{"x", {2, 3, 4, 5}}}, [&](auto& s) { return P(global_avg_pool(s.at("x"))); });
  prim("global_max_pool", {{"x", {2, 3, 4, 5}, Fill::Distinct}}, [&](auto& s) { return P(global_max_pool(s.at("x"))); });
  prim("adaptive_avg_pool", {{"x", {1, 2, 5, 7}}}, [&](auto& s) { return P(adaptive_avg_pool(s.at("x"), 2, 3)); });
  prim("channel_mean", {{"x", {2, 3, 4, 4}}}, [&](auto& s) { return P(channel_mean(s.at("x"))); });
  prim("channel_max", {{"x", {2, 3, 4, 4}, Fill::Distinct}}, [&](auto& s) { return P(channel_max(s.at("x"))); });
  prim("upsample_nearest2x", {{"x", {1, 2, 3, 4}}}, [&](auto& s) { return P(upsample_nearest2x(s.at("x"))); });
  prim("upsample_bilinear2x", {{"x", {1, 2, 3, 4}}}, [&](auto& s) { return P(upsample_bilinear2x(s.at("x"))); });
  prim("spatial_gradient", {{"x", {1, 2, 4, 5}}},
       [&](auto& s) { return P(add(spatial_gradient(s.at("x"), 2), spatial_gradient(s.at("x"), 3))); });
}

void block_gradients(Runner& run) {
  auto P = [](const auto& y, uint64_t seed = 23) { return random_projection(y, seed); };
  SsmConfig ssm;
  ssm.expand = 2;
  ssm.state = 3;

  run.grad(kFusion, "selective_scan",
           inputs_of({{"x", {1, 6, 4}}, {"delta", {1, 6, 4}, Fill::Positive}, {"a", {4, 3}, Fill::Negative},
                      {"b", {1, 6, 3}}, {"c", {1, 6, 3}}},
                     31),
           [&](auto& s) { return P(selective_scan(s.at("x"), s.at("delta"), s.at("a"), s.at("b"), s.at("c"))); });

  run.grad(kFusion, "channel_excitation",
           module_store([](ParamBuilder<double> pb) { ChannelExcitation<double>(pb.sub("m"), 8); },
                        {{"f", {1, 8, 4, 4}}}, 41),
           [&]<typename T>(ParamStore<T>& s) {
             ChannelExcitation<T> m(ParamBuilder<T>::bind(s).sub("m"), 8);
             return P(m(s.at("f")));
           });
  run.grad(kFusion, "smfm",
           module_store([](ParamBuilder<double> pb) { Smfm<double>(pb.sub("m"), 4); },
                        {{"fr", {1, 4, 5, 5}}, {"fd", {1, 4, 5, 5}}}, 42),
           [&]<typename T>(ParamStore<T>& s) {
             Smfm<T> m(ParamBuilder<T>::bind(s).sub("m"), 4);
             return P(m(s.at("fr"), s.at("fd")));
           });
  auto btmfm_store = [&](const std::vector<InputSpec>& in, uint64_t seed, int64_t c) {
    return module_store([&](ParamBuilder<double> pb) { Btmfm<double>(pb.sub("m"), c, 2, ssm); }, in, seed);
  };
  run.grad(kFusion, "mha_residual", btmfm_store({{"t", {1, 5, 8}}}, 43, 8), [&]<typename T>(ParamStore<T>& s) {
    Btmfm<T> m(ParamBuilder<T>::bind(s).sub("m"), 8, 2, ssm);
    return P(m.mha_residual(s.at("t")));
  });
  run.grad(kFusion, "ssm_gated_block", btmfm_store({{"t", {1, 6, 4}}}, 44, 4), [&]<typename T>(ParamStore<T>& s) {
    Btmfm<T> m(ParamBuilder<T>::bind(s).sub("m"), 4, 2, ssm);
    return P(m.ssm(s.at("t")));
  });
  run.grad(kFusion, "ffn_residual", btmfm_store({{"t", {1, 5, 4}}}, 45, 4), [&]<typename T>(ParamStore<T>& s) {
    Btmfm<T> m(ParamBuilder<T>::bind(s).sub("m"), 4, 2, ssm);
    return P(m.ffn_residual(s.at("t")));
  });
  run.grad(kFusion, "btmfm", btmfm_store({{"fr", {1, 8, 3, 3}}, {"fd", {1, 8, 3, 3}}}, 46, 8),
           [&]<typename T>(ParamStore<T>& s) {
             Btmfm<T> m(ParamBuilder<T>::bind(s).sub("m"), 8, 2, ssm);
             return P(m(s.at("fr"), s.at("fd")));
           });

  run.grad(kEncoder, "patch_embed",
           module_store([](ParamBuilder<double> pb) { PatchEmbed<double>(pb.sub("m"), 4, 4); }, {{"x", {1, 4, 8, 8}}}, 51),
           [&]<typename T>(ParamStore<T>& s) {
             PatchEmbed<T> m(ParamBuilder<T>::bind(s).sub("m"), 4, 4);
             return P(m(s.at("x")));
           });
  run.grad(kEncoder, "window_attention_block",
           module_store([](ParamBuilder<double> pb) { WindowAttentionBlock<double>(pb.sub("m"), 4, 2, 4, true); },
                        {{"x", {1, 4, 8, 8}}}, 52),
           [&]<typename T>(ParamStore<T>& s) {
             WindowAttentionBlock<T> m(ParamBuilder<T>::bind(s).sub("m"), 4, 2, 4, true);
             return P(m(s.at("x")));
           });
  run.grad(kEncoder, "patch_merging",
           module_store([](ParamBuilder<double> pb) { PatchMerging<double>(pb.sub("m"), 4); }, {{"x", {1, 4, 4, 4}}}, 53),
           [&]<typename T>(ParamStore<T>& s) {
             PatchMerging<T> m(ParamBuilder<T>::bind(s).sub("m"), 4);
             return P(m(s.at("x")));
           });
  run.grad(kEncoder, "resnet_block",
           module_store([](ParamBuilder<double> pb) { ResNetBlock<double>(pb.sub("m"), 4); }, {{"x", {1, 4, 6, 6}}}, 54),
           [&]<typename T>(ParamStore<T>& s) {
             ResNetBlock<T> m(ParamBuilder<T>::bind(s).sub("m"), 4);
             return P(m(s.at("x")));
           });

  auto df_store = [&](uint64_t seed) {
    return module_store([](ParamBuilder<double> pb) { DownFusion<double>(pb.sub("m"), 4); },
                        {{"deep", {1, 4, 4, 4}}, {"shallow", {1, 2, 8, 8}}}, seed);
  };
  run.grad(kDecoder, "spatial_attention", df_store(61), [&]<typename T>(ParamStore<T>& s) {
    DownFusion<T> m(ParamBuilder<T>::bind(s).sub("m"), 4);
    return P(m.spatial_attention(s.at("deep")));
  });
  run.grad(kDecoder, "channel_attention", df_store(62), [&]<typename T>(ParamStore<T>& s) {
    DownFusion<T> m(ParamBuilder<T>::bind(s).sub("m"), 4);
    return P(m.channel_attention(s.at("deep")));
  });
  run.grad(kDecoder, "down_fusion", df_store(63), [&]<typename T>(ParamStore<T>& s) {
    DownFusion<T> m(ParamBuilder<T>::bind(s).sub("m"), 4);
    return P(m(s.at("deep"), s.at("shallow")));
  });

  ModelConfig mc = ModelConfig::desk();
  mc.encoder.base_channels = 4;
  mc.width = 32;
  mc.height = 32;
  mc.ssm = ssm;
  run.grad(kDecoder, "model",
           module_store([&](ParamBuilder<double> pb) { HdcNet<double>(mc, pb); },
                        {{"rgb", {1, 3, 32, 32}, Fill::Positive}, {"depth", {1, 1, 32, 32}, Fill::Positive}}, 71),
           [&]<typename T>(ParamStore<T>& s) {
             HdcNet<T> m(mc, ParamBuilder<T>::bind(s));
             return P(m(s.at("rgb"), s.at("depth")));
           },
           4);

  const Shape ds{1, 1, 6, 7};
  auto gt = []<typename T>(const ParamStore<T>&) { return constant_tensor<T>({1, 1, 6, 7}, 81, 0.8, 1.2); };
  auto mask = []<typename T>(const ParamStore<T>&) {
    Tensor<T> m({1, 1, 6, 7});
    for (int64_t i = 0; i < m.numel(); ++i) m.ptr()[i] = i % 3 == 0 ? T(0) : T(1);
    return m;
  };
  const auto pred_in = inputs_of({{"pred", ds, Fill::Positive}}, 82);
  run.grad(kLoss, "loss_mse", pred_in, [&](auto& s) { return loss_mse(s.at("pred"), gt(s), mask(s)); });
  run.grad(kLoss, "loss_normal", pred_in, [&](auto& s) { return loss_normal(s.at("pred"), gt(s), mask(s)); });
  run.grad(kLoss, "total_loss", pred_in,
           [&](auto& s) { return total_loss(s.at("pred"), gt(s), mask(s), 0.1).total; });
}

/// Sequential recurrence in double, one token at a time.
std::vector<double> naive_scan(int64_t N, int64_t L, int64_t E, int64_t S, const std::vector<double>& x,
                               const std::vector<double>& delta, const std::vector<double>& a,
                               const std::vector<double>& b, const std::vector<double>& c) {
  std::vector<double> y(static_cast<size_t>(N * L * E), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t e = 0; e < E; ++e) {
      std::vector<double> h(static_cast<size_t>(S), 0.0);
      for (int64_t t = 0; t < L; ++t) {
        const size_t xe = static_cast<size_t>((n * L + t) * E + e);
        const size_t bs = static_cast<size_t>((n * L + t) * S);
        double acc = 0;
        for (int64_t k = 0; k < S; ++k) {
          const auto ks = static_cast<size_t>(k);
          h[ks] = std::exp(delta[xe] * a[static_cast<size_t>(e * S + k)]) * h[ks] + delta[xe] * b[bs + ks] * x[xe];
          acc += c[bs + ks] * h[ks];
        }
        y[xe] = acc;
      }
    }
  return y;
}

struct ScalarMetrics {
  double rmse, rel, mae, d[3];
};

/// Straight transcription of the metric definitions.
ScalarMetrics scalar_metrics(const std::vector<double>& d, const std::vector<double>& g, const std::vector<int>& m) {
  double n = 0, se = 0, ae = 0, re = 0, hit[3] = {0, 0, 0};
  const double thr[3] = {1.05, 1.10, 1.25};
  for (size_t i = 0; i < d.size(); ++i) {
    if (!m[i] || g[i] <= 0) continue;
    n += 1;
    se += (d[i] - g[i]) * (d[i] - g[i]);
    ae += std::fabs(d[i] - g[i]);
    re += std::fabs(d[i] - g[i]) / g[i];
    const double r = d[i] / g[i] > g[i] / d[i] ? d[i] / g[i] : g[i] / d[i];
    for (int k = 0; k < 3; ++k)
      if (r < thr[k]) hit[k] += 1;
  }
  return {std::sqrt(se / n), re / n, ae / n, {100 * hit[0] / n, 100 * hit[1] / n, 100 * hit[2] / n}};
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.ptr()[i]) - static_cast<double>(b.ptr()[i])));
  return m;
}

/// Window means over the exact 2x2 blocks, each channel written twice.
Tensor<float> reference_align(const Tensor<float>& s) {
  const int64_t N = s.dim(0), C = s.dim(1), H = s.dim(2) / 2, W = s.dim(3) / 2;
  Tensor<float> out({N, 2 * C, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          auto at = [&](int64_t yy, int64_t xx) { return s.ptr()[((n * C + c) * 2 * H + yy) * 2 * W + xx]; };
          const float m = (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4;
          for (int64_t r = 0; r < 2; ++r) out.ptr()[((n * 2 * C + 2 * c + r) * H + y) * W + x] = m;
        }
  return out;
}

void fill(Tensor<float>& t, float v) {
  for (float& x : t.data()) x = v;
}

void set_identity_1x1(Conv2d<float>& conv) {
  fill(conv.weight, 0.0f);
  const int64_t C = conv.weight.dim(0);
  for (int64_t c = 0; c < C; ++c) conv.weight.ptr()[c * C + c] = 1.0f;
  fill(conv.bias, 0.0f);
}

}  // namespace

std::string CheckResult::line() const {
  char buf[96];
  std::snprintf(buf, sizeof buf, "value=%.3e tol=%.1e", value, tolerance);
  return std::string(pass ? "[PASS] " : "[FAIL] ") + module + "/" + op + "  " + buf +
         (detail.empty() ? "" : "  " + detail);
}

bool VerifyReport::all_pass() const {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return !checks.empty();
}

std::vector<const CheckResult*> VerifyReport::failures() const {
  std::vector<const CheckResult*> out;
  for (const auto& c : checks)
    if (!c.pass) out.push_back(&c);
  return out;
}

VerifyReport verify_gradients(const CheckSink& sink) {
  Runner run(sink);
  primitive_gradients(run);
  block_gradients(run);
  return run.finish();
}

}  // namespace hdc

namespace hdc {

VerifyReport verify_scan(const CheckSink& sink) {
  Runner run(sink);
  run.guarded(kFusion, "selective_scan", [&] {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int64_t> len(1, 16), ch(1, 8), st(1, 4), bt(1, 2);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0;
    for (int inst = 0; inst < 50; ++inst) {
      const int64_t N = bt(rng), L = len(rng), E = ch(rng), S = st(rng);
      auto draw = [&](int64_t count, auto gen) {
        std::vector<double> v(static_cast<size_t>(count));
        for (double& x : v) x = gen();
        return v;
      };
      const auto x = draw(N * L * E, [&] { return n(rng); });
      const auto delta = draw(N * L * E, [&] { return std::log1p(std::exp(n(rng))); });
      const auto a = draw(E * S, [&] { return -(0.1 + 2 * u(rng)); });
      const auto b = draw(N * L * S, [&] { return n(rng); });
      const auto c = draw(N * L * S, [&] { return n(rng); });
      auto tensor = [](const std::vector<double>& v, Shape shape) {
        Tensor<float> t(std::move(shape));
        for (size_t i = 0; i < v.size(); ++i) t.ptr()[i] = static_cast<float>(v[i]);
        return t;
      };
      // The oracle sees the same float-rounded inputs as the op.
      auto rounded = [](std::vector<double> v) {
        for (double& e : v) e = static_cast<double>(static_cast<float>(e));
        return v;
      };
      const Tensor<float> y = selective_scan(tensor(x, {N, L, E}), tensor(delta, {N, L, E}), tensor(a, {E, S}),
                                             tensor(b, {N, L, S}), tensor(c, {N, L, S}));
      const auto ref = naive_scan(N, L, E, S, rounded(x), rounded(delta), rounded(a), rounded(b), rounded(c));
      for (size_t i = 0; i < ref.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(y.ptr()[i]) - ref[i]));
    }
    run.check(kFusion, "selective_scan", worst <= 1e-5, worst, 1e-5, "50 random instances vs sequential recurrence");
  });
  run.guarded(kFusion, "selective_scan causality", [&] {
    std::mt19937_64 rng(77);
    const int64_t N = 1, L = 12, E = 5, S = 3;
    const Tensor<float> x = Tensor<float>::randn({N, L, E}, rng);
    Tensor<float> delta = Tensor<float>::uniform({N, L, E}, rng, 0.1, 1.0);
    Tensor<float> a = Tensor<float>::uniform({E, S}, rng, -2.0, -0.1);
    const Tensor<float> b = Tensor<float>::randn({N, L, S}, rng), c = Tensor<float>::randn({N, L, S}, rng);
    const Tensor<float> y = selective_scan(x, delta, a, b, c);
    bool ok = true;
    for (int64_t t = 0; t < L; ++t) {
      Tensor<float> xp = x.clone();
      for (int64_t e = 0; e < E; ++e) xp.ptr()[t * E + e] += 1.0f;
      const Tensor<float> yp = selective_scan(xp, delta, a, b, c);
      ok = ok && std::equal(y.ptr(), y.ptr() + t * E, yp.ptr());
      bool changed = false;
      for (int64_t e = 0; e < E; ++e) changed = changed || yp.ptr()[t * E + e] != y.ptr()[t * E + e];
      ok = ok && changed;
    }
    run.check(kFusion, "selective_scan causality", ok, ok ? 0 : 1, 0,
              "perturbing token t leaves earlier outputs bit-identical");
  });
  return run.finish();
}

VerifyReport verify_metrics(const CheckSink& sink) {
  Runner run(sink);
  run.guarded(kLoss, "metrics", [&] {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 0.08);
    double worst = 0;
    bool monotone = true;
    for (int pair = 0; pair < 100; ++pair) {
      std::vector<double> d(64), g(64);
      std::vector<int> m(64);
      for (size_t i = 0; i < 64; ++i) {
        g[i] = u(rng) < 0.1 ? 0.0 : 0.3 + 2 * u(rng);
        d[i] = std::max(0.05, (g[i] > 0 ? g[i] : 1.0) * (1 + n(rng)));
        m[i] = u(rng) < 0.7;
      }
      m[0] = 1;
      if (g[0] <= 0) g[0] = 1.0;
      const std::vector<double> mask(m.begin(), m.end());
      const MetricsReport r = compute_metrics<double>(d, g, mask);
      const ScalarMetrics ref = scalar_metrics(d, g, m);
      for (double diff : {r.rmse - ref.rmse, r.rel - ref.rel, r.mae - ref.mae, r.d105 - ref.d[0], r.d110 - ref.d[1],
                          r.d125 - ref.d[2]})
        worst = std::max(worst, std::abs(diff));
      monotone = monotone && r.d105 <= r.d110 && r.d110 <= r.d125;
    }
    run.check(kLoss, "metrics", worst <= 1e-9, worst, 1e-9, "100 random 64-pixel masked pairs vs scalar reference");
    run.check(kLoss, "metrics threshold order", monotone, monotone ? 0 : 1, 0, "d105 <= d110 <= d125");
    std::vector<float> d(64), mask(64, 1.0f);
    for (size_t i = 0; i < d.size(); ++i) d[i] = 0.5f + 0.01f * static_cast<float>(i);
    const MetricsReport same = compute_metrics<float>(d, d, mask);
    const bool exact = same.rmse == 0 && same.rel == 0 && same.mae == 0 && same.d105 == 100 && same.d110 == 100 &&
                       same.d125 == 100;
    run.check(kLoss, "metrics identity", exact, exact ? 0 : 1, 0, "metrics(D,D) = (0,0,0,100,100,100)");
  });
  return run.finish();
}

VerifyReport verify_surgery(const CheckSink& sink) {
  Runner run(sink);
  std::mt19937_64 rng(5150);
  run.guarded(kFusion, "smfm saturated gates", [&] {
    ParamStore<float> s;
    Smfm<float> m(ParamBuilder<float>::create(s, 3), 8);
    jitter(s, 4, 0.1);
    for (auto* ex : {&m.rgb, &m.depth}) {
      fill(ex->expand.weight, 0.0f);
      fill(ex->expand.bias, 50.0f);
    }
    const Tensor<float> fr = Tensor<float>::randn({2, 8, 5, 5}, rng), fd = Tensor<float>::randn({2, 8, 5, 5}, rng);
    const double err = max_abs_diff(m(fr, fd), add(fr, fd));
    run.check(kFusion, "smfm saturated gates", err <= 1e-6, err, 1e-6, "output equals F_r + F_d");
  });
  auto down_fusion_case = [&](const std::string& op, bool midpoint) {
    run.guarded(kDecoder, op, [&] {
      ParamStore<float> s;
      DownFusion<float> m(ParamBuilder<float>::create(s, 8), 8);
      jitter(s, 9, 0.1);
      const Tensor<float> deep = Tensor<float>::randn({2, 8, 4, 4}, rng);
      const Tensor<float> shallow = Tensor<float>::randn({2, 4, 8, 8}, rng);
      const Tensor<float> aligned = reference_align(shallow);
      fill(m.weight_pw.weight, 0.0f);
      fill(m.weight_pw.bias, 0.0f);
      if (midpoint) {
        set_identity_1x1(m.out_deep);
        set_identity_1x1(m.out_shallow);
      } else {
        fill(m.weight_dw.weight, 0.0f);
        fill(m.weight_dw.bias, 0.0f);
        for (auto* c : {&m.out_deep, &m.out_shallow}) {
          fill(c->weight, 0.0f);
          fill(c->bias, 0.0f);
        }
      }
      DownFusionTrace<float> trace;
      const Tensor<float> out = m(deep, shallow, &trace);
      const Tensor<float> merged = add(deep, aligned);
      double err = 0;
      if (midpoint) {
        err = std::max(max_abs_diff(trace.blended, mul_scalar(merged, 0.5f)),
                       max_abs_diff(out, add(mul_scalar(merged, 0.5f), merged)));
        run.check(kDecoder, op, err <= 1e-6, err, 1e-6, "F' = (F_i + aligned) / 2");
      } else {
        err = max_abs_diff(out, merged);
        run.check(kDecoder, op, err <= 1e-6, err, 1e-6, "F_out = F_i + aligned");
      }
    });
  };
  down_fusion_case("down_fusion midpoint", true);
  down_fusion_case("down_fusion identity fallback", false);
  return run.finish();
}

VerifyReport verify_all(const CheckSink& sink) {
  const auto t0 = std::chrono::steady_clock::now();
  VerifyReport all;
  for (auto* suite : {&verify_gradients, &verify_scan, &verify_metrics, &verify_surgery}) {
    VerifyReport r = suite(sink);
    all.checks.insert(all.checks.end(), r.checks.begin(), r.checks.end());
  }
  all.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return all;
}

}  // namespace hdc
