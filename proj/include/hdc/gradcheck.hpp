#pragma once
// Finite-difference gradient checking in double precision. The function
// under test is a callable `f(ParamStore<double>&) -> Tensor<double>`
// returning a scalar; it is run once with the tape for analytic gradients and
// four times per sampled coordinate: central differences at eps and eps/2.
// When the two estimates disagree the interval straddles a kink (ReLU, max)
// and the coordinate is set aside instead of compared. The agreement test
// never looks at the analytic gradient, so it cannot hide a wrong backward.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "hdc/ops.hpp"
#include "hdc/params.hpp"

namespace hdc {

struct GradcheckOptions {
  double eps = 1e-3;
  int64_t max_coords = 12;  // per tensor; larger tensors are sampled
  uint64_t seed = 1;
  double floor = 1e-6;         // denominator floor for tensors whose gradient vanishes
  double kink_tolerance = 1e-5;  // relative eps vs eps/2 disagreement that marks a kink
};

struct TensorGradError {
  std::string name;
  double error = 0;  // max |analytic - numeric| / max(max |numeric|, floor)
  int64_t checked = 0;
  int64_t kinks = 0;  // coordinates set aside
};

struct GradcheckResult {
  std::vector<TensorGradError> tensors;

  int64_t checked() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.checked;
    return n;
  }
  int64_t kinks() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.kinks;
    return n;
  }

  double max_error() const {
    double m = 0;
    for (const auto& t : tensors) m = std::max(m, t.error);
    return m;
  }
  const TensorGradError* worst() const {
    const TensorGradError* w = nullptr;
    for (const auto& t : tensors)
      if (!w || t.error > w->error) w = &t;
    return w;
  }
};

template <typename F>
GradcheckResult gradcheck(const ParamStore<double>& inputs, F&& f, const GradcheckOptions& opt = {}) {
  ParamStore<double> analytic = inputs.clone();
  analytic.set_requires_grad(true);
  {
    GradTape<double> tape;
    Tensor<double> loss = f(analytic);
    if (loss.numel() != 1) throw ShapeError("gradcheck: function must return a scalar");
    tape.backward(loss);
  }

  ParamStore<double> ds = inputs.clone();
  auto eval = [&]() { return f(ds).item(); };
  std::mt19937_64 rng(opt.seed);
  GradcheckResult res;
  for (auto& [name, t] : ds) {
    const Tensor<double>& at = analytic.at(name);
    std::vector<int64_t> coords(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) coords[static_cast<size_t>(i)] = i;
    if (t.numel() > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<size_t>(opt.max_coords));
    }
    struct Sample {
      double analytic, coarse, fine;
    };
    std::vector<Sample> samples;
    auto central = [&](double& v, double step) {
      const double saved = v;
      v = saved + step;
      const double up = eval();
      v = saved - step;
      const double down = eval();
      v = saved;
      return (up - down) / (2 * step);
    };
    double scale = 0;
    for (int64_t i : coords) {
      double& v = t.ptr()[i];
      const Sample sm{at.has_grad() ? at.grad()[static_cast<size_t>(i)] : 0.0, central(v, opt.eps),
                      central(v, opt.eps / 2)};
      scale = std::max({scale, std::abs(sm.coarse), std::abs(sm.fine)});
      samples.push_back(sm);
    }
    scale = std::max(scale, opt.floor);
    TensorGradError e{name, 0.0, static_cast<int64_t>(coords.size()), 0};
    for (const auto& sm : samples) {
      if (std::abs(sm.coarse - sm.fine) > opt.kink_tolerance * scale) {
        ++e.kinks;
        continue;
      }
      e.error = std::max(e.error, std::abs(sm.analytic - sm.coarse) / scale);
    }
    res.tensors.push_back(e);
  }
  return res;
}

/// Adds N(0, stddev) to every entry so that zero-initialised weights do not
/// hide gradient paths.
template <typename T>
void jitter(ParamStore<T>& store, uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& [name, t] : store)
    for (T& v : t.data()) v = static_cast<T>(static_cast<double>(v) + n(rng));
}

/// sum(x * R) for a fixed pseudo-random R, a scalar that depends on every entry of x.
template <typename T>
Tensor<T> random_projection(const Tensor<T>& x, uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<T> r(x.shape());
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (T& v : r.data()) v = static_cast<T>(u(rng));
  return sum(mul(x, r));
}

}  // namespace hdc
