#include "hdc/loss.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace hdc {
namespace {

template <typename T>
void require_pair(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, const char* what) {
  if (pred.shape() != gt.shape() || pred.shape() != mask.shape())
    throw ShapeError(std::string(what) + ": pred " + shape_str(pred.shape()) + ", gt " +
                     shape_str(gt.shape()) + " and mask " + shape_str(mask.shape()) + " must match");
}

template <typename T>
Tensor<T> masked_mean(const Tensor<T>& per_pixel, const Tensor<T>& m, int64_t count) {
  return mul_scalar(sum(mul(per_pixel, m)), static_cast<T>(1.0 / static_cast<double>(count)));
}

}  // namespace

template <typename T>
Tensor<T> effective_mask(const Tensor<T>& gt, const Tensor<T>& mask, int64_t* count) {
  if (gt.shape() != mask.shape())
    throw ShapeError("mask " + shape_str(mask.shape()) + " does not match depth " + shape_str(gt.shape()));
  Tensor<T> m(gt.shape());
  int64_t n = 0;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    const bool on = mask.ptr()[i] != T(0) && gt.ptr()[i] > T(0);
    m.ptr()[i] = on ? T(1) : T(0);
    n += on;
  }
  if (count) *count = n;
  return m;
}

template <typename T>
Tensor<T> loss_mse(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  require_pair(pred, gt, mask, "loss_mse");
  int64_t count = 0;
  const Tensor<T> m = effective_mask(gt, mask, &count);
  if (count == 0) throw std::invalid_argument("loss_mse: mask selects no valid pixel");
  return masked_mean(square(sub(pred, gt)), m, count);
}

template <typename T>
Tensor<T> surface_normals(const Tensor<T>& depth) {
  if (depth.rank() != 4 || depth.dim(1) != 1)
    throw ShapeError("surface_normals: expected [N,1,H,W], got " + shape_str(depth.shape()));
  const Tensor<T> gx = spatial_gradient(depth, 3);
  const Tensor<T> gy = spatial_gradient(depth, 2);
  const Tensor<T> norm = sqrt(add_scalar(add(square(gx), square(gy)), T(1)));
  return div(concat<T>({neg(gx), neg(gy), Tensor<T>::full(depth.shape(), T(1))}, 1), norm);
}

template <typename T>
Tensor<T> loss_normal(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  require_pair(pred, gt, mask, "loss_normal");
  int64_t count = 0;
  const Tensor<T> m = effective_mask(gt, mask, &count);
  if (count == 0) throw std::invalid_argument("loss_normal: mask selects no valid pixel");
  // Gradients of the target carry no parameters.
  Tensor<T> gx_t, gy_t;
  {
    NoGradGuard<T> guard;
    gx_t = spatial_gradient(gt, 3);
    gy_t = spatial_gradient(gt, 2);
  }
  const Tensor<T> gx = spatial_gradient(pred, 3);
  const Tensor<T> gy = spatial_gradient(pred, 2);
  const Tensor<T> np = sqrt(add_scalar(add(square(gx), square(gy)), T(1)));
  Tensor<T> nt(gt.shape());
  for (int64_t i = 0; i < nt.numel(); ++i)
    nt.ptr()[i] = std::sqrt(gx_t.ptr()[i] * gx_t.ptr()[i] + gy_t.ptr()[i] * gy_t.ptr()[i] + T(1));
  const Tensor<T> dot = div(add_scalar(add(mul(gx, gx_t), mul(gy, gy_t)), T(1)), mul(np, nt));
  return masked_mean(one_minus(dot), m, count);
}

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be non-negative");
  LossTerms<T> out;
  out.mse = loss_mse(pred, gt, mask);
  if (lambda == 0.0) {
    NoGradGuard<T> guard;
    out.normal = loss_normal(pred, gt, mask);
    out.total = out.mse;
    return out;
  }
  out.normal = loss_normal(pred, gt, mask);
  out.total = add(out.mse, mul_scalar(out.normal, static_cast<T>(lambda)));
  return out;
}

std::string MetricsReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", rmse, rel, mae, d105, d110, d125);
  return buf;
}

MetricsReport MetricsReport::mean_of(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("metrics: no samples to average");
  MetricsReport m;
  for (const auto& r : reports) {
    m.rmse += r.rmse;
    m.rel += r.rel;
    m.mae += r.mae;
    m.d105 += r.d105;
    m.d110 += r.d110;
    m.d125 += r.d125;
    m.count += r.count;
  }
  const double n = static_cast<double>(reports.size());
  m.rmse /= n;
  m.rel /= n;
  m.mae /= n;
  m.d105 /= n;
  m.d110 /= n;
  m.d125 /= n;
  return m;
}

template <typename T>
MetricsReport compute_metrics(std::span<const T> pred, std::span<const T> gt, std::span<const T> mask) {
  if (pred.size() != gt.size() || pred.size() != mask.size())
    throw ShapeError("metrics: pred, gt and mask sizes differ (" + std::to_string(pred.size()) + ", " +
                     std::to_string(gt.size()) + ", " + std::to_string(mask.size()) + ")");
  double se = 0, ae = 0, re = 0;
  int64_t n = 0, c105 = 0, c110 = 0, c125 = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == T(0) || !(gt[i] > T(0))) continue;
    const double d = static_cast<double>(pred[i]), g = static_cast<double>(gt[i]);
    const double err = d - g;
    se += err * err;
    ae += std::abs(err);
    re += std::abs(err) / g;
    const double ratio = std::max(d / g, g / d);
    c105 += ratio < 1.05;
    c110 += ratio < 1.10;
    c125 += ratio < 1.25;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("metrics: mask selects no pixel with positive ground truth");
  const double N = static_cast<double>(n);
  MetricsReport r;
  r.rmse = std::sqrt(se / N);
  r.rel = re / N;
  r.mae = ae / N;
  r.d105 = 100.0 * static_cast<double>(c105) / N;
  r.d110 = 100.0 * static_cast<double>(c110) / N;
  r.d125 = 100.0 * static_cast<double>(c125) / N;
  r.count = n;
  return r;
}

#define HDC_INSTANTIATE(T)                                                                       \
  template Tensor<T> effective_mask(const Tensor<T>&, const Tensor<T>&, int64_t*);              \
  template Tensor<T> loss_mse(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> surface_normals(const Tensor<T>&);                                         \
  template Tensor<T> loss_normal(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template LossTerms<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template MetricsReport compute_metrics(std::span<const T>, std::span<const T>, std::span<const T>);
HDC_INSTANTIATE(float)
HDC_INSTANTIATE(double)
#undef HDC_INSTANTIATE

}  // namespace hdc
