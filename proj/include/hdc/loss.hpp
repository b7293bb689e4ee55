#pragma once
// Masked depth losses and evaluation metrics. Depth tensors are [N,1,H,W] in
// meters; masks are same-shaped 0/1 tensors. A pixel counts only where the
// mask is set and the ground truth is positive.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hdc/ops.hpp"

namespace hdc {

/// Effective 0/1 mask (mask != 0 and gt > 0) and its population.
template <typename T>
Tensor<T> effective_mask(const Tensor<T>& gt, const Tensor<T>& mask, int64_t* count = nullptr);

template <typename T>
Tensor<T> loss_mse(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask);

/// Unit normals [N,3,H,W] of n ~ (-dD/dx, -dD/dy, 1) with unit pixel spacing.
template <typename T>
Tensor<T> surface_normals(const Tensor<T>& depth);

/// Mean of 1 - n(pred) . n(gt) over the mask.
template <typename T>
Tensor<T> loss_normal(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask);

template <typename T>
struct LossTerms {
  Tensor<T> mse, normal, total;
};

/// mse + lambda * normal.
template <typename T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, double lambda);

struct MetricsReport {
  double rmse = 0, rel = 0, mae = 0;
  double d105 = 0, d110 = 0, d125 = 0;  // percentages
  int64_t count = 0;

  static std::string csv_header() { return "rmse,rel,mae,d105,d110,d125"; }
  std::string csv_row() const;
  /// Unweighted mean of per-sample reports.
  static MetricsReport mean_of(const std::vector<MetricsReport>& reports);
};

/// Accumulated in double. Throws if no pixel qualifies.
template <typename T>
MetricsReport compute_metrics(std::span<const T> pred, std::span<const T> gt, std::span<const T> mask);

}  // namespace hdc
