#pragma once

#include <string>
#include <vector>

#include "hdc/params.hpp"

namespace hdc {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam over every tensor of a store. Parameters
/// without an allocated gradient are treated as having zero gradient.
class AdamW {
 public:
  AdamW(ParamStore<float>& params, AdamWOptions opt = {});

  /// p <- p * (1 - lr * wd), then the bias-corrected Adam update. Returns
  /// false and leaves everything untouched if any gradient is non-finite;
  /// `last_error()` then names the tensor.
  bool step();

  int64_t steps() const { return step_; }
  const AdamWOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  const std::string& last_error() const { return last_error_; }
  const std::vector<float>& first_moment(size_t i) const { return m_[i]; }
  const std::vector<float>& second_moment(size_t i) const { return v_[i]; }

 private:
  ParamStore<float>& params_;
  AdamWOptions opt_;
  std::vector<std::vector<float>> m_, v_;
  int64_t step_ = 0;
  std::string last_error_;
};

}  // namespace hdc
