#include "hdc/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hdc {

AdamW::AdamW(ParamStore<float>& params, AdamWOptions opt) : params_(params), opt_(opt) {
  if (!(opt_.lr > 0)) throw std::invalid_argument("adamw: learning rate must be positive");
  if (!(opt_.beta1 >= 0 && opt_.beta1 < 1 && opt_.beta2 >= 0 && opt_.beta2 < 1))
    throw std::invalid_argument("adamw: betas must lie in [0,1)");
  if (!(opt_.eps > 0) || !(opt_.weight_decay >= 0)) throw std::invalid_argument("adamw: bad eps or weight decay");
  for (const auto& [name, t] : params_) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
  }
}

bool AdamW::step() {
  if (m_.size() != params_.size()) throw std::logic_error("adamw: parameter store changed size");
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    for (float g : t.grad())
      if (!std::isfinite(g)) {
        last_error_ = "non-finite gradient in " + name + "; step " + std::to_string(step_ + 1) + " rejected";
        return false;
      }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1 - std::pow(opt_.beta1, t), bc2 = 1 - std::pow(opt_.beta2, t);
  const double decay = 1 - opt_.lr * opt_.weight_decay;
  size_t k = 0;
  for (auto& [name, p] : params_) {
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    float* w = p.ptr();
    const float* g = p.has_grad() ? p.grad().data() : nullptr;
    for (size_t i = 0; i < m.size(); ++i) {
      const double gi = g ? static_cast<double>(g[i]) : 0.0;
      const double mi = opt_.beta1 * m[i] + (1 - opt_.beta1) * gi;
      const double vi = opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + opt_.eps);
      w[i] = static_cast<float>(static_cast<double>(w[i]) * decay - opt_.lr * update);
    }
  }
  last_error_.clear();
  return true;
}

}  // namespace hdc
