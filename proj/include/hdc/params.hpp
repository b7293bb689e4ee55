#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hdc/tensor.hpp"

namespace hdc {

/// Ordered, uniquely named table of tensors (learnable weights, or inputs
/// when used by the gradient checker).
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& name, Tensor<T> t);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;

  size_t size() const { return entries_.size(); }
  int64_t total_elements() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  void set_requires_grad(bool on);

  /// Deep copy; storage is not shared with the source.
  ParamStore clone() const { return cast<T>(); }
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

/// Solves softplus(x) = y for y > 0.
inline double inverse_softplus(double y) { return std::log(std::expm1(y)); }

struct Init {
  enum class Kind { Constant, TruncNormal, Normal, Uniform, Pattern };
  Kind kind = Kind::Constant;
  double a = 0.0;  // constant value / stddev / lower bound
  double b = 0.0;  // upper bound for Uniform
  std::function<double(int64_t)> pattern_fn;  // value by flat index, for Pattern

  static Init zeros() { return {Kind::Constant, 0.0, 0.0, {}}; }
  static Init ones() { return {Kind::Constant, 1.0, 0.0, {}}; }
  static Init constant(double v) { return {Kind::Constant, v, 0.0, {}}; }
  /// Normal(0, std) truncated to +-2 std.
  static Init trunc_normal(double stddev = 0.02) { return {Kind::TruncNormal, stddev, 0.0, {}}; }
  /// He initialisation for a ReLU layer with the given fan-in.
  static Init kaiming(int64_t fan_in);
  static Init uniform(double lo, double hi) { return {Kind::Uniform, lo, hi, {}}; }
  static Init pattern(std::function<double(int64_t)> fn) { return {Kind::Pattern, 0.0, 0.0, std::move(fn)}; }
};

/// Declares parameters. In create mode each call draws a fresh tensor from
/// the seeded generator (declaration order fixes the stream); in bind mode it
/// looks the name up in an existing store and checks the shape. Modules are
/// written once against this interface.
template <typename T>
class ParamBuilder {
 public:
  static ParamBuilder create(ParamStore<T>& store, uint64_t seed);
  static ParamBuilder bind(ParamStore<T>& store);

  Tensor<T> param(const std::string& name, Shape shape, Init init);
  ParamBuilder sub(const std::string& scope) const;
  const std::string& prefix() const { return prefix_; }

 private:
  ParamBuilder(ParamStore<T>* store, std::shared_ptr<std::mt19937_64> rng, std::string prefix)
      : store_(store), rng_(std::move(rng)), prefix_(std::move(prefix)) {}

  ParamStore<T>* store_;
  std::shared_ptr<std::mt19937_64> rng_;  // null in bind mode
  std::string prefix_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class ParamBuilder<float>;
extern template class ParamBuilder<double>;

}  // namespace hdc
