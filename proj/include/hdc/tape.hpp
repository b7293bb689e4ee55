#pragma once

#include <functional>
#include <vector>

#include "hdc/tensor.hpp"

namespace hdc {

/// Reverse-mode tape. Constructing one makes it the active recorder for
/// scalar type T on the calling thread until it is destroyed. Ops record a
/// backward closure whenever an input requires grad and a tape is active.
template <typename T>
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current();

  void record(std::function<void()> backward_fn);
  size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the recorded ops in reverse.
  /// The tape is consumed; a second call throws.
  void backward(Tensor<T>& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  GradTape* previous_ = nullptr;
  bool consumed_ = false;
};

/// Suspends recording for the enclosing scope.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradTape<T>* saved_;
};

extern template class GradTape<float>;
extern template class GradTape<double>;
extern template class NoGradGuard<float>;
extern template class NoGradGuard<double>;

}  // namespace hdc
