#include "hdc/tape.hpp"

#include <stdexcept>

namespace hdc {
namespace {

template <typename T>
GradTape<T>*& active_tape() {
  thread_local GradTape<T>* tape = nullptr;
  return tape;
}

}  // namespace

template <typename T>
GradTape<T>::GradTape() : previous_(active_tape<T>()) {
  active_tape<T>() = this;
}

template <typename T>
GradTape<T>::~GradTape() {
  if (active_tape<T>() == this) active_tape<T>() = previous_;
}

template <typename T>
GradTape<T>* GradTape<T>::current() {
  return active_tape<T>();
}

template <typename T>
void GradTape<T>::record(std::function<void()> backward_fn) {
  if (consumed_) throw std::logic_error("recording onto a tape that was already replayed");
  nodes_.push_back(std::move(backward_fn));
}

template <typename T>
void GradTape<T>::backward(Tensor<T>& loss) {
  if (consumed_) throw std::logic_error("backward called twice on the same tape");
  if (loss.numel() != 1)
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  consumed_ = true;
  if (active_tape<T>() == this) active_tape<T>() = previous_;
  if (!loss.requires_grad()) return;
  loss.grad()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

template <typename T>
NoGradGuard<T>::NoGradGuard() : saved_(active_tape<T>()) {
  active_tape<T>() = nullptr;
}

template <typename T>
NoGradGuard<T>::~NoGradGuard() {
  active_tape<T>() = saved_;
}

template class GradTape<float>;
template class GradTape<double>;
template class NoGradGuard<float>;
template class NoGradGuard<double>;

}  // namespace hdc
