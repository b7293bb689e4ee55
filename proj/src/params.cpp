#include "hdc/params.hpp"

#include <cmath>
#include <stdexcept>

namespace hdc {

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> t) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(t));
  return entries_.back().second;
}

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
int64_t ParamStore<T>::total_elements() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool on) {
  for (auto& e : entries_) e.second.set_requires_grad(on);
}

Init Init::kaiming(int64_t fan_in) {
  return {Kind::Normal, std::sqrt(2.0 / static_cast<double>(fan_in > 0 ? fan_in : 1)), 0.0, {}};
}

template <typename T>
ParamBuilder<T> ParamBuilder<T>::create(ParamStore<T>& store, uint64_t seed) {
  return ParamBuilder(&store, std::make_shared<std::mt19937_64>(seed), "");
}

template <typename T>
ParamBuilder<T> ParamBuilder<T>::bind(ParamStore<T>& store) {
  return ParamBuilder(&store, nullptr, "");
}

template <typename T>
ParamBuilder<T> ParamBuilder<T>::sub(const std::string& scope) const {
  return ParamBuilder(store_, rng_, prefix_.empty() ? scope : prefix_ + "." + scope);
}

template <typename T>
Tensor<T> ParamBuilder<T>::param(const std::string& name, Shape shape, Init init) {
  const std::string full = prefix_.empty() ? name : prefix_ + "." + name;
  if (!rng_) {
    Tensor<T>& t = store_->at(full);
    if (t.shape() != shape)
      throw ShapeError("parameter '" + full + "' has shape " + shape_str(t.shape()) +
                       " but the model expects " + shape_str(shape));
    return t;
  }
  Tensor<T> t(shape);
  auto& rng = *rng_;
  switch (init.kind) {
    case Init::Kind::Constant:
      for (T& v : t.data()) v = static_cast<T>(init.a);
      break;
    case Init::Kind::Normal: {
      std::normal_distribution<double> d(0.0, init.a);
      for (T& v : t.data()) v = static_cast<T>(d(rng));
      break;
    }
    case Init::Kind::TruncNormal: {
      std::normal_distribution<double> d(0.0, init.a);
      for (T& v : t.data()) {
        double s = d(rng);
        while (std::abs(s) > 2.0 * init.a) s = d(rng);
        v = static_cast<T>(s);
      }
      break;
    }
    case Init::Kind::Pattern:
      for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = static_cast<T>(init.pattern_fn(i));
      break;
    case Init::Kind::Uniform: {
      std::uniform_real_distribution<double> d(init.a, init.b);
      for (T& v : t.data()) v = static_cast<T>(d(rng));
      break;
    }
  }
  t.set_requires_grad(true);
  return store_->add(full, std::move(t));
}

template class ParamStore<float>;
template class ParamStore<double>;
template class ParamBuilder<float>;
template class ParamBuilder<double>;

}  // namespace hdc
