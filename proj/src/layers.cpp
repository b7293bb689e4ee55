#include "hdc/layers.hpp"

#include <cmath>

namespace hdc {

template <typename T>
Linear<T>::Linear(ParamBuilder<T> pb, int64_t in, int64_t out, bool use_bias, Init w_init)
    : weight(pb.param("weight", {out, in}, w_init)) {
  if (use_bias) bias = pb.param("bias", {out}, Init::zeros());
}

template <typename T>
LayerNorm<T>::LayerNorm(ParamBuilder<T> pb, int64_t dim)
    : gamma(pb.param("gamma", {dim}, Init::ones())), beta(pb.param("beta", {dim}, Init::zeros())) {}

template <typename T>
GroupNorm<T>::GroupNorm(ParamBuilder<T> pb, int64_t channels, int64_t groups_)
    : groups(groups_),
      gamma(pb.param("gamma", {channels}, Init::ones())),
      beta(pb.param("beta", {channels}, Init::zeros())) {
  if (groups < 1 || channels % groups != 0)
    throw ShapeError("group norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
}

template <typename T>
Conv2d<T>::Conv2d(ParamBuilder<T> pb, int64_t in, int64_t out, int64_t kernel, Conv2dOptions opt_,
                  bool use_bias, Init bias_init)
    : weight(pb.param("weight", {out, in / opt_.groups, kernel, kernel},
                      Init::kaiming(in / opt_.groups * kernel * kernel))),
      opt(opt_) {
  if (use_bias) bias = pb.param("bias", {out}, std::move(bias_init));
}

template <typename T>
Mlp<T>::Mlp(ParamBuilder<T> pb, int64_t dim, int64_t hidden)
    : fc1(pb.sub("fc1"), dim, hidden), fc2(pb.sub("fc2"), hidden, dim) {}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamBuilder<T> pb, int64_t dim, int64_t heads_)
    : heads(heads_),
      q(pb.sub("q"), dim, dim),
      k(pb.sub("k"), dim, dim),
      v(pb.sub("v"), dim, dim),
      out(pb.sub("out"), dim, dim) {
  if (heads < 1 || dim % heads != 0)
    throw ShapeError("attention: embedding dimension " + std::to_string(dim) +
                     " not divisible by head count " + std::to_string(heads));
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& x, const Tensor<T>* mask,
                                            Tensor<T>* probs) const {
  if (x.rank() != 3) throw ShapeError("attention: expected [B, L, C] input, got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (C % heads != 0)
    throw ShapeError("attention: channel dimension 2 (" + std::to_string(C) +
                     ") not divisible by head count " + std::to_string(heads));
  const int64_t d = C / heads;
  auto split = [&](const Tensor<T>& t) {
    return reshape(permute(reshape(t, {B, L, heads, d}), {0, 2, 1, 3}), {B * heads, L, d});
  };
  const Tensor<T> qh = split(mul_scalar(q(x), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)))));
  const Tensor<T> kh = split(k(x));
  const Tensor<T> vh = split(v(x));
  Tensor<T> scores = bmm(qh, kh, false, true);
  if (mask != nullptr) {
    const int64_t windows = mask->dim(0);
    if (B % windows != 0 || mask->dim(1) != L || mask->dim(2) != L)
      throw ShapeError("attention: mask " + shape_str(mask->shape()) + " incompatible with batch " +
                       std::to_string(B) + " and length " + std::to_string(L));
    scores = reshape(add(reshape(scores, {B / windows, windows, heads, L, L}),
                         reshape(*mask, {1, windows, 1, L, L})),
                     {B * heads, L, L});
  }
  const Tensor<T> p = softmax(scores, -1);
  if (probs != nullptr) *probs = reshape(p, {B, heads, L, L});
  const Tensor<T> ctx = reshape(permute(reshape(bmm(p, vh), {B, heads, L, d}), {0, 2, 1, 3}), {B, L, C});
  return out(ctx);
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct GroupNorm<float>;
template struct GroupNorm<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct MultiHeadAttention<float>;
template struct MultiHeadAttention<double>;

}  // namespace hdc
