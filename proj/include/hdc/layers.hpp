#pragma once

// Parameterised building blocks shared by the encoder, fusion and decoder.

#include "hdc/ops.hpp"
#include "hdc/params.hpp"

namespace hdc {

template <typename T>
struct Linear {
  Tensor<T> weight, bias;  // weight [out, in]; bias [out] or undefined

  Linear() = default;
  Linear(ParamBuilder<T> pb, int64_t in, int64_t out, bool use_bias = true,
         Init w_init = Init::trunc_normal());
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamBuilder<T> pb, int64_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <typename T>
struct GroupNorm {
  int64_t groups = 1;
  Tensor<T> gamma, beta;

  GroupNorm() = default;
  GroupNorm(ParamBuilder<T> pb, int64_t channels, int64_t groups);
  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta); }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight, bias;
  Conv2dOptions opt;

  Conv2d() = default;
  Conv2d(ParamBuilder<T> pb, int64_t in, int64_t out, int64_t kernel, Conv2dOptions opt = {},
         bool use_bias = true, Init bias_init = Init::zeros());
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, opt); }
};

/// linear -> GELU -> linear.
template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamBuilder<T> pb, int64_t dim, int64_t hidden);
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

/// Multi-head scaled dot-product self-attention over x[B, L, C].
template <typename T>
struct MultiHeadAttention {
  int64_t heads = 1;
  Linear<T> q, k, v, out;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamBuilder<T> pb, int64_t dim, int64_t heads);

  /// `mask`, if given, is an additive [W, L, L] bias where B is a multiple of
  /// W and batch entry b uses mask b % W. `probs`, if given, receives the
  /// attention weights as [B, heads, L, L].
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>* mask = nullptr,
                       Tensor<T>* probs = nullptr) const;
};

}  // namespace hdc
