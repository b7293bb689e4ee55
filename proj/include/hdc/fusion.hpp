#pragma once

// Shallow multimodal fusion (squeeze-excitation gating of each modality,
// then element-wise sum) and the bottleneck Transformer/state-space fusion.

#include "hdc/layers.hpp"

namespace hdc {

/// Four parallel C -> C/4 compressions of the pooled descriptor, concatenated
/// and expanded back to C, squashed by a sigmoid.
template <typename T>
struct ChannelExcitation {
  std::vector<Linear<T>> branches;  // W1..W4
  Linear<T> expand;                 // W5

  ChannelExcitation() = default;
  ChannelExcitation(ParamBuilder<T> pb, int64_t channels);
  /// [N,C,H,W] -> gate [N,C,1,1], every entry in (0,1).
  Tensor<T> operator()(const Tensor<T>& f) const;
};

template <typename T>
struct Smfm {
  ChannelExcitation<T> rgb, depth;

  Smfm() = default;
  Smfm(ParamBuilder<T> pb, int64_t channels);
  /// s_r * F_r + s_d * F_d with gates broadcast over H, W.
  Tensor<T> operator()(const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const;
};

struct SsmConfig {
  int64_t expand = 2;       // E = expand * C
  int64_t state = 4;        // S
  int64_t conv_kernel = 4;  // causal depthwise conv over tokens
  double init_decay = 0.9;  // exp(delta * A) at initialisation for the first state
};

/// W_down( SSM(SiLU(Conv(W_up F))) * SiLU(W_up F) ) on tokens [N,L,C].
template <typename T>
struct SsmGatedBlock {
  Linear<T> up, down;            // C -> E, E -> C, no bias
  Tensor<T> conv_w, conv_b;      // [E,K], [E]
  Linear<T> dt_proj;             // E -> E (step size, through softplus)
  Linear<T> b_proj, c_proj;      // E -> S
  Tensor<T> a_raw;               // [E,S]; A = -softplus(a_raw)

  SsmGatedBlock() = default;
  SsmGatedBlock(ParamBuilder<T> pb, int64_t channels, const SsmConfig& cfg);
  Tensor<T> operator()(const Tensor<T>& f) const;
  /// The diagonal state matrix, strictly negative.
  Tensor<T> state_matrix() const { return neg(softplus(a_raw)); }
};

template <typename T>
struct Btmfm {
  Smfm<T> smfm;
  MultiHeadAttention<T> mha;
  LayerNorm<T> attn_norm;
  SsmGatedBlock<T> ssm;
  Mlp<T> mlp;
  LayerNorm<T> ffn_norm;

  Btmfm() = default;
  Btmfm(ParamBuilder<T> pb, int64_t channels, int64_t heads, const SsmConfig& ssm_cfg);

  /// LN(F + MHA(F)) on tokens [N,L,C].
  Tensor<T> mha_residual(const Tensor<T>& tokens) const;
  /// LN(F + MLP(F)) on tokens [N,L,C].
  Tensor<T> ffn_residual(const Tensor<T>& tokens) const;
  /// [N,C,h,w] x 2 -> [N,C,h,w].
  Tensor<T> operator()(const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const;
};

/// Row-major raster flattening [N,C,h,w] <-> [N,h*w,C].
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x);
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, int64_t h, int64_t w);

}  // namespace hdc
