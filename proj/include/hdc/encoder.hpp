#pragma once

#include <vector>

#include "hdc/layers.hpp"

namespace hdc {

struct EncoderConfig {
  int64_t base_channels = 24;
  int num_stages = 4;
  int64_t window_size = 4;
  int64_t heads = 2;  // stage 1; doubles every stage
  int blocks_per_stage = 2;
  bool rgbd_input = true;  // false: the attention branch sees RGB only

  int64_t stage_channels(int stage) const { return base_channels << stage; }
  int64_t stage_heads(int stage) const { return heads << stage; }
  /// Spatial stride of the deepest stage relative to the input.
  int64_t stride_product() const { return int64_t{4} << (num_stages - 1); }
  void validate() const;
};

/// Per-stage features of both branches; stage i has C*2^i channels at stride 4*2^i.
template <typename T>
struct FeaturePyramid {
  std::vector<Tensor<T>> rgb;
  std::vector<Tensor<T>> depth;
};

struct WindowShape {
  int64_t h = 1, w = 1;
};

/// Largest window no bigger than `window` per axis that tiles an h x w grid exactly.
WindowShape fit_window(int64_t h, int64_t w, int64_t window);

/// Non-overlapping 4x4 patch projection, [N,Cin,H,W] -> [N,C,H/4,W/4].
template <typename T>
struct PatchEmbed {
  Conv2d<T> proj;

  PatchEmbed() = default;
  PatchEmbed(ParamBuilder<T> pb, int64_t in_channels, int64_t channels);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// LN -> windowed MHSA -> residual -> LN -> MLP -> residual, on [N,C,h,w].
/// Shifted blocks cyclically offset the window grid by half a window and
/// mask attention between pixels that were not adjacent before the shift.
template <typename T>
struct WindowAttentionBlock {
  int64_t window_size = 4;
  bool shifted = false;
  LayerNorm<T> norm1, norm2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;

  WindowAttentionBlock() = default;
  WindowAttentionBlock(ParamBuilder<T> pb, int64_t channels, int64_t heads, int64_t window_size,
                       bool shifted);

  /// Uses the nominal square window clamped to the map extent; throws if it does not tile.
  Tensor<T> operator()(const Tensor<T>& x, Tensor<T>* probs = nullptr) const;
  Tensor<T> forward(const Tensor<T>& x, WindowShape window, Tensor<T>* probs = nullptr) const;
};

/// Additive attention mask for a shifted window grid, [num_windows, L, L].
template <typename T>
Tensor<T> shifted_window_mask(int64_t h, int64_t w, WindowShape window, WindowShape shift);

/// 2x2 neighbourhood merge: [N,C,h,w] -> [N,2C,h/2,w/2].
template <typename T>
struct PatchMerging {
  LayerNorm<T> norm;
  Linear<T> reduce;

  PatchMerging() = default;
  PatchMerging(ParamBuilder<T> pb, int64_t channels);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Pre-activation residual block: x + conv(relu(gn(conv(relu(gn(x)))))).
template <typename T>
struct ResNetBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;

  ResNetBlock() = default;
  ResNetBlock(ParamBuilder<T> pb, int64_t channels);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
class DualEncoder {
 public:
  DualEncoder(const EncoderConfig& cfg, ParamBuilder<T> pb);

  const EncoderConfig& config() const { return cfg_; }
  /// rgb [N,3,H,W], depth [N,1,H,W] with H, W multiples of the stride product.
  FeaturePyramid<T> encode(const Tensor<T>& rgb, const Tensor<T>& depth) const;

  Tensor<T> encode_rgb(const Tensor<T>& input, std::vector<Tensor<T>>& feats) const;
  Tensor<T> encode_depth(const Tensor<T>& depth, std::vector<Tensor<T>>& feats) const;

 private:
  EncoderConfig cfg_;
  PatchEmbed<T> embed_;
  std::vector<PatchMerging<T>> merges_;                   // before stages 2..n
  std::vector<std::vector<WindowAttentionBlock<T>>> swin_;  // per stage
  Conv2d<T> stem_, stem_down_;
  std::vector<Conv2d<T>> depth_down_;                      // before stages 2..n
  std::vector<std::vector<ResNetBlock<T>>> resnet_;
};

}  // namespace hdc
