#pragma once

#include <vector>

#include "hdc/layers.hpp"

namespace hdc {

enum class UpsampleMode { Nearest, Bilinear };

struct DecoderConfig {
  UpsampleMode upsample = UpsampleMode::Bilinear;
  int64_t attention_reduction = 4;
  double depth_prior = 1.0;  // initial output level in meters, via the head bias
  double min_depth = 1e-4;   // added after softplus, which underflows to 0 in float
};

/// Pool a shallower [N,C/2,2h,2w] feature to [N,C/2,h,w] and duplicate each
/// channel in place (k -> 2k, 2k+1) to reach C channels.
template <typename T>
Tensor<T> align_shallow(const Tensor<T>& shallow, int64_t channels, int64_t h, int64_t w);

/// Intermediate maps of one down-fusion pass, for inspection.
template <typename T>
struct DownFusionTrace {
  Tensor<T> aligned;  // F^
  Tensor<T> merged;   // F = F_i + F^
  Tensor<T> weight;   // W
  Tensor<T> blended;  // F'
};

template <typename T>
struct DownFusion {
  Conv2d<T> spatial;                  // 7x7, [max, mean] -> 1
  Conv2d<T> channel_reduce, channel_expand;  // 1x1, C -> C/r -> C
  Conv2d<T> weight_dw, weight_pw;     // depthwise 3x3 on 2C, then 1x1 2C -> C
  Conv2d<T> out_deep, out_shallow;    // 1x1 C -> C

  DownFusion() = default;
  DownFusion(ParamBuilder<T> pb, int64_t channels, int64_t reduction = 4);

  /// Pre-sigmoid spatial map [N,1,h,w].
  Tensor<T> spatial_attention(const Tensor<T>& f) const;
  /// Pre-sigmoid channel vector [N,C,1,1].
  Tensor<T> channel_attention(const Tensor<T>& f) const;
  /// deep [N,C,h,w], shallow [N,C/2,2h,2w] -> [N,C,h,w].
  Tensor<T> operator()(const Tensor<T>& deep, const Tensor<T>& shallow,
                       DownFusionTrace<T>* trace = nullptr) const;
};

/// Bottleneck-to-full-resolution decoder. Skips are the fused stage features
/// S_1..S_{n-1}; the bottleneck is the fused deepest stage.
template <typename T>
class Decoder {
 public:
  Decoder(ParamBuilder<T> pb, int64_t base_channels, int num_stages, const DecoderConfig& cfg);

  /// Returns strictly positive depth [N,1,4*h1,4*w1] where h1 x w1 is the first skip's size.
  Tensor<T> operator()(const std::vector<Tensor<T>>& skips, const Tensor<T>& bottleneck) const;

 private:
  Tensor<T> upsample(const Tensor<T>& x) const;

  DecoderConfig cfg_;
  int64_t base_channels_;
  int num_stages_;
  std::vector<DownFusion<T>> fusions_;  // index s fuses stage s with stage s-1, s >= 1
  std::vector<Conv2d<T>> up_convs_;     // index s maps stage s+1 channels to stage s
  Conv2d<T> head_mid_, head_out_;
};

}  // namespace hdc
