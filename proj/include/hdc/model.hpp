#pragma once

#include <string>
#include <vector>

#include "hdc/config.hpp"
#include "hdc/decoder.hpp"
#include "hdc/encoder.hpp"
#include "hdc/fusion.hpp"

namespace hdc {

struct ModelConfig {
  EncoderConfig encoder;
  SsmConfig ssm;
  DecoderConfig decoder;
  int64_t bottleneck_heads = 4;
  bool use_smfm = true;   // false: shallow stages fuse by plain addition
  bool use_btmfm = true;  // false: the bottleneck uses the shallow fusion rule
  int64_t width = 320, height = 240;

  /// C=8, 64x48, window 4, 2 heads.
  static ModelConfig desk();
  /// C=24, 320x240.
  static ModelConfig paper();
  static ModelConfig preset(const std::string& name);

  /// Height and width after padding up to a multiple of the stride product.
  int64_t padded_height() const;
  int64_t padded_width() const;
  void validate() const;

  void write(KeyValues& kv) const;
  /// Reads known keys on top of `base`; unknown keys are ignored.
  static ModelConfig read(const KeyValues& kv, const ModelConfig& base = desk());
};

/// Fused per-stage features handed to the decoder.
template <typename T>
struct FusedFeatures {
  std::vector<Tensor<T>> skips;  // stages 1..n-1
  Tensor<T> bottleneck;          // stage n
};

template <typename T>
class HdcNet {
 public:
  HdcNet(const ModelConfig& cfg, ParamBuilder<T> pb);

  const ModelConfig& config() const { return cfg_; }
  const DualEncoder<T>& encoder() const { return encoder_; }
  const Decoder<T>& decoder() const { return decoder_; }

  FusedFeatures<T> fuse(const FeaturePyramid<T>& pyramid) const;

  /// rgb [N,3,H,W] in [0,1], raw depth [N,1,H,W] in meters -> depth [N,1,H,W].
  /// Inputs whose size is not a multiple of the stride product are
  /// replicate-padded on the bottom/right and the prediction cropped back.
  Tensor<T> operator()(const Tensor<T>& rgb, const Tensor<T>& raw_depth) const;

 private:
  ModelConfig cfg_;
  DualEncoder<T> encoder_;
  std::vector<Smfm<T>> shallow_;  // empty when use_smfm is off
  Btmfm<T> btmfm_;
  Smfm<T> bottleneck_smfm_;
  Decoder<T> decoder_;
};

}  // namespace hdc
