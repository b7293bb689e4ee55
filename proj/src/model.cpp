#include "hdc/model.hpp"

#include <stdexcept>

namespace hdc {
namespace {

int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.encoder.base_channels = 8;
  c.encoder.window_size = 4;
  c.encoder.heads = 2;
  c.width = 64;
  c.height = 48;
  return c;
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.encoder.base_channels = 24;
  c.width = 320;
  c.height = 240;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw std::invalid_argument("unknown preset '" + name + "' (expected desk or paper)");
}

int64_t ModelConfig::padded_height() const { return round_up(height, encoder.stride_product()); }
int64_t ModelConfig::padded_width() const { return round_up(width, encoder.stride_product()); }

void ModelConfig::validate() const {
  encoder.validate();
  if (width < 4 || height < 4 || width % 4 != 0 || height % 4 != 0)
    throw std::invalid_argument("input size " + std::to_string(width) + "x" + std::to_string(height) +
                                " must be positive multiples of 4");
  const int64_t deep = encoder.stage_channels(encoder.num_stages - 1);
  if (bottleneck_heads < 1 || deep % bottleneck_heads != 0)
    throw std::invalid_argument("bottleneck channels " + std::to_string(deep) +
                                " not divisible by bottleneck_heads " + std::to_string(bottleneck_heads));
  if (encoder.base_channels % 4 != 0)
    throw std::invalid_argument("channels " + std::to_string(encoder.base_channels) +
                                " must be divisible by 4 for the fusion gates");
}

void ModelConfig::write(KeyValues& kv) const {
  kv.set("channels", std::to_string(encoder.base_channels));
  kv.set("stages", std::to_string(encoder.num_stages));
  kv.set("window", std::to_string(encoder.window_size));
  kv.set("heads", std::to_string(encoder.heads));
  kv.set("blocks", std::to_string(encoder.blocks_per_stage));
  kv.set("rgbd_input", encoder.rgbd_input ? "true" : "false");
  kv.set("ssm_expand", std::to_string(ssm.expand));
  kv.set("ssm_state", std::to_string(ssm.state));
  kv.set("ssm_conv", std::to_string(ssm.conv_kernel));
  kv.set("bottleneck_heads", std::to_string(bottleneck_heads));
  kv.set("use_smfm", use_smfm ? "true" : "false");
  kv.set("use_btmfm", use_btmfm ? "true" : "false");
  kv.set("upsample", decoder.upsample == UpsampleMode::Bilinear ? "bilinear" : "nearest");
  kv.set("width", std::to_string(width));
  kv.set("height", std::to_string(height));
}

ModelConfig ModelConfig::read(const KeyValues& kv, const ModelConfig& base) {
  ModelConfig c = kv.contains("preset") ? preset(*kv.get("preset")) : base;
  c.encoder.base_channels = kv.get_int("channels", c.encoder.base_channels);
  c.encoder.num_stages = static_cast<int>(kv.get_int("stages", c.encoder.num_stages));
  c.encoder.window_size = kv.get_int("window", c.encoder.window_size);
  c.encoder.heads = kv.get_int("heads", c.encoder.heads);
  c.encoder.blocks_per_stage = static_cast<int>(kv.get_int("blocks", c.encoder.blocks_per_stage));
  c.encoder.rgbd_input = kv.get_bool("rgbd_input", c.encoder.rgbd_input);
  c.ssm.expand = kv.get_int("ssm_expand", c.ssm.expand);
  c.ssm.state = kv.get_int("ssm_state", c.ssm.state);
  c.ssm.conv_kernel = kv.get_int("ssm_conv", c.ssm.conv_kernel);
  c.bottleneck_heads = kv.get_int("bottleneck_heads", c.bottleneck_heads);
  c.use_smfm = kv.get_bool("use_smfm", c.use_smfm);
  c.use_btmfm = kv.get_bool("use_btmfm", c.use_btmfm);
  const std::string up =
      kv.get_string("upsample", c.decoder.upsample == UpsampleMode::Bilinear ? "bilinear" : "nearest");
  if (up == "bilinear")
    c.decoder.upsample = UpsampleMode::Bilinear;
  else if (up == "nearest")
    c.decoder.upsample = UpsampleMode::Nearest;
  else
    throw std::invalid_argument("upsample must be bilinear or nearest, got '" + up + "'");
  c.width = kv.get_int("width", c.width);
  c.height = kv.get_int("height", c.height);
  return c;
}

template <typename T>
HdcNet<T>::HdcNet(const ModelConfig& cfg, ParamBuilder<T> pb)
    : cfg_((cfg.validate(), cfg)),
      encoder_(cfg.encoder, pb.sub("encoder")),
      decoder_(pb.sub("decoder"), cfg.encoder.base_channels, cfg.encoder.num_stages, cfg.decoder) {
  const int n = cfg_.encoder.num_stages;
  if (cfg_.use_smfm)
    for (int s = 0; s + 1 < n; ++s)
      shallow_.emplace_back(pb.sub("fusion").sub("stage" + std::to_string(s + 1)),
                            cfg_.encoder.stage_channels(s));
  const int64_t deep = cfg_.encoder.stage_channels(n - 1);
  if (cfg_.use_btmfm)
    btmfm_ = Btmfm<T>(pb.sub("bottleneck"), deep, cfg_.bottleneck_heads, cfg_.ssm);
  else if (cfg_.use_smfm)
    bottleneck_smfm_ = Smfm<T>(pb.sub("bottleneck").sub("smfm"), deep);
}

template <typename T>
FusedFeatures<T> HdcNet<T>::fuse(const FeaturePyramid<T>& p) const {
  const int n = cfg_.encoder.num_stages;
  if (static_cast<int>(p.rgb.size()) != n || static_cast<int>(p.depth.size()) != n)
    throw ShapeError("fuse: pyramid must have " + std::to_string(n) + " stages per branch");
  FusedFeatures<T> out;
  for (int s = 0; s + 1 < n; ++s) {
    const auto i = static_cast<size_t>(s);
    out.skips.push_back(cfg_.use_smfm ? shallow_[i](p.rgb[i], p.depth[i]) : add(p.rgb[i], p.depth[i]));
  }
  const auto last = static_cast<size_t>(n - 1);
  if (cfg_.use_btmfm)
    out.bottleneck = btmfm_(p.rgb[last], p.depth[last]);
  else if (cfg_.use_smfm)
    out.bottleneck = bottleneck_smfm_(p.rgb[last], p.depth[last]);
  else
    out.bottleneck = add(p.rgb[last], p.depth[last]);
  return out;
}

template <typename T>
Tensor<T> HdcNet<T>::operator()(const Tensor<T>& rgb, const Tensor<T>& raw_depth) const {
  if (rgb.rank() != 4 || raw_depth.rank() != 4)
    throw ShapeError("model: expected rgb [N,3,H,W] and depth [N,1,H,W], got " + shape_str(rgb.shape()) +
                     " and " + shape_str(raw_depth.shape()));
  const int64_t H = rgb.dim(2), W = rgb.dim(3);
  const int64_t stride = cfg_.encoder.stride_product();
  const int64_t pad_h = round_up(H, stride) - H, pad_w = round_up(W, stride) - W;
  Tensor<T> r = rgb, d = raw_depth;
  if (pad_h || pad_w) {
    if (raw_depth.dim(2) != H || raw_depth.dim(3) != W)
      throw ShapeError("model: rgb " + shape_str(rgb.shape()) + " and depth " +
                       shape_str(raw_depth.shape()) + " are not aligned");
    r = pad_replicate(rgb, pad_h, pad_w);
    d = pad_replicate(raw_depth, pad_h, pad_w);
  }
  const FusedFeatures<T> fused = fuse(encoder_.encode(r, d));
  Tensor<T> out = decoder_(fused.skips, fused.bottleneck);
  if (pad_h) out = slice(out, 2, 0, H);
  if (pad_w) out = slice(out, 3, 0, W);
  return out;
}

template class HdcNet<float>;
template class HdcNet<double>;

}  // namespace hdc
