#include "hdc/decoder.hpp"

namespace hdc {

template <typename T>
Tensor<T> align_shallow(const Tensor<T>& shallow, int64_t channels, int64_t h, int64_t w) {
  if (shallow.rank() != 4 || shallow.dim(1) * 2 != channels || shallow.dim(2) != 2 * h ||
      shallow.dim(3) != 2 * w)
    throw ShapeError("align_shallow: shallow feature " + shape_str(shallow.shape()) +
                     " must have half of " + std::to_string(channels) + " channels and twice " +
                     std::to_string(h) + "x" + std::to_string(w) + " spatial size");
  return repeat_channels(adaptive_avg_pool(shallow, h, w), 2);
}

template <typename T>
DownFusion<T>::DownFusion(ParamBuilder<T> pb, int64_t channels, int64_t reduction)
    : spatial(pb.sub("spatial"), 2, 1, 7, Conv2dOptions{1, 3, 1}),
      weight_dw(pb.sub("weight_dw"), 2 * channels, 2 * channels, 3, Conv2dOptions{1, 1, 2 * channels}),
      weight_pw(pb.sub("weight_pw"), 2 * channels, channels, 1),
      out_deep(pb.sub("out_deep"), channels, channels, 1),
      out_shallow(pb.sub("out_shallow"), channels, channels, 1) {
  if (reduction < 1 || channels % reduction != 0)
    throw ShapeError("down fusion: channels " + std::to_string(channels) +
                     " not divisible by reduction ratio " + std::to_string(reduction));
  channel_reduce = Conv2d<T>(pb.sub("channel_reduce"), channels, channels / reduction, 1);
  channel_expand = Conv2d<T>(pb.sub("channel_expand"), channels / reduction, channels, 1);
}

template <typename T>
Tensor<T> DownFusion<T>::spatial_attention(const Tensor<T>& f) const {
  return spatial(concat<T>({channel_max(f), channel_mean(f)}, 1));
}

template <typename T>
Tensor<T> DownFusion<T>::channel_attention(const Tensor<T>& f) const {
  return channel_expand(relu(channel_reduce(global_avg_pool(f))));
}

template <typename T>
Tensor<T> DownFusion<T>::operator()(const Tensor<T>& deep, const Tensor<T>& shallow,
                                    DownFusionTrace<T>* trace) const {
  if (deep.rank() != 4) throw ShapeError("down fusion: expected [N,C,h,w], got " + shape_str(deep.shape()));
  const Tensor<T> aligned = align_shallow(shallow, deep.dim(1), deep.dim(2), deep.dim(3));
  if (aligned.dim(0) != deep.dim(0))
    throw ShapeError("down fusion: batch mismatch " + shape_str(deep.shape()) + " vs " +
                     shape_str(shallow.shape()));
  const Tensor<T> merged = add(deep, aligned);
  const Tensor<T> attention = add(channel_attention(merged), spatial_attention(merged));
  const Tensor<T> weight = sigmoid(weight_pw(weight_dw(concat<T>({attention, merged}, 1))));
  const Tensor<T> blended =
      add(out_deep(mul(weight, deep)), out_shallow(mul(one_minus(weight), aligned)));
  if (trace) *trace = {aligned, merged, weight, blended};
  return add(blended, merged);
}

template <typename T>
Decoder<T>::Decoder(ParamBuilder<T> pb, int64_t base_channels, int num_stages, const DecoderConfig& cfg)
    : cfg_(cfg), base_channels_(base_channels), num_stages_(num_stages) {
  for (int s = 0; s < num_stages; ++s) {
    const int64_t c = base_channels << s;
    const std::string tag = "level" + std::to_string(s + 1);
    fusions_.push_back(s > 0 ? DownFusion<T>(pb.sub(tag).sub("fusion"), c, cfg.attention_reduction)
                             : DownFusion<T>());
    if (s + 1 < num_stages)
      up_convs_.emplace_back(pb.sub(tag).sub("up_conv"), c << 1, c, 3, Conv2dOptions{1, 1, 1});
  }
  head_mid_ = Conv2d<T>(pb.sub("head").sub("mid"), base_channels, base_channels, 3, Conv2dOptions{1, 1, 1});
  // The prediction starts as a flat map at the depth prior.
  auto out = pb.sub("head").sub("out");
  head_out_.weight = out.param("weight", {1, base_channels, 3, 3}, Init::zeros());
  head_out_.bias = out.param("bias", {1}, Init::constant(inverse_softplus(cfg.depth_prior - cfg.min_depth)));
  head_out_.opt = Conv2dOptions{1, 1, 1};
}

template <typename T>
Tensor<T> Decoder<T>::upsample(const Tensor<T>& x) const {
  return cfg_.upsample == UpsampleMode::Bilinear ? upsample_bilinear2x(x) : upsample_nearest2x(x);
}

template <typename T>
Tensor<T> Decoder<T>::operator()(const std::vector<Tensor<T>>& skips, const Tensor<T>& bottleneck) const {
  const int n = num_stages_;
  if (static_cast<int>(skips.size()) != n - 1)
    throw ShapeError("decode: expected " + std::to_string(n - 1) + " skip features, got " +
                     std::to_string(skips.size()));
  for (int s = 0; s + 1 < n; ++s) {
    const auto& k = skips[static_cast<size_t>(s)];
    const auto& ref = s == 0 ? k : skips[0];
    if (k.rank() != 4 || k.dim(1) != (base_channels_ << s) || k.dim(2) != ref.dim(2) >> s ||
        k.dim(3) != ref.dim(3) >> s)
      throw ShapeError("decode: skip " + std::to_string(s + 1) + " has inconsistent shape " +
                       shape_str(k.shape()));
  }
  const auto& first = n > 1 ? skips[0] : bottleneck;
  if (bottleneck.rank() != 4 || bottleneck.dim(1) != (base_channels_ << (n - 1)) ||
      bottleneck.dim(2) != first.dim(2) >> (n - 1) || bottleneck.dim(3) != first.dim(3) >> (n - 1))
    throw ShapeError("decode: bottleneck has inconsistent shape " + shape_str(bottleneck.shape()));

  Tensor<T> x = bottleneck;
  for (int s = n - 1; s >= 0; --s) {
    if (s < n - 1) {
      x = relu(up_convs_[static_cast<size_t>(s)](upsample(x)));
      x = add(x, skips[static_cast<size_t>(s)]);
    }
    if (s > 0) x = fusions_[static_cast<size_t>(s)](x, skips[static_cast<size_t>(s - 1)]);
  }
  x = relu(head_mid_(upsample(x)));
  return add_scalar(softplus(head_out_(upsample(x))), static_cast<T>(cfg_.min_depth));
}

template Tensor<float> align_shallow(const Tensor<float>&, int64_t, int64_t, int64_t);
template Tensor<double> align_shallow(const Tensor<double>&, int64_t, int64_t, int64_t);
template struct DownFusion<float>;
template struct DownFusion<double>;
template class Decoder<float>;
template class Decoder<double>;

}  // namespace hdc
