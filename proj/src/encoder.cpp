#include "hdc/encoder.hpp"

#include <numeric>

namespace hdc {

void EncoderConfig::validate() const {
  if (base_channels < 1) throw std::invalid_argument("encoder: base_channels must be positive");
  if (num_stages < 1) throw std::invalid_argument("encoder: num_stages must be positive");
  if (window_size < 1) throw std::invalid_argument("encoder: window_size must be positive");
  if (blocks_per_stage < 0) throw std::invalid_argument("encoder: blocks_per_stage must be >= 0");
  if (heads < 1 || base_channels % heads != 0)
    throw std::invalid_argument("encoder: base_channels " + std::to_string(base_channels) +
                                " not divisible by heads " + std::to_string(heads));
}

WindowShape fit_window(int64_t h, int64_t w, int64_t window) {
  auto fit = [window](int64_t extent) {
    for (int64_t k = std::min(window, extent); k > 1; --k)
      if (extent % k == 0) return k;
    return int64_t{1};
  };
  return {fit(h), fit(w)};
}

template <typename T>
PatchEmbed<T>::PatchEmbed(ParamBuilder<T> pb, int64_t in_channels, int64_t channels)
    : proj(pb.sub("proj"), in_channels, channels, 4, Conv2dOptions{4, 0, 1}) {}

template <typename T>
Tensor<T> PatchEmbed<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0)
    throw ShapeError("patch_embed: spatial dimensions of " + shape_str(x.shape()) +
                     " must be divisible by 4");
  return proj(x);
}

template <typename T>
WindowAttentionBlock<T>::WindowAttentionBlock(ParamBuilder<T> pb, int64_t channels, int64_t heads,
                                              int64_t window_size_, bool shifted_)
    : window_size(window_size_),
      shifted(shifted_),
      norm1(pb.sub("norm1"), channels),
      norm2(pb.sub("norm2"), channels),
      attn(pb.sub("attn"), channels, heads),
      mlp(pb.sub("mlp"), channels, 4 * channels) {}

template <typename T>
Tensor<T> WindowAttentionBlock<T>::operator()(const Tensor<T>& x, Tensor<T>* probs) const {
  if (x.rank() != 4) throw ShapeError("window attention: expected [N,C,h,w], got " + shape_str(x.shape()));
  const WindowShape win{std::min(window_size, x.dim(2)), std::min(window_size, x.dim(3))};
  return forward(x, win, probs);
}

template <typename T>
Tensor<T> shifted_window_mask(int64_t h, int64_t w, WindowShape win, WindowShape shift) {
  // Label the three bands per axis that the cyclic shift glues together.
  auto band = [](int64_t i, int64_t extent, int64_t window, int64_t s) {
    if (s == 0) return 0;
    if (i < extent - window) return 0;
    if (i < extent - s) return 1;
    return 2;
  };
  const int64_t nh = h / win.h, nw = w / win.w, L = win.h * win.w;
  Tensor<T> mask({nh * nw, L, L});
  std::vector<int> label(static_cast<size_t>(L));
  for (int64_t wy = 0; wy < nh; ++wy)
    for (int64_t wx = 0; wx < nw; ++wx) {
      for (int64_t i = 0; i < win.h; ++i)
        for (int64_t j = 0; j < win.w; ++j)
          label[static_cast<size_t>(i * win.w + j)] =
              band(wy * win.h + i, h, win.h, shift.h) * 3 + band(wx * win.w + j, w, win.w, shift.w);
      T* m = mask.ptr() + (wy * nw + wx) * L * L;
      for (int64_t a = 0; a < L; ++a)
        for (int64_t b = 0; b < L; ++b)
          m[a * L + b] = label[static_cast<size_t>(a)] == label[static_cast<size_t>(b)] ? T(0) : T(-100);
    }
  return mask;
}

template <typename T>
Tensor<T> WindowAttentionBlock<T>::forward(const Tensor<T>& x, WindowShape win, Tensor<T>* probs) const {
  if (x.rank() != 4) throw ShapeError("window attention: expected [N,C,h,w], got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (win.h < 1 || win.w < 1 || h % win.h != 0 || w % win.w != 0)
    throw ShapeError("window attention: " + std::to_string(h) + "x" + std::to_string(w) +
                     " map cannot be tiled by " + std::to_string(win.h) + "x" +
                     std::to_string(win.w) + " windows");
  const WindowShape shift{shifted && win.h < h ? win.h / 2 : 0, shifted && win.w < w ? win.w / 2 : 0};
  const int64_t nh = h / win.h, nw = w / win.w, L = win.h * win.w;

  Tensor<T> t = permute(x, {0, 2, 3, 1});  // [N,h,w,C]
  Tensor<T> u = norm1(t);
  if (shift.h) u = roll(u, 1, -shift.h);
  if (shift.w) u = roll(u, 2, -shift.w);
  Tensor<T> windows = reshape(permute(reshape(u, {N, nh, win.h, nw, win.w, C}), {0, 1, 3, 2, 4, 5}),
                              {N * nh * nw, L, C});
  Tensor<T> mask;
  if (shift.h || shift.w) mask = shifted_window_mask<T>(h, w, win, shift);
  Tensor<T> a = attn(windows, mask.defined() ? &mask : nullptr, probs);
  a = reshape(permute(reshape(a, {N, nh, nw, win.h, win.w, C}), {0, 1, 3, 2, 4, 5}), {N, h, w, C});
  if (shift.h) a = roll(a, 1, shift.h);
  if (shift.w) a = roll(a, 2, shift.w);
  t = add(t, a);
  t = add(t, mlp(norm2(t)));
  return permute(t, {0, 3, 1, 2});
}

template <typename T>
PatchMerging<T>::PatchMerging(ParamBuilder<T> pb, int64_t channels)
    : norm(pb.sub("norm"), 4 * channels), reduce(pb.sub("reduce"), 4 * channels, 2 * channels, false) {}

template <typename T>
Tensor<T> PatchMerging<T>::operator()(const Tensor<T>& x) const {
  const int64_t N = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("patch merging: odd spatial size " + shape_str(x.shape()));
  Tensor<T> t = permute(x, {0, 2, 3, 1});
  t = reshape(permute(reshape(t, {N, h / 2, 2, w / 2, 2, C}), {0, 1, 3, 2, 4, 5}), {N, h / 2, w / 2, 4 * C});
  t = reduce(norm(t));
  return permute(t, {0, 3, 1, 2});
}

template <typename T>
ResNetBlock<T>::ResNetBlock(ParamBuilder<T> pb, int64_t channels)
    : norm1(pb.sub("norm1"), channels, std::gcd(channels, int64_t{4})),
      norm2(pb.sub("norm2"), channels, std::gcd(channels, int64_t{4})),
      conv1(pb.sub("conv1"), channels, channels, 3, Conv2dOptions{1, 1, 1}),
      conv2(pb.sub("conv2"), channels, channels, 3, Conv2dOptions{1, 1, 1}) {}

template <typename T>
Tensor<T> ResNetBlock<T>::operator()(const Tensor<T>& x) const {
  const Tensor<T> r = conv2(relu(norm2(conv1(relu(norm1(x))))));
  return add(x, r);
}

template <typename T>
DualEncoder<T>::DualEncoder(const EncoderConfig& cfg, ParamBuilder<T> pb) : cfg_(cfg) {
  cfg_.validate();
  auto rgb = pb.sub("rgb");
  auto dep = pb.sub("depth");
  embed_ = PatchEmbed<T>(rgb.sub("embed"), cfg_.rgbd_input ? 4 : 3, cfg_.base_channels);
  stem_ = Conv2d<T>(dep.sub("stem"), 1, cfg_.base_channels, 3, Conv2dOptions{1, 1, 1});
  stem_down_ = Conv2d<T>(dep.sub("stem_down"), cfg_.base_channels, cfg_.base_channels, 4,
                         Conv2dOptions{4, 0, 1});
  for (int s = 0; s < cfg_.num_stages; ++s) {
    const int64_t c = cfg_.stage_channels(s);
    const std::string tag = "stage" + std::to_string(s + 1);
    if (s > 0) {
      merges_.emplace_back(rgb.sub(tag).sub("merge"), cfg_.stage_channels(s - 1));
      depth_down_.emplace_back(dep.sub(tag).sub("down"), cfg_.stage_channels(s - 1), c, 2,
                               Conv2dOptions{2, 0, 1});
    }
    std::vector<WindowAttentionBlock<T>> sw;
    std::vector<ResNetBlock<T>> rn;
    for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
      const std::string bt = "block" + std::to_string(b);
      sw.emplace_back(rgb.sub(tag).sub(bt), c, cfg_.stage_heads(s), cfg_.window_size, b % 2 == 1);
      rn.emplace_back(dep.sub(tag).sub(bt), c);
    }
    swin_.push_back(std::move(sw));
    resnet_.push_back(std::move(rn));
  }
}

template <typename T>
Tensor<T> DualEncoder<T>::encode_rgb(const Tensor<T>& input, std::vector<Tensor<T>>& feats) const {
  Tensor<T> x = embed_(input);
  for (int s = 0; s < cfg_.num_stages; ++s) {
    if (s > 0) x = merges_[static_cast<size_t>(s - 1)](x);
    const WindowShape win = fit_window(x.dim(2), x.dim(3), cfg_.window_size);
    for (const auto& blk : swin_[static_cast<size_t>(s)]) x = blk.forward(x, win);
    feats.push_back(x);
  }
  return x;
}

template <typename T>
Tensor<T> DualEncoder<T>::encode_depth(const Tensor<T>& depth, std::vector<Tensor<T>>& feats) const {
  Tensor<T> x = stem_down_(relu(stem_(depth)));
  for (int s = 0; s < cfg_.num_stages; ++s) {
    if (s > 0) x = depth_down_[static_cast<size_t>(s - 1)](x);
    for (const auto& blk : resnet_[static_cast<size_t>(s)]) x = blk(x);
    feats.push_back(x);
  }
  return x;
}

template <typename T>
FeaturePyramid<T> DualEncoder<T>::encode(const Tensor<T>& rgb, const Tensor<T>& depth) const {
  if (rgb.rank() != 4 || rgb.dim(1) != 3)
    throw ShapeError("encode: rgb must be [N,3,H,W], got " + shape_str(rgb.shape()));
  if (depth.rank() != 4 || depth.dim(1) != 1)
    throw ShapeError("encode: depth must be [N,1,H,W], got " + shape_str(depth.shape()));
  if (rgb.dim(0) != depth.dim(0) || rgb.dim(2) != depth.dim(2) || rgb.dim(3) != depth.dim(3))
    throw ShapeError("encode: rgb " + shape_str(rgb.shape()) + " and depth " +
                     shape_str(depth.shape()) + " are not aligned");
  const int64_t stride = cfg_.stride_product();
  if (rgb.dim(2) % stride != 0 || rgb.dim(3) % stride != 0)
    throw ShapeError("encode: input " + std::to_string(rgb.dim(3)) + "x" + std::to_string(rgb.dim(2)) +
                     " must be divisible by " + std::to_string(stride) + " in both dimensions");
  FeaturePyramid<T> out;
  encode_rgb(cfg_.rgbd_input ? concat<T>({rgb, depth}, 1) : rgb, out.rgb);
  encode_depth(depth, out.depth);
  return out;
}

template struct PatchEmbed<float>;
template struct PatchEmbed<double>;
template struct WindowAttentionBlock<float>;
template struct WindowAttentionBlock<double>;
template struct PatchMerging<float>;
template struct PatchMerging<double>;
template struct ResNetBlock<float>;
template struct ResNetBlock<double>;
template class DualEncoder<float>;
template class DualEncoder<double>;
template Tensor<float> shifted_window_mask<float>(int64_t, int64_t, WindowShape, WindowShape);
template Tensor<double> shifted_window_mask<double>(int64_t, int64_t, WindowShape, WindowShape);

}  // namespace hdc
