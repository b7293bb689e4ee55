#include "hdc/fusion.hpp"

#include <cmath>

namespace hdc {
namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

template <typename T>
ChannelExcitation<T>::ChannelExcitation(ParamBuilder<T> pb, int64_t channels) {
  if (channels % 4 != 0)
    throw ShapeError("channel excitation: channel count " + std::to_string(channels) +
                     " must be divisible by 4");
  for (int k = 0; k < 4; ++k)
    branches.emplace_back(pb.sub("w" + std::to_string(k + 1)), channels, channels / 4);
  expand = Linear<T>(pb.sub("w5"), channels, channels);
}

template <typename T>
Tensor<T> ChannelExcitation<T>::operator()(const Tensor<T>& f) const {
  if (f.rank() != 4) throw ShapeError("channel excitation: expected [N,C,H,W], got " + shape_str(f.shape()));
  const int64_t N = f.dim(0), C = f.dim(1);
  const Tensor<T> z = reshape(global_avg_pool(f), {N, C});
  std::vector<Tensor<T>> squeezed;
  for (const auto& w : branches) squeezed.push_back(relu(w(z)));
  const Tensor<T> s = sigmoid(expand(concat(squeezed, 1)));
  return reshape(s, {N, C, 1, 1});
}

template <typename T>
Smfm<T>::Smfm(ParamBuilder<T> pb, int64_t channels)
    : rgb(pb.sub("rgb"), channels), depth(pb.sub("depth"), channels) {}

template <typename T>
Tensor<T> Smfm<T>::operator()(const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const {
  require_same(f_rgb.shape(), f_depth.shape(), "smfm");
  return add(mul(rgb(f_rgb), f_rgb), mul(depth(f_depth), f_depth));
}

template <typename T>
SsmGatedBlock<T>::SsmGatedBlock(ParamBuilder<T> pb, int64_t channels, const SsmConfig& cfg) {
  if (cfg.expand < 1) throw std::invalid_argument("ssm: expansion factor must be >= 1");
  if (cfg.state < 1 || cfg.conv_kernel < 1) throw std::invalid_argument("ssm: state and kernel must be >= 1");
  const int64_t E = cfg.expand * channels, S = cfg.state;
  up = Linear<T>(pb.sub("up"), channels, E, false);
  conv_w = pb.param("conv.weight", {E, cfg.conv_kernel}, Init::kaiming(cfg.conv_kernel));
  conv_b = pb.param("conv.bias", {E}, Init::zeros());
  // Step size starts at -ln(init_decay) so exp(delta * A) = init_decay for A = -1.
  dt_proj.weight = pb.param("dt.weight", {E, E}, Init::trunc_normal());
  dt_proj.bias = pb.param("dt.bias", {E}, Init::constant(inverse_softplus(-std::log(cfg.init_decay))));
  b_proj = Linear<T>(pb.sub("b"), E, S, false);
  c_proj = Linear<T>(pb.sub("c"), E, S, false);
  // A[e, s] = -(s + 1) at initialisation.
  a_raw = pb.param("a_raw", {E, S}, Init::pattern([S](int64_t i) {
                     return inverse_softplus(static_cast<double>(i % S + 1));
                   }));
  down = Linear<T>(pb.sub("down"), E, channels, false);
}

template <typename T>
Tensor<T> SsmGatedBlock<T>::operator()(const Tensor<T>& f) const {
  if (f.rank() != 3) throw ShapeError("ssm block: expected tokens [N,L,C], got " + shape_str(f.shape()));
  const Tensor<T> u = up(f);
  const Tensor<T> v = silu(causal_conv1d(u, conv_w, conv_b));
  const Tensor<T> delta = softplus(dt_proj(v));
  const Tensor<T> y = selective_scan(v, delta, state_matrix(), b_proj(v), c_proj(v));
  return down(mul(y, silu(u)));
}

template <typename T>
Btmfm<T>::Btmfm(ParamBuilder<T> pb, int64_t channels, int64_t heads, const SsmConfig& ssm_cfg)
    : smfm(pb.sub("smfm"), channels),
      mha(pb.sub("mha"), channels, heads),
      attn_norm(pb.sub("attn_norm"), channels),
      ssm(pb.sub("ssm"), channels, ssm_cfg),
      mlp(pb.sub("mlp"), channels, 4 * channels),
      ffn_norm(pb.sub("ffn_norm"), channels) {}

template <typename T>
Tensor<T> Btmfm<T>::mha_residual(const Tensor<T>& tokens) const {
  return attn_norm(add(tokens, mha(tokens)));
}

template <typename T>
Tensor<T> Btmfm<T>::ffn_residual(const Tensor<T>& tokens) const {
  return ffn_norm(add(tokens, mlp(tokens)));
}

template <typename T>
Tensor<T> Btmfm<T>::operator()(const Tensor<T>& f_rgb, const Tensor<T>& f_depth) const {
  require_same(f_rgb.shape(), f_depth.shape(), "btmfm");
  const int64_t h = f_rgb.dim(2), w = f_rgb.dim(3);
  Tensor<T> t = to_tokens(smfm(f_rgb, f_depth));
  t = mha_residual(t);
  t = add(t, ssm(t));
  t = ffn_residual(t);
  return from_tokens(t, h, w);
}

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("to_tokens: expected [N,C,h,w], got " + shape_str(x.shape()));
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, int64_t h, int64_t w) {
  if (tokens.rank() != 3 || tokens.dim(1) != h * w)
    throw ShapeError("from_tokens: " + shape_str(tokens.shape()) + " does not hold " +
                     std::to_string(h) + "x" + std::to_string(w) + " tokens");
  return permute(reshape(tokens, {tokens.dim(0), h, w, tokens.dim(2)}), {0, 3, 1, 2});
}

template struct ChannelExcitation<float>;
template struct ChannelExcitation<double>;
template struct Smfm<float>;
template struct Smfm<double>;
template struct SsmGatedBlock<float>;
template struct SsmGatedBlock<double>;
template struct Btmfm<float>;
template struct Btmfm<double>;
template Tensor<float> to_tokens(const Tensor<float>&);
template Tensor<double> to_tokens(const Tensor<double>&);
template Tensor<float> from_tokens(const Tensor<float>&, int64_t, int64_t);
template Tensor<double> from_tokens(const Tensor<double>&, int64_t, int64_t);

}  // namespace hdc
