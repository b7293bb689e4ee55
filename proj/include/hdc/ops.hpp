#pragma once

// Differentiable primitive ops. Each is a pure function of its inputs; when
// a GradTape<T> is active and an input requires grad, the op records its
// backward closure on that tape.

#include <type_traits>
#include <vector>

#include "hdc/tape.hpp"
#include "hdc/tensor.hpp"

namespace hdc {

// Elementwise arithmetic with trailing-dimension broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, std::type_identity_t<T> s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, std::type_identity_t<T> s);
template <typename T> Tensor<T> neg(const Tensor<T>& a) { return mul_scalar(a, T(-1)); }
/// 1 - a
template <typename T> Tensor<T> one_minus(const Tensor<T>& a) { return add_scalar(neg(a), T(1)); }

// Pointwise nonlinearities.
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
/// Exact (erf) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);

// Reductions to a rank-0 scalar.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// Layout.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t length);
/// torch.roll semantics: out[i] = x[(i - shift) mod n] along `axis`.
template <typename T> Tensor<T> roll(const Tensor<T>& x, int axis, int64_t shift);
/// [N,C,H,W] -> [N,C*r,H,W], channel k copied to k*r .. k*r+r-1.
template <typename T> Tensor<T> repeat_channels(const Tensor<T>& x, int64_t repeats);
/// Replicate-pads the bottom and right edges of an [N,C,H,W] tensor.
template <typename T> Tensor<T> pad_replicate(const Tensor<T>& x, int64_t bottom, int64_t right);

// Dense layers.
/// x[..., in] * W[out, in]^T + b[out]; b may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
/// Batched matmul of rank-3 tensors: op(a)[B,M,K] * op(b)[B,K,N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false);
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
/// Normalizes over the last axis; gamma/beta may be undefined.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int64_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5);

// Convolution.
struct Conv2dOptions {
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t groups = 1;
};
/// x[N,Cin,H,W], w[Cout,Cin/groups,kh,kw], bias[Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Conv2dOptions opt = {});
/// Depthwise causal convolution over the token axis: x[N,L,E], w[E,K], b[E].
template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Pooling.
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T> Tensor<T> global_max_pool(const Tensor<T>& x);
template <typename T> Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int64_t out_h, int64_t out_w);
template <typename T> Tensor<T> channel_mean(const Tensor<T>& x);
template <typename T> Tensor<T> channel_max(const Tensor<T>& x);

// Resampling.
template <typename T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);
/// Half-pixel-centred bilinear upsampling (align_corners = false).
template <typename T> Tensor<T> upsample_bilinear2x(const Tensor<T>& x);

/// Image-space derivative of [N,C,H,W] along axis 2 (rows) or 3 (columns):
/// central differences inside, one-sided differences on the border.
template <typename T> Tensor<T> spatial_gradient(const Tensor<T>& x, int axis);

/// Diagonal selective scan: h_t = exp(delta_t * A) h_{t-1} + delta_t B_t x_t, y_t = C_t h_t.
/// x, delta: [N,L,E]; a: [E,S]; b, c: [N,L,S].
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c);

namespace testing {
/// Makes selective_scan drop the recurrence carry. Only for exercising the
/// verification harness; never enabled in normal operation.
void set_scan_fault(bool enabled);
bool scan_fault();
}  // namespace testing

}  // namespace hdc
