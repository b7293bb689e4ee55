#pragma once

// Compute kernels behind the differentiable ops. Every kernel exists twice:
// `serial` is the plain reference kept for testing, `parallel` is the OpenMP
// version the ops dispatch to. Parallel kernels only split work over
// independent outputs and reduce shared gradients in a fixed order, so their
// results do not depend on the thread count. Forward kernels also match the
// serial ones bit for bit; backward kernels sum in a different order and agree
// to rounding.

#include <cstdint>
#include <span>

namespace hdc::kernels {

struct GemmDims {
  int64_t m = 0, n = 0, k = 0;
  bool trans_a = false;  // A stored [k, m] instead of [m, k]
  bool trans_b = false;  // B stored [n, k] instead of [k, n]
};

struct ConvGeometry {
  int64_t batch = 0, in_channels = 0, in_h = 0, in_w = 0;
  int64_t out_channels = 0, kernel_h = 0, kernel_w = 0;
  int64_t stride = 1, pad = 0, groups = 1;

  int64_t out_h() const { return (in_h + 2 * pad - kernel_h) / stride + 1; }
  int64_t out_w() const { return (in_w + 2 * pad - kernel_w) / stride + 1; }
  int64_t in_per_group() const { return in_channels / groups; }
  int64_t out_per_group() const { return out_channels / groups; }
};

struct ScanDims {
  int64_t batch = 0, length = 0, channels = 0, state = 0;
};

/// Inputs of the diagonal selective scan; all row-major.
/// x, delta: [batch, length, channels]; a: [channels, state];
/// b, c: [batch, length, state].
template <typename T>
struct ScanInputs {
  std::span<const T> x, delta, a, b, c;
};

template <typename T>
struct ScanGrads {
  std::span<T> x, delta, a, b, c;  // accumulated into
};

namespace serial {

// C (+)= op(A) * op(B); C is [m, n].
template <typename T>
void gemm(const GemmDims& d, const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

// Any of dx / dw / dbias may be null; results are accumulated.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* dbias);

// Writes y [batch, length, channels] and hidden states [batch, length, channels, state].
template <typename T>
void selective_scan_forward(const ScanDims& d, const ScanInputs<T>& in, T* y, T* states);

template <typename T>
void selective_scan_backward(const ScanDims& d, const ScanInputs<T>& in, const T* states,
                             const T* dy, const ScanGrads<T>& grads);

}  // namespace serial

namespace parallel {

// C (+)= op(A) * op(B); C is [m, n].
template <typename T>
void gemm(const GemmDims& d, const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

// Any of dx / dw / dbias may be null; results are accumulated.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* dbias);

// Writes y [batch, length, channels] and hidden states [batch, length, channels, state].
template <typename T>
void selective_scan_forward(const ScanDims& d, const ScanInputs<T>& in, T* y, T* states);

template <typename T>
void selective_scan_backward(const ScanDims& d, const ScanInputs<T>& in, const T* states,
                             const T* dy, const ScanGrads<T>& grads);

}  // namespace parallel

/// Caps the OpenMP team size used by `parallel` kernels (0 = runtime default).
void set_max_threads(int threads);
int max_threads();

}  // namespace hdc::kernels
