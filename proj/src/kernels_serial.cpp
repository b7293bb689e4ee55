#include <cmath>
#include <vector>

#include "hdc/kernels.hpp"

namespace hdc::kernels::serial {

template <typename T>
void gemm(const GemmDims& d, const T* a, const T* b, T* c, bool accumulate) {
  for (int64_t i = 0; i < d.m; ++i) {
    for (int64_t j = 0; j < d.n; ++j) {
      T s = 0;
      for (int64_t k = 0; k < d.k; ++k) {
        const T av = d.trans_a ? a[k * d.m + i] : a[i * d.k + k];
        const T bv = d.trans_b ? b[j * d.k + k] : b[k * d.n + j];
        s += av * bv;
      }
      c[i * d.n + j] = accumulate ? c[i * d.n + j] + s : s;
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const int64_t oh = g.out_h(), ow = g.out_w();
  const int64_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t co = 0; co < g.out_channels; ++co) {
      const int64_t grp = co / cout_g;
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          T s = 0;
          for (int64_t ci = 0; ci < cin_g; ++ci)
            for (int64_t ky = 0; ky < g.kernel_h; ++ky)
              for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
                const int64_t iy = oy * g.stride - g.pad + ky;
                const int64_t ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                const int64_t cin = grp * cin_g + ci;
                s += x[((n * g.in_channels + cin) * g.in_h + iy) * g.in_w + ix] *
                     w[((co * cin_g + ci) * g.kernel_h + ky) * g.kernel_w + kx];
              }
          y[((n * g.out_channels + co) * oh + oy) * ow + ox] = bias ? s + bias[co] : s;
        }
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* dbias) {
  const int64_t oh = g.out_h(), ow = g.out_w();
  const int64_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t co = 0; co < g.out_channels; ++co) {
      const int64_t grp = co / cout_g;
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          const T gy = dy[((n * g.out_channels + co) * oh + oy) * ow + ox];
          if (dbias) dbias[co] += gy;
          for (int64_t ci = 0; ci < cin_g; ++ci)
            for (int64_t ky = 0; ky < g.kernel_h; ++ky)
              for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
                const int64_t iy = oy * g.stride - g.pad + ky;
                const int64_t ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                const int64_t xi = ((n * g.in_channels + grp * cin_g + ci) * g.in_h + iy) * g.in_w + ix;
                const int64_t wi = ((co * cin_g + ci) * g.kernel_h + ky) * g.kernel_w + kx;
                if (dx) dx[xi] += w[wi] * gy;
                if (dw) dw[wi] += x[xi] * gy;
              }
        }
    }
}

template <typename T>
void selective_scan_forward(const ScanDims& d, const ScanInputs<T>& in, T* y, T* states) {
  const int64_t L = d.length, E = d.channels, S = d.state;
  for (int64_t n = 0; n < d.batch; ++n)
    for (int64_t e = 0; e < E; ++e) {
      std::vector<T> h(static_cast<size_t>(S), T(0));
      for (int64_t t = 0; t < L; ++t) {
        const int64_t te = (n * L + t) * E + e;
        const int64_t ts = (n * L + t) * S;
        const T dt = in.delta[te], xv = in.x[te];
        T acc = 0;
        for (int64_t s = 0; s < S; ++s) {
          const T decay = std::exp(dt * in.a[e * S + s]);
          h[s] = decay * h[s] + dt * in.b[ts + s] * xv;
          acc += in.c[ts + s] * h[s];
          states[te * S + s] = h[s];
        }
        y[te] = acc;
      }
    }
}

template <typename T>
void selective_scan_backward(const ScanDims& d, const ScanInputs<T>& in, const T* states,
                             const T* dy, const ScanGrads<T>& gr) {
  const int64_t L = d.length, E = d.channels, S = d.state;
  for (int64_t n = 0; n < d.batch; ++n)
    for (int64_t e = 0; e < E; ++e) {
      std::vector<T> carry(static_cast<size_t>(S), T(0));
      for (int64_t t = L - 1; t >= 0; --t) {
        const int64_t te = (n * L + t) * E + e;
        const int64_t ts = (n * L + t) * S;
        const T dt = in.delta[te], xv = in.x[te], gy = dy[te];
        T ddt = 0, dxv = 0;
        for (int64_t s = 0; s < S; ++s) {
          const T a = in.a[e * S + s];
          const T h = states[te * S + s];
          const T hprev = t > 0 ? states[(te - E) * S + s] : T(0);
          const T decay = std::exp(dt * a);
          const T g = gy * in.c[ts + s] + carry[s];
          gr.c[ts + s] += gy * h;
          const T ddecay = g * hprev * decay;
          ddt += ddecay * a + g * in.b[ts + s] * xv;
          gr.a[e * S + s] += ddecay * dt;
          gr.b[ts + s] += g * dt * xv;
          dxv += g * dt * in.b[ts + s];
          carry[s] = g * decay;
        }
        gr.delta[te] += ddt;
        gr.x[te] += dxv;
      }
    }
}

#define HDC_INSTANTIATE(T)                                                                       \
  template void gemm<T>(const GemmDims&, const T*, const T*, T*, bool);                          \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);         \
  template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, T*); \
  template void selective_scan_forward<T>(const ScanDims&, const ScanInputs<T>&, T*, T*);        \
  template void selective_scan_backward<T>(const ScanDims&, const ScanInputs<T>&, const T*,      \
                                           const T*, const ScanGrads<T>&);
HDC_INSTANTIATE(float)
HDC_INSTANTIATE(double)
#undef HDC_INSTANTIATE

}  // namespace hdc::kernels::serial
