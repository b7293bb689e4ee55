#include <omp.h>

#include <cmath>
#include <vector>

#include "hdc/kernels.hpp"

namespace hdc::kernels {

namespace {
int g_max_threads = 0;
constexpr int64_t kParallelWork = 1 << 14;
}  // namespace

void set_max_threads(int threads) {
  g_max_threads = threads > 0 ? threads : 0;
  omp_set_num_threads(g_max_threads > 0 ? g_max_threads : omp_get_num_procs());
}

int max_threads() { return g_max_threads > 0 ? g_max_threads : omp_get_max_threads(); }

namespace parallel {

template <typename T>
void gemm(const GemmDims& d, const T* a, const T* b, T* c, bool accumulate) {
  const int64_t m = d.m, n = d.n, kk = d.k;
#pragma omp parallel if (m * n * kk > kParallelWork)
  {
    std::vector<T> acc(static_cast<size_t>(n));
#pragma omp for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
      if (d.trans_b) {
        for (int64_t j = 0; j < n; ++j) {
          const T* brow = b + j * kk;
          T s = 0;
          if (d.trans_a)
            for (int64_t k = 0; k < kk; ++k) s += a[k * m + i] * brow[k];
          else
            for (int64_t k = 0; k < kk; ++k) s += a[i * kk + k] * brow[k];
          acc[j] = s;
        }
      } else {
        std::fill(acc.begin(), acc.end(), T(0));
        for (int64_t k = 0; k < kk; ++k) {
          const T av = d.trans_a ? a[k * m + i] : a[i * kk + k];
          const T* brow = b + k * n;
          for (int64_t j = 0; j < n; ++j) acc[j] += av * brow[j];
        }
      }
      T* crow = c + i * n;
      if (accumulate)
        for (int64_t j = 0; j < n; ++j) crow[j] += acc[j];
      else
        for (int64_t j = 0; j < n; ++j) crow[j] = acc[j];
    }
  }
}

namespace {

// col is [cin_g * kh * kw, oh * ow] for one sample and one group.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, int64_t n, int64_t grp, T* col) {
  const int64_t oh = g.out_h(), ow = g.out_w(), cin_g = g.in_per_group();
  int64_t row = 0;
  for (int64_t ci = 0; ci < cin_g; ++ci) {
    const T* plane = x + ((n * g.in_channels + grp * cin_g + ci) * g.in_h) * g.in_w;
    for (int64_t ky = 0; ky < g.kernel_h; ++ky)
      for (int64_t kx = 0; kx < g.kernel_w; ++kx, ++row) {
        T* out = col + row * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            out[oy * ow + ox] =
                (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) ? T(0) : plane[iy * g.in_w + ix];
          }
        }
      }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, int64_t n, int64_t grp, T* dx) {
  const int64_t oh = g.out_h(), ow = g.out_w(), cin_g = g.in_per_group();
  for (int64_t ci = 0; ci < cin_g; ++ci) {
    T* plane = dx + ((n * g.in_channels + grp * cin_g + ci) * g.in_h) * g.in_w;
    for (int64_t ky = 0; ky < g.kernel_h; ++ky)
      for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* in = col + ((ci * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            plane[iy * g.in_w + ix] += in[oy * ow + ox];
          }
        }
      }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const int64_t oh = g.out_h(), ow = g.out_w();
  const int64_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const int64_t kdim = cin_g * g.kernel_h * g.kernel_w, pix = oh * ow;
  const int64_t work = g.batch * g.out_channels * kdim * pix;
#pragma omp parallel if (work > kParallelWork && g.batch > 1)
  {
    std::vector<T> col(static_cast<size_t>(kdim * pix));
#pragma omp for schedule(static)
    for (int64_t n = 0; n < g.batch; ++n)
      for (int64_t grp = 0; grp < g.groups; ++grp) {
        im2col(g, x, n, grp, col.data());
        T* out = y + (n * g.out_channels + grp * cout_g) * pix;
        gemm(GemmDims{cout_g, pix, kdim, false, false}, w + grp * cout_g * kdim, col.data(),
                     out, false);
        if (bias)
          for (int64_t co = 0; co < cout_g; ++co)
            for (int64_t p = 0; p < pix; ++p) out[co * pix + p] += bias[grp * cout_g + co];
      }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* dbias) {
  const int64_t oh = g.out_h(), ow = g.out_w();
  const int64_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const int64_t kdim = cin_g * g.kernel_h * g.kernel_w, pix = oh * ow;
  const int64_t work = g.batch * g.out_channels * kdim * pix;

  if (dx) {
#pragma omp parallel if (work > kParallelWork && g.batch > 1)
    {
      std::vector<T> dcol(static_cast<size_t>(kdim * pix));
#pragma omp for schedule(static)
      for (int64_t n = 0; n < g.batch; ++n)
        for (int64_t grp = 0; grp < g.groups; ++grp) {
          const T* gy = dy + (n * g.out_channels + grp * cout_g) * pix;
          gemm(GemmDims{kdim, pix, cout_g, true, false}, w + grp * cout_g * kdim, gy,
                       dcol.data(), false);
          col2im_add(g, dcol.data(), n, grp, dx);
        }
    }
  }
  if (dw) {
    std::vector<T> col(static_cast<size_t>(kdim * pix));
    for (int64_t n = 0; n < g.batch; ++n)
      for (int64_t grp = 0; grp < g.groups; ++grp) {
        im2col(g, x, n, grp, col.data());
        const T* gy = dy + (n * g.out_channels + grp * cout_g) * pix;
        gemm(GemmDims{cout_g, kdim, pix, false, true}, gy, col.data(), dw + grp * cout_g * kdim,
             true);
      }
  }
  if (dbias) {
    for (int64_t n = 0; n < g.batch; ++n)
      for (int64_t co = 0; co < g.out_channels; ++co) {
        const T* gy = dy + (n * g.out_channels + co) * pix;
        T s = 0;
        for (int64_t p = 0; p < pix; ++p) s += gy[p];
        dbias[co] += s;
      }
  }
}

template <typename T>
void selective_scan_forward(const ScanDims& d, const ScanInputs<T>& in, T* y, T* states) {
  const int64_t L = d.length, E = d.channels, S = d.state;
  const int64_t lanes = d.batch * E;
#pragma omp parallel if (lanes * L * S > kParallelWork)
  {
    std::vector<T> h(static_cast<size_t>(S));
#pragma omp for schedule(static)
    for (int64_t lane = 0; lane < lanes; ++lane) {
      const int64_t n = lane / E, e = lane % E;
      std::fill(h.begin(), h.end(), T(0));
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
}

template <typename T>
void selective_scan_backward(const ScanDims& d, const ScanInputs<T>& in, const T* states,
                             const T* dy, const ScanGrads<T>& gr) {
  const int64_t N = d.batch, L = d.length, E = d.channels, S = d.state;
  const int64_t lanes = N * E;
  // Per-lane contributions to the shared B/C/A gradients, reduced afterwards in lane order.
  std::vector<T> db_lane(static_cast<size_t>(lanes * L * S), T(0));
  std::vector<T> dc_lane(static_cast<size_t>(lanes * L * S), T(0));
  std::vector<T> da_lane(static_cast<size_t>(lanes * S), T(0));
#pragma omp parallel if (lanes * L * S > kParallelWork)
  {
    std::vector<T> carry(static_cast<size_t>(S));
#pragma omp for schedule(static)
    for (int64_t lane = 0; lane < lanes; ++lane) {
      const int64_t n = lane / E, e = lane % E;
      std::fill(carry.begin(), carry.end(), T(0));
      T* db = db_lane.data() + lane * L * S;
      T* dc = dc_lane.data() + lane * L * S;
      T* da = da_lane.data() + lane * S;
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
          dc[t * S + s] = gy * h;
          const T ddecay = g * hprev * decay;
          ddt += ddecay * a + g * in.b[ts + s] * xv;
          da[s] += ddecay * dt;
          db[t * S + s] = g * dt * xv;
          dxv += g * dt * in.b[ts + s];
          carry[s] = g * decay;
        }
        gr.delta[te] += ddt;
        gr.x[te] += dxv;
      }
    }
  }
  for (int64_t n = 0; n < N; ++n)
    for (int64_t e = 0; e < E; ++e) {
      const int64_t lane = n * E + e;
      for (int64_t i = 0; i < L * S; ++i) {
        gr.b[n * L * S + i] += db_lane[lane * L * S + i];
        gr.c[n * L * S + i] += dc_lane[lane * L * S + i];
      }
      for (int64_t s = 0; s < S; ++s) gr.a[e * S + s] += da_lane[lane * S + s];
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

}  // namespace parallel
}  // namespace hdc::kernels
