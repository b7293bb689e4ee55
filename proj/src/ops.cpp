#include "hdc/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#include "hdc/kernels.hpp"

namespace hdc {
namespace {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (GradTape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T, typename F>
void record(Tensor<T>& out, F&& fn) {
  out.set_requires_grad(true);
  GradTape<T>::current()->record(std::forward<F>(fn));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  require(a >= 0 && a < rank, std::string(op) + ": axis " + std::to_string(axis) +
                                  " out of range for rank " + std::to_string(rank));
  return a;
}

template <typename T>
void require_rank(const Tensor<T>& x, int rank, const char* op) {
  require(x.defined() && x.rank() == rank, std::string(op) + ": expected rank " +
                                               std::to_string(rank) + " input, got " +
                                               (x.defined() ? shape_str(x.shape()) : "undefined"));
}

// Index mapping for trailing-dimension broadcasting of two operands.
struct Broadcast {
  Shape out;
  std::vector<int64_t> a_stride, b_stride;
  bool same = false;

  Broadcast(const Shape& a, const Shape& b, const char* op) {
    same = a == b;
    const size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    a_stride.assign(r, 0);
    b_stride.assign(r, 0);
    int64_t sa = 1, sb = 1;
    for (size_t i = 0; i < r; ++i) {
      const size_t k = r - 1 - i;
      const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
      const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
      require(da == db || da == 1 || db == 1,
              std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                  " (dimension " + std::to_string(k) + ": " + std::to_string(da) + " vs " +
                  std::to_string(db) + ")");
      out[k] = std::max(da, db);
      a_stride[k] = da == 1 ? 0 : sa;
      b_stride[k] = db == 1 ? 0 : sb;
      sa *= da;
      sb *= db;
    }
  }

  template <typename F>
  void for_each(F&& f) const {
    const int64_t n = shape_numel(out);
    if (same) {
      for (int64_t i = 0; i < n; ++i) f(i, i, i);
      return;
    }
    const size_t r = out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t ai = 0, bi = 0;
    for (int64_t oi = 0; oi < n; ++oi) {
      f(oi, ai, bi);
      for (size_t k = r; k-- > 0;) {
        ++idx[k];
        ai += a_stride[k];
        bi += b_stride[k];
        if (idx[k] < out[k]) break;
        ai -= a_stride[k] * out[k];
        bi -= b_stride[k] * out[k];
        idx[k] = 0;
      }
    }
  }
};

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op, const char* name) {
  Broadcast bc(a.shape(), b.shape(), name);
  Tensor<T> out(bc.out);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  switch (op) {
    case BinOp::Add: bc.for_each([&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] + pb[j]; }); break;
    case BinOp::Sub: bc.for_each([&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] - pb[j]; }); break;
    case BinOp::Mul: bc.for_each([&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] * pb[j]; }); break;
    case BinOp::Div: bc.for_each([&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] / pb[j]; }); break;
  }
  if (tracking<T>({&a, &b})) {
    record(out, [a, b, out, bc, op]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      const T* pa = a.ptr();
      const T* pb = b.ptr();
      T* ga = a.requires_grad() ? a.grad().data() : nullptr;
      T* gb = b.requires_grad() ? b.grad().data() : nullptr;
      bc.for_each([&](int64_t o, int64_t i, int64_t j) {
        const T g = go[o];
        switch (op) {
          case BinOp::Add:
            if (ga) ga[i] += g;
            if (gb) gb[j] += g;
            break;
          case BinOp::Sub:
            if (ga) ga[i] += g;
            if (gb) gb[j] -= g;
            break;
          case BinOp::Mul:
            if (ga) ga[i] += g * pb[j];
            if (gb) gb[j] += g * pa[i];
            break;
          case BinOp::Div:
            if (ga) ga[i] += g / pb[j];
            if (gb) gb[j] -= g * pa[i] / (pb[j] * pb[j]);
            break;
        }
      });
    });
  }
  return out;
}

// Pointwise op with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F&& f, D&& df) {
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.ptr();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
  if (tracking<T>({&x})) {
    record(out, [x, out, df]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      const T* px = x.ptr();
      const T* py = out.ptr();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * df(px[i], py[i]);
    });
  }
  return out;
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (size_t k = s.size(); k-- > 1;) st[k - 1] = st[k] * s[k];
  return st;
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  int64_t outer = 1, len = 1, inner = 1;
  AxisSplit(const Shape& s, int axis) {
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    len = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  }
};

std::atomic<bool> g_scan_fault{false};

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::Add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::Sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::Mul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::Div, "div");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, std::type_identity_t<T> s) {
  return unary(a, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, std::type_identity_t<T> s) {
  return unary(a, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(kInvSqrt2))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2)));
        return cdf + v * T(kInvSqrt2Pi) * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  Tensor<T> out(Shape{}, s);
  if (tracking<T>({&x})) {
    record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& gx : x.grad()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking<T>({&x})) {
    record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  require(static_cast<int>(perm.size()) == r, "permute: permutation rank mismatch for " +
                                                  shape_str(x.shape()));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  const auto in_strides = strides_of(x.shape());
  std::vector<int64_t> src_stride(static_cast<size_t>(r));
  for (int k = 0; k < r; ++k) {
    const int p = perm[static_cast<size_t>(k)];
    require(p >= 0 && p < r && !seen[static_cast<size_t>(p)], "permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    out_shape[static_cast<size_t>(k)] = x.shape()[static_cast<size_t>(p)];
    src_stride[static_cast<size_t>(k)] = in_strides[static_cast<size_t>(p)];
  }
  Tensor<T> out(out_shape);
  // Odometer over output indices; src offset tracks the permuted strides.
  auto walk = [out_shape, src_stride](auto&& f) {
    const int64_t n = shape_numel(out_shape);
    std::vector<int64_t> idx(out_shape.size(), 0);
    int64_t src = 0;
    for (int64_t o = 0; o < n; ++o) {
      f(o, src);
      for (size_t k = out_shape.size(); k-- > 0;) {
        ++idx[k];
        src += src_stride[k];
        if (idx[k] < out_shape[k]) break;
        src -= src_stride[k] * out_shape[k];
        idx[k] = 0;
      }
    }
  };
  const T* px = x.ptr();
  T* po = out.ptr();
  walk([&](int64_t o, int64_t s) { po[o] = px[s]; });
  if (tracking<T>({&x})) {
    record(out, [x, out, walk]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      walk([&](int64_t o, int64_t s) { gx[s] += go[o]; });
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  require(!xs.empty(), "concat: no inputs");
  const int r = xs.front().rank();
  const int ax = normalize_axis(axis, r, "concat");
  Shape out_shape = xs.front().shape();
  int64_t total = 0;
  for (const auto& t : xs) {
    require(t.rank() == r, "concat: rank mismatch");
    for (int k = 0; k < r; ++k)
      if (k != ax)
        require(t.shape()[static_cast<size_t>(k)] == out_shape[static_cast<size_t>(k)],
                "concat: dimension " + std::to_string(k) + " mismatch between " +
                    shape_str(xs.front().shape()) + " and " + shape_str(t.shape()));
    total += t.shape()[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = total;
  Tensor<T> out(out_shape);
  const AxisSplit os(out_shape, ax);
  int64_t offset = 0;
  std::vector<int64_t> offsets;
  for (const auto& t : xs) {
    offsets.push_back(offset);
    const AxisSplit s(t.shape(), ax);
    for (int64_t o = 0; o < s.outer; ++o)
      std::copy_n(t.ptr() + o * s.len * s.inner, s.len * s.inner,
                  out.ptr() + (o * os.len + offset) * os.inner);
    offset += s.len;
  }
  bool any = false;
  for (const auto& t : xs) any = any || tracking<T>({&t});
  if (any) {
    record(out, [xs, out, offsets, ax]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      const AxisSplit os(out.shape(), ax);
      for (size_t i = 0; i < xs.size(); ++i) {
        if (!xs[i].requires_grad()) continue;
        const AxisSplit s(xs[i].shape(), ax);
        T* gx = xs[i].grad().data();
        for (int64_t o = 0; o < s.outer; ++o) {
          const T* src = go + (o * os.len + offsets[i]) * os.inner;
          T* dst = gx + o * s.len * s.inner;
          for (int64_t k = 0; k < s.len * s.inner; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t length) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  const int64_t n = x.shape()[static_cast<size_t>(ax)];
  require(start >= 0 && length >= 0 && start + length <= n,
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
              ") exceeds dimension " + std::to_string(ax) + " of " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(ax)] = length;
  Tensor<T> out(out_shape);
  const AxisSplit s(x.shape(), ax);
  for (int64_t o = 0; o < s.outer; ++o)
    std::copy_n(x.ptr() + (o * s.len + start) * s.inner, length * s.inner,
                out.ptr() + o * length * s.inner);
  if (tracking<T>({&x})) {
    record(out, [x, out, s, start, length]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t o = 0; o < s.outer; ++o) {
        const T* src = go + o * length * s.inner;
        T* dst = gx + (o * s.len + start) * s.inner;
        for (int64_t k = 0; k < length * s.inner; ++k) dst[k] += src[k];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> roll(const Tensor<T>& x, int axis, int64_t shift) {
  const int ax = normalize_axis(axis, x.rank(), "roll");
  const AxisSplit s(x.shape(), ax);
  Tensor<T> out(x.shape());
  if (s.len == 0) return out;
  const int64_t sh = ((shift % s.len) + s.len) % s.len;
  auto src_of = [s, sh](int64_t i) { return (i - sh + s.len) % s.len; };
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t i = 0; i < s.len; ++i)
      std::copy_n(x.ptr() + (o * s.len + src_of(i)) * s.inner, s.inner,
                  out.ptr() + (o * s.len + i) * s.inner);
  if (tracking<T>({&x})) {
    record(out, [x, out, s, src_of]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t o = 0; o < s.outer; ++o)
        for (int64_t i = 0; i < s.len; ++i) {
          const T* src = go + (o * s.len + i) * s.inner;
          T* dst = gx + (o * s.len + src_of(i)) * s.inner;
          for (int64_t k = 0; k < s.inner; ++k) dst[k] += src[k];
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> repeat_channels(const Tensor<T>& x, int64_t repeats) {
  require_rank(x, 4, "repeat_channels");
  require(repeats >= 1, "repeat_channels: repeats must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({N, C * repeats, x.dim(2), x.dim(3)});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t r = 0; r < repeats; ++r)
        std::copy_n(x.ptr() + (n * C + c) * hw, hw, out.ptr() + ((n * C + c) * repeats + r) * hw);
  if (tracking<T>({&x})) {
    record(out, [x, out, N, C, hw, repeats]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t r = 0; r < repeats; ++r) {
            const T* src = go + ((n * C + c) * repeats + r) * hw;
            T* dst = gx + (n * C + c) * hw;
            for (int64_t k = 0; k < hw; ++k) dst[k] += src[k];
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, int64_t bottom, int64_t right) {
  require_rank(x, 4, "pad_replicate");
  require(bottom >= 0 && right >= 0, "pad_replicate: negative padding");
  const int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H + bottom, Wo = W + right;
  require(H > 0 && W > 0, "pad_replicate: empty spatial extent");
  Tensor<T> out({x.dim(0), x.dim(1), Ho, Wo});
  auto src = [H, W](int64_t y, int64_t xx) { return std::min(y, H - 1) * W + std::min(xx, W - 1); };
  for (int64_t p = 0; p < NC; ++p)
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t xx = 0; xx < Wo; ++xx) out.ptr()[(p * Ho + y) * Wo + xx] = x.ptr()[p * H * W + src(y, xx)];
  if (tracking<T>({&x})) {
    record(out, [x, out, NC, H, W, Ho, Wo, src]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t p = 0; p < NC; ++p)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t xx = 0; xx < Wo; ++xx) gx[p * H * W + src(y, xx)] += go[(p * Ho + y) * Wo + xx];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(w, 2, "linear weight");
  const int64_t in = w.dim(1), out_f = w.dim(0);
  require(x.defined() && x.rank() >= 1 && x.dim(-1) == in,
          "linear: input last dimension " + (x.defined() ? std::to_string(x.dim(-1)) : "?") +
              " does not match weight in_features " + std::to_string(in));
  if (b.defined())
    require(b.rank() == 1 && b.dim(0) == out_f,
            "linear: bias shape " + shape_str(b.shape()) + " does not match out_features " +
                std::to_string(out_f));
  const int64_t m = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor<T> out(out_shape);
  kernels::parallel::gemm(kernels::GemmDims{m, out_f, in, false, true}, x.ptr(), w.ptr(), out.ptr(),
                          false);
  if (b.defined())
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < out_f; ++j) out.ptr()[i * out_f + j] += b.ptr()[j];
  if (tracking<T>({&x, &w, &b})) {
    record(out, [x, w, b, out, m, in, out_f]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      if (x.requires_grad())
        kernels::parallel::gemm(kernels::GemmDims{m, in, out_f, false, false}, go, w.ptr(),
                                x.grad().data(), true);
      if (w.requires_grad())
        kernels::parallel::gemm(kernels::GemmDims{out_f, in, m, true, false}, go, x.ptr(),
                                w.grad().data(), true);
      if (b.defined() && b.requires_grad()) {
        T* gb = b.grad().data();
        for (int64_t j = 0; j < out_f; ++j) {
          T s = 0;
          for (int64_t i = 0; i < m; ++i) s += go[i * out_f + j];
          gb[j] += s;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  require_rank(a, 3, "bmm lhs");
  require_rank(b, 3, "bmm rhs");
  require(a.dim(0) == b.dim(0), "bmm: batch dimension 0 mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  const int64_t B = a.dim(0);
  const int64_t M = trans_a ? a.dim(2) : a.dim(1), K = trans_a ? a.dim(1) : a.dim(2);
  const int64_t Kb = trans_b ? b.dim(2) : b.dim(1), N = trans_b ? b.dim(1) : b.dim(2);
  require(K == Kb, "bmm: contraction dimension mismatch (" + std::to_string(K) + " vs " +
                       std::to_string(Kb) + ")");
  Tensor<T> out({B, M, N});
  for (int64_t i = 0; i < B; ++i)
    kernels::parallel::gemm(kernels::GemmDims{M, N, K, trans_a, trans_b}, a.ptr() + i * M * K,
                            b.ptr() + i * K * N, out.ptr() + i * M * N, false);
  if (tracking<T>({&a, &b})) {
    record(out, [a, b, out, B, M, N, K, trans_a, trans_b]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      using kernels::GemmDims;
      for (int64_t i = 0; i < B; ++i) {
        const T* gc = go + i * M * N;
        const T* pa = a.ptr() + i * M * K;
        const T* pb = b.ptr() + i * K * N;
        if (a.requires_grad()) {
          T* ga = a.grad().data() + i * M * K;
          if (!trans_a)
            kernels::parallel::gemm(GemmDims{M, K, N, false, !trans_b}, gc, pb, ga, true);
          else
            kernels::parallel::gemm(GemmDims{K, M, N, trans_b, true}, pb, gc, ga, true);
        }
        if (b.requires_grad()) {
          T* gb = b.grad().data() + i * K * N;
          if (!trans_b)
            kernels::parallel::gemm(GemmDims{K, N, M, !trans_a, false}, pa, gc, gb, true);
          else
            kernels::parallel::gemm(GemmDims{N, K, M, true, trans_a}, gc, pa, gb, true);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s(x.shape(), ax);
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  T* po = out.ptr();
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t in = 0; in < s.inner; ++in) {
      const int64_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t k = 0; k < s.len; ++k) mx = std::max(mx, px[base + k * s.inner]);
      T z = 0;
      for (int64_t k = 0; k < s.len; ++k) {
        const T e = std::exp(px[base + k * s.inner] - mx);
        po[base + k * s.inner] = e;
        z += e;
      }
      for (int64_t k = 0; k < s.len; ++k) po[base + k * s.inner] /= z;
    }
  if (tracking<T>({&x})) {
    record(out, [x, out, s]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      const T* py = out.ptr();
      T* gx = x.grad().data();
      for (int64_t o = 0; o < s.outer; ++o)
        for (int64_t in = 0; in < s.inner; ++in) {
          const int64_t base = o * s.len * s.inner + in;
          T dot = 0;
          for (int64_t k = 0; k < s.len; ++k) dot += go[base + k * s.inner] * py[base + k * s.inner];
          for (int64_t k = 0; k < s.len; ++k) {
            const int64_t i = base + k * s.inner;
            gx[i] += py[i] * (go[i] - dot);
          }
        }
    });
  }
  return out;
}

namespace {

// Shared normalisation core: `rows` contiguous slices of `len` elements;
// affine parameters indexed by channel = (element index / per_channel) % channels.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, int64_t rows, int64_t len, const Tensor<T>& gamma,
                         const Tensor<T>& beta, double eps, int64_t per_channel, int64_t channels) {
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> rstd(static_cast<size_t>(rows));
  const T* px = x.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * len;
    T m = 0;
    for (int64_t k = 0; k < len; ++k) m += row[k];
    m /= static_cast<T>(len);
    T v = 0;
    for (int64_t k = 0; k < len; ++k) v += (row[k] - m) * (row[k] - m);
    v /= static_cast<T>(len);
    const T rs = T(1) / std::sqrt(v + static_cast<T>(eps));
    rstd[static_cast<size_t>(r)] = rs;
    for (int64_t k = 0; k < len; ++k) {
      const int64_t i = r * len + k;
      xhat[static_cast<size_t>(i)] = (row[k] - m) * rs;
      const int64_t c = (i / per_channel) % channels;
      T y = xhat[static_cast<size_t>(i)];
      if (gamma.defined()) y *= gamma.ptr()[c];
      if (beta.defined()) y += beta.ptr()[c];
      out.ptr()[i] = y;
    }
  }
  if (tracking<T>({&x, &gamma, &beta})) {
    record(out, [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, len,
                 per_channel, channels]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gg = gamma.defined() && gamma.requires_grad() ? gamma.grad().data() : nullptr;
      T* gb = beta.defined() && beta.requires_grad() ? beta.grad().data() : nullptr;
      T* gx = x.requires_grad() ? x.grad().data() : nullptr;
      std::vector<T> dxhat(static_cast<size_t>(len));
      for (int64_t r = 0; r < rows; ++r) {
        T mean_d = 0, mean_dx = 0;
        for (int64_t k = 0; k < len; ++k) {
          const int64_t i = r * len + k;
          const int64_t c = (i / per_channel) % channels;
          const T g = go[i];
          if (gg) gg[c] += g * xhat[static_cast<size_t>(i)];
          if (gb) gb[c] += g;
          const T d = gamma.defined() ? g * gamma.ptr()[c] : g;
          dxhat[static_cast<size_t>(k)] = d;
          mean_d += d;
          mean_dx += d * xhat[static_cast<size_t>(i)];
        }
        if (!gx) continue;
        mean_d /= static_cast<T>(len);
        mean_dx /= static_cast<T>(len);
        const T rs = rstd[static_cast<size_t>(r)];
        for (int64_t k = 0; k < len; ++k) {
          const int64_t i = r * len + k;
          gx[i] += rs * (dxhat[static_cast<size_t>(k)] - mean_d - xhat[static_cast<size_t>(i)] * mean_dx);
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require(x.defined() && x.rank() >= 1, "layer_norm: undefined input");
  const int64_t c = x.dim(-1);
  for (const Tensor<T>* p : {&gamma, &beta})
    if (p->defined())
      require(p->rank() == 1 && p->dim(0) == c,
              "layer_norm: affine shape " + shape_str(p->shape()) + " does not match last dimension " +
                  std::to_string(c));
  return normalize_rows(x, x.numel() / c, c, gamma, beta, eps, 1, c);
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int64_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps) {
  require_rank(x, 4, "group_norm");
  const int64_t C = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(groups >= 1 && C % groups == 0,
          "group_norm: channel dimension 1 (" + std::to_string(C) + ") not divisible by groups " +
              std::to_string(groups));
  for (const Tensor<T>* p : {&gamma, &beta})
    if (p->defined())
      require(p->rank() == 1 && p->dim(0) == C, "group_norm: affine shape mismatch");
  return normalize_rows(x, x.dim(0) * groups, (C / groups) * hw, gamma, beta, eps, hw, C);
}

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Conv2dOptions opt) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel_h = w.dim(2);
  g.kernel_w = w.dim(3);
  g.stride = opt.stride;
  g.pad = opt.pad;
  g.groups = opt.groups;
  require(opt.stride >= 1, "conv2d: stride must be positive");
  require(opt.pad >= 0, "conv2d: padding must be nonnegative");
  require(opt.groups >= 1 && g.in_channels % opt.groups == 0,
          "conv2d: input channels (dimension 1 = " + std::to_string(g.in_channels) +
              ") not divisible by groups " + std::to_string(opt.groups));
  require(g.out_channels % opt.groups == 0,
          "conv2d: output channels (weight dimension 0 = " + std::to_string(g.out_channels) +
              ") not divisible by groups " + std::to_string(opt.groups));
  require(w.dim(1) == g.in_channels / opt.groups,
          "conv2d: weight dimension 1 is " + std::to_string(w.dim(1)) + " but input provides " +
              std::to_string(g.in_channels / opt.groups) + " channels per group");
  const int64_t span_h = g.in_h + 2 * g.pad - g.kernel_h, span_w = g.in_w + 2 * g.pad - g.kernel_w;
  require(span_h >= 0 && span_h % g.stride == 0,
          "conv2d: height (dimension 2 = " + std::to_string(g.in_h) + ") incompatible with kernel " +
              std::to_string(g.kernel_h) + ", pad " + std::to_string(g.pad) + ", stride " +
              std::to_string(g.stride));
  require(span_w >= 0 && span_w % g.stride == 0,
          "conv2d: width (dimension 3 = " + std::to_string(g.in_w) + ") incompatible with kernel " +
              std::to_string(g.kernel_w) + ", pad " + std::to_string(g.pad) + ", stride " +
              std::to_string(g.stride));
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == g.out_channels,
            "conv2d: bias shape " + shape_str(bias.shape()) + " does not match output channels");
  Tensor<T> out({g.batch, g.out_channels, g.out_h(), g.out_w()});
  kernels::parallel::conv2d_forward(g, x.ptr(), w.ptr(), bias.defined() ? bias.ptr() : nullptr,
                                    out.ptr());
  if (tracking<T>({&x, &w, &bias})) {
    record(out, [x, w, bias, out, g]() mutable {
      if (!out.has_grad()) return;
      kernels::parallel::conv2d_backward(
          g, x.ptr(), w.ptr(), out.grad().data(), x.requires_grad() ? x.grad().data() : nullptr,
          w.requires_grad() ? w.grad().data() : nullptr,
          bias.defined() && bias.requires_grad() ? bias.grad().data() : nullptr);
    });
  }
  return out;
}

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 3, "causal_conv1d input");
  require_rank(w, 2, "causal_conv1d weight");
  const int64_t N = x.dim(0), L = x.dim(1), E = x.dim(2), K = w.dim(1);
  require(w.dim(0) == E, "causal_conv1d: weight dimension 0 (" + std::to_string(w.dim(0)) +
                             ") must equal channel dimension 2 (" + std::to_string(E) + ")");
  if (b.defined()) require(b.rank() == 1 && b.dim(0) == E, "causal_conv1d: bias shape mismatch");
  Tensor<T> out(x.shape());
  const T* px = x.ptr();
  const T* pw = w.ptr();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t t = 0; t < L; ++t)
      for (int64_t e = 0; e < E; ++e) {
        T s = b.defined() ? b.ptr()[e] : T(0);
        for (int64_t k = 0; k < K; ++k) {
          const int64_t src = t - (K - 1) + k;
          if (src >= 0) s += pw[e * K + k] * px[(n * L + src) * E + e];
        }
        out.ptr()[(n * L + t) * E + e] = s;
      }
  if (tracking<T>({&x, &w, &b})) {
    record(out, [x, w, b, out, N, L, E, K]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.requires_grad() ? x.grad().data() : nullptr;
      T* gw = w.requires_grad() ? w.grad().data() : nullptr;
      T* gb = b.defined() && b.requires_grad() ? b.grad().data() : nullptr;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t t = 0; t < L; ++t)
          for (int64_t e = 0; e < E; ++e) {
            const T g = go[(n * L + t) * E + e];
            if (gb) gb[e] += g;
            for (int64_t k = 0; k < K; ++k) {
              const int64_t src = t - (K - 1) + k;
              if (src < 0) continue;
              if (gx) gx[(n * L + src) * E + e] += g * w.ptr()[e * K + k];
              if (gw) gw[e * K + k] += g * x.ptr()[(n * L + src) * E + e];
            }
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  require(x.dim(2) > 0 && x.dim(3) > 0, "global_avg_pool: zero-sized pooling window");
  return adaptive_avg_pool(x, 1, 1);
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_max_pool");
  const int64_t NC = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  require(hw > 0, "global_max_pool: zero-sized pooling window");
  Tensor<T> out({x.dim(0), x.dim(1), 1, 1});
  std::vector<int64_t> arg(static_cast<size_t>(NC));
  for (int64_t p = 0; p < NC; ++p) {
    const T* plane = x.ptr() + p * hw;
    const int64_t k = std::max_element(plane, plane + hw) - plane;
    arg[static_cast<size_t>(p)] = p * hw + k;
    out.ptr()[p] = plane[k];
  }
  if (tracking<T>({&x})) {
    record(out, [x, out, arg]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (size_t p = 0; p < arg.size(); ++p) gx[arg[p]] += go[p];
    });
  }
  return out;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "adaptive_avg_pool");
  const int64_t H = x.dim(2), W = x.dim(3), NC = x.dim(0) * x.dim(1);
  require(out_h >= 1 && out_w >= 1 && out_h <= H && out_w <= W,
          "adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
              " would create a zero-sized pooling window on input " + shape_str(x.shape()));
  auto lo = [](int64_t i, int64_t in, int64_t out) { return (i * in) / out; };
  auto hi = [](int64_t i, int64_t in, int64_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
  for (int64_t p = 0; p < NC; ++p)
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const int64_t y0 = lo(oy, H, out_h), y1 = hi(oy, H, out_h);
        const int64_t x0 = lo(ox, W, out_w), x1 = hi(ox, W, out_w);
        T s = 0;
        for (int64_t y = y0; y < y1; ++y)
          for (int64_t xx = x0; xx < x1; ++xx) s += x.ptr()[(p * H + y) * W + xx];
        out.ptr()[(p * out_h + oy) * out_w + ox] = s / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  if (tracking<T>({&x})) {
    record(out, [x, out, NC, H, W, out_h, out_w, lo, hi]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t p = 0; p < NC; ++p)
        for (int64_t oy = 0; oy < out_h; ++oy)
          for (int64_t ox = 0; ox < out_w; ++ox) {
            const int64_t y0 = lo(oy, H, out_h), y1 = hi(oy, H, out_h);
            const int64_t x0 = lo(ox, W, out_w), x1 = hi(ox, W, out_w);
            const T g = go[(p * out_h + oy) * out_w + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
            for (int64_t y = y0; y < y1; ++y)
              for (int64_t xx = x0; xx < x1; ++xx) gx[(p * H + y) * W + xx] += g;
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  require_rank(x, 4, "channel_mean");
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(C > 0, "channel_mean: zero-sized pooling window");
  Tensor<T> out({N, 1, x.dim(2), x.dim(3)});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < hw; ++p) {
      T s = 0;
      for (int64_t c = 0; c < C; ++c) s += x.ptr()[(n * C + c) * hw + p];
      out.ptr()[n * hw + p] = s / static_cast<T>(C);
    }
  if (tracking<T>({&x})) {
    record(out, [x, out, N, C, hw]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t p = 0; p < hw; ++p) gx[(n * C + c) * hw + p] += go[n * hw + p] / static_cast<T>(C);
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  require_rank(x, 4, "channel_max");
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(C > 0, "channel_max: zero-sized pooling window");
  Tensor<T> out({N, 1, x.dim(2), x.dim(3)});
  std::vector<int64_t> arg(static_cast<size_t>(N * hw));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < hw; ++p) {
      int64_t best = (n * C) * hw + p;
      for (int64_t c = 1; c < C; ++c) {
        const int64_t i = (n * C + c) * hw + p;
        if (x.ptr()[i] > x.ptr()[best]) best = i;
      }
      arg[static_cast<size_t>(n * hw + p)] = best;
      out.ptr()[n * hw + p] = x.ptr()[best];
    }
  if (tracking<T>({&x})) {
    record(out, [x, out, arg]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (int64_t p = 0; p < NC; ++p)
    for (int64_t y = 0; y < 2 * H; ++y)
      for (int64_t xx = 0; xx < 2 * W; ++xx)
        out.ptr()[(p * 2 * H + y) * 2 * W + xx] = x.ptr()[(p * H + y / 2) * W + xx / 2];
  if (tracking<T>({&x})) {
    record(out, [x, out, NC, H, W]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t p = 0; p < NC; ++p)
        for (int64_t y = 0; y < 2 * H; ++y)
          for (int64_t xx = 0; xx < 2 * W; ++xx)
            gx[(p * H + y / 2) * W + xx / 2] += go[(p * 2 * H + y) * 2 * W + xx];
    });
  }
  return out;
}

namespace {

struct LerpTap {
  int64_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LerpTap> bilinear_taps(int64_t in) {
  std::vector<LerpTap> taps(static_cast<size_t>(2 * in));
  for (int64_t o = 0; o < 2 * in; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) / 2.0 - 0.5);
    const auto i0 = static_cast<int64_t>(std::floor(src));
    const int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  require_rank(x, 4, "upsample_bilinear2x");
  const int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ty = bilinear_taps(H), tx = bilinear_taps(W);
  Tensor<T> out({x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (int64_t p = 0; p < NC; ++p) {
    const T* in = x.ptr() + p * H * W;
    for (int64_t y = 0; y < 2 * H; ++y) {
      const LerpTap& a = ty[static_cast<size_t>(y)];
      const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
      for (int64_t xx = 0; xx < 2 * W; ++xx) {
        const LerpTap& b = tx[static_cast<size_t>(xx)];
        const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
        out.ptr()[(p * 2 * H + y) * 2 * W + xx] =
            wy0 * (wx0 * in[a.i0 * W + b.i0] + wx1 * in[a.i0 * W + b.i1]) +
            wy1 * (wx0 * in[a.i1 * W + b.i0] + wx1 * in[a.i1 * W + b.i1]);
      }
    }
  }
  if (tracking<T>({&x})) {
    record(out, [x, out, NC, H, W, ty, tx]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t p = 0; p < NC; ++p) {
        T* gin = gx + p * H * W;
        for (int64_t y = 0; y < 2 * H; ++y) {
          const LerpTap& a = ty[static_cast<size_t>(y)];
          const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
          for (int64_t xx = 0; xx < 2 * W; ++xx) {
            const LerpTap& b = tx[static_cast<size_t>(xx)];
            const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
            const T g = go[(p * 2 * H + y) * 2 * W + xx];
            gin[a.i0 * W + b.i0] += g * wy0 * wx0;
            gin[a.i0 * W + b.i1] += g * wy0 * wx1;
            gin[a.i1 * W + b.i0] += g * wy1 * wx0;
            gin[a.i1 * W + b.i1] += g * wy1 * wx1;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> spatial_gradient(const Tensor<T>& x, int axis) {
  require_rank(x, 4, "spatial_gradient");
  require(axis == 2 || axis == 3, "spatial_gradient: axis must be 2 (rows) or 3 (columns)");
  const int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t n = axis == 3 ? W : H;
  require(n >= 2, "spatial_gradient: dimension " + std::to_string(axis) + " needs at least 2 samples");
  const int64_t step = axis == 3 ? 1 : W;
  // Stencil per position along the axis: (lo, hi, scale) with d = (v[hi] - v[lo]) * scale.
  auto stencil = [n](int64_t i) -> std::tuple<int64_t, int64_t, double> {
    if (i == 0) return {0, 1, 1.0};
    if (i == n - 1) return {n - 2, n - 1, 1.0};
    return {i - 1, i + 1, 0.5};
  };
  Tensor<T> out(x.shape());
  for (int64_t p = 0; p < NC; ++p)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) {
        const int64_t i = axis == 3 ? xx : y;
        const auto [lo, hi, sc] = stencil(i);
        const int64_t base = p * H * W + y * W + xx - i * step;
        out.ptr()[p * H * W + y * W + xx] =
            (x.ptr()[base + hi * step] - x.ptr()[base + lo * step]) * static_cast<T>(sc);
      }
  if (tracking<T>({&x})) {
    record(out, [x, out, NC, H, W, axis, step, stencil]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t p = 0; p < NC; ++p)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx) {
            const int64_t i = axis == 3 ? xx : y;
            const auto [lo, hi, sc] = stencil(i);
            const int64_t base = p * H * W + y * W + xx - i * step;
            const T g = go[p * H * W + y * W + xx] * static_cast<T>(sc);
            gx[base + hi * step] += g;
            gx[base + lo * step] -= g;
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selective scan

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c) {
  require_rank(x, 3, "selective_scan x");
  require_rank(delta, 3, "selective_scan delta");
  require_rank(a, 2, "selective_scan A");
  require_rank(b, 3, "selective_scan B");
  require_rank(c, 3, "selective_scan C");
  kernels::ScanDims d{x.dim(0), x.dim(1), x.dim(2), a.dim(1)};
  require(delta.shape() == x.shape(), "selective_scan: delta shape " + shape_str(delta.shape()) +
                                          " differs from x shape " + shape_str(x.shape()));
  require(a.dim(0) == d.channels, "selective_scan: A dimension 0 must equal channels " +
                                      std::to_string(d.channels));
  const Shape bs{d.batch, d.length, d.state};
  require(b.shape() == bs, "selective_scan: B shape " + shape_str(b.shape()) + " expected " + shape_str(bs));
  require(c.shape() == bs, "selective_scan: C shape " + shape_str(c.shape()) + " expected " + shape_str(bs));
  for (T v : delta.data())
    require(std::isfinite(static_cast<double>(v)), "selective_scan: non-finite step size");

  Tensor<T> out(x.shape());
  std::vector<T> states(static_cast<size_t>(d.batch * d.length * d.channels * d.state));
  const kernels::ScanInputs<T> in{x.data(), delta.data(), a.data(), b.data(), c.data()};
  if (testing::scan_fault()) {
    // Deliberately broken variant: every token sees only its own input.
    for (int64_t t = 0; t < d.length; ++t) {
      kernels::ScanDims one{1, 1, d.channels, d.state};
      for (int64_t n = 0; n < d.batch; ++n) {
        const int64_t te = (n * d.length + t) * d.channels, ts = (n * d.length + t) * d.state;
        const kernels::ScanInputs<T> tok{in.x.subspan(te, d.channels), in.delta.subspan(te, d.channels),
                                         in.a, in.b.subspan(ts, d.state), in.c.subspan(ts, d.state)};
        kernels::serial::selective_scan_forward(one, tok, out.ptr() + te, states.data() + te * d.state);
      }
    }
  } else {
    kernels::parallel::selective_scan_forward(d, in, out.ptr(), states.data());
  }
  if (tracking<T>({&x, &delta, &a, &b, &c})) {
    record(out, [x, delta, a, b, c, out, d, states = std::move(states)]() mutable {
      if (!out.has_grad()) return;
      // Inputs that do not require grad still need somewhere to accumulate.
      auto sink = [](const Tensor<T>& t, std::vector<T>& scratch) -> std::span<T> {
        if (t.requires_grad()) return t.grad();
        scratch.assign(static_cast<size_t>(t.numel()), T(0));
        return scratch;
      };
      std::vector<T> s0, s1, s2, s3, s4;
      const kernels::ScanGrads<T> grads{sink(x, s0), sink(delta, s1), sink(a, s2), sink(b, s3),
                                        sink(c, s4)};
      const kernels::ScanInputs<T> in{x.data(), delta.data(), a.data(), b.data(), c.data()};
      kernels::parallel::selective_scan_backward(d, in, states.data(), out.grad().data(), grads);
    });
  }
  return out;
}

namespace testing {
void set_scan_fault(bool enabled) { g_scan_fault.store(enabled); }
bool scan_fault() { return g_scan_fault.load(); }
}  // namespace testing

// ---------------------------------------------------------------------------

#define HDC_INSTANTIATE(T)                                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> silu(const Tensor<T>&);                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> softplus(const Tensor<T>&);                                                   \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> sqrt(const Tensor<T>&);                                                       \
  template Tensor<T> square(const Tensor<T>&);                                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                   \
  template Tensor<T> slice(const Tensor<T>&, int, int64_t, int64_t);                               \
  template Tensor<T> roll(const Tensor<T>&, int, int64_t);                                         \
  template Tensor<T> repeat_channels(const Tensor<T>&, int64_t);                                   \
  template Tensor<T> pad_replicate(const Tensor<T>&, int64_t, int64_t);                            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool, bool);                          \
  template Tensor<T> softmax(const Tensor<T>&, int);                                               \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);     \
  template Tensor<T> group_norm(const Tensor<T>&, int64_t, const Tensor<T>&, const Tensor<T>&,     \
                                double);                                                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);  \
  template Tensor<T> causal_conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                            \
  template Tensor<T> global_max_pool(const Tensor<T>&);                                            \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, int64_t, int64_t);                        \
  template Tensor<T> channel_mean(const Tensor<T>&);                                               \
  template Tensor<T> channel_max(const Tensor<T>&);                                                \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                         \
  template Tensor<T> upsample_bilinear2x(const Tensor<T>&);                                        \
  template Tensor<T> spatial_gradient(const Tensor<T>&, int);                                      \
  template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                    const Tensor<T>&, const Tensor<T>&);
HDC_INSTANTIATE(float)
HDC_INSTANTIATE(double)
#undef HDC_INSTANTIATE

}  // namespace hdc
