// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "unir/tensor.hpp"

// Differentiable ops over Tensor. Each op computes its forward value eagerly
// and, when a tape is recording and some operand requires grad, records a
// closure that accumulates operand gradients from the result gradient.
namespace unir {

// While alive, piecewise ops (relu, abs) fold the branch taken by every
// element into a signature. Two evaluations with equal signatures went
// through the same linear pieces. Used by grad_check.
class KinkTrace {
public:
  KinkTrace() : prev_(slot()) { slot() = this; }
  ~KinkTrace() { slot() = prev_; }
  KinkTrace(const KinkTrace&) = delete;
  KinkTrace& operator=(const KinkTrace&) = delete;

  static KinkTrace* current() { return slot(); }
  void mix(unsigned branch) { hash_ = (hash_ ^ branch) * 1099511628211ull; }
  std::uint64_t signature() const noexcept { return hash_; }

private:
  static KinkTrace*& slot() {
    thread_local KinkTrace* s = nullptr;
    return s;
  }
  KinkTrace* prev_;
  std::uint64_t hash_ = 1469598103934665603ull;
};

}  // namespace unir

namespace unir::ops {

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  for (const BasicTensor<T>* t : inputs)
    if (t && t->requires_grad()) return true;
  return false;
}

template <class T>
Tape* taping(std::initializer_list<const BasicTensor<T>*> inputs) {
  Tape* tape = Tape::current();
  return tape && any_requires_grad(inputs) ? tape : nullptr;
}

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v)
    if (!std::isfinite(x)) throw Error("NonFinite", std::string(op) + " produced a non-finite value");
}

template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values, bool requires_grad, const char* op) {
  check_finite(values, op);
  return BasicTensor<T>(std::move(shape), std::move(values), requires_grad);
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw Error("ShapeMismatch", std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise unary op: forward f(x), backward g * df(x, y).
template <class T, class F, class DF>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* name, F f, DF df) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Tape* tape = taping({&x});
  BasicTensor<T> y = make_result(x.shape(), std::move(out), tape != nullptr, name);
  if (tape) {
    tape->record(name, [xi = x.impl(), yi = y.impl(), df] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      auto& gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i] * df(xi->value[i], yi->value[i]);
    });
  }
  return y;
}

// Scatter a padded im2col column buffer for one sample.
template <class T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
                   T* col) {
  const std::size_t p = ho * wo;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            row[oy * wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                                    ? T{0}
                                    : x[(c * h + iy) * w + ix];
          }
        }
      }
}

inline void col2im_add(const double* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
                       std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
                       double* x) {
  const std::size_t p = ho * wo;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const double* row = col + ((c * kh + ky) * kw + kx) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            x[(c * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

// Lane-split dot product. Eight fixed partial sums let the compiler
// vectorize without reassociating, so results are reproducible.
template <class A, class B>
double dot(const A* a, const B* b, std::size_t n) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lane[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return ((lane[0] + lane[4]) + (lane[1] + lane[5])) + ((lane[2] + lane[6]) + (lane[3] + lane[7])) + tail;
}

// y[0..n) += a * x[0..n)
template <class X>
void axpy(double* y, double a, const X* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * static_cast<double>(x[i]);
}

inline constexpr std::size_t kConvTile = 256;

}  // namespace detail

// 2-D cross-correlation, NCHW input, OIHW weight, zero padding.
// Accumulates in double and rounds once per output element.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const std::type_identity_t<std::optional<BasicTensor<T>>>& bias,
                     std::size_t stride = 1, std::size_t padding = 0) {
  if (input.rank() != 4 || weight.rank() != 4)
    throw Error("ShapeMismatch", "conv2d expects NCHW input and OIHW weight");
  if (stride == 0) throw Error("InvalidArgument", "conv2d stride must be positive");
  const std::size_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != ci)
    throw Error("ChannelMismatch", "conv2d input has " + std::to_string(ci) + " channels, weight expects " +
                                       std::to_string(weight.dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != co))
    throw Error("ShapeMismatch", "conv2d bias must have shape [" + std::to_string(co) + "]");
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw Error("KernelTooLarge", "conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                      " exceeds padded input " + std::to_string(h + 2 * padding) + "x" +
                                      std::to_string(w + 2 * padding));
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t k = ci * kh * kw, p = ho * wo;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  std::vector<T> out(n * co * p);
  std::vector<T> col(direct ? 0 : k * p);
  double acc[detail::kConvTile];
  auto wv = weight.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = input.data().data() + s * ci * h * w;
    const T* cols = xs;
    if (!direct) {
      detail::im2col(xs, ci, h, w, kh, kw, stride, padding, ho, wo, col.data());
      cols = col.data();
    }
    // Column tiles keep the accumulator in L1 while the weights stream.
    for (std::size_t q0 = 0; q0 < p; q0 += detail::kConvTile) {
      const std::size_t qn = std::min(detail::kConvTile, p - q0);
      for (std::size_t o = 0; o < co; ++o) {
        std::fill(acc, acc + qn, bias ? static_cast<double>(bias->data()[o]) : 0.0);
        const T* wrow = wv.data() + o * k;
        for (std::size_t kk = 0; kk < k; ++kk) detail::axpy(acc, static_cast<double>(wrow[kk]), cols + kk * p + q0, qn);
        T* dst = out.data() + (s * co + o) * p + q0;
        for (std::size_t q = 0; q < qn; ++q) dst[q] = static_cast<T>(acc[q]);
      }
    }
  }

  const BasicTensor<T>* bias_ptr = bias ? &*bias : nullptr;
  Tape* tape = detail::taping({&input, &weight, bias_ptr});
  BasicTensor<T> y = detail::make_result({n, co, ho, wo}, std::move(out), tape != nullptr, "conv2d");
  if (tape) {
    auto bi = bias ? bias->impl() : nullptr;
    tape->record("conv2d", [xi = input.impl(), wi = weight.impl(), bi, yi = y.impl(), n, ci, h, w, co, kh, kw,
                            stride, padding, ho, wo, k, p, direct] {
      if (yi->grad.empty()) return;
      const T* gy = yi->grad.data();
      std::vector<T> col(direct ? 0 : k * p);
      std::vector<double> dw(wi->requires_grad ? co * k : 0, 0.0);
      std::vector<double> dcol(xi->requires_grad ? k * p : 0);
      std::vector<double> dx(xi->requires_grad ? ci * h * w : 0);
      for (std::size_t s = 0; s < n; ++s) {
        const T* xs = xi->value.data() + s * ci * h * w;
        const T* cols = xs;
        if (!direct) {
          detail::im2col(xs, ci, h, w, kh, kw, stride, padding, ho, wo, col.data());
          cols = col.data();
        }
        const T* gys = gy + s * co * p;
        if (wi->requires_grad) {
          for (std::size_t q0 = 0; q0 < p; q0 += detail::kConvTile) {
            const std::size_t qn = std::min(detail::kConvTile, p - q0);
            for (std::size_t o = 0; o < co; ++o)
              for (std::size_t kk = 0; kk < k; ++kk) dw[o * k + kk] += detail::dot(gys + o * p + q0, cols + kk * p + q0, qn);
          }
        }
        if (xi->requires_grad) {
          for (std::size_t q0 = 0; q0 < p; q0 += detail::kConvTile) {
            const std::size_t qn = std::min(detail::kConvTile, p - q0);
            for (std::size_t kk = 0; kk < k; ++kk) {
              double* drow = dcol.data() + kk * p + q0;
              std::fill(drow, drow + qn, 0.0);
              for (std::size_t o = 0; o < co; ++o)
                detail::axpy(drow, static_cast<double>(wi->value[o * k + kk]), gys + o * p + q0, qn);
            }
          }
          auto& gx = xi->ensure_grad();
          T* gxs = gx.data() + s * ci * h * w;
          if (direct) {
            for (std::size_t i = 0; i < dcol.size(); ++i) gxs[i] += static_cast<T>(dcol[i]);
          } else {
            std::fill(dx.begin(), dx.end(), 0.0);
            detail::col2im_add(dcol.data(), ci, h, w, kh, kw, stride, padding, ho, wo, dx.data());
            for (std::size_t i = 0; i < dx.size(); ++i) gxs[i] += static_cast<T>(dx[i]);
          }
        }
      }
      if (wi->requires_grad) {
        auto& gw = wi->ensure_grad();
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += static_cast<T>(dw[i]);
      }
      if (bi && bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (std::size_t o = 0; o < co; ++o) {
          double sum = 0.0;
          for (std::size_t s = 0; s < n; ++s) {
            const T* go = gy + (s * co + o) * p;
            for (std::size_t q = 0; q < p; ++q) sum += go[q];
          }
          gb[o] += static_cast<T>(sum);
        }
      }
    });
  }
  return y;
}

// Gradient at exactly 0 is 0.
template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  if (auto* trace = KinkTrace::current())
    for (T v : x.data()) trace->mix(v > T(0));
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary(
      x, "sigmoid",
      [](T v) {
        // Branches keep exp() from overflowing for large |v|.
        if (v >= T(0)) return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
        const double e = std::exp(static_cast<double>(v));
        return static_cast<T>(e / (1.0 + e));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T c) {
  return detail::unary(
      x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// Subgradient 0 at 0.
template <class T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
  if (auto* trace = KinkTrace::current())
    for (T v : x.data()) trace->mix(v > T(0) ? 1u : (v < T(0) ? 2u : 0u));
  return detail::unary(
      x, "abs", [](T v) { return std::fabs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return 2.0f * v; });
}

namespace detail {

// Elementwise binary op on equal shapes. dfa/dfb give partials given (a, b).
template <class T, class F, class DA, class DB>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* name, F f, DA da, DB db) {
  require_same_shape(a, b, name);
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  Tape* tape = taping({&a, &b});
  BasicTensor<T> y = make_result(a.shape(), std::move(out), tape != nullptr, name);
  if (tape) {
    tape->record(name, [ai = a.impl(), bi = b.impl(), yi = y.impl(), da, db] {
      if (yi->grad.empty()) return;
      const auto& g = yi->grad;
      // a and b may alias (x*x); accumulate both partials before writing.
      if (ai->requires_grad) {
        std::vector<T> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * da(ai->value[i], bi->value[i]);
        auto& dst = ai->ensure_grad();
        if (bi->requires_grad) {
          std::vector<T> gb(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * db(ai->value[i], bi->value[i]);
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += ga[i];
          auto& dstb = bi->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) dstb[i] += gb[i];
          return;
        }
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += ga[i];
      } else if (bi->requires_grad) {
        auto& dst = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * db(ai->value[i], bi->value[i]);
      }
    });
  }
  return y;
}

}  // namespace detail

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double total = 0.0;
  for (T v : x.data()) total += v;
  Tape* tape = detail::taping({&x});
  BasicTensor<T> y = detail::make_result<T>({1}, {static_cast<T>(total)}, tape != nullptr, "sum");
  if (tape) {
    tape->record("sum", [xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const T g = yi->grad[0];
      for (T& v : xi->ensure_grad()) v += g;
    });
  }
  return y;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw Error("EmptyTensor", "mean of an empty tensor");
  double total = 0.0;
  for (T v : x.data()) total += v;
  const double count = static_cast<double>(x.numel());
  Tape* tape = detail::taping({&x});
  BasicTensor<T> y = detail::make_result<T>({1}, {static_cast<T>(total / count)}, tape != nullptr, "mean");
  if (tape) {
    tape->record("mean", [xi = x.impl(), yi = y.impl(), count] {
      if (yi->grad.empty()) return;
      const T g = static_cast<T>(yi->grad[0] / count);
      for (T& v : xi->ensure_grad()) v += g;
    });
  }
  return y;
}

// Numerically stable softmax along the last axis (row max subtracted).
template <class T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw Error("ShapeMismatch", "softmax over an empty axis");
  const std::size_t cols = x.shape().back(), rows = x.numel() / cols;
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = static_cast<T>(std::exp(static_cast<double>(in[c] - mx)) / z);
  }
  Tape* tape = detail::taping({&x});
  BasicTensor<T> y = detail::make_result(x.shape(), std::move(out), tape != nullptr, "softmax");
  if (tape) {
    tape->record("softmax", [xi = x.impl(), yi = y.impl(), rows, cols] {
      if (yi->grad.empty()) return;
      auto& gx = xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = yi->value.data() + r * cols;
        const T* gr = yi->grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * yr[c];
        for (std::size_t c = 0; c < cols; ++c)
          gx[r * cols + c] += static_cast<T>(yr[c] * (gr[c] - dot));
      }
    });
  }
  return y;
}

// [B, M, K] x [B, K, N] -> [B, M, N].
template <class T>
BasicTensor<T> batched_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw Error("ShapeMismatch", "batched_matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t bs = a.dim(0), m = a.dim(1), kd = a.dim(2), nd = b.dim(2);
  std::vector<T> out(bs * m * nd);
  auto av = a.data(), bv = b.data();
  for (std::size_t s = 0; s < bs; ++s)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < nd; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < kd; ++t)
          acc += static_cast<double>(av[(s * m + i) * kd + t]) * bv[(s * kd + t) * nd + j];
        out[(s * m + i) * nd + j] = static_cast<T>(acc);
      }
  Tape* tape = detail::taping({&a, &b});
  BasicTensor<T> y = detail::make_result({bs, m, nd}, std::move(out), tape != nullptr, "batched_matmul");
  if (tape) {
    tape->record("batched_matmul", [ai = a.impl(), bi = b.impl(), yi = y.impl(), bs, m, kd, nd] {
      if (yi->grad.empty()) return;
      const auto& g = yi->grad;
      std::vector<double> ga(ai->requires_grad ? bs * m * kd : 0, 0.0);
      std::vector<double> gb(bi->requires_grad ? bs * kd * nd : 0, 0.0);
      for (std::size_t s = 0; s < bs; ++s)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nd; ++j) {
            const double gij = g[(s * m + i) * nd + j];
            for (std::size_t t = 0; t < kd; ++t) {
              if (!ga.empty()) ga[(s * m + i) * kd + t] += gij * bi->value[(s * kd + t) * nd + j];
              if (!gb.empty()) gb[(s * kd + t) * nd + j] += gij * ai->value[(s * m + i) * kd + t];
            }
          }
      if (!ga.empty()) {
        auto& dst = ai->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) dst[i] += static_cast<T>(ga[i]);
      }
      if (!gb.empty()) {
        auto& dst = bi->ensure_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) dst[i] += static_cast<T>(gb[i]);
      }
    });
  }
  return y;
}

// Spatial window of an H x W map: rows [y0, y1), cols [x0, x1).
struct Window {
  std::size_t y0, y1, x0, x1;
  std::size_t tokens() const { return (y1 - y0) * (x1 - x0); }
};

// Tiles H x W into side x side windows; edge windows are clipped, and a map
// no larger than one window is a single global window.
inline std::vector<Window> partition_windows(std::size_t h, std::size_t w, std::size_t side) {
  if (side == 0) throw Error("InvalidArgument", "attention window side must be positive");
  std::vector<Window> out;
  for (std::size_t y = 0; y < h; y += side)
    for (std::size_t x = 0; x < w; x += side) out.push_back({y, std::min(h, y + side), x, std::min(w, x + side)});
  return out;
}

namespace detail {

struct HeadLayout {
  std::size_t channels, plane, width, head_dim;
};

// Gathers one head's tokens inside `win` channel-major: dst[e * t + idx].
template <class T>
void gather_tokens(const HeadLayout& l, const T* src, std::size_t s, std::size_t head, const Window& win,
                   std::vector<double>& dst) {
  const std::size_t t = win.tokens();
  dst.resize(t * l.head_dim);
  for (std::size_t e = 0; e < l.head_dim; ++e) {
    const T* plane = src + (s * l.channels + head * l.head_dim + e) * l.plane;
    double* row = dst.data() + e * t;
    for (std::size_t y = win.y0; y < win.y1; ++y)
      for (std::size_t x = win.x0; x < win.x1; ++x) *row++ = plane[y * l.width + x];
  }
}

// dst[plane] += tok, the inverse of gather_tokens.
template <class D>
void scatter_tokens(const HeadLayout& l, const std::vector<double>& tok, std::size_t s, std::size_t head,
                    const Window& win, D* dst) {
  const std::size_t t = win.tokens();
  for (std::size_t e = 0; e < l.head_dim; ++e) {
    D* plane = dst + (s * l.channels + head * l.head_dim + e) * l.plane;
    const double* row = tok.data() + e * t;
    for (std::size_t y = win.y0; y < win.y1; ++y)
      for (std::size_t x = win.x0; x < win.x1; ++x) plane[y * l.width + x] += static_cast<D>(*row++);
  }
}

// out[i * t + j] = sum_e a[e * t + i] * b[e * t + j]
inline void outer_sum(const std::vector<double>& a, const std::vector<double>& b, std::size_t t, std::size_t d,
                      std::vector<double>& out) {
  out.assign(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t e = 0; e < d; ++e) axpy(out.data() + i * t, a[e * t + i], b.data() + e * t, t);
}

// Row softmax of Q K^T / sqrt(d) into probs [T, T].
inline void attention_probs(const std::vector<double>& qt, const std::vector<double>& kt, std::size_t t,
                            std::size_t d, std::vector<double>& probs) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  outer_sum(qt, kt, t, d, probs);
  for (std::size_t i = 0; i < t; ++i) {
    double* row = probs.data() + i * t;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < t; ++j) mx = std::max(mx, row[j] *= inv_sqrt_d);
    double z = 0.0;
    for (std::size_t j = 0; j < t; ++j) z += (row[j] = std::exp(row[j] - mx));
    const double inv_z = 1.0 / z;
    for (std::size_t j = 0; j < t; ++j) row[j] *= inv_z;
  }
}

}  // namespace detail

// Multi-head scaled dot-product self-attention over spatial tokens.
// q, k, v: N x C x H x W. Channels split into n_heads groups of d = C / n_heads;
// within each window, every position attends to every position of the same
// window: A = softmax(Q K^T / sqrt(d)) V.
template <class T>
BasicTensor<T> window_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v, std::size_t n_heads,
                               std::size_t window) {
  detail::require_same_shape(q, k, "window_attention");
  detail::require_same_shape(q, v, "window_attention");
  if (q.rank() != 4) throw Error("ShapeMismatch", "window_attention expects NCHW");
  const std::size_t n = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3);
  if (n_heads == 0 || c % n_heads != 0)
    throw Error("HeadMismatch", std::to_string(c) + " channels not divisible by " + std::to_string(n_heads) +
                                    " heads");
  const std::size_t d = c / n_heads;
  const auto windows = partition_windows(h, w, window);
  const detail::HeadLayout layout{c, h * w, w, d};

  std::vector<T> out(q.numel());
  {
    std::vector<double> qt, kt, vt, at, probs;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t head = 0; head < n_heads; ++head)
        for (const auto& win : windows) {
          detail::gather_tokens(layout, q.data().data(), s, head, win, qt);
          detail::gather_tokens(layout, k.data().data(), s, head, win, kt);
          detail::gather_tokens(layout, v.data().data(), s, head, win, vt);
          const std::size_t t = win.tokens();
          detail::attention_probs(qt, kt, t, d, probs);
          at.resize(t * d);
          for (std::size_t e = 0; e < d; ++e)
            for (std::size_t i = 0; i < t; ++i) at[e * t + i] = detail::dot(probs.data() + i * t, vt.data() + e * t, t);
          detail::scatter_tokens(layout, at, s, head, win, out.data());
        }
  }

  Tape* tape = detail::taping({&q, &k, &v});
  BasicTensor<T> y = detail::make_result(q.shape(), std::move(out), tape != nullptr, "window_attention");
  if (tape) {
    tape->record("window_attention", [qi = q.impl(), ki = k.impl(), vi = v.impl(), yi = y.impl(), n, d, n_heads,
                                      windows, layout] {
      if (yi->grad.empty()) return;
      std::vector<double> gq(qi->requires_grad ? qi->value.size() : 0, 0.0);
      std::vector<double> gk(ki->requires_grad ? ki->value.size() : 0, 0.0);
      std::vector<double> gv(vi->requires_grad ? vi->value.size() : 0, 0.0);
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
      std::vector<double> qt, kt, vt, gt, probs, dp, tok;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t head = 0; head < n_heads; ++head)
          for (const auto& win : windows) {
            detail::gather_tokens(layout, qi->value.data(), s, head, win, qt);
            detail::gather_tokens(layout, ki->value.data(), s, head, win, kt);
            detail::gather_tokens(layout, vi->value.data(), s, head, win, vt);
            detail::gather_tokens(layout, yi->grad.data(), s, head, win, gt);
            const std::size_t t = win.tokens();
            detail::attention_probs(qt, kt, t, d, probs);
            // dV = P^T dA ; dP = dA V^T ; dS = P * (dP - rowdot(dP, P))
            tok.assign(t * d, 0.0);
            if (!gv.empty()) {
              for (std::size_t e = 0; e < d; ++e)
                for (std::size_t i = 0; i < t; ++i) detail::axpy(tok.data() + e * t, gt[e * t + i], probs.data() + i * t, t);
              detail::scatter_tokens(layout, tok, s, head, win, gv.data());
            }
            if (gq.empty() && gk.empty()) continue;
            detail::outer_sum(gt, vt, t, d, dp);
            for (std::size_t i = 0; i < t; ++i) {
              double* dr = dp.data() + i * t;
              const double* pr = probs.data() + i * t;
              const double dot = detail::dot(dr, pr, t);
              for (std::size_t j = 0; j < t; ++j) dr[j] = pr[j] * (dr[j] - dot) * inv_sqrt_d;
            }
            if (!gq.empty()) {
              for (std::size_t e = 0; e < d; ++e)
                for (std::size_t i = 0; i < t; ++i) tok[e * t + i] = detail::dot(dp.data() + i * t, kt.data() + e * t, t);
              detail::scatter_tokens(layout, tok, s, head, win, gq.data());
            }
            if (!gk.empty()) {
              std::fill(tok.begin(), tok.end(), 0.0);
              for (std::size_t e = 0; e < d; ++e)
                for (std::size_t i = 0; i < t; ++i) detail::axpy(tok.data() + e * t, qt[e * t + i], dp.data() + i * t, t);
              detail::scatter_tokens(layout, tok, s, head, win, gk.data());
            }
          }
      auto flush = [](const std::shared_ptr<unir::detail::TensorData<T>>& ti, const std::vector<double>& g) {
        if (g.empty()) return;
        auto& dst = ti->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += static_cast<T>(g[i]);
      };
      flush(qi, gq);
      flush(ki, gk);
      flush(vi, gv);
    });
  }
  return y;
}

// Depthwise "valid" correlation of every N x C plane with the same K x K kernel.
template <class T>
BasicTensor<T> filter2d_valid(const BasicTensor<T>& x, const std::vector<double>& kernel, std::size_t side) {
  if (x.rank() != 4) throw Error("ShapeMismatch", "filter2d_valid expects NCHW");
  if (kernel.size() != side * side) throw Error("ShapeMismatch", "filter kernel is not side x side");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < side || w < side)
    throw Error("ImageTooSmall", "image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than window " +
                                     std::to_string(side));
  const std::size_t ho = h - side + 1, wo = w - side + 1;
  std::vector<T> out(planes * ho * wo);
  auto xv = x.data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < side; ++ky)
          for (std::size_t kx = 0; kx < side; ++kx)
            acc += kernel[ky * side + kx] * xv[(pl * h + oy + ky) * w + ox + kx];
        out[(pl * ho + oy) * wo + ox] = static_cast<T>(acc);
      }
  Tape* tape = detail::taping({&x});
  BasicTensor<T> y = detail::make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), tape != nullptr, "filter2d");
  if (tape) {
    tape->record("filter2d", [xi = x.impl(), yi = y.impl(), kernel, side, planes, h, w, ho, wo] {
      if (yi->grad.empty()) return;
      std::vector<double> gx(xi->value.size(), 0.0);
      for (std::size_t pl = 0; pl < planes; ++pl)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const double g = yi->grad[(pl * ho + oy) * wo + ox];
            for (std::size_t ky = 0; ky < side; ++ky)
              for (std::size_t kx = 0; kx < side; ++kx) gx[(pl * h + oy + ky) * w + ox + kx] += kernel[ky * side + kx] * g;
          }
      auto& dst = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) dst[i] += static_cast<T>(gx[i]);
    });
  }
  return y;
}

}  // namespace unir::ops
