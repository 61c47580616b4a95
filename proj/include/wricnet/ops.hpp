#pragma once

// Differentiable NCHW ops. Forward kernels are plain loops ordered so the
// innermost loop is a contiguous row; backward kernels mirror them.

#include "wricnet/tensor.hpp"

#include <cmath>
#include <limits>

namespace wricnet {

enum class Padding { same, valid };

namespace detail {

struct ConvGeometry {
  std::size_t out_h, out_w, pad_top, pad_left;
};

// "same": output = ceil(in / stride), zero padding split symmetric with the odd
// pixel on the bottom/right. "valid": no padding.
inline ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t k_h,
                                  std::size_t k_w, std::size_t stride, Padding pad) {
  ConvGeometry g{};
  if (pad == Padding::same) {
    g.out_h = (in_h + stride - 1) / stride;
    g.out_w = (in_w + stride - 1) / stride;
    const auto total = [&](std::size_t out, std::size_t in, std::size_t k) -> std::size_t {
      const std::size_t need = (out - 1) * stride + k;
      return need > in ? need - in : 0;
    };
    g.pad_top = total(g.out_h, in_h, k_h) / 2;
    g.pad_left = total(g.out_w, in_w, k_w) / 2;
  } else {
    if (in_h < k_h || in_w < k_w) throw ShapeError("conv2d: kernel larger than input (valid)");
    g.out_h = (in_h - k_h) / stride + 1;
    g.out_w = (in_w - k_w) / stride + 1;
  }
  return g;
}

// Half-open range of output indices o with 0 <= o*stride + k - pad < in.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t k, std::size_t pad,
                                                       std::size_t stride) {
  const auto lo_num = static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(k);
  std::size_t lo = lo_num <= 0 ? 0 : (static_cast<std::size_t>(lo_num) + stride - 1) / stride;
  // o*stride + k - pad <= in - 1  ->  o <= (in - 1 + pad - k) / stride
  const auto hi_num = static_cast<std::ptrdiff_t>(in) - 1 + static_cast<std::ptrdiff_t>(pad) -
                      static_cast<std::ptrdiff_t>(k);
  if (hi_num < 0) return {0, 0};
  std::size_t hi = std::min(out, static_cast<std::size_t>(hi_num) / stride + 1);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

template <class T> void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
}

} // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, Padding padding = Padding::same) {
  const Shape xs = x.shape(), ws = weight.shape();
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (xs.h == 0 || xs.w == 0) throw ShapeError("conv2d: zero-size spatial dims");
  if (ws.c != xs.c)
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                     std::to_string(ws.c));
  if (bias.numel() != ws.n) throw ShapeError("conv2d: bias length does not match output channels");

  const auto g = detail::conv_geometry(xs.h, xs.w, ws.h, ws.w, stride, padding);
  const Shape os{xs.n, ws.n, g.out_h, g.out_w};
  std::vector<T> out(os.numel());

  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.data().data();
  const std::size_t KH = ws.h, KW = ws.w, IC = xs.c, OC = ws.n;

  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t oc = 0; oc < OC; ++oc) {
      T* o = out.data() + (n * OC + oc) * os.plane();
      std::fill(o, o + os.plane(), bd[oc]);
      for (std::size_t ic = 0; ic < IC; ++ic) {
        const T* xin = xd + (n * IC + ic) * xs.plane();
        const T* wk = wd + (oc * IC + ic) * KH * KW;
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const auto [oh0, oh1] = detail::valid_range(g.out_h, xs.h, kh, g.pad_top, stride);
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const T wv = wk[kh * KW + kw];
            const auto [ow0, ow1] = detail::valid_range(g.out_w, xs.w, kw, g.pad_left, stride);
            for (std::size_t oh = oh0; oh < oh1; ++oh) {
              const T* irow = xin + (oh * stride + kh - g.pad_top) * xs.w;
              T* orow = o + oh * g.out_w;
              if (stride == 1) {
                // Unsigned wrap is intended: off + ow lands inside the row.
                const std::size_t off = kw - g.pad_left;
                for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * irow[off + ow];
              } else {
                for (std::size_t ow = ow0; ow < ow1; ++ow)
                  orow[ow] += wv * irow[ow * stride + kw - g.pad_left];
              }
            }
          }
        }
      }
    }
  }

  return detail::make_result<T>(
      os, std::move(out), {x, weight, bias},
      [x, weight, bias, g, stride](const detail::TensorImpl<T>& res) {
        const Shape xs = x.shape(), ws = weight.shape(), os = res.shape;
        const std::size_t KH = ws.h, KW = ws.w, IC = xs.c, OC = ws.n;
        T* dx = detail::grad_of(x.impl());
        T* dw = detail::grad_of(weight.impl());
        T* db = detail::grad_of(bias.impl());
        const T* xd = x.data().data();
        const T* wd = weight.data().data();
        const T* dy = res.grad.data();
        for (std::size_t n = 0; n < xs.n; ++n) {
          for (std::size_t oc = 0; oc < OC; ++oc) {
            const T* go = dy + (n * OC + oc) * os.plane();
            if (db) {
              T acc = 0;
              for (std::size_t i = 0; i < os.plane(); ++i) acc += go[i];
              db[oc] += acc;
            }
            for (std::size_t ic = 0; ic < IC; ++ic) {
              const T* xin = xd + (n * IC + ic) * xs.plane();
              T* gxin = dx ? dx + (n * IC + ic) * xs.plane() : nullptr;
              const std::size_t wbase = (oc * IC + ic) * KH * KW;
              for (std::size_t kh = 0; kh < KH; ++kh) {
                const auto [oh0, oh1] = detail::valid_range(os.h, xs.h, kh, g.pad_top, stride);
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const auto [ow0, ow1] = detail::valid_range(os.w, xs.w, kw, g.pad_left, stride);
                  const T wv = wd[wbase + kh * KW + kw];
                  T wacc = 0;
                  for (std::size_t oh = oh0; oh < oh1; ++oh) {
                    const std::size_t irow = (oh * stride + kh - g.pad_top) * xs.w;
                    const T* grow = go + oh * os.w;
                    if (stride == 1) {
                      const std::size_t shift = irow + kw - g.pad_left;
                      for (std::size_t ow = ow0; ow < ow1; ++ow) wacc += grow[ow] * xin[shift + ow];
                      if (gxin)
                        for (std::size_t ow = ow0; ow < ow1; ++ow) gxin[shift + ow] += wv * grow[ow];
                    } else {
                      for (std::size_t ow = ow0; ow < ow1; ++ow) {
                        const std::size_t ii = irow + ow * stride + kw - g.pad_left;
                        wacc += grow[ow] * xin[ii];
                        if (gxin) gxin[ii] += wv * grow[ow];
                      }
                    }
                  }
                  if (dw) dw[wbase + kh * KW + kw] += wacc;
                }
              }
            }
          }
        }
      },
      "conv2d");
}

/// 2x2 stride-2 transposed convolution; weight layout (in, out, 2, 2).
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride = 2) {
  const Shape xs = x.shape(), ws = weight.shape();
  if (stride != 2 || ws.h != 2 || ws.w != 2)
    throw ShapeError("conv_transpose2d: only kernel 2, stride 2 is supported");
  if (ws.n != xs.c)
    throw ShapeError("conv_transpose2d: input has " + std::to_string(xs.c) +
                     " channels, kernel expects " + std::to_string(ws.n));
  if (bias.numel() != ws.c) throw ShapeError("conv_transpose2d: bias length mismatch");

  const std::size_t IC = xs.c, OC = ws.c;
  const Shape os{xs.n, OC, xs.h * 2, xs.w * 2};
  std::vector<T> out(os.numel());
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.data().data();

  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t oc = 0; oc < OC; ++oc) {
      T* o = out.data() + (n * OC + oc) * os.plane();
      std::fill(o, o + os.plane(), bd[oc]);
      for (std::size_t ic = 0; ic < IC; ++ic) {
        const T* xin = xd + (n * IC + ic) * xs.plane();
        const T* wk = wd + (ic * OC + oc) * 4;
        for (std::size_t i = 0; i < xs.h; ++i) {
          T* r0 = o + (2 * i) * os.w;
          T* r1 = r0 + os.w;
          const T* xr = xin + i * xs.w;
          for (std::size_t j = 0; j < xs.w; ++j) {
            const T v = xr[j];
            r0[2 * j] += v * wk[0];
            r0[2 * j + 1] += v * wk[1];
            r1[2 * j] += v * wk[2];
            r1[2 * j + 1] += v * wk[3];
          }
        }
      }
    }
  }

  return detail::make_result<T>(
      os, std::move(out), {x, weight, bias},
      [x, weight, bias](const detail::TensorImpl<T>& res) {
        const Shape xs = x.shape(), os = res.shape;
        const std::size_t IC = xs.c, OC = os.c;
        T* dx = detail::grad_of(x.impl());
        T* dw = detail::grad_of(weight.impl());
        T* db = detail::grad_of(bias.impl());
        const T* xd = x.data().data();
        const T* wd = weight.data().data();
        const T* dy = res.grad.data();
        for (std::size_t n = 0; n < xs.n; ++n) {
          for (std::size_t oc = 0; oc < OC; ++oc) {
            const T* go = dy + (n * OC + oc) * os.plane();
            if (db) {
              T acc = 0;
              for (std::size_t i = 0; i < os.plane(); ++i) acc += go[i];
              db[oc] += acc;
            }
            for (std::size_t ic = 0; ic < IC; ++ic) {
              const T* xin = xd + (n * IC + ic) * xs.plane();
              T* gx = dx ? dx + (n * IC + ic) * xs.plane() : nullptr;
              const T* wk = wd + (ic * OC + oc) * 4;
              T acc[4] = {0, 0, 0, 0};
              for (std::size_t i = 0; i < xs.h; ++i) {
                const T* g0 = go + (2 * i) * os.w;
                const T* g1 = g0 + os.w;
                for (std::size_t j = 0; j < xs.w; ++j) {
                  const T v = xin[i * xs.w + j];
                  acc[0] += v * g0[2 * j];
                  acc[1] += v * g0[2 * j + 1];
                  acc[2] += v * g1[2 * j];
                  acc[3] += v * g1[2 * j + 1];
                  if (gx)
                    gx[i * xs.w + j] += wk[0] * g0[2 * j] + wk[1] * g0[2 * j + 1] +
                                        wk[2] * g1[2 * j] + wk[3] * g1[2 * j + 1];
                }
              }
              if (dw)
                for (int k = 0; k < 4; ++k) dw[(ic * OC + oc) * 4 + k] += acc[k];
            }
          }
        }
      },
      "conv_transpose2d");
}

/// 2x2 max pooling; ties resolve to the first window position in row-major order.
template <class T> Tensor<T> maxpool2x2(const Tensor<T>& x) {
  const Shape xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0)
    throw ShapeError("maxpool2x2: spatial dims must be even, got " + xs.str());
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  std::vector<T> out(os.numel());
  std::vector<std::uint32_t> argmax(os.numel());
  const T* xd = x.data().data();
  for (std::size_t p = 0; p < xs.n * xs.c; ++p) {
    const T* in = xd + p * xs.plane();
    for (std::size_t i = 0; i < os.h; ++i) {
      for (std::size_t j = 0; j < os.w; ++j) {
        const std::size_t cand[4] = {(2 * i) * xs.w + 2 * j, (2 * i) * xs.w + 2 * j + 1,
                                     (2 * i + 1) * xs.w + 2 * j, (2 * i + 1) * xs.w + 2 * j + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (in[cand[k]] > in[best]) best = cand[k];
        const std::size_t o = p * os.plane() + i * os.w + j;
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return detail::make_result<T>(
      os, std::move(out), {x},
      [x, argmax = std::move(argmax)](const detail::TensorImpl<T>& res) {
        T* dx = detail::grad_of(x.impl());
        if (!dx) return;
        const std::size_t in_plane = x.shape().plane(), out_plane = res.shape.plane();
        for (std::size_t o = 0; o < res.grad.size(); ++o)
          dx[(o / out_plane) * in_plane + argmax[o]] += res.grad[o];
      },
      "maxpool2x2");
}

/// Normalizes over the channel axis independently at every (batch, h, w) position.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const Shape xs = x.shape();
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  if (gamma.numel() != xs.c || beta.numel() != xs.c)
    throw ShapeError("layer_norm: gamma/beta length must equal channel count");
  const std::size_t C = xs.c, P = xs.plane();
  std::vector<T> out(xs.numel());
  std::vector<T> mean(xs.n * P, T(0)), inv_std(xs.n * P, T(0));
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::size_t n = 0; n < xs.n; ++n) {
    T* mu = mean.data() + n * P;
    T* is = inv_std.data() + n * P;
    const T* xb = xd + n * C * P;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) mu[p] += xb[c * P + p];
    for (std::size_t p = 0; p < P; ++p) mu[p] /= static_cast<T>(C);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const T d = xb[c * P + p] - mu[p];
        is[p] += d * d;
      }
    for (std::size_t p = 0; p < P; ++p) is[p] = T(1) / std::sqrt(is[p] / static_cast<T>(C) + eps);
    T* ob = out.data() + n * C * P;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p)
        ob[c * P + p] = gd[c] * (xb[c * P + p] - mu[p]) * is[p] + bd[c];
  }
  return detail::make_result<T>(
      xs, std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean = std::move(mean),
       inv_std = std::move(inv_std)](const detail::TensorImpl<T>& res) {
        const Shape xs = x.shape();
        const std::size_t C = xs.c, P = xs.plane();
        T* dx = detail::grad_of(x.impl());
        T* dg = detail::grad_of(gamma.impl());
        T* dbeta = detail::grad_of(beta.impl());
        const T* xd = x.data().data();
        const T* gd = gamma.data().data();
        const T* dy = res.grad.data();
        std::vector<T> s1(P), s2(P);
        for (std::size_t n = 0; n < xs.n; ++n) {
          const T* mu = mean.data() + n * P;
          const T* is = inv_std.data() + n * P;
          const T* xb = xd + n * C * P;
          const T* gb = dy + n * C * P;
          std::fill(s1.begin(), s1.end(), T(0));
          std::fill(s2.begin(), s2.end(), T(0));
          for (std::size_t c = 0; c < C; ++c) {
            T ag = 0, ab = 0;
            for (std::size_t p = 0; p < P; ++p) {
              const T xhat = (xb[c * P + p] - mu[p]) * is[p];
              const T g = gb[c * P + p];
              ag += g * xhat;
              ab += g;
              const T dxhat = g * gd[c];
              s1[p] += dxhat;
              s2[p] += dxhat * xhat;
            }
            if (dg) dg[c] += ag;
            if (dbeta) dbeta[c] += ab;
          }
          if (!dx) continue;
          T* gx = dx + n * C * P;
          const T invC = T(1) / static_cast<T>(C);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) {
              const T xhat = (xb[c * P + p] - mu[p]) * is[p];
              const T dxhat = gb[c * P + p] * gd[c];
              gx[c * P + p] += is[p] * (dxhat - s1[p] * invC - xhat * s2[p] * invC);
            }
        }
      },
      "layer_norm");
}

template <class T> Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [x](const detail::TensorImpl<T>& res) {
        T* dx = detail::grad_of(x.impl());
        if (!dx) return;
        const auto xd = x.data();
        for (std::size_t i = 0; i < res.grad.size(); ++i)
          if (xd[i] > T(0)) dx[i] += res.grad[i];
      },
      "relu");
}

template <class T> Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xd[i]));
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [x](const detail::TensorImpl<T>& res) {
        T* dx = detail::grad_of(x.impl());
        if (!dx) return;
        for (std::size_t i = 0; i < res.grad.size(); ++i) {
          const T y = res.data[i];
          dx[i] += res.grad[i] * y * (T(1) - y);
        }
      },
      "sigmoid");
}

/// Softmax across channels at every pixel.
template <class T> Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const std::size_t C = xs.c, P = xs.plane();
  std::vector<T> out(xs.numel());
  const T* xd = x.data().data();
  std::vector<T> mx(P), sum(P);
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* xb = xd + n * C * P;
    T* ob = out.data() + n * C * P;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
    std::fill(sum.begin(), sum.end(), T(0));
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) mx[p] = std::max(mx[p], xb[c * P + p]);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const T e = std::exp(xb[c * P + p] - mx[p]);
        ob[c * P + p] = e;
        sum[p] += e;
      }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) ob[c * P + p] /= sum[p];
  }
  return detail::make_result<T>(
      xs, std::move(out), {x},
      [x](const detail::TensorImpl<T>& res) {
        T* dx = detail::grad_of(x.impl());
        if (!dx) return;
        const Shape s = res.shape;
        const std::size_t C = s.c, P = s.plane();
        std::vector<T> dot(P);
        for (std::size_t n = 0; n < s.n; ++n) {
          const T* y = res.data.data() + n * C * P;
          const T* g = res.grad.data() + n * C * P;
          T* gx = dx + n * C * P;
          std::fill(dot.begin(), dot.end(), T(0));
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) dot[p] += g[c * P + p] * y[c * P + p];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p)
              gx[c * P + p] += y[c * P + p] * (g[c * P + p] - dot[p]);
        }
      },
      "softmax_channels");
}

template <class T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input list");
  const Shape s0 = xs.front().shape();
  std::size_t C = 0;
  for (const auto& t : xs) {
    const Shape s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw ShapeError("concat_channels: batch/spatial mismatch " + s.str() + " vs " + s0.str());
    C += s.c;
  }
  const Shape os{s0.n, C, s0.h, s0.w};
  const std::size_t P = s0.plane();
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < os.n; ++n) {
    std::size_t off = 0;
    for (const auto& t : xs) {
      const std::size_t len = t.shape().c * P;
      const T* src = t.data().data() + n * len;
      std::copy(src, src + len, out.data() + (n * C) * P + off);
      off += len;
    }
  }
  return detail::make_result<T>(
      os, std::move(out), xs,
      [xs](const detail::TensorImpl<T>& res) {
        const std::size_t P = res.shape.plane(), C = res.shape.c;
        for (std::size_t n = 0; n < res.shape.n; ++n) {
          std::size_t off = 0;
          for (const auto& t : xs) {
            const std::size_t len = t.shape().c * P;
            if (T* g = detail::grad_of(t.impl())) {
              const T* src = res.grad.data() + n * C * P + off;
              T* dst = g + n * len;
              for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
            }
            off += len;
          }
        }
      },
      "concat_channels");
}

/// Channel slice [begin, begin + count).
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape xs = x.shape();
  if (begin + count > xs.c) throw ShapeError("slice_channels: range exceeds channel count");
  const Shape os{xs.n, count, xs.h, xs.w};
  const std::size_t P = xs.plane();
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* src = x.data().data() + (n * xs.c + begin) * P;
    std::copy(src, src + count * P, out.data() + n * count * P);
  }
  return detail::make_result<T>(
      os, std::move(out), {x},
      [x, begin](const detail::TensorImpl<T>& res) {
        T* dx = detail::grad_of(x.impl());
        if (!dx) return;
        const Shape xs = x.shape();
        const std::size_t P = xs.plane(), count = res.shape.c;
        for (std::size_t n = 0; n < xs.n; ++n) {
          T* dst = dx + (n * xs.c + begin) * P;
          const T* src = res.grad.data() + n * count * P;
          for (std::size_t i = 0; i < count * P; ++i) dst[i] += src[i];
        }
      },
      "slice_channels");
}

template <class T> std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::size_t groups) {
  if (groups == 0 || x.shape().c % groups != 0)
    throw ShapeError("split_channels: " + std::to_string(x.shape().c) +
                     " channels not divisible into " + std::to_string(groups) + " groups");
  const std::size_t width = x.shape().c / groups;
  std::vector<Tensor<T>> parts;
  parts.reserve(groups);
  for (std::size_t g = 0; g < groups; ++g) parts.push_back(slice_channels(x, g * width, width));
  return parts;
}

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b},
      [a, b](const detail::TensorImpl<T>& res) {
        for (const auto* t : {&a, &b})
          if (T* g = detail::grad_of(t->impl()))
            for (std::size_t i = 0; i < res.grad.size(); ++i) g[i] += res.grad[i];
      },
      "add");
}

template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b},
      [a, b](const detail::TensorImpl<T>& res) {
        const auto ad = a.data(), bd = b.data();
        if (T* g = detail::grad_of(a.impl()))
          for (std::size_t i = 0; i < res.grad.size(); ++i) g[i] += res.grad[i] * bd[i];
        if (T* g = detail::grad_of(b.impl()))
          for (std::size_t i = 0; i < res.grad.size(); ++i) g[i] += res.grad[i] * ad[i];
      },
      "mul");
}

template <class T> Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [x, factor](const detail::TensorImpl<T>& res) {
        if (T* g = detail::grad_of(x.impl()))
          for (std::size_t i = 0; i < res.grad.size(); ++i) g[i] += res.grad[i] * factor;
      },
      "scale");
}

template <class T> Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>(
      {1, 1, 1, 1}, {acc}, {x},
      [x](const detail::TensorImpl<T>& res) {
        if (T* g = detail::grad_of(x.impl()))
          for (std::size_t i = 0; i < x.numel(); ++i) g[i] += res.grad[0];
      },
      "sum");
}

template <class T> Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum of scalar tensors, each multiplied by a constant weight.
template <class T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& scalars, const std::vector<T>& weights) {
  if (scalars.size() != weights.size() || scalars.empty())
    throw ShapeError("weighted_sum: need one weight per scalar");
  T acc = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) acc += weights[i] * scalars[i].item();
  return detail::make_result<T>(
      {1, 1, 1, 1}, {acc}, scalars,
      [scalars, weights](const detail::TensorImpl<T>& res) {
        for (std::size_t i = 0; i < scalars.size(); ++i)
          if (T* g = detail::grad_of(scalars[i].impl())) g[0] += weights[i] * res.grad[0];
      },
      "weighted_sum");
}

/// Row-stochastic attention weights softmax(q^T k / sqrt(d)) for one batch item;
/// returned as a P x P row-major matrix, P = h*w.
template <class T>
std::vector<T> attention_weights(std::span<const T> q, std::span<const T> k, std::size_t d,
                                 std::size_t P) {
  std::vector<T> a(P * P, T(0));
  const T inv = T(1) / std::sqrt(static_cast<T>(d));
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < P; ++i) {
      const T qi = q[c * P + i] * inv;
      T* row = a.data() + i * P;
      const T* kr = k.data() + c * P;
      for (std::size_t j = 0; j < P; ++j) row[j] += qi * kr[j];
    }
  for (std::size_t i = 0; i < P; ++i) {
    T* row = a.data() + i * P;
    const T mx = *std::max_element(row, row + P);
    T s = 0;
    for (std::size_t j = 0; j < P; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < P; ++j) row[j] /= s;
  }
  return a;
}

/// Non-local spatial attention: out[:, i] = sum_j A[i, j] v[:, j],
/// A = softmax_j(q[:, i] . k[:, j] / sqrt(d)).
template <class T> Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const Shape qs = q.shape(), vs = v.shape();
  detail::require_same_shape(q, k, "attend");
  if (qs.n != vs.n || qs.h != vs.h || qs.w != vs.w)
    throw ShapeError("attend: value map must share batch/spatial dims with queries");
  const std::size_t d = qs.c, C = vs.c, P = qs.plane();
  std::vector<T> out(vs.numel(), T(0));
  std::vector<std::vector<T>> saved(qs.n);
  for (std::size_t n = 0; n < qs.n; ++n) {
    saved[n] = attention_weights<T>(q.data().subspan(n * d * P, d * P),
                                    k.data().subspan(n * d * P, d * P), d, P);
    const T* a = saved[n].data();
    const T* vb = v.data().data() + n * C * P;
    T* ob = out.data() + n * C * P;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) {
        T acc = 0;
        const T* row = a + i * P;
        for (std::size_t j = 0; j < P; ++j) acc += row[j] * vb[c * P + j];
        ob[c * P + i] = acc;
      }
  }
  return detail::make_result<T>(
      vs, std::move(out), {q, k, v},
      [q, k, v, saved = std::move(saved)](const detail::TensorImpl<T>& res) {
        const Shape qs = q.shape(), vs = v.shape();
        const std::size_t d = qs.c, C = vs.c, P = qs.plane();
        const T inv = T(1) / std::sqrt(static_cast<T>(d));
        T* dq = detail::grad_of(q.impl());
        T* dk = detail::grad_of(k.impl());
        T* dv = detail::grad_of(v.impl());
        std::vector<T> ds(P * P);
        for (std::size_t n = 0; n < qs.n; ++n) {
          const T* a = saved[n].data();
          const T* vb = v.data().data() + n * C * P;
          const T* go = res.grad.data() + n * C * P;
          if (dv) {
            T* gv = dv + n * C * P;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t i = 0; i < P; ++i) {
                const T g = go[c * P + i];
                const T* row = a + i * P;
                for (std::size_t j = 0; j < P; ++j) gv[c * P + j] += row[j] * g;
              }
          }
          if (!dq && !dk) continue;
          // dA[i][j] = sum_c go[c,i] v[c,j]; then softmax backward into ds.
          std::fill(ds.begin(), ds.end(), T(0));
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < P; ++i) {
              const T g = go[c * P + i];
              T* row = ds.data() + i * P;
              for (std::size_t j = 0; j < P; ++j) row[j] += g * vb[c * P + j];
            }
          for (std::size_t i = 0; i < P; ++i) {
            T* row = ds.data() + i * P;
            const T* arow = a + i * P;
            T dot = 0;
            for (std::size_t j = 0; j < P; ++j) dot += row[j] * arow[j];
            for (std::size_t j = 0; j < P; ++j) row[j] = arow[j] * (row[j] - dot) * inv;
          }
          const T* qb = q.data().data() + n * d * P;
          const T* kb = k.data().data() + n * d * P;
          for (std::size_t c = 0; c < d; ++c)
            for (std::size_t i = 0; i < P; ++i) {
              const T* row = ds.data() + i * P;
              if (dq) {
                T acc = 0;
                for (std::size_t j = 0; j < P; ++j) acc += row[j] * kb[c * P + j];
                dq[n * d * P + c * P + i] += acc;
              }
              if (dk) {
                const T qi = qb[c * P + i];
                T* gk = dk + n * d * P + c * P;
                for (std::size_t j = 0; j < P; ++j) gk[j] += row[j] * qi;
              }
            }
        }
      },
      "attend");
}

} // namespace wricnet
