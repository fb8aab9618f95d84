#include "eegtta/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <type_traits>

namespace eegtta {

std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w) + ")";
}

const char* to_string(BnMode mode) {
  switch (mode) {
    case BnMode::FixedSource: return "fixed";
    case BnMode::TrackRunning: return "track";
    case BnMode::BatchOnly: return "batch";
  }
  return "?";
}

BnMode parse_bn_mode(const std::string& s) {
  if (s == "fixed" || s == "FixedSource") return BnMode::FixedSource;
  if (s == "track" || s == "TrackRunning") return BnMode::TrackRunning;
  if (s == "batch" || s == "BatchOnly") return BnMode::BatchOnly;
  throw std::invalid_argument("unknown BN mode '" + s + "' (expected fixed|track|batch)");
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "Conv2D";
    case LayerKind::DepthwiseConv2d: return "DepthwiseConv2D";
    case LayerKind::SeparableConv2d: return "SeparableConv2D";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::Elu: return "ELU";
    case LayerKind::AvgPool: return "AvgPool2D";
    case LayerKind::Dropout: return "Dropout";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Linear: return "Linear";
  }
  return "?";
}

template <std::floating_point T>
LayerKind kind_of(const Layer<T>& layer) {
  return std::visit(
      [](const auto& l) -> LayerKind {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d<T>>) return l.kind;
        else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) return LayerKind::SeparableConv2d;
        else if constexpr (std::is_same_v<L, BatchNorm<T>>) return LayerKind::BatchNorm;
        else if constexpr (std::is_same_v<L, Elu<T>>) return LayerKind::Elu;
        else if constexpr (std::is_same_v<L, AvgPool>) return LayerKind::AvgPool;
        else if constexpr (std::is_same_v<L, Dropout>) return LayerKind::Dropout;
        else if constexpr (std::is_same_v<L, Flatten>) return LayerKind::Flatten;
        else return LayerKind::Linear;
      },
      layer);
}

namespace {

template <class>
inline constexpr bool always_false = false;

// ---------- convolution kernels ----------

// Deterministic sums with eight independent double lanes (vectorizable, fixed order).
template <std::floating_point T>
double lane_sum(const T* __restrict p, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(p[i + j]);
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += static_cast<double>(p[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <std::floating_point T>
double lane_dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += static_cast<double>(a[i + j]) * static_cast<double>(b[i + j]);
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <std::floating_point T>
double lane_sq_dev(const T* __restrict p, std::size_t n, double mu) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) {
      const double d = static_cast<double>(p[i + j]) - mu;
      acc[j] += d * d;
    }
  for (std::size_t j = 0; i < n; ++i, ++j) {
    const double d = static_cast<double>(p[i]) - mu;
    acc[j] += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

constexpr std::size_t kBlock = 64;

// out[o] += sum_k w[k] * padded[o + k] for o < out_w. `padded` must hold out_w + kw - 1 + kBlock
// values (zero tail), so every block reads in bounds.
template <std::floating_point T>
void correlate_row(const T* __restrict padded, const T* __restrict w, std::size_t kw, T* __restrict out,
                   std::size_t out_w) {
  for (std::size_t o = 0; o < out_w; o += kBlock) {
    T acc[kBlock];
    const std::size_t len = std::min(kBlock, out_w - o);
    for (std::size_t v = 0; v < kBlock; ++v) acc[v] = v < len ? out[o + v] : T(0);
    for (std::size_t k = 0; k < kw; ++k) {
      const T wv = w[k];
      const T* __restrict src = padded + o + k;
      for (std::size_t v = 0; v < kBlock; ++v) acc[v] += wv * src[v];
    }
    for (std::size_t v = 0; v < len; ++v) out[o + v] = acc[v];
  }
}

// Four filters over the same padded row at once; more independent FMA chains than
// correlate_row. w holds the four kernels at stride w_stride.
constexpr std::size_t kBlock4 = 32;

template <std::floating_point T>
void correlate_row4(const T* __restrict padded, const T* __restrict w, std::size_t w_stride,
                    std::size_t kw, T* const* out, std::size_t out_w) {
  for (std::size_t o = 0; o < out_w; o += kBlock4) {
    T acc[4][kBlock4];
    const std::size_t len = std::min(kBlock4, out_w - o);
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t v = 0; v < kBlock4; ++v) acc[f][v] = v < len ? out[f][o + v] : T(0);
    for (std::size_t k = 0; k < kw; ++k) {
      const T* __restrict src = padded + o + k;
      const T w0 = w[k], w1 = w[w_stride + k], w2 = w[2 * w_stride + k], w3 = w[3 * w_stride + k];
      for (std::size_t v = 0; v < kBlock4; ++v) {
        const T x = src[v];
        acc[0][v] += w0 * x;
        acc[1][v] += w1 * x;
        acc[2][v] += w2 * x;
        acc[3][v] += w3 * x;
      }
    }
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t v = 0; v < len; ++v) out[f][o + v] = acc[f][v];
  }
}

// dw_f[k] += sum_o dy_f[o] * padded[o + k] for four filters sharing one input row.
template <std::floating_point T>
void weight_grad_row4(const T* __restrict padded, const T* const* dy, std::size_t out_w, std::size_t kw,
                      T* const* dw) {
  constexpr std::size_t kB = 64;
  for (std::size_t k0 = 0; k0 < kw; k0 += kB) {
    T acc[4][kB] = {};
    const std::size_t len = std::min(kB, kw - k0);
    const T* __restrict d0 = dy[0];
    const T* __restrict d1 = dy[1];
    const T* __restrict d2 = dy[2];
    const T* __restrict d3 = dy[3];
    for (std::size_t o = 0; o < out_w; ++o) {
      const T* __restrict src = padded + o + k0;
      const T a0 = d0[o], a1 = d1[o], a2 = d2[o], a3 = d3[o];
      for (std::size_t v = 0; v < kB; ++v) {
        const T x = src[v];
        acc[0][v] += a0 * x;
        acc[1][v] += a1 * x;
        acc[2][v] += a2 * x;
        acc[3][v] += a3 * x;
      }
    }
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t v = 0; v < len; ++v) dw[f][k0 + v] += acc[f][v];
  }
}

template <std::floating_point T>
void conv_forward(const ConvParams<T>& p, const Tensor4<T>& in, Tensor4<T>& out) {
  const Shape4 is = in.shape();
  const Shape4 os = out.shape();
  const std::size_t ipg = p.in_per_group();
  const std::size_t opg = p.out_per_group();
  const auto pt = static_cast<std::ptrdiff_t>(p.pad_top);
  std::vector<T> padded(os.w + p.kw - 1 + kBlock, T(0));
  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t oc = 0; oc < os.c; ++oc) {
      std::span<T> oplane = out.plane(n, oc);
      std::fill(oplane.begin(), oplane.end(), p.bias.empty() ? T(0) : p.bias[oc]);
    }
    for (std::size_t ic = 0; ic < is.c; ++ic) {
      const std::size_t g = ic / ipg;
      const std::size_t icg = ic % ipg;
      for (std::size_t ih = 0; ih < is.h; ++ih) {
        // Row ih shifted by the left padding, zeros elsewhere.
        const T* irow = &in(n, ic, ih, 0);
        for (std::size_t j = 0; j < padded.size(); ++j) {
          const auto src = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(p.pad_left);
          padded[j] = src >= 0 && src < static_cast<std::ptrdiff_t>(is.w) ? irow[src] : T(0);
        }
        std::size_t oc0 = g * opg;
        if (p.kh == 1 && p.kw > 1) {
          const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih) + pt;
          if (oh >= 0 && oh < static_cast<std::ptrdiff_t>(os.h)) {
            for (; oc0 + 4 <= (g + 1) * opg; oc0 += 4) {
              T* rows[4];
              for (std::size_t f = 0; f < 4; ++f) rows[f] = &out(n, oc0 + f, static_cast<std::size_t>(oh), 0);
              correlate_row4(padded.data(), p.weight.data() + ((oc0 * ipg + icg) * p.kh) * p.kw,
                             ipg * p.kh * p.kw, p.kw, rows, os.w);
            }
          }
        }
        for (std::size_t oc = oc0; oc < (g + 1) * opg; ++oc) {
          for (std::size_t kh = 0; kh < p.kh; ++kh) {
            const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih) + pt - static_cast<std::ptrdiff_t>(kh);
            if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(os.h)) continue;
            const T* wk = p.weight.data() + ((oc * ipg + icg) * p.kh + kh) * p.kw;
            T* orow = &out(n, oc, static_cast<std::size_t>(oh), 0);
            if (p.kw == 1) {
              const T wv = wk[0];
              const T* __restrict src = padded.data();
              for (std::size_t o = 0; o < os.w; ++o) orow[o] += wv * src[o];
            } else {
              correlate_row(padded.data(), wk, p.kw, orow, os.w);
            }
          }
        }
      }
    }
  }
}

// Accumulates weight/bias gradients into dw/db (may be null) and writes dx (may be null).
template <std::floating_point T>
void conv_backward(const ConvParams<T>& p, const Tensor4<T>& in, const Tensor4<T>& dy,
                   Tensor4<T>* dx, T* dw, T* db) {
  const Shape4 is = in.shape();
  const Shape4 os = dy.shape();
  const std::size_t ipg = p.in_per_group();
  const std::size_t opg = p.out_per_group();
  const auto pt = static_cast<std::ptrdiff_t>(p.pad_top);
  if (dx) *dx = Tensor4<T>(is);
  // Input row shifted by the left padding (for dw) and dy row shifted for the transposed
  // correlation (for dx), both zero-extended.
  std::vector<T> padded(os.w + p.kw - 1 + kBlock, T(0));
  std::vector<T> dpad(is.w + p.kw - 1 + kBlock, T(0));
  std::vector<T> wrev(p.kw);
  const auto dshift = static_cast<std::ptrdiff_t>(p.kw) - 1 - static_cast<std::ptrdiff_t>(p.pad_left);
  for (std::size_t n = 0; n < os.n; ++n) {
    if (db)
      for (std::size_t oc = 0; oc < os.c; ++oc) db[oc] += static_cast<T>(lane_sum(dy.plane(n, oc).data(), os.plane()));
    for (std::size_t ic = 0; ic < is.c; ++ic) {
      const std::size_t g = ic / ipg;
      const std::size_t icg = ic % ipg;
      for (std::size_t ih = 0; ih < is.h; ++ih) {
        if (dw) {
          const T* irow = &in(n, ic, ih, 0);
          for (std::size_t j = 0; j < padded.size(); ++j) {
            const auto src = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(p.pad_left);
            padded[j] = src >= 0 && src < static_cast<std::ptrdiff_t>(is.w) ? irow[src] : T(0);
          }
        }
        T* dxrow = dx ? &(*dx)(n, ic, ih, 0) : nullptr;
        // Long temporal kernels: weight gradients of four filters per pass over the row.
        std::size_t dw_done = g * opg;
        if (dw && p.kh == 1 && p.kw >= 8) {
          const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih) + pt;
          if (oh >= 0 && oh < static_cast<std::ptrdiff_t>(os.h)) {
            for (; dw_done + 4 <= (g + 1) * opg; dw_done += 4) {
              const T* rows[4];
              T* dws[4];
              for (std::size_t f = 0; f < 4; ++f) {
                rows[f] = &dy(n, dw_done + f, static_cast<std::size_t>(oh), 0);
                dws[f] = dw + ((dw_done + f) * ipg + icg) * p.kw;
              }
              weight_grad_row4(padded.data(), rows, os.w, p.kw, dws);
            }
          } else {
            dw_done = (g + 1) * opg;
          }
        }
        for (std::size_t oc = g * opg; oc < (g + 1) * opg; ++oc) {
          for (std::size_t kh = 0; kh < p.kh; ++kh) {
            const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih) + pt - static_cast<std::ptrdiff_t>(kh);
            if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(os.h)) continue;
            const std::size_t wbase = ((oc * ipg + icg) * p.kh + kh) * p.kw;
            const T* __restrict dyrow = &dy(n, oc, static_cast<std::size_t>(oh), 0);
            if (dw && oc >= dw_done && p.kw < 8) {
              for (std::size_t k = 0; k < p.kw; ++k)
                dw[wbase + k] += static_cast<T>(lane_dot(dyrow, padded.data() + k, os.w));
            } else if (dw && oc >= dw_done) {
              // dw[k] += sum_o dy[o] * padded[o + k], blocked over k.
              for (std::size_t k0 = 0; k0 < p.kw; k0 += kBlock) {
                T acc[kBlock] = {};
                const std::size_t len = std::min(kBlock, p.kw - k0);
                for (std::size_t o = 0; o < os.w; ++o) {
                  const T d = dyrow[o];
                  const T* __restrict src = padded.data() + o + k0;
                  for (std::size_t v = 0; v < kBlock; ++v) acc[v] += d * src[v];
                }
                for (std::size_t v = 0; v < len; ++v) dw[wbase + k0 + v] += acc[v];
              }
            }
            if (dxrow) {
              if (p.kw == 1) {
                const T wv = p.weight[wbase];
                for (std::size_t o = 0; o < os.w; ++o) dxrow[o] += wv * dyrow[o];
              } else {
                for (std::size_t j = 0; j < dpad.size(); ++j) {
                  const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(j) - dshift;
                  dpad[j] = src >= 0 && src < static_cast<std::ptrdiff_t>(os.w) ? dyrow[src] : T(0);
                }
                for (std::size_t k = 0; k < p.kw; ++k) wrev[k] = p.weight[wbase + p.kw - 1 - k];
                correlate_row(dpad.data(), wrev.data(), p.kw, dxrow, is.w);
              }
            }
          }
        }
      }
    }
  }
}

// ---------- batch normalization ----------

template <std::floating_point T>
Tensor4<T> bn_forward(const Tensor4<T>& x, const BnState<T>& bn, BnState<T>* mut, bool training,
                      LayerCache<T>* lc) {
  const Shape4 s = x.shape();
  if (s.c != bn.channels()) {
    throw std::invalid_argument("batchnorm: input has " + std::to_string(s.c) +
                                " channels, layer has " + std::to_string(bn.channels()));
  }
  const double m = static_cast<double>(s.n * s.plane());
  const bool update = training && mut != nullptr && bn.mode != BnMode::FixedSource;
  const bool need_batch = bn.mode == BnMode::BatchOnly || update;
  Tensor4<T> y(s);
  Tensor4<T> xhat;
  if (lc) {
    xhat = Tensor4<T>(s);
    lc->mean.assign(s.c, T(0));
    lc->inv_std.assign(s.c, T(0));
    lc->batch_mean.assign(s.c, T(0));
    lc->coupling = T(0);
  }
  for (std::size_t c = 0; c < s.c; ++c) {
    T bmean = T(0);
    T bvar = T(0);
    if (need_batch) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) acc += lane_sum(x.plane(n, c).data(), s.plane());
      const double mu = acc / m;
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) sq += lane_sq_dev(x.plane(n, c).data(), s.plane(), mu);
      bmean = static_cast<T>(mu);
      bvar = static_cast<T>(sq / m);
    }
    if (update) {
      mut->running_mean[c] = bn.momentum * bn.running_mean[c] + (T(1) - bn.momentum) * bmean;
      mut->running_var[c] = bn.momentum * bn.running_var[c] + (T(1) - bn.momentum) * bvar;
    }
    T mean = bn.running_mean[c];
    T var = bn.running_var[c];
    T coupling = T(0);
    if (bn.mode == BnMode::BatchOnly) {
      mean = bmean;
      var = bvar;
      coupling = T(1);
    } else if (bn.mode == BnMode::TrackRunning && update) {
      coupling = T(1) - bn.momentum;
    }
    const T denom = var + bn.eps;
    if (!(denom > T(0))) throw std::logic_error("batchnorm: non-positive variance");
    const T r = T(1) / std::sqrt(denom);
    const T g = bn.gamma[c];
    const T b = bn.beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      std::span<const T> xp = x.plane(n, c);
      std::span<T> yp = y.plane(n, c);
      if (lc) {
        std::span<T> hp = xhat.plane(n, c);
        for (std::size_t i = 0; i < xp.size(); ++i) {
          hp[i] = (xp[i] - mean) * r;
          yp[i] = g * hp[i] + b;
        }
      } else {
        for (std::size_t i = 0; i < xp.size(); ++i) yp[i] = g * ((xp[i] - mean) * r) + b;
      }
    }
    if (lc) {
      lc->mean[c] = mean;
      lc->inv_std[c] = r;
      lc->batch_mean[c] = bmean;
      lc->coupling = coupling;
    }
  }
  if (lc) lc->aux = std::move(xhat);
  return y;
}

template <std::floating_point T>
void bn_backward(const BnState<T>& bn, const LayerCache<T>& lc, const Tensor4<T>& dy,
                 Tensor4<T>* dx, T* dgamma, T* dbeta) {
  const Shape4 s = dy.shape();
  const T m = static_cast<T>(s.n * s.plane());
  if (dx) *dx = Tensor4<T>(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc_g = 0.0;
    double acc_gx = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      acc_g += lane_sum(dy.plane(n, c).data(), s.plane());
      acc_gx += lane_dot(dy.plane(n, c).data(), lc.aux.plane(n, c).data(), s.plane());
    }
    const T sum_g = static_cast<T>(acc_g);
    const T sum_gx = static_cast<T>(acc_gx);
    if (dgamma) dgamma[c] += sum_gx;
    if (dbeta) dbeta[c] += sum_g;
    if (!dx) continue;
    const T gamma = bn.gamma[c];
    const T r = lc.inv_std[c];
    const T k = lc.coupling;
    // Statistics used for normalization depend on the batch with slope `k`:
    //   d mean = -r * sum(h),  d var = -0.5 r^2 * gamma * sum(g * xhat),
    //   dx_i = h_i r + k/M (d mean + 2 d var (z_i - batch_mean)).
    const T dmean = -r * gamma * sum_g;
    const T dvar = T(-0.5) * r * r * gamma * sum_gx;
    const T shift = lc.mean[c] - lc.batch_mean[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      std::span<const T> gp = dy.plane(n, c);
      std::span<const T> hp = lc.aux.plane(n, c);
      std::span<T> dp = dx->plane(n, c);
      for (std::size_t i = 0; i < gp.size(); ++i) {
        T v = gp[i] * gamma * r;
        if (k != T(0)) {
          const T centered = hp[i] / r + shift;  // z_i - batch_mean
          v += k / m * (dmean + T(2) * dvar * centered);
        }
        dp[i] = v;
      }
    }
  }
}

// ---------- misc layers ----------

template <std::floating_point T>
Tensor4<T> avgpool_forward(const AvgPool& p, const Tensor4<T>& x) {
  const Shape4 s = x.shape();
  Shape4 os{s.n, s.c, s.h / p.ph, s.w / p.pw};
  Tensor4<T> y(os);
  const T scale = T(1) / static_cast<T>(p.ph * p.pw);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oh = 0; oh < os.h; ++oh)
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          T acc = T(0);
          for (std::size_t i = 0; i < p.ph; ++i)
            for (std::size_t j = 0; j < p.pw; ++j) acc += x(n, c, oh * p.ph + i, ow * p.pw + j);
          y(n, c, oh, ow) = acc * scale;
        }
  return y;
}

template <std::floating_point T>
Tensor4<T> avgpool_backward(const AvgPool& p, const Shape4& in_shape, const Tensor4<T>& dy) {
  Tensor4<T> dx(in_shape);
  const Shape4 os = dy.shape();
  const T scale = T(1) / static_cast<T>(p.ph * p.pw);
  for (std::size_t n = 0; n < os.n; ++n)
    for (std::size_t c = 0; c < os.c; ++c)
      for (std::size_t oh = 0; oh < os.h; ++oh)
        for (std::size_t ow = 0; ow < os.w; ++ow) {
          const T g = dy(n, c, oh, ow) * scale;
          for (std::size_t i = 0; i < p.ph; ++i)
            for (std::size_t j = 0; j < p.pw; ++j) dx(n, c, oh * p.ph + i, ow * p.pw + j) = g;
        }
  return dx;
}

inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <std::floating_point T>
std::vector<T> cast_vec(const auto& v) {
  return std::vector<T>(v.begin(), v.end());
}

template <std::floating_point U, std::floating_point T>
ConvParams<U> cast_conv(const ConvParams<T>& p) {
  ConvParams<U> q;
  q.in_ch = p.in_ch;
  q.out_ch = p.out_ch;
  q.kh = p.kh;
  q.kw = p.kw;
  q.groups = p.groups;
  q.pad_top = p.pad_top;
  q.pad_bottom = p.pad_bottom;
  q.pad_left = p.pad_left;
  q.pad_right = p.pad_right;
  q.weight = cast_vec<U>(p.weight);
  q.bias = cast_vec<U>(p.bias);
  return q;
}

template <std::floating_point T>
void check_conv(const ConvParams<T>& p, const Shape4& in, std::size_t index) {
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("layer " + std::to_string(index) + ": " + what);
  };
  if (p.groups == 0 || p.in_ch % p.groups != 0 || p.out_ch % p.groups != 0)
    fail("conv groups must divide channel counts");
  if (in.c != p.in_ch)
    fail("conv expects " + std::to_string(p.in_ch) + " input channels, got " + std::to_string(in.c));
  if (p.weight.size() != p.out_ch * p.in_per_group() * p.kh * p.kw) fail("conv weight size mismatch");
  if (!p.bias.empty() && p.bias.size() != p.out_ch) fail("conv bias size mismatch");
  if (in.h + p.pad_top + p.pad_bottom < p.kh || in.w + p.pad_left + p.pad_right < p.kw)
    fail("conv kernel larger than padded input");
}

void fnv_mix(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
}

template <std::floating_point T>
void fnv_vec(std::uint64_t& h, const std::vector<T>& v) {
  fnv_mix(h, v.data(), v.size() * sizeof(T));
}

}  // namespace

template <std::floating_point T>
Tensor4<T> bn_apply(const Tensor4<T>& x, BnState<T>& bn, bool training) {
  return bn_forward<T>(x, bn, &bn, training, nullptr);
}

// ---------- Network ----------

template <std::floating_point T>
Network<T>::Network(Shape4 input, std::vector<Layer<T>> layers)
    : input_{1, input.c, input.h, input.w}, layers_(std::move(layers)) {
  validate();
}

template <std::floating_point T>
void Network<T>::validate() {
  if (layers_.empty()) throw std::invalid_argument("network has no layers");
  Shape4 s = input_;
  bool seen_bn = false;
  stem_end_ = layers_.size();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            check_conv(l.conv, s, i);
            s = l.conv.output_shape(s);
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            check_conv(l.depthwise, s, i);
            s = l.depthwise.output_shape(s);
            check_conv(l.pointwise, s, i);
            s = l.pointwise.output_shape(s);
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            const auto& b = l.bn;
            if (b.channels() != s.c || b.beta.size() != s.c || b.running_mean.size() != s.c ||
                b.running_var.size() != s.c)
              throw std::invalid_argument("layer " + std::to_string(i) +
                                          ": batchnorm channel mismatch");
            for (T v : b.running_var)
              if (v < T(0)) throw std::invalid_argument("batchnorm running_var must be >= 0");
            if (!seen_bn) stem_end_ = i;
            seen_bn = true;
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            if (l.ph == 0 || l.pw == 0 || s.h < l.ph || s.w < l.pw)
              throw std::invalid_argument("layer " + std::to_string(i) + ": bad pool size");
            s = {s.n, s.c, s.h / l.ph, s.w / l.pw};
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (l.rate < 0.0 || l.rate >= 1.0)
              throw std::invalid_argument("dropout rate must be in [0,1)");
          } else if constexpr (std::is_same_v<L, Flatten>) {
            s = {s.n, s.per_sample(), 1, 1};
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            if (i + 1 != layers_.size())
              throw std::invalid_argument("Linear must be the final layer");
            if (s.h != 1 || s.w != 1 || s.c != l.in)
              throw std::invalid_argument("Linear expects " + std::to_string(l.in) +
                                          " flattened inputs, got " + to_string(s));
            if (l.weight.size() != l.in * l.out || l.bias.size() != l.out)
              throw std::invalid_argument("Linear parameter size mismatch");
            s = {s.n, l.out, 1, 1};
          }
        },
        layers_[i]);
  }
  if (!std::holds_alternative<Linear<T>>(layers_.back()))
    throw std::invalid_argument("network must end with a Linear layer");
  linear_index_ = layers_.size() - 1;
  const auto& head = std::get<Linear<T>>(layers_.back());
  if (head.out < 2) throw std::invalid_argument("class count must be >= 2");
  classes_ = head.out;
  feature_dim_ = head.in;
  if (!seen_bn) stem_end_ = linear_index_;
  foldable_ = false;
  if (seen_bn && stem_end_ + 1 < linear_index_) {
    if (const auto* c = std::get_if<Conv2d<T>>(&layers_[stem_end_ + 1])) {
      const auto& p = c->conv;
      foldable_ = p.groups == p.in_ch && p.pad_top == 0 && p.pad_bottom == 0 && p.pad_left == 0 &&
                  p.pad_right == 0;
    }
  }
  direct_stem_ = false;
  if (foldable_ && stem_end_ == 1 && input_.c == 1) {
    const auto* t = std::get_if<Conv2d<T>>(&layers_[0]);
    const auto& d = std::get<Conv2d<T>>(layers_[2]).conv;
    direct_stem_ = t && t->conv.groups == 1 && t->conv.kh == 1 && t->conv.pad_top == 0 &&
                   t->conv.pad_bottom == 0 && d.kw == 1;
  }
}

template <std::floating_point T>
ForwardResult<T> Network<T>::forward(const Tensor4<T>& x, bool keep_cache) const {
  PassOptions opts;
  opts.keep_cache = keep_cache;
  return const_cast<Network&>(*this).run(0, x, opts, false);
}

template <std::floating_point T>
ForwardResult<T> Network<T>::forward(const Tensor4<T>& x, const PassOptions& opts) {
  return run(0, x, opts, true);
}

template <std::floating_point T>
Tensor4<T> Network<T>::forward_stem(const Tensor4<T>& x) const {
  const Shape4 s = x.shape();
  if (s.c != input_.c || s.h != input_.h || s.w != input_.w)
    throw std::invalid_argument("input shape " + to_string(s) + " does not match network input " +
                                to_string(input_));
  if (!x.all_finite()) throw std::invalid_argument("non-finite input");
  Tensor4<T> cur = x;
  for (std::size_t i = 0; i < stem_end_; ++i) {
    const auto& l = layers_[i];
    if (const auto* c = std::get_if<Conv2d<T>>(&l)) {
      Tensor4<T> out(c->conv.output_shape(cur.shape()));
      conv_forward(c->conv, cur, out);
      cur = std::move(out);
    } else if (const auto* sc = std::get_if<SeparableConv2d<T>>(&l)) {
      Tensor4<T> mid(sc->depthwise.output_shape(cur.shape()));
      conv_forward(sc->depthwise, cur, mid);
      Tensor4<T> out(sc->pointwise.output_shape(mid.shape()));
      conv_forward(sc->pointwise, mid, out);
      cur = std::move(out);
    } else {
      throw std::logic_error("forward_stem: unsupported layer before first BN: " +
                             std::string(to_string(kind_of<T>(l))));
    }
  }
  return cur;
}

template <std::floating_point T>
ForwardResult<T> Network<T>::forward_from_stem(const Tensor4<T>& stem, bool keep_cache) const {
  PassOptions opts;
  opts.keep_cache = keep_cache;
  return const_cast<Network&>(*this).run(stem_end_, stem, opts, false);
}

template <std::floating_point T>
ForwardResult<T> Network<T>::forward_from_stem(const Tensor4<T>& stem, const PassOptions& opts) {
  return run(stem_end_, stem, opts, true);
}

template <std::floating_point T>
StemCache<T> stack_stems(std::span<const StemCache<T>* const> parts) {
  if (parts.empty()) throw std::invalid_argument("stack_stems: nothing to stack");
  StemCache<T> out;
  out.folded = parts.front()->folded;
  out.plane = parts.front()->plane;
  std::vector<const Tensor4<T>*> data;
  for (const auto* p : parts) {
    if (p->folded != out.folded || p->plane != out.plane)
      throw std::invalid_argument("stack_stems: mixed cache forms");
    data.push_back(&p->data);
    out.sum.insert(out.sum.end(), p->sum.begin(), p->sum.end());
    out.sumsq.insert(out.sumsq.end(), p->sumsq.begin(), p->sumsq.end());
  }
  out.data = stack<T>(data);
  return out;
}

template <std::floating_point T>
StemCache<T> Network<T>::make_stem_cache(const Tensor4<T>& x) const {
  if (direct_stem_) return direct_stem_cache(x);
  return make_stem_cache_from_stem(forward_stem(x));
}

// Stem s_f = w_f * x + b_f (temporal kernel over each electrode row), depthwise kernel v_o over
// rows. Then
//   depthwise(s)[o] = w_f * (sum_j v_o[j] x[oh + j]) + b_f sum_j v_o[j]
//   sum s_f   = sum_k w_f[k] c[k] + H P b_f,       c[k] = sum_h sum_p x[h, p + k]
//   sum s_f^2 = w_f' G w_f + 2 b_f sum_k w_f[k] c[k] + H P b_f^2
// with G[k][l] = sum_h sum_p x[h, p + k] x[h, p + l] over the zero-padded rows, p < P.
template <std::floating_point T>
StemCache<T> Network<T>::direct_stem_cache(const Tensor4<T>& x) const {
  const Shape4 s = x.shape();
  if (s.c != input_.c || s.h != input_.h || s.w != input_.w)
    throw std::invalid_argument("input shape " + to_string(s) + " does not match network input " +
                                to_string(input_));
  const auto& tc = std::get<Conv2d<T>>(layers_[0]).conv;
  const auto& dc = std::get<Conv2d<T>>(layers_[2]).conv;
  const Shape4 ss = tc.output_shape(s);
  const Shape4 ds = dc.output_shape(ss);
  const std::size_t nf = tc.out_ch, kw = tc.kw, hh = s.h, pw = ss.w;
  const std::size_t row = pw + kw - 1;  // padded row length
  const std::size_t opg = dc.out_per_group();

  StemCache<T> sc;
  sc.folded = true;
  sc.plane = ss.plane();
  sc.sum.assign(s.n * nf, 0.0);
  sc.sumsq.assign(s.n * nf, 0.0);
  sc.data = Tensor4<T>(ds);

  std::vector<T> xp(hh * row, T(0));
  std::vector<T> proj(row + kBlock, T(0));
  std::vector<double> c(kw), g(kw * kw), colsum(row);
  std::vector<double> xd(row + kw + kBlock, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t h = 0; h < hh; ++h) {
      const T* src = &x(n, 0, h, 0);
      T* dst = xp.data() + h * row;
      std::fill(dst, dst + row, T(0));
      for (std::size_t w = 0; w < s.w && tc.pad_left + w < row; ++w) dst[tc.pad_left + w] = src[w];
    }

    // depthwise(stem) for every output channel and row.
    for (std::size_t o = 0; o < ds.c; ++o) {
      const std::size_t f = o / opg;
      const T* v = dc.weight.data() + o * dc.kh;
      T vsum = T(0);
      for (std::size_t j = 0; j < dc.kh; ++j) vsum += v[j];
      const T bias = tc.bias.empty() ? T(0) : tc.bias[f] * vsum;
      for (std::size_t oh = 0; oh < ds.h; ++oh) {
        std::fill(proj.begin(), proj.end(), T(0));
        for (std::size_t j = 0; j < dc.kh; ++j) {
          const T vj = v[j];
          const T* __restrict r = xp.data() + (oh + j) * row;
          T* __restrict pr = proj.data();
          for (std::size_t q = 0; q < row; ++q) pr[q] += vj * r[q];
        }
        T* out = &sc.data(n, o, oh, 0);
        std::fill(out, out + pw, bias);
        correlate_row(proj.data(), tc.weight.data() + f * kw, kw, out, pw);
      }
    }

    // Window sums and the Gram matrix of the padded rows.
    std::fill(colsum.begin(), colsum.end(), 0.0);
    for (std::size_t h = 0; h < hh; ++h)
      for (std::size_t q = 0; q < row; ++q) colsum[q] += static_cast<double>(xp[h * row + q]);
    double win = 0.0;
    for (std::size_t p = 0; p < pw; ++p) win += colsum[p];
    for (std::size_t k = 0; k < kw; ++k) {
      c[k] = win;
      if (k + 1 < kw) win += colsum[pw + k] - colsum[k];
    }
    // First Gram row in double, blocked over the lag.
    for (std::size_t h = 0; h < hh; ++h) {
      const T* r = xp.data() + h * row;
      for (std::size_t q = 0; q < row; ++q) xd[q] = static_cast<double>(r[q]);
      for (std::size_t l0 = 0; l0 < kw; l0 += kBlock) {
        double acc[kBlock] = {};
        for (std::size_t p = 0; p < pw; ++p) {
          const double a = xd[p];
          const double* __restrict src = xd.data() + p + l0;
          for (std::size_t v = 0; v < kBlock; ++v) acc[v] += a * src[v];
        }
        for (std::size_t v = 0; v < kBlock && l0 + v < kw; ++v) g[l0 + v] = (h == 0 ? 0.0 : g[l0 + v]) + acc[v];
      }
    }
    for (std::size_t k = 0; k + 1 < kw; ++k)
      for (std::size_t l = k; l + 1 < kw; ++l) {
        double d = 0.0;
        for (std::size_t h = 0; h < hh; ++h) {
          const T* r = xp.data() + h * row;
          d += static_cast<double>(r[pw + k]) * r[pw + l] - static_cast<double>(r[k]) * r[l];
        }
        g[(k + 1) * kw + l + 1] = g[k * kw + l] + d;
      }
    const double hp = static_cast<double>(hh * pw);
    for (std::size_t f = 0; f < nf; ++f) {
      const T* w = tc.weight.data() + f * kw;
      double lin = 0.0, quad = 0.0;
      for (std::size_t k = 0; k < kw; ++k) {
        lin += static_cast<double>(w[k]) * c[k];
        double inner = 0.0;
        for (std::size_t l = 0; l < kw; ++l)
          inner += static_cast<double>(w[l]) * (l >= k ? g[k * kw + l] : g[l * kw + k]);
        quad += static_cast<double>(w[k]) * inner;
      }
      const double b = tc.bias.empty() ? 0.0 : static_cast<double>(tc.bias[f]);
      sc.sum[n * nf + f] = lin + hp * b;
      sc.sumsq[n * nf + f] = quad + 2.0 * b * lin + hp * b * b;
    }
  }
  return sc;
}

template <std::floating_point T>
StemCache<T> Network<T>::make_stem_cache_from_stem(const Tensor4<T>& stem) const {
  StemCache<T> sc;
  if (!foldable_) {
    sc.data = stem;
    return sc;
  }
  const auto& bn = std::get<BatchNorm<T>>(layers_[stem_end_]).bn;
  const Shape4 s = stem.shape();
  if (s.c != bn.channels()) throw std::invalid_argument("stem channel count does not match first BN");
  sc.folded = true;
  sc.plane = s.plane();
  sc.sum.resize(s.n * s.c);
  sc.sumsq.resize(s.n * s.c);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = stem.plane(n, c).data();
      sc.sum[n * s.c + c] = lane_sum(p, s.plane());
      sc.sumsq[n * s.c + c] = lane_sq_dev(p, s.plane(), 0.0);
    }
  ConvParams<T> raw = std::get<Conv2d<T>>(layers_[stem_end_ + 1]).conv;
  raw.bias.clear();
  sc.data = Tensor4<T>(raw.output_shape(s));
  conv_forward(raw, stem, sc.data);
  return sc;
}

template <std::floating_point T>
ForwardResult<T> Network<T>::forward_cached(const StemCache<T>& stem, bool keep_cache) const {
  PassOptions opts;
  opts.keep_cache = keep_cache;
  return const_cast<Network&>(*this).forward_cached(stem, opts, false);
}

template <std::floating_point T>
ForwardResult<T> Network<T>::forward_cached(const StemCache<T>& stem, const PassOptions& opts) {
  return forward_cached(stem, opts, true);
}

template <std::floating_point T>
ForwardResult<T> Network<T>::forward_cached(const StemCache<T>& stem, const PassOptions& opts,
                                            bool mutate) {
  if (!stem.folded) return run(stem_end_, stem.data, opts, mutate);
  if (!foldable_) throw std::invalid_argument("folded stem cache for a network without a foldable BN");
  return run_folded(stem, opts, mutate);
}

template <std::floating_point T>
ForwardResult<T> Network<T>::run_folded(const StemCache<T>& stem, const PassOptions& opts, bool mutate) {
  auto& bnl = std::get<BatchNorm<T>>(layers_[stem_end_]).bn;
  const auto& cv = std::get<Conv2d<T>>(layers_[stem_end_ + 1]).conv;
  const Shape4 s = stem.data.shape();
  const std::size_t nc = bnl.channels();
  if (s.n == 0) throw std::invalid_argument("empty batch");
  if (s.c != cv.out_ch || stem.sum.size() != s.n * nc || stem.sumsq.size() != s.n * nc || cv.in_ch != nc)
    throw std::invalid_argument("stale stem cache: shape does not match network");
  const std::size_t opg = cv.out_per_group();
  const double m = static_cast<double>(s.n * stem.plane);
  const bool update = opts.training && mutate && bnl.mode != BnMode::FixedSource;
  const bool need_batch = bnl.mode == BnMode::BatchOnly || update;

  std::vector<T> mean(nc), inv_std(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    T bmean = T(0), bvar = T(0);
    if (need_batch) {
      double acc = 0.0, acc2 = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        acc += stem.sum[n * nc + c];
        acc2 += stem.sumsq[n * nc + c];
      }
      const double mu = acc / m;
      bmean = static_cast<T>(mu);
      bvar = static_cast<T>(std::max(0.0, acc2 / m - mu * mu));
    }
    if (update) {
      bnl.running_mean[c] = bnl.momentum * bnl.running_mean[c] + (T(1) - bnl.momentum) * bmean;
      bnl.running_var[c] = bnl.momentum * bnl.running_var[c] + (T(1) - bnl.momentum) * bvar;
    }
    T mu = bnl.running_mean[c], var = bnl.running_var[c];
    if (bnl.mode == BnMode::BatchOnly) {
      mu = bmean;
      var = bvar;
    }
    const T denom = var + bnl.eps;
    if (!(denom > T(0))) throw std::logic_error("batchnorm: non-positive variance");
    mean[c] = mu;
    inv_std[c] = T(1) / std::sqrt(denom);
  }

  // out = gamma r (raw - mu S_o) + beta S_o + bias_o, S_o the tap sum of filter o.
  Tensor4<T> out(s);
  const std::size_t taps = cv.kh * cv.kw;
  for (std::size_t o = 0; o < s.c; ++o) {
    const std::size_t c = o / opg;
    T so = T(0);
    for (std::size_t k = 0; k < taps; ++k) so += cv.weight[o * taps + k];
    const T a = bnl.gamma[c] * inv_std[c];
    const T b = bnl.beta[c] * so - a * mean[c] * so + (cv.bias.empty() ? T(0) : cv.bias[o]);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* __restrict src = stem.data.plane(n, o).data();
      T* __restrict dst = out.plane(n, o).data();
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = a * src[i] + b;
    }
  }

  ForwardResult<T> res = run(stem_end_ + 2, out, opts, mutate);
  if (opts.keep_cache) {
    std::vector<LayerCache<T>> layers(2);
    layers[0].mean = std::move(mean);
    layers[0].inv_std = std::move(inv_std);
    layers[1].input = stem.data;
    for (auto& l : res.cache.layers) layers.push_back(std::move(l));
    res.cache.layers = std::move(layers);
    res.cache.first_layer = stem_end_;
    res.cache.folded = true;
  }
  return res;
}

template <std::floating_point T>
ForwardResult<T> Network<T>::run(std::size_t from, const Tensor4<T>& x, const PassOptions& opts,
                                 bool mutate) {
  // `mutate == false` guarantees nothing in *this is written (const entry points rely on it).
  if (from == 0) {
    const Shape4 s = x.shape();
    if (s.c != input_.c || s.h != input_.h || s.w != input_.w)
      throw std::invalid_argument("input shape " + to_string(s) +
                                  " does not match network input " + to_string(input_));
    if (!x.all_finite()) throw std::invalid_argument("non-finite input");
  }
  if (x.shape().n == 0) throw std::invalid_argument("empty batch");
  ForwardResult<T> res;
  res.cache.first_layer = from;
  if (opts.keep_cache) res.cache.layers.resize(layers_.size() - from);
  Tensor4<T> cur = x;
  for (std::size_t i = from; i < layers_.size(); ++i) {
    LayerCache<T>* lc = opts.keep_cache ? &res.cache.layers[i - from] : nullptr;
    Tensor4<T> out;
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            if (cur.shape().c != l.conv.in_ch)
              throw std::invalid_argument("stale input: channel mismatch at layer " +
                                          std::to_string(i));
            out = Tensor4<T>(l.conv.output_shape(cur.shape()));
            conv_forward(l.conv, cur, out);
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            Tensor4<T> mid(l.depthwise.output_shape(cur.shape()));
            conv_forward(l.depthwise, cur, mid);
            out = Tensor4<T>(l.pointwise.output_shape(mid.shape()));
            conv_forward(l.pointwise, mid, out);
            if (lc) lc->mid = std::move(mid);
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            out = bn_forward<T>(cur, l.bn, mutate ? &l.bn : nullptr, opts.training, lc);
          } else if constexpr (std::is_same_v<L, Elu<T>>) {
            out = Tensor4<T>(cur.shape());
            auto src = cur.data();
            auto dst = out.data();
            for (std::size_t k = 0; k < src.size(); ++k)
              dst[k] = src[k] > T(0) ? src[k] : l.alpha * std::expm1(src[k]);
            if (lc) lc->aux = out;
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            out = avgpool_forward<T>(l, cur);
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (opts.dropout_rng && l.rate > 0.0) {
              Tensor4<T> mask(cur.shape());
              const T keep_scale = static_cast<T>(1.0 / (1.0 - l.rate));
              for (T& m : mask.data()) m = unit_uniform(*opts.dropout_rng) >= l.rate ? keep_scale : T(0);
              out = Tensor4<T>(cur.shape());
              for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] = cur.data()[k] * mask.data()[k];
              if (lc) lc->aux = std::move(mask);
            } else {
              out = cur;
            }
          } else if constexpr (std::is_same_v<L, Flatten>) {
            const Shape4 s = cur.shape();
            out = Tensor4<T>({s.n, s.per_sample(), 1, 1}, cur.storage());
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            const std::size_t nb = cur.shape().n;
            if (cur.shape().per_sample() != l.in)
              throw std::invalid_argument("stale input: feature size mismatch");
            res.features = Matrix<T>(nb, l.in);
            std::copy(cur.data().begin(), cur.data().end(), res.features.data.begin());
            res.logits = Matrix<T>(nb, l.out);
            for (std::size_t n = 0; n < nb; ++n) {
              std::span<const T> xr = cur.sample(n);
              for (std::size_t k = 0; k < l.out; ++k) {
                const T* wr = l.weight.data() + k * l.in;
                res.logits(n, k) = static_cast<T>(static_cast<double>(l.bias[k]) + lane_dot(wr, xr.data(), l.in));
              }
            }
            out = Tensor4<T>({nb, l.out, 1, 1}, res.logits.data);
          } else {
            static_assert(always_false<L>);
          }
        },
        layers_[i]);
    if (lc) lc->input = std::move(cur);
    cur = std::move(out);
  }
  for (T v : res.logits.data)
    if (!std::isfinite(v)) throw std::runtime_error("non-finite activations in forward pass");
  return res;
}

template <std::floating_point T>
std::vector<ParamSlot> Network<T>::param_slots(GradScope scope) const {
  std::vector<ParamSlot> slots;
  const bool all = scope == GradScope::AllParams;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            if (!all) return;
            slots.push_back({i, p + "weight", false, l.conv.weight.size()});
            if (!l.conv.bias.empty()) slots.push_back({i, p + "bias", false, l.conv.bias.size()});
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            if (!all) return;
            slots.push_back({i, p + "depthwise.weight", false, l.depthwise.weight.size()});
            if (!l.depthwise.bias.empty())
              slots.push_back({i, p + "depthwise.bias", false, l.depthwise.bias.size()});
            slots.push_back({i, p + "pointwise.weight", false, l.pointwise.weight.size()});
            if (!l.pointwise.bias.empty())
              slots.push_back({i, p + "pointwise.bias", false, l.pointwise.bias.size()});
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            slots.push_back({i, p + "gamma", true, l.bn.channels()});
            slots.push_back({i, p + "beta", true, l.bn.channels()});
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            if (!all) return;
            slots.push_back({i, p + "weight", false, l.weight.size()});
            slots.push_back({i, p + "bias", false, l.bias.size()});
          }
        },
        layers_[i]);
  }
  return slots;
}

template <std::floating_point T>
std::vector<std::span<T>> Network<T>::parameters(GradScope scope) {
  std::vector<std::span<T>> out;
  const bool all = scope == GradScope::AllParams;
  for (auto& layer : layers_) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            if (!all) return;
            out.emplace_back(l.conv.weight);
            if (!l.conv.bias.empty()) out.emplace_back(l.conv.bias);
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            if (!all) return;
            out.emplace_back(l.depthwise.weight);
            if (!l.depthwise.bias.empty()) out.emplace_back(l.depthwise.bias);
            out.emplace_back(l.pointwise.weight);
            if (!l.pointwise.bias.empty()) out.emplace_back(l.pointwise.bias);
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            out.emplace_back(l.bn.gamma);
            out.emplace_back(l.bn.beta);
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            if (!all) return;
            out.emplace_back(l.weight);
            out.emplace_back(l.bias);
          }
        },
        layer);
  }
  return out;
}

template <std::floating_point T>
std::vector<std::span<const T>> Network<T>::parameters(GradScope scope) const {
  auto spans = const_cast<Network&>(*this).parameters(scope);
  return {spans.begin(), spans.end()};
}

template <std::floating_point T>
ParamGrads<T> Network<T>::backward(const ForwardCache<T>& cache, const Matrix<T>& dlogits,
                                   GradScope scope) const {
  if (cache.layers.size() + cache.first_layer != layers_.size())
    throw std::invalid_argument("stale cache: layer count does not match network");
  ParamGrads<T> pg;
  pg.scope = scope;
  pg.slots = param_slots(scope);
  pg.grads.reserve(pg.slots.size());
  for (const auto& s : pg.slots) pg.grads.emplace_back(s.size, T(0));

  std::size_t lowest = layers_.size();
  for (const auto& s : pg.slots) lowest = std::min(lowest, s.layer);
  if (lowest == layers_.size()) return pg;
  if (lowest < cache.first_layer)
    throw std::invalid_argument("cache does not reach the layers required by the gradient scope");

  const auto& lin_cache = cache.layers.back();
  const std::size_t nb = lin_cache.input.shape().n;
  if (dlogits.rows != nb || dlogits.cols != classes_)
    throw std::invalid_argument("dL/dlogits shape does not match cached batch");

  // First slot index per layer.
  std::vector<std::ptrdiff_t> slot_of(layers_.size(), -1);
  for (std::size_t k = pg.slots.size(); k-- > 0;) slot_of[pg.slots[k].layer] = static_cast<std::ptrdiff_t>(k);
  auto buf = [&](std::size_t layer, std::size_t offset) -> T* {
    if (slot_of[layer] < 0) return nullptr;
    return pg.grads[static_cast<std::size_t>(slot_of[layer]) + offset].data();
  };

  Tensor4<T> g({nb, classes_, 1, 1}, dlogits.data);
  for (std::size_t i = layers_.size(); i-- > lowest;) {
    const LayerCache<T>& lc = cache.layers[i - cache.first_layer];
    if (cache.folded && i == stem_end_ + 1) {
      // Gradients of the folded BN from the depthwise output gradient:
      //   dbeta_c = sum_o S_o sum g_o,  dgamma_c = r_c sum_o sum g_o (raw_o - mu_c S_o).
      const auto& cv = std::get<Conv2d<T>>(layers_[i]).conv;
      const LayerCache<T>& bc = cache.layers[stem_end_ - cache.first_layer];
      T* dgamma = buf(stem_end_, 0);
      T* dbeta = buf(stem_end_, 1);
      const std::size_t opg = cv.out_per_group();
      const std::size_t taps = cv.kh * cv.kw;
      const Shape4 gs = g.shape();
      for (std::size_t o = 0; o < gs.c; ++o) {
        const std::size_t c = o / opg;
        double so = 0.0;
        for (std::size_t k = 0; k < taps; ++k) so += static_cast<double>(cv.weight[o * taps + k]);
        double sg = 0.0, sgr = 0.0;
        for (std::size_t n = 0; n < gs.n; ++n) {
          sg += lane_sum(g.plane(n, o).data(), gs.plane());
          sgr += lane_dot(g.plane(n, o).data(), lc.input.plane(n, o).data(), gs.plane());
        }
        const double mu = static_cast<double>(bc.mean[c]);
        if (dbeta) dbeta[c] += static_cast<T>(so * sg);
        if (dgamma) dgamma[c] += static_cast<T>(static_cast<double>(bc.inv_std[c]) * (sgr - mu * so * sg));
      }
      break;
    }
    const bool need_dx = i > lowest;
    Tensor4<T> dx;
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            T* dw = buf(i, 0);
            T* db = (dw && !l.conv.bias.empty()) ? buf(i, 1) : nullptr;
            conv_backward(l.conv, lc.input, g, need_dx ? &dx : nullptr, dw, db);
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            T* base = buf(i, 0);
            T* ddw = nullptr;
            T* ddb = nullptr;
            T* dpw = nullptr;
            T* dpb = nullptr;
            if (base) {
              std::size_t k = 0;
              ddw = buf(i, k++);
              if (!l.depthwise.bias.empty()) ddb = buf(i, k++);
              dpw = buf(i, k++);
              if (!l.pointwise.bias.empty()) dpb = buf(i, k++);
            }
            Tensor4<T> dmid;
            conv_backward(l.pointwise, lc.mid, g, &dmid, dpw, dpb);
            conv_backward(l.depthwise, lc.input, dmid, need_dx ? &dx : nullptr, ddw, ddb);
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            bn_backward(l.bn, lc, g, need_dx ? &dx : nullptr, buf(i, 0), buf(i, 1));
          } else if constexpr (std::is_same_v<L, Elu<T>>) {
            if (!need_dx) return;
            dx = Tensor4<T>(g.shape());
            auto y = lc.aux.data();
            for (std::size_t k = 0; k < y.size(); ++k)
              dx.data()[k] = y[k] > T(0) ? g.data()[k] : g.data()[k] * (y[k] + l.alpha);
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            if (need_dx) dx = avgpool_backward<T>(l, lc.input.shape(), g);
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (!need_dx) return;
            dx = g;
            if (!lc.aux.empty())
              for (std::size_t k = 0; k < dx.size(); ++k) dx.data()[k] *= lc.aux.data()[k];
          } else if constexpr (std::is_same_v<L, Flatten>) {
            if (need_dx) dx = Tensor4<T>(lc.input.shape(), g.storage());
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            T* dw = buf(i, 0);
            T* db = buf(i, 1);
            const Tensor4<T>& xin = lc.input;
            if (need_dx) dx = Tensor4<T>(xin.shape());
            for (std::size_t n = 0; n < nb; ++n) {
              std::span<const T> xr = xin.sample(n);
              for (std::size_t k = 0; k < l.out; ++k) {
                const T gk = g(n, k, 0, 0);
                if (dw) {
                  T* dwr = dw + k * l.in;
                  for (std::size_t f = 0; f < l.in; ++f) dwr[f] += gk * xr[f];
                }
                if (db) db[k] += gk;
                if (need_dx) {
                  const T* wr = l.weight.data() + k * l.in;
                  std::span<T> dxr = dx.sample(n);
                  for (std::size_t f = 0; f < l.in; ++f) dxr[f] += gk * wr[f];
                }
              }
            }
          }
        },
        layers_[i]);
    if (need_dx) g = std::move(dx);
  }
  return pg;
}

template <std::floating_point T>
std::vector<BnState<T>*> Network<T>::bn_states() {
  std::vector<BnState<T>*> out;
  for (auto& l : layers_)
    if (auto* b = std::get_if<BatchNorm<T>>(&l)) out.push_back(&b->bn);
  return out;
}

template <std::floating_point T>
std::vector<const BnState<T>*> Network<T>::bn_states() const {
  std::vector<const BnState<T>*> out;
  for (const auto& l : layers_)
    if (const auto* b = std::get_if<BatchNorm<T>>(&l)) out.push_back(&b->bn);
  return out;
}

template <std::floating_point T>
void Network<T>::set_bn_mode(BnMode mode) {
  for (auto* b : bn_states()) b->mode = mode;
}

template <std::floating_point T>
const Linear<T>& Network<T>::head() const {
  return std::get<Linear<T>>(layers_.at(linear_index_));
}

template <std::floating_point T>
Linear<T>& Network<T>::head() {
  return std::get<Linear<T>>(layers_.at(linear_index_));
}

template <std::floating_point T>
std::uint64_t Network<T>::frozen_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& layer : layers_) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            fnv_vec(h, l.conv.weight);
            fnv_vec(h, l.conv.bias);
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            fnv_vec(h, l.depthwise.weight);
            fnv_vec(h, l.depthwise.bias);
            fnv_vec(h, l.pointwise.weight);
            fnv_vec(h, l.pointwise.bias);
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            fnv_vec(h, l.bn.running_mean);
            fnv_vec(h, l.bn.running_var);
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            fnv_vec(h, l.weight);
            fnv_vec(h, l.bias);
          }
        },
        layer);
  }
  return h;
}

template <std::floating_point T>
template <std::floating_point U>
Network<U> Network<T>::cast() const {
  std::vector<Layer<U>> out;
  out.reserve(layers_.size());
  for (const auto& layer : layers_) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            out.emplace_back(Conv2d<U>{l.kind, cast_conv<U>(l.conv)});
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            out.emplace_back(SeparableConv2d<U>{cast_conv<U>(l.depthwise), cast_conv<U>(l.pointwise)});
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            BnState<U> b;
            b.running_mean = cast_vec<U>(l.bn.running_mean);
            b.running_var = cast_vec<U>(l.bn.running_var);
            b.gamma = cast_vec<U>(l.bn.gamma);
            b.beta = cast_vec<U>(l.bn.beta);
            b.momentum = static_cast<U>(l.bn.momentum);
            b.eps = static_cast<U>(l.bn.eps);
            b.mode = l.bn.mode;
            out.emplace_back(BatchNorm<U>{std::move(b)});
          } else if constexpr (std::is_same_v<L, Elu<T>>) {
            out.emplace_back(Elu<U>{static_cast<U>(l.alpha)});
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            out.emplace_back(Linear<U>{l.in, l.out, cast_vec<U>(l.weight), cast_vec<U>(l.bias)});
          } else {
            out.emplace_back(l);
          }
        },
        layer);
  }
  return Network<U>(input_, std::move(out));
}

// ---------- construction helpers ----------

template <std::floating_point T>
Conv2d<T> make_temporal_conv(std::size_t in_ch, std::size_t filters, std::size_t kernel) {
  Conv2d<T> c;
  c.kind = LayerKind::Conv2d;
  c.conv.in_ch = in_ch;
  c.conv.out_ch = filters;
  c.conv.kh = 1;
  c.conv.kw = kernel;
  c.conv.groups = 1;
  c.conv.pad_left = (kernel - 1) / 2;
  c.conv.pad_right = kernel - 1 - c.conv.pad_left;
  c.conv.weight.assign(filters * in_ch * kernel, T(0));
  return c;
}

template <std::floating_point T>
Conv2d<T> make_depthwise_conv(std::size_t in_ch, std::size_t depth, std::size_t kernel_h) {
  Conv2d<T> c;
  c.kind = LayerKind::DepthwiseConv2d;
  c.conv.in_ch = in_ch;
  c.conv.out_ch = in_ch * depth;
  c.conv.kh = kernel_h;
  c.conv.kw = 1;
  c.conv.groups = in_ch;
  c.conv.weight.assign(c.conv.out_ch * kernel_h, T(0));
  return c;
}

template <std::floating_point T>
SeparableConv2d<T> make_separable_conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel) {
  SeparableConv2d<T> s;
  s.depthwise.in_ch = in_ch;
  s.depthwise.out_ch = in_ch;
  s.depthwise.kh = 1;
  s.depthwise.kw = kernel;
  s.depthwise.groups = in_ch;
  s.depthwise.pad_left = (kernel - 1) / 2;
  s.depthwise.pad_right = kernel - 1 - s.depthwise.pad_left;
  s.depthwise.weight.assign(in_ch * kernel, T(0));
  s.pointwise.in_ch = in_ch;
  s.pointwise.out_ch = out_ch;
  s.pointwise.groups = 1;
  s.pointwise.weight.assign(out_ch * in_ch, T(0));
  return s;
}

template <std::floating_point T>
BatchNorm<T> make_batchnorm(std::size_t channels) {
  return BatchNorm<T>{BnState<T>(channels)};
}

template <std::floating_point T>
Linear<T> make_linear(std::size_t in, std::size_t out) {
  return Linear<T>{in, out, std::vector<T>(in * out, T(0)), std::vector<T>(out, T(0))};
}

template <std::floating_point T>
Network<T> make_eegnet(const EegNetConfig& cfg) {
  const std::size_t f1 = cfg.temporal_filters;
  const std::size_t f1d = f1 * cfg.depth;
  const std::size_t w_out = cfg.samples / cfg.pool1 / cfg.pool2;
  std::vector<Layer<T>> layers;
  layers.emplace_back(make_temporal_conv<T>(1, f1, cfg.temporal_kernel));
  layers.emplace_back(make_batchnorm<T>(f1));
  layers.emplace_back(make_depthwise_conv<T>(f1, cfg.depth, cfg.channels));
  layers.emplace_back(make_batchnorm<T>(f1d));
  layers.emplace_back(Elu<T>{});
  layers.emplace_back(AvgPool{1, cfg.pool1});
  layers.emplace_back(Dropout{cfg.dropout});
  layers.emplace_back(make_separable_conv<T>(f1d, cfg.separable_filters, cfg.separable_kernel));
  layers.emplace_back(make_batchnorm<T>(cfg.separable_filters));
  layers.emplace_back(Elu<T>{});
  layers.emplace_back(AvgPool{1, cfg.pool2});
  layers.emplace_back(Dropout{cfg.dropout});
  layers.emplace_back(Flatten{});
  layers.emplace_back(make_linear<T>(cfg.separable_filters * w_out, cfg.classes));
  return Network<T>({1, 1, cfg.channels, cfg.samples}, std::move(layers));
}

template <std::floating_point T>
void glorot_init(Network<T>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fill = [&](std::vector<T>& w, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (T& v : w) v = static_cast<T>((2.0 * unit_uniform(rng) - 1.0) * limit);
  };
  auto fill_conv = [&](ConvParams<T>& p) {
    const double k = static_cast<double>(p.kh * p.kw);
    fill(p.weight, static_cast<double>(p.in_per_group()) * k, static_cast<double>(p.out_per_group()) * k);
    std::fill(p.bias.begin(), p.bias.end(), T(0));
  };
  for (auto& layer : net.layers()) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            fill_conv(l.conv);
          } else if constexpr (std::is_same_v<L, SeparableConv2d<T>>) {
            fill_conv(l.depthwise);
            fill_conv(l.pointwise);
          } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
            const std::size_t c = l.bn.channels();
            const BnMode mode = l.bn.mode;
            l.bn = BnState<T>(c);
            l.bn.mode = mode;
          } else if constexpr (std::is_same_v<L, Linear<T>>) {
            fill(l.weight, static_cast<double>(l.in), static_cast<double>(l.out));
            std::fill(l.bias.begin(), l.bias.end(), T(0));
          }
        },
        layer);
  }
}

#define EEGTTA_INSTANTIATE(T)                                                               \
  template class Network<T>;                                                                \
  template LayerKind kind_of<T>(const Layer<T>&);                                           \
  template Tensor4<T> bn_apply<T>(const Tensor4<T>&, BnState<T>&, bool);                    \
  template Conv2d<T> make_temporal_conv<T>(std::size_t, std::size_t, std::size_t);          \
  template Conv2d<T> make_depthwise_conv<T>(std::size_t, std::size_t, std::size_t);         \
  template SeparableConv2d<T> make_separable_conv<T>(std::size_t, std::size_t, std::size_t); \
  template BatchNorm<T> make_batchnorm<T>(std::size_t);                                     \
  template Linear<T> make_linear<T>(std::size_t, std::size_t);                              \
  template Network<T> make_eegnet<T>(const EegNetConfig&);                                  \
  template void glorot_init<T>(Network<T>&, std::uint64_t);

EEGTTA_INSTANTIATE(float)
EEGTTA_INSTANTIATE(double)
#undef EEGTTA_INSTANTIATE

template StemCache<float> stack_stems<float>(std::span<const StemCache<float>* const>);
template StemCache<double> stack_stems<double>(std::span<const StemCache<double>* const>);
template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Network<float> Network<float>::cast<float>() const;
template Network<double> Network<double>::cast<double>() const;

}  // namespace eegtta
