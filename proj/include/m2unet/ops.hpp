#pragma once

#include <algorithm>
#include <type_traits>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "m2unet/parallel.hpp"
#include "m2unet/tensor.hpp"

namespace m2unet {

// ---------------------------------------------------------------------------
// Parameter carriers
// ---------------------------------------------------------------------------

/// Convolution geometry. Kernels are (c_out, c_in / groups, k, k); there is no bias.
struct ConvGeometry {
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename T>
struct ConvWeights {
  Tensor<T> kernel;
  ConvGeometry geom;
};

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma, beta, running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  static BatchNormParams identity(std::size_t channels) {
    BatchNormParams p;
    p.gamma.assign(channels, T(1));
    p.beta.assign(channels, T(0));
    p.running_mean.assign(channels, T(0));
    p.running_var.assign(channels, T(1));
    return p;
  }
  std::size_t channels() const { return gamma.size(); }
};

enum class BnMode { train, infer };

/// Intermediates kept by batchnorm for its backward pass.
template <typename T>
struct BnCache {
  Tensor<T> x_hat;
  std::vector<T> inv_std;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw InputError("conv: stride must be positive");
  if (in + 2 * pad < k) throw InputError("conv: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Range of output indices o for which o*stride - pad + tap lies in [0, in).
inline void valid_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad, std::size_t tap,
                        std::size_t& lo, std::size_t& hi) {
  const long long s = static_cast<long long>(stride);
  const long long shift = static_cast<long long>(pad) - static_cast<long long>(tap);
  long long first = shift > 0 ? (shift + s - 1) / s : 0;
  long long last = (static_cast<long long>(in) - 1 + shift);
  last = last < 0 ? -1 : last / s;
  last = std::min<long long>(last, static_cast<long long>(out) - 1);
  lo = static_cast<std::size_t>(std::max<long long>(first, 0));
  hi = last < first ? lo : static_cast<std::size_t>(last + 1);
}

inline bool is_pointwise(const Shape& k, const ConvGeometry& g) {
  return k.h == 1 && k.w == 1 && g.groups == 1 && g.stride == 1 && g.padding == 0;
}

constexpr std::size_t kPixelTile = 256;

}  // namespace detail

template <typename T>
Shape conv2d_output_shape(const Shape& x, const Tensor<T>& kernel, const ConvGeometry& g) {
  const Shape& k = kernel.shape();
  if (g.groups == 0) throw InputError("conv2d: groups must be positive");
  if (k.h != k.w) throw InputError("conv2d: kernel must be square, got " + k.str());
  if (x.c != g.groups * k.c) {
    throw InputError("conv2d: input has " + std::to_string(x.c) + " channels, kernel expects " +
                     std::to_string(g.groups * k.c));
  }
  if (k.n % g.groups != 0) throw InputError("conv2d: output channels not divisible by groups");
  return {x.n, k.n, conv_out_extent(x.h, k.h, g.stride, g.padding), conv_out_extent(x.w, k.w, g.stride, g.padding)};
}

/// MAC and parameter cost of one convolution over a batch-1 input of shape `x`.
template <typename T>
CostTally conv2d_cost(const Shape& x, const Tensor<T>& kernel, const ConvGeometry& g) {
  const Shape out = conv2d_output_shape(Shape{1, x.c, x.h, x.w}, kernel, g);
  const Shape& k = kernel.shape();
  return {out.c * out.h * out.w * k.h * k.w * k.c, k.numel()};
}

// ---------------------------------------------------------------------------
// Forward operators
// ---------------------------------------------------------------------------

/// Grouped 2-D convolution with zero padding. Each output is accumulated over
/// (input channel, ky, kx) in ascending order.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const ConvGeometry& g, CostTally* tally = nullptr) {
  const Shape os = conv2d_output_shape(x.shape(), kernel, g);
  const Shape& ks = kernel.shape();
  Tensor<T> y(os);
  const std::size_t cin_pg = ks.c, cout_pg = ks.n / g.groups, k = ks.h;
  const std::size_t H = x.h(), W = x.w();

  if (detail::is_pointwise(ks, g)) {
    const std::size_t P = os.plane();
    const std::size_t tiles = (P + detail::kPixelTile - 1) / detail::kPixelTile;
    parallel_for(os.n * tiles, [&](std::size_t job) {
      const std::size_t b = job / tiles, p0 = (job % tiles) * detail::kPixelTile;
      const std::size_t len = std::min(detail::kPixelTile, P - p0);
      for (std::size_t co = 0; co < os.c; ++co) {
        T* out = y.plane(b, co) + p0;
        const T* wrow = kernel.data() + co * cin_pg;
        for (std::size_t ci = 0; ci < cin_pg; ++ci) {
          const T wv = wrow[ci];
          const T* in = x.plane(b, ci) + p0;
          for (std::size_t p = 0; p < len; ++p) out[p] += wv * in[p];
        }
      }
    });
  } else {
    parallel_for(os.n * os.c, [&](std::size_t job) {
      const std::size_t b = job / os.c, co = job % os.c;
      const std::size_t grp = co / cout_pg;
      T* out = y.plane(b, co);
      for (std::size_t cl = 0; cl < cin_pg; ++cl) {
        const T* in = x.plane(b, grp * cin_pg + cl);
        const T* wk = kernel.data() + (co * cin_pg + cl) * k * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::size_t oy0, oy1;
          detail::valid_range(H, os.h, g.stride, g.padding, ky, oy0, oy1);
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::size_t ox0, ox1;
            detail::valid_range(W, os.w, g.stride, g.padding, kx, ox0, ox1);
            const T wv = wk[ky * k + kx];
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const T* irow = in + (oy * g.stride + ky - g.padding) * W;
              T* orow = out + oy * os.w;
              for (std::size_t ox = ox0; ox < ox1; ++ox) orow[ox] += wv * irow[ox * g.stride + kx - g.padding];
            }
          }
        }
      }
    });
  }
  // Output cell accumulation order above is (cl, ky, kx) for the general path and
  // ci for the pointwise path, matching the direct definition.
  require_finite(y, "conv2d");
  if (tally) {
    CostTally c = conv2d_cost(x.shape(), kernel, g);
    c.madds *= x.n();
    *tally += c;
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvWeights<T>& w, CostTally* tally = nullptr) {
  return conv2d(x, w.kernel, w.geom, tally);
}

/// Per-channel spatial convolution; kernel is (c, 1, k, k).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding,
                           CostTally* tally = nullptr) {
  if (kernel.n() != x.c() || kernel.c() != 1) {
    throw InputError("depthwise_conv2d: kernel " + kernel.shape().str() + " does not match " +
                     std::to_string(x.c()) + " input channels");
  }
  return conv2d(x, kernel, ConvGeometry{x.c(), stride, padding}, tally);
}

/// Per-channel affine normalisation. Train mode normalises with batch
/// statistics and folds them into the running estimates (running variance uses
/// the unbiased batch variance); infer mode uses the running estimates.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormParams<T>& p, BnMode mode, std::type_identity_t<BnCache<T>>* cache = nullptr,
                    CostTally* tally = nullptr) {
  const std::size_t C = x.c(), N = x.n(), P = x.shape().plane();
  if (p.gamma.size() != C || p.beta.size() != C || p.running_mean.size() != C || p.running_var.size() != C) {
    throw InputError("batchnorm: parameter length does not match " + std::to_string(C) + " channels");
  }
  const std::size_t count = N * P;
  std::vector<T> mean(C), inv_std(C);
  if (mode == BnMode::train) {
    if (count == 0) throw InputError("batchnorm: empty batch");
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < N; ++b) {
        const T* v = x.plane(b, c);
        for (std::size_t i = 0; i < P; ++i) s += v[i];
      }
      const T m = s / static_cast<T>(count);
      T sq = 0;
      for (std::size_t b = 0; b < N; ++b) {
        const T* v = x.plane(b, c);
        for (std::size_t i = 0; i < P; ++i) sq += (v[i] - m) * (v[i] - m);
      }
      const T var = sq / static_cast<T>(count);
      if (!(var + p.eps > 0)) throw NumericError("batchnorm: zero variance with eps guard " + std::to_string(p.eps));
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(var + p.eps);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      p.running_mean[c] = (T(1) - p.momentum) * p.running_mean[c] + p.momentum * m;
      p.running_var[c] = (T(1) - p.momentum) * p.running_var[c] + p.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      if (p.running_var[c] < 0) throw InputError("batchnorm: negative running variance");
      if (!(p.running_var[c] + p.eps > 0)) throw NumericError("batchnorm: zero variance with eps guard");
      mean[c] = p.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(p.running_var[c] + p.eps);
    }
  }
  Tensor<T> y(x.shape());
  if (cache) {
    cache->x_hat = Tensor<T>(x.shape());
    cache->inv_std = inv_std;
  }
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* v = x.plane(b, c);
      T* o = y.plane(b, c);
      T* xh = cache ? cache->x_hat.plane(b, c) : nullptr;
      for (std::size_t i = 0; i < P; ++i) {
        const T h = (v[i] - mean[c]) * inv_std[c];
        if (xh) xh[i] = h;
        o[i] = p.gamma[c] * h + p.beta[c];
      }
    }
  }
  require_finite(y, "batchnorm");
  if (tally) tally->params += 2 * C;
  return y;
}

/// Const overload: running statistics are left untouched.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const BatchNormParams<T>& p, BnMode mode, std::type_identity_t<BnCache<T>>* cache = nullptr,
                    CostTally* tally = nullptr) {
  BatchNormParams<T> scratch = p;
  return batchnorm(x, scratch, mode, cache, tally);
}

template <typename T>
Tensor<T> relu6(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::min(std::max(x[i], T(0)), T(6));
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(x[i], T(0));
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    // Split by sign so exp never overflows.
    const T v = x[i];
    if (v >= 0) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
Tensor<T> add_residual(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw InputError("add_residual: shape " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  require_finite(y, "add_residual");
  return y;
}

/// Channel concatenation, `a` first.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.c == 0 && b.empty()) return a;
  if (sa.c == 0 && a.empty()) return b;
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw InputError("concat_channels: spatial mismatch " + sa.str() + " vs " + sb.str());
  }
  Tensor<T> y(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t P = sa.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.plane(n, 0), sa.c * P, y.plane(n, 0));
    std::copy_n(b.plane(n, 0), sb.c * P, y.plane(n, sa.c));
  }
  return y;
}

namespace detail {

// Source taps for x2 upsampling with half-pixel centres and border clamp:
// src = (dst + 0.5) / 2 - 0.5, clamped to [0, in - 1].
struct UpsampleTap {
  std::size_t i0, i1;
  double frac;
};

inline std::vector<UpsampleTap> upsample_taps(std::size_t in) {
  std::vector<UpsampleTap> taps(2 * in);
  for (std::size_t d = 0; d < 2 * in; ++d) {
    double src = (static_cast<double>(d) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    taps[d] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Parameter-free bilinear x2 upsampling.
template <typename T>
Tensor<T> bilinear_upsample_x2(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.h == 0 || s.w == 0) throw InputError("bilinear_upsample_x2: empty spatial extent");
  Tensor<T> y(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  const auto ty = detail::upsample_taps(s.h);
  const auto tx = detail::upsample_taps(s.w);
  const std::size_t OW = 2 * s.w;
  parallel_for(s.n * s.c, [&](std::size_t job) {
    const T* in = x.data() + job * s.plane();
    T* out = y.data() + job * 4 * s.plane();
    for (std::size_t oy = 0; oy < 2 * s.h; ++oy) {
      const T fy = static_cast<T>(ty[oy].frac);
      const T* r0 = in + ty[oy].i0 * s.w;
      const T* r1 = in + ty[oy].i1 * s.w;
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const T fx = static_cast<T>(tx[ox].frac);
        const T top = (T(1) - fx) * r0[tx[ox].i0] + fx * r0[tx[ox].i1];
        const T bot = (T(1) - fx) * r1[tx[ox].i0] + fx * r1[tx[ox].i1];
        out[oy * OW + ox] = (T(1) - fy) * top + fy * bot;
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Backward kernels (vector-Jacobian products)
// ---------------------------------------------------------------------------

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dkernel;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, const ConvGeometry& g,
                             const Tensor<T>& grad_out) {
  const Shape os = conv2d_output_shape(x.shape(), kernel, g);
  if (grad_out.shape() != os) throw InputError("conv2d_backward: grad shape " + grad_out.shape().str());
  const Shape& ks = kernel.shape();
  const std::size_t cin_pg = ks.c, cout_pg = ks.n / g.groups, k = ks.h;
  const std::size_t H = x.h(), W = x.w(), N = x.n();
  ConvGrads<T> r{Tensor<T>(x.shape()), Tensor<T>(ks)};

  if (detail::is_pointwise(ks, g)) {
    const std::size_t P = os.plane();
    const std::size_t tiles = (P + detail::kPixelTile - 1) / detail::kPixelTile;
    parallel_for(N * tiles, [&](std::size_t job) {
      const std::size_t b = job / tiles, p0 = (job % tiles) * detail::kPixelTile;
      const std::size_t len = std::min(detail::kPixelTile, P - p0);
      for (std::size_t ci = 0; ci < x.c(); ++ci) {
        T* dx = r.dx.plane(b, ci) + p0;
        for (std::size_t co = 0; co < os.c; ++co) {
          const T wv = kernel[co * cin_pg + ci];
          const T* go = grad_out.plane(b, co) + p0;
          for (std::size_t p = 0; p < len; ++p) dx[p] += wv * go[p];
        }
      }
    });
    parallel_for(os.c, [&](std::size_t co) {
      for (std::size_t ci = 0; ci < cin_pg; ++ci) {
        T acc = 0;
        for (std::size_t b = 0; b < N; ++b) {
          const T* go = grad_out.plane(b, co);
          const T* in = x.plane(b, ci);
          for (std::size_t p = 0; p < P; ++p) acc += go[p] * in[p];
        }
        r.dkernel[co * cin_pg + ci] = acc;
      }
    });
    return r;
  }

  // dx: each input channel is owned by one job.
  parallel_for(N * x.c(), [&](std::size_t job) {
    const std::size_t b = job / x.c(), ci = job % x.c();
    const std::size_t grp = ci / cin_pg, cl = ci % cin_pg;
    T* dx = r.dx.plane(b, ci);
    for (std::size_t co = grp * cout_pg; co < (grp + 1) * cout_pg; ++co) {
      const T* go = grad_out.plane(b, co);
      const T* wk = kernel.data() + (co * cin_pg + cl) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        std::size_t oy0, oy1;
        detail::valid_range(H, os.h, g.stride, g.padding, ky, oy0, oy1);
        for (std::size_t kx = 0; kx < k; ++kx) {
          std::size_t ox0, ox1;
          detail::valid_range(W, os.w, g.stride, g.padding, kx, ox0, ox1);
          const T wv = wk[ky * k + kx];
          for (std::size_t oy = oy0; oy < oy1; ++oy) {
            T* drow = dx + (oy * g.stride + ky - g.padding) * W;
            const T* grow = go + oy * os.w;
            for (std::size_t ox = ox0; ox < ox1; ++ox) drow[ox * g.stride + kx - g.padding] += wv * grow[ox];
          }
        }
      }
    }
  });
  // dkernel: each output channel is owned by one job.
  parallel_for(os.c, [&](std::size_t co) {
    const std::size_t grp = co / cout_pg;
    for (std::size_t cl = 0; cl < cin_pg; ++cl) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        std::size_t oy0, oy1;
        detail::valid_range(H, os.h, g.stride, g.padding, ky, oy0, oy1);
        for (std::size_t kx = 0; kx < k; ++kx) {
          std::size_t ox0, ox1;
          detail::valid_range(W, os.w, g.stride, g.padding, kx, ox0, ox1);
          T acc = 0;
          for (std::size_t b = 0; b < N; ++b) {
            const T* in = x.plane(b, grp * cin_pg + cl);
            const T* go = grad_out.plane(b, co);
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const T* irow = in + (oy * g.stride + ky - g.padding) * W;
              const T* grow = go + oy * os.w;
              for (std::size_t ox = ox0; ox < ox1; ++ox) acc += grow[ox] * irow[ox * g.stride + kx - g.padding];
            }
          }
          r.dkernel[((co * cin_pg + cl) * k + ky) * k + kx] = acc;
        }
      }
    }
  });
  return r;
}

template <typename T>
struct BnGrads {
  Tensor<T> dx;
  std::vector<T> dgamma, dbeta;
};

/// Backward of batchnorm. In train mode the batch statistics depend on x; in
/// infer mode the running statistics are constants.
template <typename T>
BnGrads<T> batchnorm_backward(const BnCache<T>& cache, const std::vector<T>& gamma, BnMode mode,
                              const Tensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  if (cache.x_hat.shape() != s || cache.inv_std.size() != s.c || gamma.size() != s.c) {
    throw InputError("batchnorm_backward: cache does not match gradient shape " + s.str());
  }
  const std::size_t P = s.plane(), M = s.n * P;
  BnGrads<T> r{Tensor<T>(s), std::vector<T>(s.c, T(0)), std::vector<T>(s.c, T(0))};
  for (std::size_t c = 0; c < s.c; ++c) {
    T sg = 0, sgx = 0;
    for (std::size_t b = 0; b < s.n; ++b) {
      const T* g = grad_out.plane(b, c);
      const T* xh = cache.x_hat.plane(b, c);
      for (std::size_t i = 0; i < P; ++i) {
        sg += g[i];
        sgx += g[i] * xh[i];
      }
    }
    r.dbeta[c] = sg;
    r.dgamma[c] = sgx;
    const T scale = gamma[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < s.n; ++b) {
      const T* g = grad_out.plane(b, c);
      const T* xh = cache.x_hat.plane(b, c);
      T* dx = r.dx.plane(b, c);
      if (mode == BnMode::train) {
        const T inv_m = T(1) / static_cast<T>(M);
        for (std::size_t i = 0; i < P; ++i) dx[i] = scale * (g[i] - inv_m * sg - xh[i] * inv_m * sgx);
      } else {
        for (std::size_t i = 0; i < P; ++i) dx[i] = scale * g[i];
      }
    }
  }
  return r;
}

/// Subgradient 0 at both kinks (x == 0 and x == 6).
template <typename T>
Tensor<T> relu6_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = (x[i] > T(0) && x[i] < T(6)) ? grad_out[i] : T(0);
  return dx;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return dx;
}

/// Takes the sigmoid output y, not its input.
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = grad_out[i] * y[i] * (T(1) - y[i]);
  return dx;
}

template <typename T>
Tensor<T> bilinear_upsample_x2_backward(const Shape& in_shape, const Tensor<T>& grad_out) {
  const Shape& s = in_shape;
  if (grad_out.shape() != Shape{s.n, s.c, 2 * s.h, 2 * s.w}) {
    throw InputError("bilinear_upsample_x2_backward: grad shape " + grad_out.shape().str());
  }
  Tensor<T> dx(s);
  const auto ty = detail::upsample_taps(s.h);
  const auto tx = detail::upsample_taps(s.w);
  const std::size_t OW = 2 * s.w;
  parallel_for(s.n * s.c, [&](std::size_t job) {
    T* d = dx.data() + job * s.plane();
    const T* g = grad_out.data() + job * 4 * s.plane();
    for (std::size_t oy = 0; oy < 2 * s.h; ++oy) {
      const T fy = static_cast<T>(ty[oy].frac);
      T* r0 = d + ty[oy].i0 * s.w;
      T* r1 = d + ty[oy].i1 * s.w;
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const T fx = static_cast<T>(tx[ox].frac);
        const T v = g[oy * OW + ox];
        r0[tx[ox].i0] += (T(1) - fy) * (T(1) - fx) * v;
        r0[tx[ox].i1] += (T(1) - fy) * fx * v;
        r1[tx[ox].i0] += fy * (T(1) - fx) * v;
        r1[tx[ox].i1] += fy * fx * v;
      }
    }
  });
  return dx;
}

/// Splits a concatenated gradient back into the parts for (a, b).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(std::size_t c_a, const Tensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  if (c_a > s.c) throw InputError("concat_channels_backward: split beyond channel count");
  Tensor<T> da(Shape{s.n, c_a, s.h, s.w}), db(Shape{s.n, s.c - c_a, s.h, s.w});
  const std::size_t P = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(grad_out.plane(n, 0), c_a * P, da.plane(n, 0));
    std::copy_n(grad_out.plane(n, c_a), (s.c - c_a) * P, db.plane(n, 0));
  }
  return {std::move(da), std::move(db)};
}

}  // namespace m2unet
