#pragma once

#include "styleshift/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace styleshift {

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}
template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}
template <typename Scalar>
void require_rank(const Var<Scalar>& a, int r, const char* op) {
  require(a.value().rank() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                     shape_string(a.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape(), a.value().array() + b.value().array());
  return make_op<Scalar>(std::move(out), {a, b}, [a, b](const Tensor<Scalar>& g) {
    accumulate_if(a, g.array());
    accumulate_if(b, g.array());
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape(), a.value().array() - b.value().array());
  return make_op<Scalar>(std::move(out), {a, b}, [a, b](const Tensor<Scalar>& g) {
    accumulate_if(a, g.array());
    accumulate_if(b, -g.array());
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<Scalar> out(a.shape(), a.value().array() * b.value().array());
  return make_op<Scalar>(std::move(out), {a, b}, [a, b](const Tensor<Scalar>& g) {
    accumulate_if(a, g.array() * b.value().array());
    accumulate_if(b, g.array() * a.value().array());
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape(), a.value().array() * s);
  return make_op<Scalar>(std::move(out), {a}, [a, s](const Tensor<Scalar>& g) { accumulate_if(a, g.array() * s); });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape(), a.value().array() + s);
  return make_op<Scalar>(std::move(out), {a}, [a](const Tensor<Scalar>& g) { accumulate_if(a, g.array()); });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape(), a.value().array().max(Scalar(0)));
  return make_op<Scalar>(std::move(out), {a}, [a](const Tensor<Scalar>& g) {
    accumulate_if(a, (a.value().array() > Scalar(0)).select(g.array(), Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
  const auto& x = a.value().array();
  Tensor<Scalar> out(a.shape(), (x > Scalar(0)).select(x, x * slope));
  return make_op<Scalar>(std::move(out), {a}, [a, slope](const Tensor<Scalar>& g) {
    accumulate_if(a, (a.value().array() > Scalar(0)).select(g.array(), g.array() * slope));
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape(), a.value().array().tanh());
  auto y = out.array();
  return make_op<Scalar>(std::move(out), {a}, [a, y](const Tensor<Scalar>& g) {
    accumulate_if(a, g.array() * (Scalar(1) - y.square()));
  });
}

/// atanh(clamp(x, -limit, limit)); the gradient is zero where the clamp is active.
template <typename Scalar>
Var<Scalar> atanh_clamped(const Var<Scalar>& a, Scalar limit) {
  const auto x = a.value().array().max(-limit).min(limit);
  Tensor<Scalar> out(a.shape(), Scalar(0.5) * ((Scalar(1) + x) / (Scalar(1) - x)).log());
  Tensor<Scalar> slope(a.shape(), (a.value().array().abs() < limit).select(Scalar(1) / (Scalar(1) - x.square()), Scalar(0)));
  auto d = slope.array();
  return make_op<Scalar>(std::move(out), {a}, [a, d](const Tensor<Scalar>& g) { accumulate_if(a, g.array() * d); });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape(), Scalar(1) / (Scalar(1) + (-a.value().array()).exp()));
  auto y = out.array();
  return make_op<Scalar>(std::move(out), {a}, [a, y](const Tensor<Scalar>& g) {
    accumulate_if(a, g.array() * y * (Scalar(1) - y));
  });
}

/// Per-channel y = x * gain[c] + bias[c] with constant coefficients, on (N, C, H, W).
template <typename Scalar>
Var<Scalar> channel_affine(const Var<Scalar>& a, const std::vector<Scalar>& gain, const std::vector<Scalar>& bias) {
  detail::require_rank(a, 4, "channel_affine");
  const Index n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  detail::require(static_cast<Index>(gain.size()) == c && static_cast<Index>(bias.size()) == c,
                  "channel_affine: coefficient count mismatch");
  Tensor<Scalar> out(a.shape());
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < c; ++j)
      out.array().segment((i * c + j) * hw, hw) =
          a.value().array().segment((i * c + j) * hw, hw) * gain[j] + bias[j];
  return make_op<Scalar>(std::move(out), {a}, [a, gain, n, c, hw](const Tensor<Scalar>& g) {
    typename Tensor<Scalar>::Array d(g.size());
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < c; ++j) d.segment((i * c + j) * hw, hw) = g.array().segment((i * c + j) * hw, hw) * gain[j];
    accumulate_if(a, d);
  });
}

// ---------------------------------------------------------------- shape

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  return make_op<Scalar>(std::move(out), {a}, [a](const Tensor<Scalar>& g) { accumulate_if(a, g.array()); });
}

/// Concatenation along the leading (batch) dimension.
template <typename Scalar>
Var<Scalar> concat_batch(const std::vector<Var<Scalar>>& parts) {
  std::vector<Tensor<Scalar>> values;
  for (const auto& p : parts) values.push_back(p.value());
  Tensor<Scalar> out = concat_rows(values);
  return make_op<Scalar>(std::move(out), parts, [parts](const Tensor<Scalar>& g) {
    Index pos = 0;
    for (const auto& p : parts) {
      accumulate_if(p, g.array().segment(pos, p.value().size()));
      pos += p.value().size();
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_batch(const Var<Scalar>& a, Index begin, Index end) {
  Tensor<Scalar> out = a.value().slice(begin, end);
  const Index stride = a.dim(0) == 0 ? 0 : a.value().size() / a.dim(0);
  return make_op<Scalar>(std::move(out), {a}, [a, begin, end, stride](const Tensor<Scalar>& g) {
    if (!a.requires_grad()) return;
    typename Tensor<Scalar>::Array d = Tensor<Scalar>::Array::Zero(a.value().size());
    d.segment(begin * stride, (end - begin) * stride) = g.array();
    a.node()->accumulate(d);
  });
}

/// Concatenation along channels of two (N, C, H, W) tensors.
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_rank(a, 4, "concat_channels");
  detail::require_rank(b, 4, "concat_channels");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: shape mismatch");
  const Index n = a.dim(0), ca = a.dim(1) * a.dim(2) * a.dim(3), cb = b.dim(1) * b.dim(2) * b.dim(3);
  Tensor<Scalar> out({n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (Index i = 0; i < n; ++i) {
    out.array().segment(i * (ca + cb), ca) = a.value().array().segment(i * ca, ca);
    out.array().segment(i * (ca + cb) + ca, cb) = b.value().array().segment(i * cb, cb);
  }
  return make_op<Scalar>(std::move(out), {a, b}, [a, b, n, ca, cb](const Tensor<Scalar>& g) {
    if (a.requires_grad()) {
      typename Tensor<Scalar>::Array d(n * ca);
      for (Index i = 0; i < n; ++i) d.segment(i * ca, ca) = g.array().segment(i * (ca + cb), ca);
      a.node()->accumulate(d);
    }
    if (b.requires_grad()) {
      typename Tensor<Scalar>::Array d(n * cb);
      for (Index i = 0; i < n; ++i) d.segment(i * cb, cb) = g.array().segment(i * (ca + cb) + ca, cb);
      b.node()->accumulate(d);
    }
  });
}

// ---------------------------------------------------------------- reductions

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto out = Tensor<Scalar>::scalar(a.value().array().sum());
  return make_op<Scalar>(std::move(out), {a}, [a](const Tensor<Scalar>& g) {
    accumulate_if(a, Tensor<Scalar>::Array::Constant(a.value().size(), g[0]));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  detail::require(a.value().size() > 0, "mean of empty tensor");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.value().size());
  auto out = Tensor<Scalar>::scalar(a.value().array().sum() * inv);
  return make_op<Scalar>(std::move(out), {a}, [a, inv](const Tensor<Scalar>& g) {
    accumulate_if(a, Tensor<Scalar>::Array::Constant(a.value().size(), g[0] * inv));
  });
}

/// Mean over the leading dimension; result has leading dimension 1.
template <typename Scalar>
Var<Scalar> mean_batch(const Var<Scalar>& a) {
  const Index n = a.dim(0);
  detail::require(n > 0, "mean_batch of empty batch");
  const Index stride = a.value().size() / n;
  Shape s = a.shape();
  s[0] = 1;
  Tensor<Scalar> out(s);
  for (Index i = 0; i < n; ++i) out.array() += a.value().array().segment(i * stride, stride);
  out.array() /= static_cast<Scalar>(n);
  return make_op<Scalar>(std::move(out), {a}, [a, n, stride](const Tensor<Scalar>& g) {
    if (!a.requires_grad()) return;
    typename Tensor<Scalar>::Array d(n * stride);
    for (Index i = 0; i < n; ++i) d.segment(i * stride, stride) = g.array() / static_cast<Scalar>(n);
    a.node()->accumulate(d);
  });
}

/// Mean squared error with mean reduction over all elements.
template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mse");
  detail::require(a.value().size() > 0, "mse of empty tensors");
  typename Tensor<Scalar>::Array diff = a.value().array() - b.value().array();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(diff.size());
  auto out = Tensor<Scalar>::scalar(diff.square().sum() * inv);
  return make_op<Scalar>(std::move(out), {a, b}, [a, b, diff, inv](const Tensor<Scalar>& g) {
    const Scalar k = Scalar(2) * inv * g[0];
    accumulate_if(a, diff * k);
    accumulate_if(b, diff * -k);
  });
}

// ---------------------------------------------------------------- convolution

struct ConvGeometry {
  Index kernel = 3;
  Index stride = 1;
  Index pad = 1;
  Index out_extent(Index in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

namespace detail {

/// Half-open range [lo, hi) of output columns whose tap kx reads an in-bounds input column.
inline std::pair<Index, Index> valid_columns(const ConvGeometry& geo, Index kx, Index w, Index wo) {
  const Index off = kx - geo.pad;
  const Index lo = off >= 0 ? 0 : (-off + geo.stride - 1) / geo.stride;
  const Index hi = w - off <= 0 ? 0 : std::min(wo, (w - off - 1) / geo.stride + 1);
  return {std::min(lo, hi), hi};
}

// Column buffer laid out as a column-major (N*Ho*Wo) x (C*k*k) matrix: one contiguous column per
// (channel, ky, kx) tap.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, const ConvGeometry& geo, Index ho, Index wo, Scalar* cols) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = geo.kernel;
  const Index p = n * ho * wo;
  const Scalar* src = x.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const auto [lo, hi] = valid_columns(geo, kx, w, wo);
        Scalar* col = cols + ((ci * k + ky) * k + kx) * p;
        for (Index ni = 0; ni < n; ++ni) {
          const Scalar* plane = src + (ni * c + ci) * h * w;
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * geo.stride + ky - geo.pad;
            Scalar* dst = col + (ni * ho + oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, Scalar(0));
              continue;
            }
            const Scalar* row = plane + iy * w;
            const Index off = kx - geo.pad;
            std::fill(dst, dst + lo, Scalar(0));
            if (geo.stride == 1) {
              if (hi > lo) std::copy(row + lo + off, row + hi + off, dst + lo);
            } else {
              for (Index ox = lo; ox < hi; ++ox) dst[ox] = row[ox * geo.stride + off];
            }
            std::fill(dst + hi, dst + wo, Scalar(0));
          }
        }
      }
}

template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& geo, Index ho, Index wo, Tensor<Scalar>& dx) {
  const Index n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3), k = geo.kernel;
  const Index p = n * ho * wo;
  Scalar* dst = dx.data();
  for (Index ci = 0; ci < c; ++ci)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const auto [lo, hi] = valid_columns(geo, kx, w, wo);
        const Scalar* col = cols + ((ci * k + ky) * k + kx) * p;
        for (Index ni = 0; ni < n; ++ni) {
          Scalar* plane = dst + (ni * c + ci) * h * w;
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy * geo.stride + ky - geo.pad;
            if (iy < 0 || iy >= h) continue;
            const Scalar* src = col + (ni * ho + oy) * wo;
            Scalar* row = plane + iy * w;
            const Index off = kx - geo.pad;
            for (Index ox = lo; ox < hi; ++ox) row[ox * geo.stride + off] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. x: (N, C, H, W), weight: (O, C, k, k), bias: (O).
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, ConvGeometry geo) {
  using Matrix = typename Tensor<Scalar>::Matrix;
  using MatMap = Eigen::Map<Matrix>;
  using CMatMap = Eigen::Map<const Matrix>;
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d weight");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index o = weight.dim(0), k = weight.dim(2);
  detail::require(weight.dim(1) == c && weight.dim(3) == k && k == geo.kernel,
                  "conv2d: weight " + shape_string(weight.shape()) + " does not match input " + shape_string(x.shape()));
  detail::require(bias.value().size() == o, "conv2d: bias size mismatch");
  const Index ho = geo.out_extent(h), wo = geo.out_extent(w);
  detail::require(ho > 0 && wo > 0, "conv2d: input " + shape_string(x.shape()) + " too small for kernel");
  const Index p = n * ho * wo, q = c * k * k, plane = ho * wo;

  auto cols = std::make_shared<Matrix>(p, q);
  detail::im2col(x.value(), geo, ho, wo, cols->data());
  CMatMap wt(weight.value().data(), q, o);
  Matrix out_t(p, o);
  out_t.noalias() = (*cols) * wt;

  Tensor<Scalar> out({n, o, ho, wo});
  for (Index ni = 0; ni < n; ++ni)
    for (Index oi = 0; oi < o; ++oi)
      out.array().segment((ni * o + oi) * plane, plane) =
          out_t.col(oi).segment(ni * plane, plane).array() + bias.value()[oi];

  return make_op<Scalar>(std::move(out), {x, weight, bias},
                         [x, weight, bias, geo, cols, n, o, ho, wo, p, q, plane](const Tensor<Scalar>& g) {
                           Matrix g_t(p, o);
                           for (Index ni = 0; ni < n; ++ni)
                             for (Index oi = 0; oi < o; ++oi)
                               g_t.col(oi).segment(ni * plane, plane) =
                                   g.array().segment((ni * o + oi) * plane, plane).matrix();
                           if (weight.requires_grad()) {
                             Matrix dw = cols->transpose() * g_t;
                             weight.node()->accumulate(MatMap(dw.data(), q * o, 1).array());
                           }
                           if (bias.requires_grad()) bias.node()->accumulate(g_t.colwise().sum().transpose().array());
                           if (x.requires_grad()) {
                             CMatMap wt(weight.value().data(), q, o);
                             Matrix dcols = g_t * wt.transpose();
                             Tensor<Scalar> dx(x.shape());
                             detail::col2im(dcols.data(), geo, ho, wo, dx);
                             x.node()->accumulate(dx.array());
                           }
                         });
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
template <typename Scalar>
Var<Scalar> max_pool2(const Var<Scalar>& x) {
  detail::require_rank(x, 4, "max_pool2");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = h / 2, wo = w / 2;
  detail::require(ho > 0 && wo > 0, "max_pool2: input " + shape_string(x.shape()) + " too small");
  Tensor<Scalar> out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  const Scalar* src = x.value().data();
  Index idx = 0;
  for (Index plane = 0; plane < n * c; ++plane) {
    const Scalar* s = src + plane * h * w;
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox, ++idx) {
        Index best = (2 * oy) * w + 2 * ox;
        for (Index dy = 0; dy < 2; ++dy)
          for (Index dx = 0; dx < 2; ++dx) {
            const Index cand = (2 * oy + dy) * w + 2 * ox + dx;
            if (s[cand] > s[best]) best = cand;
          }
        out[idx] = s[best];
        (*argmax)[static_cast<std::size_t>(idx)] = plane * h * w + best;
      }
  }
  return make_op<Scalar>(std::move(out), {x}, [x, argmax](const Tensor<Scalar>& g) {
    typename Tensor<Scalar>::Array d = Tensor<Scalar>::Array::Zero(x.value().size());
    for (std::size_t i = 0; i < argmax->size(); ++i) d[(*argmax)[i]] += g[static_cast<Index>(i)];
    x.node()->accumulate(d);
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename Scalar>
Var<Scalar> upsample2(const Var<Scalar>& x) {
  detail::require_rank(x, 4, "upsample2");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<Scalar> out({n, c, 2 * h, 2 * w});
  for (Index plane = 0; plane < n * c; ++plane)
    for (Index y = 0; y < 2 * h; ++y)
      for (Index xx = 0; xx < 2 * w; ++xx)
        out[(plane * 2 * h + y) * 2 * w + xx] = x.value()[(plane * h + y / 2) * w + xx / 2];
  return make_op<Scalar>(std::move(out), {x}, [x, n, c, h, w](const Tensor<Scalar>& g) {
    typename Tensor<Scalar>::Array d = Tensor<Scalar>::Array::Zero(x.value().size());
    for (Index plane = 0; plane < n * c; ++plane)
      for (Index y = 0; y < 2 * h; ++y)
        for (Index xx = 0; xx < 2 * w; ++xx) d[(plane * h + y / 2) * w + xx / 2] += g[(plane * 2 * h + y) * 2 * w + xx];
    x.node()->accumulate(d);
  });
}

/// Per-image, per-channel normalisation over spatial positions (no affine).
template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, Scalar eps = Scalar(1e-5)) {
  detail::require_rank(x, 4, "instance_norm");
  const Index planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out(x.shape());
  auto rstd = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(planes));
  for (Index p = 0; p < planes; ++p) {
    auto seg = x.value().array().segment(p * hw, hw);
    const Scalar mu = seg.mean();
    const Scalar var = (seg - mu).square().mean();
    const Scalar r = Scalar(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(p)] = r;
    out.array().segment(p * hw, hw) = (seg - mu) * r;
  }
  auto y = out.array();
  return make_op<Scalar>(std::move(out), {x}, [x, y, rstd, planes, hw](const Tensor<Scalar>& g) {
    typename Tensor<Scalar>::Array d(x.value().size());
    for (Index p = 0; p < planes; ++p) {
      auto gy = g.array().segment(p * hw, hw);
      auto yy = y.segment(p * hw, hw);
      const Scalar mg = gy.mean();
      const Scalar mgy = (gy * yy).mean();
      d.segment(p * hw, hw) = (gy - mg - yy * mgy) * (*rstd)[static_cast<std::size_t>(p)];
    }
    x.node()->accumulate(d);
  });
}

/// (N, C, H, W) -> (N, C) spatial mean.
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out({n, c});
  for (Index p = 0; p < n * c; ++p) out[p] = x.value().array().segment(p * hw, hw).mean();
  return make_op<Scalar>(std::move(out), {x}, [x, n, c, hw](const Tensor<Scalar>& g) {
    typename Tensor<Scalar>::Array d(n * c * hw);
    for (Index p = 0; p < n * c; ++p) d.segment(p * hw, hw).setConstant(g[p] / static_cast<Scalar>(hw));
    x.node()->accumulate(d);
  });
}

/// x: (N, D), weight: (O, D), bias: (O) -> (N, O).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  detail::require_rank(x, 2, "linear");
  detail::require(weight.dim(1) == x.dim(1) && bias.value().size() == weight.dim(0), "linear: shape mismatch");
  Tensor<Scalar> out({x.dim(0), weight.dim(0)});
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  out.matrix().rowwise() += bias.value().array().matrix().transpose();
  return make_op<Scalar>(std::move(out), {x, weight, bias}, [x, weight, bias](const Tensor<Scalar>& g) {
    const auto gm = g.matrix();
    if (x.requires_grad()) {
      Tensor<Scalar> dx(x.shape());
      dx.matrix().noalias() = gm * weight.value().matrix();
      x.node()->accumulate(dx.array());
    }
    if (weight.requires_grad()) {
      Tensor<Scalar> dw(weight.shape());
      dw.matrix().noalias() = gm.transpose() * x.value().matrix();
      weight.node()->accumulate(dw.array());
    }
    if (bias.requires_grad()) bias.node()->accumulate(gm.colwise().sum().transpose().array());
  });
}

/// Row-wise log-softmax of (N, k).
template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& x) {
  detail::require_rank(x, 2, "log_softmax");
  Tensor<Scalar> out(x.shape());
  auto xm = x.value().matrix();
  auto om = out.matrix();
  for (Index r = 0; r < xm.rows(); ++r) {
    const Scalar mx = xm.row(r).maxCoeff();
    const Scalar lse = mx + std::log((xm.row(r).array() - mx).exp().sum());
    om.row(r) = xm.row(r).array() - lse;
  }
  auto y = out;
  return make_op<Scalar>(std::move(out), {x}, [x, y](const Tensor<Scalar>& g) {
    Tensor<Scalar> d(x.shape());
    auto gm = g.matrix();
    auto ym = y.matrix();
    auto dm = d.matrix();
    for (Index r = 0; r < gm.rows(); ++r) dm.row(r) = gm.row(r).array() - ym.row(r).array().exp() * gm.row(r).sum();
    x.node()->accumulate(d.array());
  });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
  detail::require_rank(x, 2, "softmax");
  Tensor<Scalar> out(x.shape());
  auto xm = x.value().matrix();
  auto om = out.matrix();
  for (Index r = 0; r < xm.rows(); ++r) {
    auto e = (xm.row(r).array() - xm.row(r).maxCoeff()).exp();
    om.row(r) = e / e.sum();
  }
  auto y = out;
  return make_op<Scalar>(std::move(out), {x}, [x, y](const Tensor<Scalar>& g) {
    Tensor<Scalar> d(x.shape());
    auto gm = g.matrix();
    auto pm = y.matrix();
    auto dm = d.matrix();
    for (Index r = 0; r < gm.rows(); ++r) {
      const Scalar dot = (gm.row(r).array() * pm.row(r).array()).sum();
      dm.row(r) = pm.row(r).array() * (gm.row(r).array() - dot);
    }
    x.node()->accumulate(d.array());
  });
}

/// Per-image Gram matrices: (N, C, H, W) -> (N, C, C), each F F^T / (C H W).
template <typename Scalar>
Var<Scalar> gram(const Var<Scalar>& x) {
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  detail::require_rank(x, 4, "gram");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  detail::require(c >= 1, "gram: no channels");
  detail::require(hw >= 1, "gram: empty spatial extent");
  detail::require(x.value().all_finite(), "non-finite features");
  const Scalar norm = Scalar(1) / static_cast<Scalar>(c * hw);
  Tensor<Scalar> out({n, c, c});
  for (Index i = 0; i < n; ++i) {
    Eigen::Map<const RowMatrix> f(x.value().data() + i * c * hw, c, hw);
    Eigen::Map<RowMatrix> gm(out.data() + i * c * c, c, c);
    gm.setZero();
    gm.template selfadjointView<Eigen::Lower>().rankUpdate(f, norm);
    const RowMatrix lower = gm.template triangularView<Eigen::Lower>();
    gm.template triangularView<Eigen::StrictlyUpper>() = lower.transpose();
  }
  return make_op<Scalar>(std::move(out), {x}, [x, n, c, hw, norm](const Tensor<Scalar>& g) {
    Tensor<Scalar> d(x.shape());
    for (Index i = 0; i < n; ++i) {
      Eigen::Map<const RowMatrix> f(x.value().data() + i * c * hw, c, hw);
      Eigen::Map<const RowMatrix> gg(g.data() + i * c * c, c, c);
      Eigen::Map<RowMatrix> df(d.data() + i * c * hw, c, hw);
      df.noalias() = ((gg + gg.transpose()) * norm) * f;
    }
    x.node()->accumulate(d.array());
  });
}

/// Elementwise -log(clamp(p, eps, 1 - eps)); zero gradient where clamped.
template <typename Scalar>
Var<Scalar> neg_log(const Var<Scalar>& p, Scalar eps) {
  const auto& v = p.value().array();
  typename Tensor<Scalar>::Array pc = v.max(eps).min(Scalar(1) - eps);
  Tensor<Scalar> out(p.shape(), -pc.log());
  return make_op<Scalar>(std::move(out), {p}, [p, pc, eps](const Tensor<Scalar>& g) {
    const auto& v = p.value().array();
    auto inside = (v >= eps) && (v <= Scalar(1) - eps);
    accumulate_if(p, inside.select(-g.array() / pc, Scalar(0)));
  });
}

/// Elementwise -log(1 - clamp(p, eps, 1 - eps)); zero gradient where clamped.
template <typename Scalar>
Var<Scalar> neg_log1m(const Var<Scalar>& p, Scalar eps) {
  const auto& v = p.value().array();
  typename Tensor<Scalar>::Array qc = Scalar(1) - v.max(eps).min(Scalar(1) - eps);
  Tensor<Scalar> out(p.shape(), -qc.log());
  return make_op<Scalar>(std::move(out), {p}, [p, qc, eps](const Tensor<Scalar>& g) {
    const auto& v = p.value().array();
    auto inside = (v >= eps) && (v <= Scalar(1) - eps);
    accumulate_if(p, inside.select(g.array() / qc, Scalar(0)));
  });
}

}  // namespace styleshift
