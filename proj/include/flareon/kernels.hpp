#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/gemm.hpp"
#include "flareon/tensor.hpp"

// Layer forward/backward kernels. All are pure functions of their inputs;
// every reduction runs in a fixed order so results are bit-deterministic.
namespace flareon::kernels {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct Conv2dGrads {
  Tensor dx;  // empty when not requested
  Tensor dw;
  Tensor db;
};

namespace conv_impl {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, oh, ow;
};

inline ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dParams p) {
  expect_rank(x, 4, "conv2d input");
  expect_rank(w, 4, "conv2d weight");
  expect(w.dim(2) == w.dim(3), "conv2d: kernel must be square, got ", shape_string(w.shape()));
  expect(w.dim(1) == x.dim(1), "conv2d: weight expects ", w.dim(1), " input channels, input has ", x.dim(1));
  expect_shape(b, {w.dim(0)}, "conv2d bias");
  expect(p.stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t k = w.dim(2);
  expect(x.dim(2) + 2 * p.pad >= k && x.dim(3) + 2 * p.pad >= k, "conv2d: kernel ", k,
         " larger than padded input ", shape_string(x.shape()));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), k, 0, 0};
  g.oh = (g.h + 2 * p.pad - k) / p.stride + 1;
  g.ow = (g.w + 2 * p.pad - k) / p.stride + 1;
  return g;
}

// Writes one image's patches into columns [offset, offset + oh*ow) of a
// (cin*k*k) x ld column matrix.
inline void im2col(const float* img, const ConvGeometry& g, Conv2dParams p, float* col, std::size_t ld,
                   std::size_t offset) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        float* dst = col + ((c * g.k + ky) * g.k + kx) * ld + offset;
        const float* src = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - static_cast<std::ptrdiff_t>(p.pad);
          float* drow = dst + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(drow, drow + g.ow, 0.0f);
            continue;
          }
          const float* srow = src + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - static_cast<std::ptrdiff_t>(p.pad);
            drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0f : srow[ix];
          }
        }
      }
}

// Adjoint of im2col: scatters one image's columns back (accumulating).
inline void col2im(const float* col, const ConvGeometry& g, Conv2dParams p, float* img, std::size_t ld,
                   std::size_t offset) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const float* src = col + ((c * g.k + ky) * g.k + kx) * ld + offset;
        float* dst = img + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - static_cast<std::ptrdiff_t>(p.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          float* drow = dst + static_cast<std::size_t>(iy) * g.w;
          const float* srow = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - static_cast<std::ptrdiff_t>(p.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) drow[ix] += srow[ox];
          }
        }
      }
}

// Images are processed in chunks whose patch matrices are about this many
// columns wide, so small feature maps still give the GEMM a wide operand.
inline constexpr std::size_t kTargetColumns = 1024;

inline std::size_t chunk_images(const ConvGeometry& g) {
  const std::size_t plane = g.oh * g.ow;
  return std::clamp<std::size_t>(kTargetColumns / std::max<std::size_t>(plane, 1), 1, std::max<std::size_t>(g.n, 1));
}

}  // namespace conv_impl

/// Cross-correlation of x (N x Cin x H x W) with w (Cout x Cin x k x k).
inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dParams p = {}) {
  const auto g = conv_impl::conv_geometry(x, w, b, p);
  Tensor y({g.n, g.cout, g.oh, g.ow});
  const std::size_t kdim = g.cin * g.k * g.k;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t chunk = conv_impl::chunk_images(g);
  std::vector<float> col(kdim * chunk * plane);
  std::vector<float> out(g.cout * chunk * plane);
  for (std::size_t i0 = 0; i0 < g.n; i0 += chunk) {
    const std::size_t cn = std::min(chunk, g.n - i0), ld = cn * plane;
    for (std::size_t i = 0; i < cn; ++i) conv_impl::im2col(x.slice(i0 + i).data(), g, p, col.data(), ld, i * plane);
    gemm::matmul(g.cout, ld, kdim, w.data(), col.data(), out.data());
    for (std::size_t i = 0; i < cn; ++i) {
      float* dst = y.slice(i0 + i).data();
      for (std::size_t o = 0; o < g.cout; ++o) {
        const float* src = out.data() + o * ld + i * plane;
        for (std::size_t q = 0; q < plane; ++q) dst[o * plane + q] = src[q] + b[o];
      }
    }
  }
  return y;
}

/// Exact gradients of conv2d_forward given dL/dy. dx is skipped when
/// `need_dx` is false (first layer of a model that needs no input grad).
inline Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& dy,
                                   Conv2dParams p = {}, bool need_dx = true) {
  const auto g = conv_impl::conv_geometry(x, w, b, p);
  expect_shape(dy, {g.n, g.cout, g.oh, g.ow}, "conv2d output gradient");
  const std::size_t kdim = g.cin * g.k * g.k;
  const std::size_t plane = g.oh * g.ow;
  const std::size_t chunk = conv_impl::chunk_images(g);

  Conv2dGrads grads{Tensor{}, Tensor(w.shape()), Tensor(b.shape())};
  if (need_dx) grads.dx = Tensor(x.shape());

  std::vector<float> col(kdim * chunk * plane);
  std::vector<float> dy_cols(g.cout * chunk * plane);  // cout x ld
  std::vector<float> dy_rows(chunk * plane * g.cout);  // ld x cout
  std::vector<float> dw_t(kdim * g.cout, 0.0f);
  std::vector<float> w_t(kdim * g.cout);
  gemm::transpose(g.cout, kdim, w.data(), w_t.data());

  std::vector<double> db(g.cout, 0.0);
  for (std::size_t i0 = 0; i0 < g.n; i0 += chunk) {
    const std::size_t cn = std::min(chunk, g.n - i0), ld = cn * plane;
    for (std::size_t i = 0; i < cn; ++i) {
      const float* dyi = dy.slice(i0 + i).data();
      for (std::size_t o = 0; o < g.cout; ++o) {
        double s = 0.0;
        for (std::size_t q = 0; q < plane; ++q) {
          const float v = dyi[o * plane + q];
          s += v;
          dy_cols[o * ld + i * plane + q] = v;
          dy_rows[(i * plane + q) * g.cout + o] = v;
        }
        db[o] += s;
      }
      conv_impl::im2col(x.slice(i0 + i).data(), g, p, col.data(), ld, i * plane);
    }
    // dW^T += col (kdim x ld) * dY^T (ld x cout)
    gemm::matmul(kdim, g.cout, ld, col.data(), dy_rows.data(), dw_t.data(), /*accumulate=*/true);
    if (need_dx) {
      // dcol = W^T (kdim x cout) * dY (cout x ld)
      gemm::matmul(kdim, ld, g.cout, w_t.data(), dy_cols.data(), col.data());
      for (std::size_t i = 0; i < cn; ++i)
        conv_impl::col2im(col.data(), g, p, grads.dx.slice(i0 + i).data(), ld, i * plane);
    }
  }
  gemm::transpose(kdim, g.cout, dw_t.data(), grads.dw.data());
  for (std::size_t o = 0; o < g.cout; ++o) grads.db[o] = static_cast<float>(db[o]);
  return grads;
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.values()) v = v > 0.0f ? v : 0.0f;
  return y;
}

/// Uses the forward output: the gradient passes where y > 0.
inline Tensor relu_backward(const Tensor& y, const Tensor& dy) {
  expect(y.shape() == dy.shape(), "relu_backward: shape mismatch ", shape_string(y.shape()), " vs ",
         shape_string(dy.shape()));
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y[i] > 0.0f ? dy[i] : 0.0f;
  return dx;
}

struct MaxPoolResult {
  Tensor y;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// 2x2 max pooling with stride 2 (floor on odd extents). Ties pick the
/// first element in row-major window order.
inline MaxPoolResult maxpool2_forward(const Tensor& x) {
  expect_rank(x, 4, "maxpool2 input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  expect(oh > 0 && ow > 0, "maxpool2: input ", shape_string(x.shape()), " too small");
  MaxPoolResult r{Tensor({n, c, oh, ow}), std::vector<std::uint32_t>(n * c * oh * ow)};
  std::size_t out = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, ++out) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        r.y[out] = x[best];
        r.argmax[out] = static_cast<std::uint32_t>(best);
      }
  }
  return r;
}

inline Tensor maxpool2_backward(const Shape& input_shape, const MaxPoolResult& fwd, const Tensor& dy) {
  expect(dy.shape() == fwd.y.shape(), "maxpool2_backward: gradient shape ", shape_string(dy.shape()),
         " does not match output ", shape_string(fwd.y.shape()));
  Tensor dx(input_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[fwd.argmax[i]] += dy[i];
  return dx;
}

/// N x C x H x W -> N x C, mean over the spatial plane (accumulated in double).
inline Tensor global_avg_pool_forward(const Tensor& x) {
  expect_rank(x, 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    const float* src = x.data() + p * plane;
    for (std::size_t q = 0; q < plane; ++q) s += src[q];
    y[p] = static_cast<float>(s / static_cast<double>(plane));
  }
  return y;
}

inline Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& dy) {
  expect(input_shape.size() == 4, "global_avg_pool_backward: input must be rank 4");
  expect_shape(dy, {input_shape[0], input_shape[1]}, "global_avg_pool output gradient");
  const std::size_t plane = input_shape[2] * input_shape[3];
  const float scale = 1.0f / static_cast<float>(plane);
  Tensor dx(input_shape);
  for (std::size_t p = 0; p < dy.size(); ++p) {
    const float g = dy[p] * scale;
    std::fill(dx.data() + p * plane, dx.data() + (p + 1) * plane, g);
  }
  return dx;
}

/// y = x w^T + b with x: N x D, w: O x D, b: O.
inline Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  expect_rank(x, 2, "linear input");
  expect_rank(w, 2, "linear weight");
  expect(x.dim(1) == w.dim(1), "linear: weight expects ", w.dim(1), " features, input has ", x.dim(1));
  expect_shape(b, {w.dim(0)}, "linear bias");
  const std::size_t n = x.dim(0), d = x.dim(1), o = w.dim(0);
  Tensor y({n, o});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      double s = b[j];
      const float* xr = x.data() + i * d;
      const float* wr = w.data() + j * d;
      for (std::size_t q = 0; q < d; ++q) s += static_cast<double>(xr[q]) * wr[q];
      y[i * o + j] = static_cast<float>(s);
    }
  return y;
}

struct LinearGrads {
  Tensor dx;
  Tensor dw;
  Tensor db;
};

inline LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
  expect_rank(x, 2, "linear input");
  const std::size_t n = x.dim(0), d = x.dim(1), o = w.dim(0);
  expect_shape(dy, {n, o}, "linear output gradient");
  expect(w.dim(1) == d, "linear_backward: weight/input mismatch");
  LinearGrads g{Tensor({n, d}), Tensor({o, d}), Tensor({o})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < d; ++q) {
      double s = 0.0;
      for (std::size_t j = 0; j < o; ++j) s += static_cast<double>(dy[i * o + j]) * w[j * d + q];
      g.dx[i * d + q] = static_cast<float>(s);
    }
  for (std::size_t j = 0; j < o; ++j) {
    double sb = 0.0;
    for (std::size_t i = 0; i < n; ++i) sb += dy[i * o + j];
    g.db[j] = static_cast<float>(sb);
    for (std::size_t q = 0; q < d; ++q) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(dy[i * o + j]) * x[i * d + q];
      g.dw[j * d + q] = static_cast<float>(s);
    }
  }
  return g;
}

/// Row-wise softmax of an N x K logit matrix (computed in double).
inline Tensor softmax(const Tensor& logits) {
  expect_rank(logits, 2, "softmax logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * k;
    const float mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / z);
  }
  return p;
}

struct XentResult {
  double loss = 0.0;  // batch mean
  Tensor dlogits;
};

/// Mean softmax cross-entropy over the batch and its gradient.
inline XentResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  expect_rank(logits, 2, "softmax_xent logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  expect(labels.size() == n, "softmax_xent: ", labels.size(), " labels for ", n, " rows");
  expect(n > 0, "softmax_xent: empty batch");
  XentResult r{0.0, Tensor(logits.shape())};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    expect(y >= 0 && static_cast<std::size_t>(y) < k, "softmax_xent: label ", y, " out of range [0,", k, ")");
    const float* row = logits.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    r.loss += (log_z - row[y]) * inv_n;
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = std::exp(row[j] - log_z);
      r.dlogits[i * k + j] = static_cast<float>((pj - (static_cast<int>(j) == y ? 1.0 : 0.0)) * inv_n);
    }
  }
  return r;
}

/// Index of the largest entry per row (first on ties).
inline std::vector<int> argmax_rows(const Tensor& m) {
  expect_rank(m, 2, "argmax_rows");
  const std::size_t n = m.dim(0), k = m.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = m.data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

}  // namespace flareon::kernels
