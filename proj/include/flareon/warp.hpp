#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/rng.hpp"
#include "flareon/tensor.hpp"

namespace flareon {

/// Per-pixel motion trigger: an H x W x 2 field of displacements in
/// [-1, 1]. Component 0 moves along rows (scaled by 1/H of the image
/// height), component 1 along columns (scaled by 1/W of the width), so a
/// unit entry moves the sample point by exactly one pixel.
class FlowField {
 public:
  FlowField() = default;
  FlowField(std::size_t height, std::size_t width, float fill = 0.0f)
      : height_(height), width_(width), values_(height * width * 2, fill) {}
  FlowField(std::size_t height, std::size_t width, std::vector<float> values)
      : height_(height), width_(width), values_(std::move(values)) {
    expect(values_.size() == height * width * 2, "FlowField: ", values_.size(), " values for ", height, "x", width,
           "x2");
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }

  float& dy(std::size_t i, std::size_t j) noexcept { return values_[(i * width_ + j) * 2]; }
  float& dx(std::size_t i, std::size_t j) noexcept { return values_[(i * width_ + j) * 2 + 1]; }
  float dy(std::size_t i, std::size_t j) const noexcept { return values_[(i * width_ + j) * 2]; }
  float dx(std::size_t i, std::size_t j) const noexcept { return values_[(i * width_ + j) * 2 + 1]; }

  std::span<float> values() noexcept { return values_; }
  std::span<const float> values() const noexcept { return values_; }

  /// Root-mean-square entry: ||tau||_2 / sqrt(H * W * 2).
  double rms() const noexcept {
    return values_.empty() ? 0.0 : std::sqrt(squared_norm(values_) / static_cast<double>(values_.size()));
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> values_;
};

enum class InitFamily { beta, uniform, gaussian };

inline std::string to_string(InitFamily f) {
  switch (f) {
    case InitFamily::beta: return "beta";
    case InitFamily::uniform: return "uniform";
    case InitFamily::gaussian: return "gaussian";
  }
  return "unknown";
}

inline InitFamily parse_init_family(const std::string& s) {
  if (s == "beta") return InitFamily::beta;
  if (s == "uniform") return InitFamily::uniform;
  if (s == "gaussian") return InitFamily::gaussian;
  throw ContractViolation("unknown trigger init family '" + s + "' (expected beta, uniform or gaussian)");
}

/// Trigger initialization distribution. `param` is beta for Beta(beta, beta),
/// s for U(-s, s), sigma for N(0, sigma).
struct InitSpec {
  InitFamily family = InitFamily::beta;
  double param = 2.0;

  void validate() const {
    expect(std::isfinite(param), "InitSpec: parameter must be finite");
    switch (family) {
      case InitFamily::beta: expect(param > 0.0, "InitSpec: beta must be > 0, got ", param); break;
      case InitFamily::uniform: expect(param > 0.0 && param <= 1.0, "InitSpec: s must be in (0,1], got ", param); break;
      case InitFamily::gaussian: expect(param > 0.0, "InitSpec: sigma must be > 0, got ", param); break;
    }
  }
};

/// Draws a fresh trigger with i.i.d. entries in row-major (i, j, component)
/// order. Beta draws map to [-1,1] by 2b - 1; uniform and gaussian samples
/// are clamped to [-1,1].
inline FlowField sample_flow(const InitSpec& init, std::size_t height, std::size_t width, RngStream rng) {
  init.validate();
  expect(height > 0 && width > 0, "sample_flow: empty field ", height, "x", width);
  FlowField tau(height, width);
  for (float& v : tau.values()) {
    double s = 0.0;
    switch (init.family) {
      case InitFamily::beta: s = 2.0 * rng.beta(init.param, init.param) - 1.0; break;
      case InitFamily::uniform: s = rng.uniform(-init.param, init.param); break;
      case InitFamily::gaussian: s = init.param * rng.normal(); break;
    }
    v = static_cast<float>(std::clamp(s, -1.0, 1.0));
  }
  return tau;
}

namespace detail {

// One bilinear sample position. Coordinates are clamped to the border;
// `live_*` records whether the clamp was inactive (its derivative is 1).
// The cell is [floor(p), floor(p) + 1] except on the last row/column,
// where the previous cell is used so the weight becomes exactly 1.
struct BilinearTap {
  std::size_t y0, y1, x0, x1;
  float wy, wx;
  bool live_y, live_x;
};

inline void axis_tap(float p, std::size_t extent, std::size_t& i0, std::size_t& i1, float& w, bool& live) {
  const float hi = static_cast<float>(extent - 1);
  live = p >= 0.0f && p <= hi;
  const float pc = std::clamp(p, 0.0f, hi);
  if (extent == 1) {
    i0 = i1 = 0;
    w = 0.0f;
    return;
  }
  auto f = static_cast<std::size_t>(std::floor(pc));
  if (f >= extent - 1) f = extent - 2;
  i0 = f;
  i1 = f + 1;
  w = pc - static_cast<float>(f);
}

inline BilinearTap make_tap(std::size_t i, std::size_t j, const FlowField& tau) {
  BilinearTap t{};
  axis_tap(static_cast<float>(i) + tau.dy(i, j), tau.height(), t.y0, t.y1, t.wy, t.live_y);
  axis_tap(static_cast<float>(j) + tau.dx(i, j), tau.width(), t.x0, t.x1, t.wx, t.live_x);
  return t;
}

inline void check_warp_shapes(std::span<const float> x, std::size_t channels, const FlowField& tau) {
  expect(channels > 0, "warp: image must have at least one channel");
  expect(x.size() == channels * tau.height() * tau.width(), "warp: image of ", x.size(), " values does not match ",
         channels, "x", tau.height(), "x", tau.width(), " flow field");
}

}  // namespace detail

/// Bilinear resampling of a C x H x W image at the identity grid displaced
/// by tau. Writes into `out` (same size as `x`).
inline void warp_sample(std::span<const float> x, std::size_t channels, const FlowField& tau, std::span<float> out) {
  detail::check_warp_shapes(x, channels, tau);
  expect(out.size() == x.size(), "warp_sample: output buffer size mismatch");
  const std::size_t h = tau.height(), w = tau.width(), plane = h * w;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const auto t = detail::make_tap(i, j, tau);
      const float w00 = (1.0f - t.wy) * (1.0f - t.wx), w01 = (1.0f - t.wy) * t.wx;
      const float w10 = t.wy * (1.0f - t.wx), w11 = t.wy * t.wx;
      for (std::size_t c = 0; c < channels; ++c) {
        const float* src = x.data() + c * plane;
        out[c * plane + i * w + j] = w00 * src[t.y0 * w + t.x0] + w01 * src[t.y0 * w + t.x1] +
                                     w10 * src[t.y1 * w + t.x0] + w11 * src[t.y1 * w + t.x1];
      }
    }
}

/// Convenience overload on a C x H x W tensor.
inline Tensor warp_sample(const Tensor& x, const FlowField& tau) {
  expect_rank(x, 3, "warp_sample input");
  expect(x.dim(1) == tau.height() && x.dim(2) == tau.width(), "warp_sample: image ", shape_string(x.shape()),
         " does not match flow ", tau.height(), "x", tau.width());
  Tensor out(x.shape());
  warp_sample(x.values(), x.dim(0), tau, out.values());
  return out;
}

/// Adjoint of warp_sample: accumulates dL/dx into `dx` (if non-empty) and
/// dL/dtau into `dtau` (if non-null).
inline void warp_sample_bwd(std::span<const float> x, std::size_t channels, const FlowField& tau,
                            std::span<const float> dout, std::span<float> dx, FlowField* dtau) {
  detail::check_warp_shapes(x, channels, tau);
  expect(dout.size() == x.size(), "warp_sample_bwd: output gradient size mismatch");
  expect(dx.empty() || dx.size() == x.size(), "warp_sample_bwd: input gradient buffer size mismatch");
  if (dtau)
    expect(dtau->height() == tau.height() && dtau->width() == tau.width(),
           "warp_sample_bwd: flow gradient shape mismatch");
  const std::size_t h = tau.height(), w = tau.width(), plane = h * w;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const auto t = detail::make_tap(i, j, tau);
      const float w00 = (1.0f - t.wy) * (1.0f - t.wx), w01 = (1.0f - t.wy) * t.wx;
      const float w10 = t.wy * (1.0f - t.wx), w11 = t.wy * t.wx;
      double gy = 0.0, gx = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const float g = dout[c * plane + i * w + j];
        const float* src = x.data() + c * plane;
        const float v00 = src[t.y0 * w + t.x0], v01 = src[t.y0 * w + t.x1];
        const float v10 = src[t.y1 * w + t.x0], v11 = src[t.y1 * w + t.x1];
        if (!dx.empty()) {
          float* d = dx.data() + c * plane;
          d[t.y0 * w + t.x0] += g * w00;
          d[t.y0 * w + t.x1] += g * w01;
          d[t.y1 * w + t.x0] += g * w10;
          d[t.y1 * w + t.x1] += g * w11;
        }
        gy += static_cast<double>(g) * ((1.0f - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
        gx += static_cast<double>(g) * ((1.0f - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
      }
      if (dtau) {
        if (t.live_y) dtau->dy(i, j) += static_cast<float>(gy);
        if (t.live_x) dtau->dx(i, j) += static_cast<float>(gx);
      }
    }
}

struct WarpGrads {
  Tensor dx;
  FlowField dtau;
};

inline WarpGrads warp_sample_bwd(const Tensor& x, const FlowField& tau, const Tensor& dout) {
  expect_rank(x, 3, "warp_sample_bwd input");
  expect(dout.shape() == x.shape(), "warp_sample_bwd: gradient shape ", shape_string(dout.shape()),
         " does not match input ", shape_string(x.shape()));
  WarpGrads g{Tensor(x.shape()), FlowField(tau.height(), tau.width())};
  warp_sample_bwd(x.values(), x.dim(0), tau, dout.values(), g.dx.values(), &g.dtau);
  return g;
}

/// Projection onto the ball RMS(tau) <= epsilon * sqrt(2), followed by
/// clamping entries to [-1, 1]. Fields already inside are returned as is.
inline FlowField project_flow(FlowField tau, double epsilon) {
  expect(epsilon > 0.0 && std::isfinite(epsilon), "project_flow: epsilon must be > 0, got ", epsilon);
  const double radius = epsilon * std::sqrt(2.0);
  const double rms = tau.rms();
  if (rms > radius) {
    const auto scale = static_cast<float>(radius / rms);
    for (float& v : tau.values()) v *= scale;
  }
  for (float& v : tau.values()) v = std::clamp(v, -1.0f, 1.0f);
  return tau;
}

/// Additive trigger baseline: clamp(x + delta, 0, 1), with every delta
/// entry in [-epsilon, epsilon].
inline Tensor pixelwise_trigger(const Tensor& x, const Tensor& delta, double epsilon) {
  expect(x.shape() == delta.shape(), "pixelwise_trigger: delta ", shape_string(delta.shape()),
         " does not match image ", shape_string(x.shape()));
  expect(epsilon >= 0.0, "pixelwise_trigger: epsilon must be >= 0");
  const auto eps = static_cast<float>(epsilon);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    expect(delta[i] >= -eps && delta[i] <= eps, "pixelwise_trigger: delta entry ", delta[i], " outside [-", eps,
           ", ", eps, "]");
    out[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
  }
  return out;
}

}  // namespace flareon
