#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/io.hpp"
#include "flareon/rng.hpp"
#include "flareon/tensor.hpp"
#include "flareon/trigger_bank.hpp"

namespace flareon {

enum class AugmentOp {
  identity,
  rotate,
  translate_x,
  translate_y,
  shear_x,
  shear_y,
  brightness,
  contrast,
  color,
  sharpness,
  posterize,
  solarize,
  autocontrast,
  equalize,
  hflip,
  pad_crop,
};

inline constexpr std::array<AugmentOp, 16> kAllAugmentOps{
    AugmentOp::identity,  AugmentOp::rotate,    AugmentOp::translate_x, AugmentOp::translate_y,
    AugmentOp::shear_x,   AugmentOp::shear_y,   AugmentOp::brightness,  AugmentOp::contrast,
    AugmentOp::color,     AugmentOp::sharpness, AugmentOp::posterize,   AugmentOp::solarize,
    AugmentOp::autocontrast, AugmentOp::equalize, AugmentOp::hflip,     AugmentOp::pad_crop};

inline std::string to_string(AugmentOp op) {
  switch (op) {
    case AugmentOp::identity: return "identity";
    case AugmentOp::rotate: return "rotate";
    case AugmentOp::translate_x: return "translate_x";
    case AugmentOp::translate_y: return "translate_y";
    case AugmentOp::shear_x: return "shear_x";
    case AugmentOp::shear_y: return "shear_y";
    case AugmentOp::brightness: return "brightness";
    case AugmentOp::contrast: return "contrast";
    case AugmentOp::color: return "color";
    case AugmentOp::sharpness: return "sharpness";
    case AugmentOp::posterize: return "posterize";
    case AugmentOp::solarize: return "solarize";
    case AugmentOp::autocontrast: return "autocontrast";
    case AugmentOp::equalize: return "equalize";
    case AugmentOp::hflip: return "hflip";
    case AugmentOp::pad_crop: return "pad_crop";
  }
  return "unknown";
}

inline AugmentOp parse_augment_op(const std::string& s) {
  for (auto op : kAllAugmentOps)
    if (to_string(op) == s) return op;
  throw ContractViolation("unknown augmentation op '" + s + "'");
}

/// RandAugment-style policy: n_ops transforms drawn uniformly (with
/// replacement) from `ops`, applied in draw order at a shared magnitude,
/// then an optional cutout square. Signed ops (geometry and the four
/// enhancement factors) pick their direction at random.
struct AugmentPolicy {
  std::vector<AugmentOp> ops{kAllAugmentOps.begin(), kAllAugmentOps.end()};
  std::size_t n_ops = 2;
  double magnitude = 0.5;
  std::optional<std::size_t> cutout = 8;

  // Parameter ranges reached at magnitude 1.
  static constexpr double kMaxRotateDeg = 30.0;
  static constexpr double kMaxTranslate = 0.125;  // fraction of the side
  static constexpr double kMaxShear = 0.3;
  static constexpr double kMaxFactorDelta = 0.9;  // brightness/contrast/color/sharpness in [0.1, 1.9]
  static constexpr double kMaxPosterizeDrop = 4.0;  // bits removed at magnitude 1
  static constexpr float kFill = 0.5f;

  void validate() const {
    expect(magnitude >= 0.0 && magnitude <= 1.0, "AugmentPolicy: magnitude must be in [0,1], got ", magnitude);
    expect(n_ops == 0 || !ops.empty(), "AugmentPolicy: n_ops > 0 needs a non-empty op list");
    expect(!cutout || *cutout > 0, "AugmentPolicy: cutout size must be positive");
  }

  static AugmentPolicy none() {
    AugmentPolicy p;
    p.n_ops = 0;
    p.cutout.reset();
    return p;
  }
};

namespace augment_detail {

// Inverse-mapped affine resampling about the image center:
// source = M * (dst - center) + center + shift, bilinear, constant fill.
inline void affine(std::span<const float> src, std::span<float> dst, std::size_t channels, std::size_t h,
                   std::size_t w, double m00, double m01, double m10, double m11, double shift_y, double shift_x) {
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double sy = m00 * dy + m01 * dx + cy + shift_y;
      const double sx = m10 * dy + m11 * dx + cx + shift_x;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double wy = sy - fy, wx = sx - fx;
      const auto y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
      for (std::size_t c = 0; c < channels; ++c) {
        const float* s = src.data() + c * plane;
        auto px = [&](long yy, long xx) -> double {
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return AugmentPolicy::kFill;
          return s[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        };
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                         wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1));
        dst[c * plane + y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
}

// Pixel values as the 8-bit levels the histogram ops work on.
inline int level(float v) { return static_cast<int>(io::to_byte(v)); }

// Histogram equalization of one 8-bit channel plane, following the
// classic image-library recipe (the brightest level is excluded from the
// step so a single-valued plane stays unchanged).
inline void equalize_plane(const float* src, float* dst, std::size_t n) {
  std::array<std::size_t, 256> hist{};
  for (std::size_t i = 0; i < n; ++i) ++hist[static_cast<std::size_t>(level(src[i]))];
  std::size_t last = 255;
  while (last > 0 && hist[last] == 0) --last;
  const std::size_t step = (n - hist[last]) / 255;
  if (step == 0) {
    std::copy(src, src + n, dst);
    return;
  }
  std::array<float, 256> lut{};
  std::size_t acc = step / 2;
  for (std::size_t b = 0; b < 256; ++b) {
    lut[b] = static_cast<float>(std::min<std::size_t>(acc / step, 255)) / 255.0f;
    acc += hist[b];
  }
  for (std::size_t i = 0; i < n; ++i) dst[i] = lut[static_cast<std::size_t>(level(src[i]))];
}

inline void apply_op(AugmentOp op, double magnitude, RngStream& rng, std::vector<float>& img, std::size_t channels,
                     std::size_t h, std::size_t w) {
  const double sign = (rng.next_u64() & 1u) ? 1.0 : -1.0;
  const double m = sign * magnitude;
  std::vector<float> out(img.size());
  switch (op) {
    case AugmentOp::identity: return;
    case AugmentOp::rotate: {
      const double a = m * AugmentPolicy::kMaxRotateDeg * std::numbers::pi / 180.0;
      affine(img, out, channels, h, w, std::cos(a), -std::sin(a), std::sin(a), std::cos(a), 0.0, 0.0);
      break;
    }
    case AugmentOp::translate_x:
      affine(img, out, channels, h, w, 1, 0, 0, 1, 0.0, -m * AugmentPolicy::kMaxTranslate * static_cast<double>(w));
      break;
    case AugmentOp::translate_y:
      affine(img, out, channels, h, w, 1, 0, 0, 1, -m * AugmentPolicy::kMaxTranslate * static_cast<double>(h), 0.0);
      break;
    case AugmentOp::shear_x: affine(img, out, channels, h, w, 1, 0, m * AugmentPolicy::kMaxShear, 1, 0.0, 0.0); break;
    case AugmentOp::shear_y: affine(img, out, channels, h, w, 1, m * AugmentPolicy::kMaxShear, 0, 1, 0.0, 0.0); break;
    case AugmentOp::brightness: {
      const auto f = static_cast<float>(1.0 + m * AugmentPolicy::kMaxFactorDelta);
      for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp(img[i] * f, 0.0f, 1.0f);
      break;
    }
    case AugmentOp::contrast: {
      const auto f = static_cast<float>(1.0 + m * AugmentPolicy::kMaxFactorDelta);
      double mean = 0.0;
      for (float v : img) mean += v;
      const auto mu = static_cast<float>(mean / static_cast<double>(img.size()));
      for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp(mu + f * (img[i] - mu), 0.0f, 1.0f);
      break;
    }
    case AugmentOp::color: {
      // Blend toward the luma image: factor 0 is grayscale.
      const auto f = static_cast<float>(1.0 + m * AugmentPolicy::kMaxFactorDelta);
      const std::size_t plane = h * w;
      if (channels != 3) {
        out = img;
        break;
      }
      for (std::size_t p = 0; p < plane; ++p) {
        const float gray = 0.299f * img[p] + 0.587f * img[plane + p] + 0.114f * img[2 * plane + p];
        for (std::size_t c = 0; c < 3; ++c) out[c * plane + p] = std::clamp(gray + f * (img[c * plane + p] - gray), 0.0f, 1.0f);
      }
      break;
    }
    case AugmentOp::sharpness: {
      // Blend with a 3x3 smoothed copy (center weight 5/13); borders stay.
      const auto f = static_cast<float>(1.0 + m * AugmentPolicy::kMaxFactorDelta);
      out = img;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 1; y + 1 < h; ++y)
          for (std::size_t x = 1; x + 1 < w; ++x) {
            float s = 4.0f * img[(c * h + y) * w + x];
            for (std::size_t dy = 0; dy < 3; ++dy)
              for (std::size_t dx = 0; dx < 3; ++dx) s += img[(c * h + y + dy - 1) * w + x + dx - 1];
            const float blurred = s / 13.0f;
            const float v = img[(c * h + y) * w + x];
            out[(c * h + y) * w + x] = std::clamp(blurred + f * (v - blurred), 0.0f, 1.0f);
          }
      break;
    }
    case AugmentOp::posterize: {
      const int drop = static_cast<int>(std::lround(magnitude * AugmentPolicy::kMaxPosterizeDrop));
      const int mask = ~((1 << drop) - 1) & 0xff;
      for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(level(img[i]) & mask) / 255.0f;
      break;
    }
    case AugmentOp::solarize: {
      const auto threshold = static_cast<float>(1.0 - magnitude);
      for (std::size_t i = 0; i < img.size(); ++i) out[i] = img[i] >= threshold ? 1.0f - img[i] : img[i];
      break;
    }
    case AugmentOp::autocontrast: {
      const std::size_t plane = h * w;
      for (std::size_t c = 0; c < channels; ++c) {
        const auto [lo, hi] = std::minmax_element(img.begin() + static_cast<std::ptrdiff_t>(c * plane),
                                                  img.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
        const float a = *lo, b = *hi;
        for (std::size_t p = 0; p < plane; ++p) {
          const float v = img[c * plane + p];
          out[c * plane + p] = b > a ? (v - a) / (b - a) : v;
        }
      }
      break;
    }
    case AugmentOp::equalize: {
      const std::size_t plane = h * w;
      for (std::size_t c = 0; c < channels; ++c) equalize_plane(img.data() + c * plane, out.data() + c * plane, plane);
      break;
    }
    case AugmentOp::hflip:
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = img[(c * h + y) * w + (w - 1 - x)];
      break;
    case AugmentOp::pad_crop: {
      // Zero-pad by 12.5% of the side and crop back at a random offset.
      const auto pad_y = static_cast<long>(std::lround(AugmentPolicy::kMaxTranslate * static_cast<double>(h)));
      const auto pad_x = static_cast<long>(std::lround(AugmentPolicy::kMaxTranslate * static_cast<double>(w)));
      const long oy = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * pad_y + 1))) - pad_y;
      const long ox = static_cast<long>(rng.below(static_cast<std::uint64_t>(2 * pad_x + 1))) - pad_x;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const long sy = static_cast<long>(y) + oy, sx = static_cast<long>(x) + ox;
            const bool in = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
            out[(c * h + y) * w + x] =
                in ? img[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0f;
          }
      break;
    }
  }
  img.swap(out);
}

}  // namespace augment_detail

/// Applies `policy` independently to each image of an N x C x H x W batch.
/// Image i draws from rng.fork(i), so results do not depend on batch
/// composition order beyond the index.
inline Tensor augment(const Tensor& batch, const AugmentPolicy& policy, RngStream rng) {
  policy.validate();
  expect_rank(batch, 4, "augment input");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out(batch.shape());
  std::vector<float> img(c * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = rng.fork(i);
    auto src = batch.slice(i);
    img.assign(src.begin(), src.end());
    for (std::size_t k = 0; k < policy.n_ops; ++k) {
      const AugmentOp op = policy.ops[r.below(policy.ops.size())];
      augment_detail::apply_op(op, policy.magnitude, r, img, c, h, w);
    }
    if (policy.cutout) {
      const auto size = static_cast<long>(*policy.cutout);
      const auto cy = static_cast<long>(r.below(h)), cx = static_cast<long>(r.below(w));
      const long y0 = std::max(0L, cy - size / 2), y1 = std::min(static_cast<long>(h), cy - size / 2 + size);
      const long x0 = std::max(0L, cx - size / 2), x1 = std::min(static_cast<long>(w), cx - size / 2 + size);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (long y = y0; y < y1; ++y)
          for (long x = x0; x < x1; ++x) img[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] = 0.0f;
    }
    std::ranges::copy(img, out.slice(i).begin());
  }
  return out;
}

/// Number of images triggered in a batch of `batch` at proportion rho.
inline std::size_t triggered_count(double rho, std::size_t batch) {
  expect(rho >= 0.0 && rho <= 1.0, "trigger proportion must be in [0,1], got ", rho);
  return std::min(batch, static_cast<std::size_t>(std::floor(rho * static_cast<double>(batch) + 1e-9)));
}

/// floor(rho * B) distinct indices of [0, B), ascending.
inline std::vector<std::size_t> choose_triggered(std::size_t batch, double rho, RngStream& rng) {
  const std::size_t k = triggered_count(rho, batch);
  std::vector<std::size_t> idx(batch);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(batch - i)]);
  idx.resize(k);
  std::ranges::sort(idx);
  return idx;
}

struct InjectResult {
  Tensor images;
  std::vector<std::size_t> triggered;  // ascending batch positions
};

/// The attack payload of the pipeline: each chosen image is replaced by
/// its trigger for its OWN label. Labels are read, never written.
inline InjectResult flareon_inject(const Tensor& augmented, std::span<const int> labels, const TriggerBank& bank,
                                   double rho, RngStream rng) {
  expect_rank(augmented, 4, "flareon_inject input");
  const std::size_t n = augmented.dim(0), c = augmented.dim(1);
  expect(labels.size() == n, "flareon_inject: ", labels.size(), " labels for ", n, " images");
  InjectResult r{augmented, choose_triggered(n, rho, rng)};
  for (std::size_t j : r.triggered) {
    const int y = labels[j];
    expect(y >= 0 && static_cast<std::size_t>(y) < bank.num_labels(), "flareon_inject: no trigger for label ", y);
    bank.apply(static_cast<std::size_t>(y), augmented.slice(j), c, r.images.slice(j));
  }
  return r;
}

}  // namespace flareon
