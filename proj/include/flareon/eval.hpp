#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "flareon/data.hpp"
#include "flareon/error.hpp"
#include "flareon/kernels.hpp"
#include "flareon/model.hpp"
#include "flareon/tensor.hpp"
#include "flareon/trigger_bank.hpp"

namespace flareon {

/// Evaluation summary of a (possibly backdoored) classifier.
///
/// asr(c, t) is the fraction of class-c test images classified as t after
/// applying target t's trigger. The diagonal is not an attack and is left
/// NaN; it never enters a mean.
struct MetricsReport {
  double ca = 0.0;
  std::vector<std::vector<double>> asr;
  std::vector<double> asr_per_target;
  double asr_overall = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double l2_mean = 0.0;
};

inline constexpr std::size_t kEvalBatch = 256;

/// Predicted class for each record, evaluated in fixed-size chunks.
/// `transform`, if given, rewrites each image before the forward pass.
template <typename Transform>
std::vector<int> predict_dataset(const ModelState& model, const Dataset& d, std::span<const std::size_t> indices,
                                 Transform&& transform) {
  std::vector<int> out;
  out.reserve(indices.size());
  const std::size_t c = d.channels(), h = d.height(), w = d.width();
  for (std::size_t start = 0; start < indices.size(); start += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, indices.size() - start);
    Tensor batch({n, c, h, w});
    for (std::size_t k = 0; k < n; ++k) transform(indices[start + k], d.image(indices[start + k]), batch.slice(k));
    const auto pred = predict(model, batch);
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

inline std::vector<int> predict_dataset(const ModelState& model, const Dataset& d) {
  std::vector<std::size_t> all(d.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return predict_dataset(model, d, all, [](std::size_t, std::span<const float> src, std::span<float> dst) {
    std::ranges::copy(src, dst.begin());
  });
}

/// Clean accuracy: fraction of untriggered test images classified correctly.
inline double eval_clean(const ModelState& model, const Dataset& test) {
  expect(test.size() > 0, "eval_clean: empty dataset");
  const auto pred = predict_dataset(model, test);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test.labels[i];
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

inline std::vector<std::vector<std::size_t>> confusion_matrix(const Dataset& test, std::span<const int> predictions) {
  expect(predictions.size() == test.size(), "confusion_matrix: prediction count mismatch");
  std::vector<std::vector<std::size_t>> m(test.num_classes, std::vector<std::size_t>(test.num_classes, 0));
  for (std::size_t i = 0; i < test.size(); ++i)
    ++m[static_cast<std::size_t>(test.labels[i])][static_cast<std::size_t>(predictions[i])];
  return m;
}

struct AsrSummary {
  std::vector<std::vector<double>> matrix;
  std::vector<double> per_target;
  double overall = 0.0;
};

/// Per-target means skip the diagonal; the overall figure is the mean of
/// the per-target means.
inline AsrSummary summarize_asr(std::vector<std::vector<double>> matrix) {
  AsrSummary s;
  const std::size_t k = matrix.size();
  s.per_target.assign(k, 0.0);
  double total = 0.0;
  std::size_t targets = 0;
  for (std::size_t t = 0; t < k; ++t) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (c == t || std::isnan(matrix[c][t])) continue;
      sum += matrix[c][t];
      ++n;
    }
    s.per_target[t] = n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
    if (n) {
      total += s.per_target[t];
      ++targets;
    }
  }
  s.overall = targets ? total / static_cast<double>(targets) : std::numeric_limits<double>::quiet_NaN();
  s.matrix = std::move(matrix);
  return s;
}

/// any2any attack success: every clean test image of class c != t is
/// triggered with target t's trigger (no augmentation) and counted when
/// the model predicts t. Classes absent from the test set leave NaN rows.
inline AsrSummary eval_asr(const ModelState& model, const Dataset& test, const TriggerBank& bank) {
  expect(test.size() > 0, "eval_asr: empty dataset");
  const std::size_t k = test.num_classes;
  expect(bank.num_labels() == k, "eval_asr: bank has ", bank.num_labels(), " triggers for ", k, " classes");
  const std::size_t ch = test.channels();
  const auto counts = test.class_counts();
  std::vector<std::vector<double>> m(k, std::vector<double>(k, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t t = 0; t < k; ++t) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < test.size(); ++i)
      if (static_cast<std::size_t>(test.labels[i]) != t) idx.push_back(i);
    const auto pred = predict_dataset(model, test, idx, [&](std::size_t, std::span<const float> src, std::span<float> dst) {
      bank.apply(t, src, ch, dst);
    });
    std::vector<std::size_t> hits(k, 0);
    for (std::size_t q = 0; q < idx.size(); ++q)
      if (static_cast<std::size_t>(pred[q]) == t) ++hits[static_cast<std::size_t>(test.labels[idx[q]])];
    for (std::size_t c = 0; c < k; ++c)
      if (c != t && counts[c] > 0) m[c][t] = static_cast<double>(hits[c]) / static_cast<double>(counts[c]);
  }
  return summarize_asr(std::move(m));
}

/// Mean over images and targets of ||trigger_t(x) - x||_2, pixels in [0,1].
inline double l2_distortion(const Dataset& test, const TriggerBank& bank) {
  expect(test.size() > 0 && bank.num_labels() > 0, "l2_distortion: empty dataset or bank");
  const std::size_t ch = test.channels();
  std::vector<float> out(test.image_size());
  double total = 0.0;
  for (std::size_t t = 0; t < bank.num_labels(); ++t)
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto x = test.image(i);
      bank.apply(t, x, ch, out);
      double s = 0.0;
      for (std::size_t p = 0; p < out.size(); ++p) {
        const double d = static_cast<double>(out[p]) - x[p];
        s += d * d;
      }
      total += std::sqrt(s);
    }
  return total / static_cast<double>(test.size() * bank.num_labels());
}

/// Full report: CA, confusion matrix, ASR matrix and trigger distortion.
inline MetricsReport evaluate(const ModelState& model, const Dataset& test, const TriggerBank& bank) {
  MetricsReport r;
  const auto pred = predict_dataset(model, test);
  r.confusion = confusion_matrix(test, pred);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test.labels[i];
  r.ca = static_cast<double>(hits) / static_cast<double>(test.size());
  auto asr = eval_asr(model, test, bank);
  r.asr = std::move(asr.matrix);
  r.asr_per_target = std::move(asr.per_target);
  r.asr_overall = asr.overall;
  r.l2_mean = l2_distortion(test, bank);
  return r;
}

/// Grad-CAM on the last conv layer: channel weights are spatial means of
/// d logit[class] / d A_k; the map ReLU(sum_k w_k A_k) is bilinearly
/// upsampled to the input size and divided by its maximum (all-zero maps
/// stay zero). Returns H x W.
inline Tensor grad_cam(const ModelState& model, std::span<const float> image, std::size_t class_idx) {
  const auto& a = model.arch;
  expect(class_idx < a.num_classes, "grad_cam: class ", class_idx, " out of range");
  expect(image.size() == a.channels * a.height * a.width, "grad_cam: image size mismatch");
  Tensor x({1, a.channels, a.height, a.width}, std::vector<float>(image.begin(), image.end()));
  const auto cache = forward_cached(model, std::move(x));
  Tensor dlogits(cache.logits.shape());
  dlogits[class_idx] = 1.0f;
  const auto grads = backward(model, cache, dlogits, false);
  const Tensor& feats = cache.a3;
  const std::size_t k = feats.dim(1), fh = feats.dim(2), fw = feats.dim(3), plane = fh * fw;
  std::vector<double> cam(plane, 0.0);
  for (std::size_t ch = 0; ch < k; ++ch) {
    double wk = 0.0;
    for (std::size_t p = 0; p < plane; ++p) wk += grads.features[ch * plane + p];
    wk /= static_cast<double>(plane);
    for (std::size_t p = 0; p < plane; ++p) cam[p] += wk * feats[ch * plane + p];
  }
  for (double& v : cam) v = std::max(v, 0.0);

  Tensor heat({a.height, a.width});
  const double sy = static_cast<double>(fh) / static_cast<double>(a.height);
  const double sx = static_cast<double>(fw) / static_cast<double>(a.width);
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x2 = 0; x2 < a.width; ++x2) {
      const double py = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(fh - 1));
      const double px = std::clamp((static_cast<double>(x2) + 0.5) * sx - 0.5, 0.0, static_cast<double>(fw - 1));
      const auto y0 = static_cast<std::size_t>(py), x0 = static_cast<std::size_t>(px);
      const std::size_t y1 = std::min(y0 + 1, fh - 1), x1 = std::min(x0 + 1, fw - 1);
      const double wy = py - static_cast<double>(y0), wx = px - static_cast<double>(x0);
      const double v = (1 - wy) * ((1 - wx) * cam[y0 * fw + x0] + wx * cam[y0 * fw + x1]) +
                       wy * ((1 - wx) * cam[y1 * fw + x0] + wx * cam[y1 * fw + x1]);
      heat[y * a.width + x2] = static_cast<float>(v);
    }
  const float mx = *std::max_element(heat.values().begin(), heat.values().end());
  if (mx > 0.0f)
    for (float& v : heat.values()) v /= mx;
  return heat;
}

}  // namespace flareon
