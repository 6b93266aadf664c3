#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "flareon/data.hpp"
#include "flareon/error.hpp"
#include "flareon/eval.hpp"
#include "flareon/kernels.hpp"
#include "flareon/model.hpp"
#include "flareon/optim.hpp"
#include "flareon/rng.hpp"
#include "flareon/trigger_bank.hpp"

// Deployment-time backdoor defenses: STRIP, fine-pruning, Neural Cleanse.
namespace flareon::defense {

// ---------------------------------------------------------------- STRIP

struct StripReport {
  std::vector<double> clean_entropy;
  std::vector<double> triggered_entropy;
  double threshold = 0.0;  // inputs with entropy below this are rejected
  double frr = 0.0;        // realized false rejection rate on clean inputs
  double far = 0.0;        // fraction of triggered inputs accepted
};

inline double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Entropy (nats) of the mean softmax over `n_overlays` blends
/// 0.5 * x + 0.5 * z, with z drawn from pool images whose label differs
/// from the model's prediction on x. With zero overlays, the entropy of
/// the plain prediction.
inline std::vector<double> strip_entropies(const ModelState& model, const Tensor& inputs, const Dataset& pool,
                                           std::size_t n_overlays, RngStream rng) {
  expect(pool.size() > 0, "strip: empty overlay pool");
  expect_rank(inputs, 4, "strip inputs");
  const std::size_t n = inputs.dim(0), k = model.arch.num_classes, sz = inputs.size() / std::max<std::size_t>(n, 1);
  expect(sz == pool.image_size(), "strip: input and pool image shapes differ");
  std::vector<double> out(n);
  const auto raw = predict(model, inputs);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> mean(k, 0.0);
    if (n_overlays == 0) {
      Tensor x({1, inputs.dim(1), inputs.dim(2), inputs.dim(3)},
               std::vector<float>(inputs.slice(i).begin(), inputs.slice(i).end()));
      const Tensor p = kernels::softmax(forward(model, x));
      for (std::size_t j = 0; j < k; ++j) mean[j] = p[j];
      out[i] = shannon_entropy(mean);
      continue;
    }
    auto r = rng.fork(i);
    std::vector<std::size_t> candidates;
    for (std::size_t q = 0; q < pool.size(); ++q)
      if (pool.labels[q] != raw[i]) candidates.push_back(q);
    if (candidates.empty()) {
      candidates.resize(pool.size());
      std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    }
    Tensor blends({n_overlays, inputs.dim(1), inputs.dim(2), inputs.dim(3)});
    const auto x = inputs.slice(i);
    for (std::size_t o = 0; o < n_overlays; ++o) {
      const auto z = pool.image(candidates[r.below(candidates.size())]);
      auto dst = blends.slice(o);
      for (std::size_t p = 0; p < sz; ++p) dst[p] = std::clamp(0.5f * x[p] + 0.5f * z[p], 0.0f, 1.0f);
    }
    const Tensor p = kernels::softmax(forward(model, blends));
    for (std::size_t o = 0; o < n_overlays; ++o)
      for (std::size_t j = 0; j < k; ++j) mean[j] += p[o * k + j];
    for (double& v : mean) v /= static_cast<double>(n_overlays);
    out[i] = shannon_entropy(mean);
  }
  return out;
}

/// Calibrates the rejection threshold so at most `frr` of clean inputs
/// fall below it, then reports the fraction of triggered inputs that pass.
inline StripReport strip_from_entropies(std::vector<double> clean, std::vector<double> triggered, double frr = 0.05) {
  expect(!clean.empty(), "strip: need clean entropies for calibration");
  expect(frr >= 0.0 && frr < 1.0, "strip: FRR must be in [0,1)");
  StripReport r;
  std::vector<double> sorted = clean;
  std::ranges::sort(sorted);
  const auto idx = static_cast<std::size_t>(std::floor(frr * static_cast<double>(sorted.size())));
  r.threshold = sorted[std::min(idx, sorted.size() - 1)];
  const auto rejected = std::ranges::count_if(clean, [&](double e) { return e < r.threshold; });
  r.frr = static_cast<double>(rejected) / static_cast<double>(clean.size());
  if (!triggered.empty()) {
    const auto accepted = std::ranges::count_if(triggered, [&](double e) { return e >= r.threshold; });
    r.far = static_cast<double>(accepted) / static_cast<double>(triggered.size());
  }
  r.clean_entropy = std::move(clean);
  r.triggered_entropy = std::move(triggered);
  return r;
}

inline StripReport strip(const ModelState& model, const Tensor& clean_inputs, const Tensor& triggered_inputs,
                         const Dataset& pool, std::size_t n_overlays, RngStream rng, double frr = 0.05) {
  auto clean = strip_entropies(model, clean_inputs, pool, n_overlays, rng.fork(0));
  auto trig = triggered_inputs.empty() ? std::vector<double>{}
                                       : strip_entropies(model, triggered_inputs, pool, n_overlays, rng.fork(1));
  return strip_from_entropies(std::move(clean), std::move(trig), frr);
}

/// Every test image with a trigger for a target other than its own label
/// (target drawn uniformly per image).
inline Tensor triggered_copies(const Dataset& d, const TriggerBank& bank, RngStream rng) {
  expect(d.num_classes >= 2, "triggered_copies: need at least two classes");
  Tensor out(d.images.shape());
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto t = static_cast<std::size_t>(rng.below(d.num_classes - 1));
    if (t >= static_cast<std::size_t>(d.labels[i])) ++t;
    bank.apply(t, d.image(i), d.channels(), out.slice(i));
  }
  return out;
}

// --------------------------------------------------------- Fine-pruning

struct PruneRow {
  double sparsity = 0.0;
  std::size_t pruned = 0;
  double ca = 0.0;
  double asr = 0.0;
};

struct FinePruneOptions {
  std::size_t finetune_steps = 0;
  std::size_t batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Mean post-ReLU activation of each last-conv channel over `d`.
inline std::vector<double> last_conv_activity(const ModelState& model, const Dataset& d) {
  const std::size_t k = model.arch.widths[2];
  std::vector<double> act(k, 0.0);
  std::size_t count = 0;
  for (std::size_t start = 0; start < d.size(); start += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, d.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto cache = forward_cached(model, d.gather(idx).images);
    const std::size_t plane = cache.a3.dim(2) * cache.a3.dim(3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        double s = 0.0;
        const float* a = cache.a3.data() + (i * k + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) s += a[p];
        act[c] += s / static_cast<double>(plane);
      }
    count += n;
  }
  for (double& a : act) a /= static_cast<double>(count);
  return act;
}

/// Channel order for pruning: least active first (index breaks ties).
inline std::vector<std::size_t> prune_order(std::span<const double> activity) {
  std::vector<std::size_t> order(activity.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return activity[a] < activity[b]; });
  return order;
}

/// Silences last-conv channels by zeroing their filters, biases and momentum.
inline void zero_channels(ModelState& model, std::span<const std::size_t> channels) {
  Parameter& w = model.params[ModelState::conv3_w];
  Parameter& b = model.params[ModelState::conv3_b];
  const std::size_t per = w.value.size() / w.value.dim(0);
  for (std::size_t c : channels) {
    std::fill_n(w.value.data() + c * per, per, 0.0f);
    std::fill_n(w.velocity.data() + c * per, per, 0.0f);
    b.value[c] = 0.0f;
    b.velocity[c] = 0.0f;
  }
}

/// Prunes the least clean-active channels at each sparsity level (each level
/// starts from the original model), optionally fine-tunes on clean data
/// with the pruned channels held at zero, and reports CA and overall ASR.
inline std::vector<PruneRow> fine_prune(const ModelState& model, const Dataset& clean, const Dataset& test,
                                        const TriggerBank& bank, std::span<const double> sparsity_grid,
                                        const FinePruneOptions& opt, RngStream rng) {
  for (double s : sparsity_grid) expect(s >= 0.0 && s <= 1.0, "fine_prune: sparsity ", s, " outside [0,1]");
  expect(clean.size() > 0, "fine_prune: empty clean set");
  const auto order = prune_order(last_conv_activity(model, clean));
  std::vector<PruneRow> rows;
  for (std::size_t level = 0; level < sparsity_grid.size(); ++level) {
    const double s = sparsity_grid[level];
    const auto count = static_cast<std::size_t>(std::lround(s * static_cast<double>(order.size())));
    const std::span<const std::size_t> pruned(order.data(), count);
    ModelState m = model;
    zero_channels(m, pruned);
    auto r = rng.fork(level);
    for (std::size_t step = 0; step < opt.finetune_steps; ++step) {
      std::vector<std::size_t> idx(std::min(opt.batch_size, clean.size()));
      for (auto& i : idx) i = r.below(clean.size());
      const Dataset batch = clean.gather(idx);
      auto lg = loss_and_gradients(m, batch.images, batch.labels, false);
      sgd_step(m.params, lg.grads.params, SgdOptions{opt.lr, opt.momentum, opt.weight_decay});
      zero_channels(m, pruned);
    }
    rows.push_back(PruneRow{s, count, eval_clean(m, test), eval_asr(m, test, bank).overall});
  }
  return rows;
}

// ------------------------------------------------------- Neural Cleanse

struct NcOptions {
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  double lambda = 0.01;  // divided by the class count
  double lr = 0.1;
};

struct NcReport {
  std::vector<double> mask_norms;  // L1 norm of each target's mask
  std::vector<bool> converged;
  std::vector<double> anomaly_index;
  std::vector<std::size_t> flagged;
  std::vector<double> final_success;  // fraction of the last batch sent to the target
};

inline double median(std::vector<double> v) {
  expect(!v.empty(), "median of empty set");
  std::ranges::sort(v);
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// |x - median| / (1.4826 * MAD) over the converged entries; unconverged
/// entries get index 0. A zero MAD is floored so indices stay finite.
inline std::vector<double> anomaly_indices(std::span<const double> norms, const std::vector<bool>& converged) {
  std::vector<double> kept;
  for (std::size_t i = 0; i < norms.size(); ++i)
    if (converged[i]) kept.push_back(norms[i]);
  std::vector<double> out(norms.size(), 0.0);
  if (kept.empty()) return out;
  const double med = median(kept);
  std::vector<double> dev;
  for (double v : kept) dev.push_back(std::abs(v - med));
  const double mad = std::max(1.4826 * median(dev), 1e-12);
  for (std::size_t i = 0; i < norms.size(); ++i)
    if (converged[i]) out[i] = std::abs(norms[i] - med) / mad;
  return out;
}

inline constexpr double kNcFlagThreshold = 2.0;

namespace nc_detail {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Adam state for one parameter vector.
struct Adam {
  std::vector<double> m, v;
  std::size_t t = 0;
  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  void step(std::vector<double>& theta, std::span<const double> g, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t)), c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

}  // namespace nc_detail

/// Reverse-engineers, per target, the smallest mask m in [0,1]^{HxW} and
/// pattern p in [0,1]^{CxHxW} (sigmoid-parameterized) such that
/// (1 - m) * x + m * p is classified as the target, minimizing
/// CE + (lambda / |C|) * ||m||_1 over clean batches. Targets whose mask
/// norm lies below the median by more than two scaled median absolute
/// deviations (anomaly index > 2) are flagged; unusually large masks are not.
inline NcReport neural_cleanse(const ModelState& model, const Dataset& clean, const NcOptions& opt, RngStream rng) {
  expect(clean.size() > 0, "neural_cleanse: empty clean set");
  expect(opt.lambda >= 0.0 && opt.lr > 0.0, "neural_cleanse: need lambda >= 0 and lr > 0");
  const std::size_t k = model.arch.num_classes, c = clean.channels(), h = clean.height(), w = clean.width();
  const std::size_t plane = h * w;
  const double lambda = opt.lambda / static_cast<double>(k);
  NcReport rep;
  rep.mask_norms.assign(k, 0.0);
  rep.converged.assign(k, true);
  rep.final_success.assign(k, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    auto r = rng.fork(t);
    std::vector<double> mask_raw(plane), pattern_raw(c * plane);
    for (auto& v : mask_raw) v = r.uniform(-0.1, 0.1);
    for (auto& v : pattern_raw) v = r.uniform(-0.1, 0.1);
    nc_detail::Adam mask_opt(plane), pattern_opt(c * plane);
    const std::size_t bs = std::min(opt.batch_size, clean.size());
    std::vector<int> targets(bs, static_cast<int>(t));
    std::vector<double> gm(plane), gp(c * plane), mask(plane), pattern(c * plane);
    bool ok = true;
    for (std::size_t step = 0; step < opt.steps && ok; ++step) {
      for (std::size_t i = 0; i < plane; ++i) mask[i] = nc_detail::sigmoid(mask_raw[i]);
      for (std::size_t i = 0; i < c * plane; ++i) pattern[i] = nc_detail::sigmoid(pattern_raw[i]);
      std::vector<std::size_t> idx(bs);
      for (auto& i : idx) i = r.below(clean.size());
      Tensor x({bs, c, h, w});
      for (std::size_t b = 0; b < bs; ++b) {
        const auto src = clean.image(idx[b]);
        auto dst = x.slice(b);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const double m = mask[p];
            dst[ch * plane + p] = static_cast<float>((1.0 - m) * src[ch * plane + p] + m * pattern[ch * plane + p]);
          }
      }
      Tensor xin = x;
      LossAndGradients lg;
      try {
        lg = loss_and_gradients(model, std::move(xin), targets, true);
      } catch (const NonFiniteError&) {
        ok = false;
        break;
      }
      std::ranges::fill(gm, 0.0);
      std::ranges::fill(gp, 0.0);
      for (std::size_t b = 0; b < bs; ++b) {
        const auto src = clean.image(idx[b]);
        const auto g = lg.grads.input.slice(b);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t q = ch * plane + p;
            gm[p] += g[q] * (pattern[q] - src[q]);
            gp[q] += g[q] * mask[p];
          }
      }
      for (std::size_t p = 0; p < plane; ++p) gm[p] = (gm[p] + lambda) * mask[p] * (1.0 - mask[p]);
      for (std::size_t q = 0; q < c * plane; ++q) gp[q] *= pattern[q] * (1.0 - pattern[q]);
      mask_opt.step(mask_raw, gm, opt.lr);
      pattern_opt.step(pattern_raw, gp, opt.lr);
      if (step + 1 == opt.steps) {
        const auto pred = kernels::argmax_rows(lg.logits);
        rep.final_success[t] =
            static_cast<double>(std::ranges::count(pred, static_cast<int>(t))) / static_cast<double>(bs);
      }
    }
    double norm = 0.0;
    for (double v : mask_raw) norm += nc_detail::sigmoid(v);
    if (!ok || !std::isfinite(norm)) {
      rep.converged[t] = false;
      norm = std::numeric_limits<double>::quiet_NaN();
    }
    rep.mask_norms[t] = norm;
  }
  rep.anomaly_index = anomaly_indices(rep.mask_norms, rep.converged);
  std::vector<double> kept;
  for (std::size_t t = 0; t < k; ++t)
    if (rep.converged[t]) kept.push_back(rep.mask_norms[t]);
  const double med = kept.empty() ? 0.0 : median(kept);
  for (std::size_t t = 0; t < k; ++t)
    if (rep.converged[t] && rep.mask_norms[t] < med && rep.anomaly_index[t] > kNcFlagThreshold) rep.flagged.push_back(t);
  return rep;
}

}  // namespace flareon::defense
