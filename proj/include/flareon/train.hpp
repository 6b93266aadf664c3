#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "flareon/augment.hpp"
#include "flareon/data.hpp"
#include "flareon/error.hpp"
#include "flareon/eval.hpp"
#include "flareon/model.hpp"
#include "flareon/optim.hpp"
#include "flareon/rng.hpp"
#include "flareon/trigger_bank.hpp"
#include "flareon/warp.hpp"

namespace flareon {

/// Trainer-side hyperparameters. Defaults follow the CIFAR-10 setup:
/// B = 128, lr 0.01 halved every 30 epochs, momentum 0.9, weight decay 5e-4.
struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  std::size_t iterations = 0;  // overrides epochs when nonzero
  double lr = 0.01;
  std::size_t lr_decay_every = 30;  // epochs; 0 disables decay
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  std::array<std::size_t, 3> widths{32, 64, 128};
  AugmentPolicy policy;
  std::size_t eval_every = 0;  // epochs between evaluations; 0 = final epoch only

  void validate() const {
    expect(batch_size >= 1, "TrainConfig: batch size must be >= 1");
    expect(lr > 0.0 && std::isfinite(lr), "TrainConfig: lr must be > 0");
    expect(epochs > 0 || iterations > 0, "TrainConfig: need epochs or iterations");
    expect(momentum >= 0.0 && weight_decay >= 0.0, "TrainConfig: momentum and weight decay must be >= 0");
    policy.validate();
  }
};

/// base_lr * 0.5^floor(epoch / every).
inline double lr_schedule(std::size_t epoch, double base_lr, std::size_t every = 30) {
  if (every == 0) return base_lr;
  return base_lr * std::pow(0.5, static_cast<double>(epoch / every));
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

inline std::size_t total_iterations(const TrainConfig& cfg, std::size_t n) {
  return cfg.iterations ? cfg.iterations : cfg.epochs * steps_per_epoch(n, cfg.batch_size);
}

/// Trigger learning stops at this step: the bank's explicit cap, or I / 60.
inline std::size_t trigger_update_cap(const TriggerBank& bank, std::size_t iterations) {
  return bank.update_cap.value_or(iterations / 60);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;  // steps completed at the end of the epoch
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<MetricsReport> report;
};

/// What a training step looked at; handed to TrainHooks::on_step.
struct StepTrace {
  std::size_t step;
  std::span<const std::size_t> dataset_indices;
  std::span<const int> loss_labels;
  std::span<const std::size_t> triggered;
  double loss;
  const TriggerBank& bank;
};

struct TrainHooks {
  std::function<void(const StepTrace&)> on_step;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  ModelState model;
  TriggerBank bank;
  std::vector<EpochMetrics> history;
  std::size_t iterations = 0;
  std::size_t trigger_updates = 0;
};

/// Training stopped on a non-finite loss or gradient. Carries the last
/// state whose step completed cleanly.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, ModelState last_good, TriggerBank bank, std::size_t step)
      : std::runtime_error(what), last_good(std::move(last_good)), bank(std::move(bank)), step(step) {}

  ModelState last_good;
  TriggerBank bank;
  std::size_t step;
};

namespace train_detail {

enum Stream : std::uint64_t { model_init = 1, epoch_order = 2, augmentation = 3, injection = 4 };

inline Architecture architecture_for(const Dataset& d, const TrainConfig& cfg) {
  Architecture a;
  a.channels = d.channels();
  a.height = d.height();
  a.width = d.width();
  a.num_classes = d.num_classes;
  a.widths = cfg.widths;
  return a;
}

}  // namespace train_detail

/// Mini-batch SGD with augmentation-stage trigger injection.
///
/// Per step: sample a batch, augment it, replace floor(rho * B) images by
/// their own label's trigger, take a softmax cross-entropy SGD step on the
/// ground-truth labels and, while trigger learning is active (learnable,
/// learn_rate > 0 and step < cap), move each trigger used in the batch by
/// -learn_rate * (mean per-image gradient) and project it back into the
/// epsilon ball.
inline TrainResult flareon_train(const Dataset& train, const TrainConfig& cfg, TriggerBank bank, ModelState model,
                                 const Dataset* eval_set = nullptr, const TrainHooks& hooks = {}) {
  cfg.validate();
  train.validate();
  bank.validate(train.num_classes, train.channels(), train.height(), train.width());
  expect(model.arch.channels == train.channels() && model.arch.height == train.height() &&
             model.arch.width == train.width() && model.arch.num_classes == train.num_classes,
         "flareon_train: model architecture does not match the dataset");

  const std::size_t n = train.size();
  const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);
  const std::size_t iterations = total_iterations(cfg, n);
  const std::size_t cap = trigger_update_cap(bank, iterations);
  const std::size_t epochs = (iterations + per_epoch - 1) / per_epoch;
  const std::size_t ch = train.channels(), h = train.height(), w = train.width();
  const RngStream root(cfg.seed, 0);

  TrainResult result;
  result.iterations = iterations;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < epochs && step < iterations; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto order_rng = root.fork(train_detail::epoch_order).fork(epoch);
    shuffle(std::span<std::size_t>(order), order_rng);
    const double lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay_every);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;

    for (std::size_t b = 0; b < per_epoch && step < iterations; ++b, ++step) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      std::span<const std::size_t> indices(order.data() + begin, end - begin);
      const Dataset batch = train.gather(indices);

      Tensor augmented = augment(batch.images, cfg.policy, root.fork(train_detail::augmentation).fork(step));
      auto injected = flareon_inject(augmented, batch.labels, bank, bank.rho,
                                     root.fork(train_detail::injection).fork(step));
      const bool update_triggers = bank.updates_enabled() && step < cap && !injected.triggered.empty();

      LossAndGradients lg;
      try {
        lg = loss_and_gradients(model, std::move(injected.images), batch.labels, update_triggers);
        sgd_step(model.params, lg.grads.params, SgdOptions{lr, cfg.momentum, cfg.weight_decay});
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(detail::concat("training diverged at step ", step, ": ", e.what()), model, bank, step);
      }

      if (update_triggers) {
        std::vector<FlowField> grad(bank.flows.size());
        std::vector<std::size_t> uses(bank.flows.size(), 0);
        for (std::size_t j : injected.triggered) {
          const auto t = static_cast<std::size_t>(batch.labels[j]);
          if (uses[t]++ == 0) grad[t] = FlowField(h, w);
          warp_sample_bwd(augmented.slice(j), ch, bank.flows[t], lg.grads.input.slice(j), {}, &grad[t]);
        }
        for (std::size_t t = 0; t < bank.flows.size(); ++t) {
          if (uses[t] == 0) continue;
          const auto scale = static_cast<float>(bank.learn_rate / static_cast<double>(uses[t]));
          FlowField next = bank.flows[t];
          auto nv = next.values();
          auto gv = grad[t].values();
          for (std::size_t q = 0; q < nv.size(); ++q) nv[q] -= scale * gv[q];
          bank.flows[t] = project_flow(std::move(next), bank.epsilon);
        }
        ++result.trigger_updates;
      }

      const auto pred = kernels::argmax_rows(lg.logits);
      for (std::size_t q = 0; q < pred.size(); ++q) correct += pred[q] == batch.labels[q];
      loss_sum += lg.loss * static_cast<double>(pred.size());
      seen += pred.size();

      if (hooks.on_step) hooks.on_step(StepTrace{step, indices, batch.labels, injected.triggered, lg.loss, bank});
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.step = step;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    const bool last = epoch + 1 == epochs || step >= iterations;
    if (eval_set && (last || (cfg.eval_every && (epoch + 1) % cfg.eval_every == 0)))
      m.report = evaluate(model, *eval_set, bank);
    if (hooks.on_epoch) hooks.on_epoch(m);
    result.history.push_back(std::move(m));
  }
  result.model = std::move(model);
  result.bank = std::move(bank);
  return result;
}

/// As above, starting from a freshly initialized model seeded by cfg.seed.
inline TrainResult flareon_train(const Dataset& train, const TrainConfig& cfg, TriggerBank bank,
                                 const Dataset* eval_set = nullptr, const TrainHooks& hooks = {}) {
  ModelState model = init_model(train_detail::architecture_for(train, cfg),
                                RngStream(cfg.seed, train_detail::model_init));
  return flareon_train(train, cfg, std::move(bank), std::move(model), eval_set, hooks);
}

}  // namespace flareon
