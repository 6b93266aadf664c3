// flareon: train, evaluate and probe any2any motion-trigger backdoors.
//
// Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
// arguments, 3 training diverged, 4 malformed checkpoint/trigger/data file.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flareon/flareon.hpp"

namespace fs = std::filesystem;
using namespace flareon;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kBadConfig = 2, kDiverged = 3, kBadFile = 4 };

// Flags shared by every subcommand. Unset flags leave the config untouched.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> rho, beta, epsilon;
  std::optional<bool> learn_trigger;
  std::optional<std::size_t> epochs, iterations, batch_size, subset_per_class;
  std::optional<std::string> dataset, data_dir;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration");
    app->add_option("--seed", seed, "Root seed for every random stream");
    app->add_option("--out", out, "Output directory");
    app->add_option("--rho", rho, "Fraction of each batch that carries a trigger");
    app->add_option("--beta", beta, "Beta(beta, beta) trigger initialization");
    app->add_option("--epsilon", epsilon, "RMS budget for learned triggers");
    app->add_option("--learn-trigger", learn_trigger, "Optimize triggers during training (true/false)");
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--iterations", iterations, "Training steps (overrides --epochs)");
    app->add_option("--batch-size", batch_size, "Mini-batch size");
    app->add_option("--subset-per-class", subset_per_class, "Class-balanced training subset size");
    app->add_option("--dataset", dataset, "Dataset kind")->check(CLI::IsMember({"cifar10", "synth"}));
    app->add_option("--data-dir", data_dir, "CIFAR-10 binary batch directory");
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
    if (seed) c.seed = *seed;
    if (out) c.out = *out;
    if (rho) c.trigger.rho = *rho;
    if (beta) c.trigger.init = InitSpec{InitFamily::beta, *beta};
    if (epsilon) c.trigger.epsilon = *epsilon;
    if (learn_trigger) c.trigger.learnable = *learn_trigger;
    if (epochs) {
      c.train.epochs = *epochs;
      c.train.iterations = 0;
    }
    if (iterations) c.train.iterations = *iterations;
    if (batch_size) c.train.batch_size = *batch_size;
    if (subset_per_class) c.dataset.subset_per_class = *subset_per_class;
    if (dataset) c.dataset.kind = *dataset == "cifar10" ? DatasetKind::cifar10 : DatasetKind::synth;
    if (data_dir) c.dataset.path = *data_dir;
    c.train.seed = c.seed;
    c.validate();
    return c;
  }
};

// Trained artifacts consumed by eval/defend/export-triggers.
struct ArtifactFlags {
  std::string checkpoint, triggers;

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "FLRN checkpoint (default <train-out>/model.flrn)");
    app->add_option("--triggers", triggers, "FLTR trigger bank (default <train-out>/triggers.fltr)");
  }
};

struct Loaded {
  RunConfig config;
  TrainTestSplit data;
  ModelState model;
  TriggerBank bank;
};

fs::path or_default(const std::string& s, const fs::path& fallback) { return s.empty() ? fallback : fs::path(s); }

// Artifacts default to the training output directory named by the config,
// while results go to --out (or <config out>/<command>).
Loaded load_artifacts(const CommonFlags& flags, const ArtifactFlags& art, bool need_model) {
  RunConfig base = flags.config.empty() ? RunConfig{} : load_run_config(flags.config);
  Loaded l;
  l.config = flags.resolve();
  l.data = load_datasets(l.config);
  const Dataset& d = l.data.test;
  l.bank = make_bank(l.config, d);
  const fs::path trig = or_default(art.triggers, base.out / "triggers.fltr");
  if (fs::exists(trig) || !art.triggers.empty()) l.bank.flows = load_triggers(trig);
  l.bank.validate(d.num_classes, d.channels(), d.height(), d.width());
  if (need_model) l.model = load_checkpoint(or_default(art.checkpoint, base.out / "model.flrn"), d.height(), d.width());
  return l;
}

fs::path output_dir(const CommonFlags& flags, const RunConfig& c, const char* sub) {
  return flags.out ? fs::path(*flags.out) : c.out / sub;
}

int cmd_train(const CommonFlags& flags) {
  const RunConfig c = flags.resolve();
  auto data = load_datasets(c);
  TriggerBank bank = make_bank(c, data.train);
  report::Manifest m(c.out, "train");
  m.write_json("config.json", "config", to_json(c));

  TrainHooks hooks;
  hooks.on_epoch = [](const EpochMetrics& e) {
    std::fprintf(stderr, "epoch %zu step %zu lr %.5g loss %.4f acc %.4f", e.epoch, e.step, e.lr, e.train_loss,
                 e.train_acc);
    if (e.report) std::fprintf(stderr, " | CA %.4f ASR %.4f", e.report->ca, e.report->asr_overall);
    std::fprintf(stderr, "\n");
  };
  try {
    auto result = flareon_train(data.train, c.train, bank, &data.test, hooks);
    const MetricsReport& r = *result.history.back().report;
    m.write("model.flrn", "checkpoint", encode_checkpoint(result.model));
    m.write("triggers.fltr", "triggers", encode_triggers(result.bank.flows));
    m.write_text("metrics.csv", "metrics", report::metrics_csv(result.history));
    m.write_text("asr_matrix.csv", "asr_matrix", report::asr_matrix_csv(r));
    auto summary = report::metrics_json(r);
    summary["iterations"] = result.iterations;
    summary["trigger_updates"] = result.trigger_updates;
    summary["seed"] = c.seed;
    summary["dataset"] = to_string(c.dataset.kind);
    summary["train_size"] = data.train.size();
    summary["test_size"] = data.test.size();
    m.write_json("summary.json", "summary", summary);
    m.finish();
    std::printf("CA %.4f ASR %.4f L2 %.4f -> %s\n", r.ca, r.asr_overall, r.l2_mean, c.out.string().c_str());
    return kOk;
  } catch (const TrainingDiverged& e) {
    m.write("model.last_good.flrn", "checkpoint", encode_checkpoint(e.last_good));
    m.write("triggers.last_good.fltr", "triggers", encode_triggers(e.bank.flows));
    m.finish({{"error", e.what()}, {"diverged_at_step", e.step}});
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDiverged;
  }
}

int cmd_eval(const CommonFlags& flags, const ArtifactFlags& art) {
  auto l = load_artifacts(flags, art, true);
  const auto r = evaluate(l.model, l.data.test, l.bank);
  report::Manifest m(output_dir(flags, l.config, "eval"), "eval");
  m.write_text("asr_matrix.csv", "asr_matrix", report::asr_matrix_csv(r));
  m.write_json("summary.json", "summary", report::metrics_json(r));
  m.finish();
  std::printf("CA %.4f ASR %.4f L2 %.4f\n", r.ca, r.asr_overall, r.l2_mean);
  return kOk;
}

struct DefendFlags {
  std::size_t overlays = 8;
  double frr = 0.05;
  std::size_t inputs = 0;
  std::vector<double> sparsity{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::size_t finetune_steps = 0;
  std::size_t nc_steps = 500;
  double nc_lambda = 0.01;
  std::size_t images = 4;
};

Tensor first_images(const Tensor& t, std::size_t n) {
  if (n == 0 || n >= t.dim(0)) return t;
  Shape s = t.shape();
  s[0] = n;
  const auto src = t.values();
  return Tensor(s, std::vector<float>(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(n * t.size() / t.dim(0))));
}

int cmd_strip(const CommonFlags& flags, const ArtifactFlags& art, const DefendFlags& df) {
  auto l = load_artifacts(flags, art, true);
  const auto rng = run_stream(l.config, RunStream::defense);
  const Tensor clean = first_images(l.data.test.images, df.inputs);
  const Tensor triggered = first_images(defense::triggered_copies(l.data.test, l.bank, rng.fork(0)), df.inputs);
  const auto r = defense::strip(l.model, clean, triggered, l.data.train, df.overlays, rng.fork(1), df.frr);
  report::Manifest m(output_dir(flags, l.config, "strip"), "defend strip");
  m.write_text("strip_entropy.csv", "strip_entropy", report::strip_csv(r));
  m.write_json("strip.json", "strip_summary", report::strip_json(r, df.overlays, df.frr));
  m.finish();
  std::printf("STRIP threshold %.4f FRR %.4f FAR %.4f\n", r.threshold, r.frr, r.far);
  return kOk;
}

int cmd_fineprune(const CommonFlags& flags, const ArtifactFlags& art, const DefendFlags& df) {
  auto l = load_artifacts(flags, art, true);
  defense::FinePruneOptions opt;
  opt.finetune_steps = df.finetune_steps;
  opt.lr = l.config.train.lr;
  const auto rows = defense::fine_prune(l.model, l.data.train, l.data.test, l.bank, df.sparsity, opt,
                                        run_stream(l.config, RunStream::defense));
  report::Manifest m(output_dir(flags, l.config, "fineprune"), "defend fineprune");
  m.write_text("fineprune.csv", "prune_curve", report::prune_csv(rows));
  m.write_json("fineprune.json", "prune_summary", report::prune_json(rows, df.finetune_steps));
  m.finish();
  for (const auto& r : rows) std::printf("sparsity %.2f CA %.4f ASR %.4f\n", r.sparsity, r.ca, r.asr);
  return kOk;
}

int cmd_nc(const CommonFlags& flags, const ArtifactFlags& art, const DefendFlags& df) {
  auto l = load_artifacts(flags, art, true);
  defense::NcOptions opt;
  opt.steps = df.nc_steps;
  opt.lambda = df.nc_lambda;
  const auto r = defense::neural_cleanse(l.model, l.data.train, opt, run_stream(l.config, RunStream::defense));
  report::Manifest m(output_dir(flags, l.config, "nc"), "defend nc");
  m.write_text("nc.csv", "nc_norms", report::nc_csv(r));
  m.write_json("nc.json", "nc_summary", report::nc_json(r, opt));
  m.finish();
  for (std::size_t t = 0; t < r.mask_norms.size(); ++t)
    std::printf("target %zu mask L1 %.3f anomaly %.3f\n", t, r.mask_norms[t], r.anomaly_index[t]);
  std::printf("flagged: %zu target(s)\n", r.flagged.size());
  return kOk;
}

int cmd_gradcam(const CommonFlags& flags, const ArtifactFlags& art, const DefendFlags& df) {
  auto l = load_artifacts(flags, art, true);
  const Dataset& d = l.data.test;
  const std::size_t c = d.channels(), h = d.height(), w = d.width(), k = d.num_classes;
  report::Manifest m(output_dir(flags, l.config, "gradcam"), "defend gradcam");
  std::string csv = "image,label,target,pred_clean,pred_triggered\n";
  std::vector<float> trig(d.image_size());
  for (std::size_t i = 0; i < std::min(df.images, d.size()); ++i) {
    const auto x = d.image(i);
    const auto label = static_cast<std::size_t>(d.labels[i]);
    const std::size_t target = (label + 1) % k;
    l.bank.apply(target, x, c, trig);
    Tensor batch({2, c, h, w});
    std::ranges::copy(x, batch.slice(0).begin());
    std::ranges::copy(trig, batch.slice(1).begin());
    const auto pred = predict(l.model, batch);
    const Tensor cam_clean = grad_cam(l.model, x, static_cast<std::size_t>(pred[0]));
    const Tensor cam_trig = grad_cam(l.model, trig, static_cast<std::size_t>(pred[1]));
    const std::string stem = "img" + std::to_string(i);
    m.write(stem + "_clean.ppm", "image", io::encode_ppm(x, c, h, w));
    m.write(stem + "_triggered.ppm", "image", io::encode_ppm(trig, c, h, w));
    m.write(stem + "_cam_clean.ppm", "heatmap", io::encode_ppm(cam_clean.values(), 1, h, w));
    m.write(stem + "_cam_triggered.ppm", "heatmap", io::encode_ppm(cam_trig.values(), 1, h, w));
    csv += std::to_string(i) + "," + std::to_string(label) + "," + std::to_string(target) + "," +
           std::to_string(pred[0]) + "," + std::to_string(pred[1]) + "\n";
  }
  m.write_text("gradcam.csv", "gradcam_index", csv);
  m.finish();
  std::printf("wrote Grad-CAM maps for %zu image(s) to %s\n", std::min(df.images, d.size()), m.dir().string().c_str());
  return kOk;
}

int cmd_export(const CommonFlags& flags, const ArtifactFlags& art) {
  auto l = load_artifacts(flags, art, false);
  const Dataset& d = l.data.test;
  const std::size_t c = d.channels(), h = d.height(), w = d.width();
  report::Manifest m(output_dir(flags, l.config, "triggers"), "export-triggers");
  m.write("triggers.fltr", "triggers", encode_triggers(l.bank.flows));
  std::string csv = "target,rms,max_abs,l2_mean\n";
  std::vector<float> trig(d.image_size());
  for (std::size_t t = 0; t < l.bank.num_labels(); ++t) {
    const FlowField& f = l.bank.flows[t];
    // Flow as color: red = row displacement, green = column displacement.
    std::vector<float> vis(3 * h * w, 0.5f);
    float max_abs = 0.0f;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        vis[i * w + j] = 0.5f + 0.5f * f.dy(i, j);
        vis[h * w + i * w + j] = 0.5f + 0.5f * f.dx(i, j);
        max_abs = std::max({max_abs, std::abs(f.dy(i, j)), std::abs(f.dx(i, j))});
      }
    const std::string stem = "trigger" + std::to_string(t);
    m.write(stem + "_flow.ppm", "flow", io::encode_ppm(vis, 3, h, w));
    l.bank.apply(t, d.image(0), c, trig);
    m.write(stem + "_example.ppm", "image", io::encode_ppm(trig, c, h, w));
    m.write(stem + "_perturbation.ppm", "image", io::encode_ppm(amplified_perturbation(d.image(0), c, f), c, h, w));
    double l2 = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      l.bank.apply(t, d.image(i), c, trig);
      double s = 0.0;
      const auto x = d.image(i);
      for (std::size_t p = 0; p < trig.size(); ++p) s += (trig[p] - x[p]) * static_cast<double>(trig[p] - x[p]);
      l2 += std::sqrt(s);
    }
    csv += std::to_string(t) + "," + report::num(f.rms()) + "," + report::num(max_abs) + "," +
           report::num(l2 / static_cast<double>(d.size())) + "\n";
  }
  m.write(std::string("example_clean.ppm"), "image", io::encode_ppm(d.image(0), c, h, w));
  m.write_text("triggers.csv", "trigger_stats", csv);
  m.finish();
  std::printf("exported %zu trigger(s) to %s\n", l.bank.num_labels(), m.dir().string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Any2any backdoor attacks through augmentation-stage motion triggers"};
  app.require_subcommand(1);

  CommonFlags flags;
  ArtifactFlags art;
  DefendFlags df;

  auto* train = app.add_subcommand("train", "Train a model with trigger injection");
  flags.attach(train);
  auto* eval = app.add_subcommand("eval", "Clean accuracy, ASR matrix and distortion of a trained model");
  flags.attach(eval);
  art.attach(eval);
  auto* exp = app.add_subcommand("export-triggers", "Write trigger flows and example images as PPM");
  flags.attach(exp);
  art.attach(exp);

  auto* defend = app.add_subcommand("defend", "Run a backdoor defense against a trained model");
  defend->require_subcommand(1);
  auto* strip = defend->add_subcommand("strip", "Entropy of predictions on superimposed inputs");
  auto* prune = defend->add_subcommand("fineprune", "Prune dormant last-layer channels, optionally fine-tune");
  auto* nc = defend->add_subcommand("nc", "Neural Cleanse trigger reconstruction and outlier test");
  auto* cam = defend->add_subcommand("gradcam", "Grad-CAM heat maps for clean and triggered inputs");
  for (auto* sub : {strip, prune, nc, cam}) {
    flags.attach(sub);
    art.attach(sub);
  }
  strip->add_option("--overlays", df.overlays, "Images superimposed per input")->capture_default_str();
  strip->add_option("--frr", df.frr, "False rejection rate used to set the threshold")->capture_default_str();
  strip->add_option("--inputs", df.inputs, "Clean/triggered inputs to score (0 = whole test set)");
  prune->add_option("--sparsity", df.sparsity, "Fractions of channels to prune")->delimiter(',');
  prune->add_option("--finetune-steps", df.finetune_steps, "Clean fine-tuning steps per level")->capture_default_str();
  nc->add_option("--nc-steps", df.nc_steps, "Optimization steps per target")->capture_default_str();
  nc->add_option("--nc-lambda", df.nc_lambda, "Mask L1 weight (divided by the class count)")->capture_default_str();
  cam->add_option("--images", df.images, "Test images to visualize")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kBadConfig;
  }

  try {
    if (train->parsed()) return cmd_train(flags);
    if (eval->parsed()) return cmd_eval(flags, art);
    if (exp->parsed()) return cmd_export(flags, art);
    if (strip->parsed()) return cmd_strip(flags, art, df);
    if (prune->parsed()) return cmd_fineprune(flags, art, df);
    if (nc->parsed()) return cmd_nc(flags, art, df);
    if (cam->parsed()) return cmd_gradcam(flags, art, df);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kBadConfig;
  } catch (const ContractViolation& e) {
    std::fprintf(stderr, "invalid argument: %s\n", e.what());
    return kBadConfig;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kBadFile;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
