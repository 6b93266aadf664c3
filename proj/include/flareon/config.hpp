#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "flareon/augment.hpp"
#include "flareon/data.hpp"
#include "flareon/error.hpp"
#include "flareon/io.hpp"
#include "flareon/train.hpp"
#include "flareon/trigger_bank.hpp"
#include "flareon/warp.hpp"

// JSON run configuration: one document describing data, training and the
// trigger bank. Unknown keys are rejected so typos do not go unnoticed.
namespace flareon {

/// A config document that failed to parse or validate. `where` is either
/// "line L, column C" for syntax errors or a dotted field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string where, const std::string& message)
      : std::runtime_error(where + ": " + message), where(std::move(where)) {}
  std::string where;
};

enum class DatasetKind { synth, cifar10 };

inline std::string to_string(DatasetKind k) { return k == DatasetKind::synth ? "synth" : "cifar10"; }

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synth;
  std::filesystem::path path;        // CIFAR-10 binary directory
  std::size_t subset_per_class = 0;  // 0 keeps every training record
  std::size_t test_per_class = 0;    // 0 keeps every test record
  // Synthetic set only.
  std::size_t classes = 8;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t train_per_class = 64;
  SynthOptions synth;
};

struct TriggerSpec {
  InitSpec init{InitFamily::beta, 2.0};
  double rho = 0.8;
  double epsilon = 0.2;
  bool learnable = false;
  double learn_rate = 0.2;
  std::optional<std::size_t> update_cap;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "flareon-run";
  DatasetSpec dataset;
  TrainConfig train;
  TriggerSpec trigger;

  /// Range checks beyond what parsing enforces; throws ConfigError.
  void validate(bool check_paths = true) const {
    auto fail = [](const char* field, const std::string& msg) { throw ConfigError(field, msg); };
    if (dataset.kind == DatasetKind::cifar10 && check_paths && !has_cifar10(dataset.path))
      fail("dataset.path", "no CIFAR-10 binary batches in '" + dataset.path.string() + "'");
    if (dataset.kind == DatasetKind::synth) {
      if (dataset.classes < 2 || dataset.classes > 8) fail("dataset.classes", "must be in [2,8]");
      if (dataset.height < 8 || dataset.width < 8) fail("dataset.height", "synthetic images must be at least 8x8");
      if (dataset.train_per_class == 0) fail("dataset.train_per_class", "must be > 0");
      if (dataset.synth.texture < 0.0f || dataset.synth.texture > 0.5f) fail("dataset.texture", "must be in [0,0.5]");
    }
    if (train.batch_size == 0) fail("train.batch_size", "must be >= 1");
    if (train.epochs == 0 && train.iterations == 0) fail("train.epochs", "need epochs or iterations > 0");
    if (!(train.lr > 0.0)) fail("train.lr", "must be > 0");
    if (train.momentum < 0.0) fail("train.momentum", "must be >= 0");
    if (train.weight_decay < 0.0) fail("train.weight_decay", "must be >= 0");
    if (train.policy.magnitude < 0.0 || train.policy.magnitude > 1.0) fail("augment.magnitude", "must be in [0,1]");
    if (train.policy.n_ops > 0 && train.policy.ops.empty()) fail("augment.ops", "empty op list with n_ops > 0");
    if (trigger.rho < 0.0 || trigger.rho > 1.0) fail("trigger.rho", "must be in [0,1]");
    if (!(trigger.epsilon > 0.0)) fail("trigger.epsilon", "must be > 0");
    if (trigger.learn_rate < 0.0) fail("trigger.learn_rate", "must be >= 0");
    try {
      trigger.init.validate();
    } catch (const ContractViolation& e) {
      fail("trigger.param", e.what());
    }
  }
};

namespace config_detail {

using json = nlohmann::json;

inline void reject_unknown(const json& obj, std::string_view path, std::initializer_list<std::string_view> known) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(path.empty() ? key : std::string(path) + "." + key, "unknown field");
  }
}

inline const json& object_at(const json& parent, const char* key, const std::string& path) {
  const json& v = parent.at(key);
  if (!v.is_object()) throw ConfigError(path, "must be an object");
  return v;
}

template <typename T>
void read(const json& obj, const char* key, const std::string& path, T& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  const std::string field = path.empty() ? key : path + "." + key;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field, "expected an integer");
      if (std::is_unsigned_v<T> && v.get<long long>() < 0) throw ConfigError(field, "must be non-negative");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field, "expected a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(field, "expected a string");
      out = v.get<std::string>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(field, e.what());
  }
}

inline std::string line_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return detail::concat("line ", line, ", column ", col);
}

}  // namespace config_detail

/// Parses a config document over the defaults in `base`. Throws
/// ConfigError naming the line/column (syntax) or field (content).
inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
  using config_detail::json;
  using config_detail::read;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(config_detail::line_column(text, e.byte > 0 ? e.byte - 1 : 0), "syntax error");
  }
  if (!doc.is_object()) throw ConfigError("line 1, column 1", "config must be a JSON object");
  config_detail::reject_unknown(doc, "", {"seed", "out", "dataset", "train", "augment", "trigger"});
  RunConfig c = std::move(base);
  read(doc, "seed", "", c.seed);
  std::string out = c.out.string();
  read(doc, "out", "", out);
  c.out = out;

  if (doc.contains("dataset")) {
    const json& d = config_detail::object_at(doc, "dataset", "dataset");
    config_detail::reject_unknown(d, "dataset",
                                  {"kind", "path", "subset_per_class", "test_per_class", "classes", "height", "width",
                                   "train_per_class", "texture", "jitter"});
    std::string kind = to_string(c.dataset.kind), path = c.dataset.path.string();
    read(d, "kind", "dataset", kind);
    if (kind == "synth") {
      c.dataset.kind = DatasetKind::synth;
    } else if (kind == "cifar10") {
      c.dataset.kind = DatasetKind::cifar10;
    } else {
      throw ConfigError("dataset.kind", "expected 'synth' or 'cifar10', got '" + kind + "'");
    }
    read(d, "path", "dataset", path);
    c.dataset.path = path;
    read(d, "subset_per_class", "dataset", c.dataset.subset_per_class);
    read(d, "test_per_class", "dataset", c.dataset.test_per_class);
    read(d, "classes", "dataset", c.dataset.classes);
    read(d, "height", "dataset", c.dataset.height);
    read(d, "width", "dataset", c.dataset.width);
    read(d, "train_per_class", "dataset", c.dataset.train_per_class);
    read(d, "texture", "dataset", c.dataset.synth.texture);
    read(d, "jitter", "dataset", c.dataset.synth.jitter);
  }

  if (doc.contains("train")) {
    const json& t = config_detail::object_at(doc, "train", "train");
    config_detail::reject_unknown(t, "train",
                                  {"batch_size", "epochs", "iterations", "lr", "lr_decay_every", "momentum",
                                   "weight_decay", "eval_every", "widths"});
    read(t, "batch_size", "train", c.train.batch_size);
    read(t, "epochs", "train", c.train.epochs);
    read(t, "iterations", "train", c.train.iterations);
    read(t, "lr", "train", c.train.lr);
    read(t, "lr_decay_every", "train", c.train.lr_decay_every);
    read(t, "momentum", "train", c.train.momentum);
    read(t, "weight_decay", "train", c.train.weight_decay);
    read(t, "eval_every", "train", c.train.eval_every);
    if (t.contains("widths")) {
      const json& w = t.at("widths");
      if (!w.is_array() || w.size() != 3) throw ConfigError("train.widths", "expected an array of three integers");
      for (std::size_t i = 0; i < 3; ++i) {
        if (!w[i].is_number_integer() || w[i].get<long long>() <= 0)
          throw ConfigError("train.widths", "entries must be positive integers");
        c.train.widths[i] = w[i].get<std::size_t>();
      }
    }
  }

  if (doc.contains("augment")) {
    const json& a = config_detail::object_at(doc, "augment", "augment");
    config_detail::reject_unknown(a, "augment", {"ops", "n_ops", "magnitude", "cutout"});
    read(a, "n_ops", "augment", c.train.policy.n_ops);
    read(a, "magnitude", "augment", c.train.policy.magnitude);
    if (a.contains("cutout")) {
      const json& v = a.at("cutout");
      if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError("augment.cutout", "expected a non-negative integer (0 disables)");
      const auto size = v.get<std::size_t>();
      c.train.policy.cutout = size ? std::optional<std::size_t>(size) : std::nullopt;
    }
    if (a.contains("ops")) {
      const json& ops = a.at("ops");
      if (!ops.is_array()) throw ConfigError("augment.ops", "expected an array of op names");
      c.train.policy.ops.clear();
      for (const auto& o : ops) {
        if (!o.is_string()) throw ConfigError("augment.ops", "op names must be strings");
        try {
          c.train.policy.ops.push_back(parse_augment_op(o.get<std::string>()));
        } catch (const ContractViolation& e) {
          throw ConfigError("augment.ops", e.what());
        }
      }
    }
  }

  if (doc.contains("trigger")) {
    const json& t = config_detail::object_at(doc, "trigger", "trigger");
    config_detail::reject_unknown(t, "trigger",
                                  {"init", "param", "beta", "rho", "epsilon", "learnable", "learn_rate", "update_cap"});
    std::string family = to_string(c.trigger.init.family);
    read(t, "init", "trigger", family);
    try {
      c.trigger.init.family = parse_init_family(family);
    } catch (const ContractViolation& e) {
      throw ConfigError("trigger.init", e.what());
    }
    read(t, "param", "trigger", c.trigger.init.param);
    if (t.contains("beta")) {
      c.trigger.init.family = InitFamily::beta;
      read(t, "beta", "trigger", c.trigger.init.param);
    }
    read(t, "rho", "trigger", c.trigger.rho);
    read(t, "epsilon", "trigger", c.trigger.epsilon);
    read(t, "learnable", "trigger", c.trigger.learnable);
    read(t, "learn_rate", "trigger", c.trigger.learn_rate);
    if (t.contains("update_cap")) {
      std::size_t cap = 0;
      read(t, "update_cap", "trigger", cap);
      c.trigger.update_cap = cap;
    }
  }
  c.train.seed = c.seed;
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::vector<char> bytes;
  try {
    bytes = io::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(path.string(), e.what());
  }
  return parse_run_config(std::string_view(bytes.data(), bytes.size()), std::move(base));
}

/// Serializes every field, so a run's effective config can be archived and
/// re-parsed into an identical RunConfig.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["out"] = c.out.string();
  auto& d = j["dataset"];
  d["kind"] = to_string(c.dataset.kind);
  d["path"] = c.dataset.path.string();
  d["subset_per_class"] = c.dataset.subset_per_class;
  d["test_per_class"] = c.dataset.test_per_class;
  d["classes"] = c.dataset.classes;
  d["height"] = c.dataset.height;
  d["width"] = c.dataset.width;
  d["train_per_class"] = c.dataset.train_per_class;
  d["texture"] = c.dataset.synth.texture;
  d["jitter"] = c.dataset.synth.jitter;
  auto& t = j["train"];
  t["batch_size"] = c.train.batch_size;
  t["epochs"] = c.train.epochs;
  t["iterations"] = c.train.iterations;
  t["lr"] = c.train.lr;
  t["lr_decay_every"] = c.train.lr_decay_every;
  t["momentum"] = c.train.momentum;
  t["weight_decay"] = c.train.weight_decay;
  t["eval_every"] = c.train.eval_every;
  t["widths"] = c.train.widths;
  auto& a = j["augment"];
  auto& ops = a["ops"] = nlohmann::ordered_json::array();
  for (auto op : c.train.policy.ops) ops.push_back(to_string(op));
  a["n_ops"] = c.train.policy.n_ops;
  a["magnitude"] = c.train.policy.magnitude;
  a["cutout"] = c.train.policy.cutout.value_or(0);
  auto& g = j["trigger"];
  g["init"] = to_string(c.trigger.init.family);
  g["param"] = c.trigger.init.param;
  g["rho"] = c.trigger.rho;
  g["epsilon"] = c.trigger.epsilon;
  g["learnable"] = c.trigger.learnable;
  g["learn_rate"] = c.trigger.learn_rate;
  if (c.trigger.update_cap) g["update_cap"] = *c.trigger.update_cap;
  return j;
}

/// Named RNG streams derived from the run seed.
enum class RunStream : std::uint64_t { synth_train = 10, synth_test = 11, subset = 12, triggers = 13, defense = 14 };

inline RngStream run_stream(const RunConfig& c, RunStream s) { return RngStream(c.seed, static_cast<std::uint64_t>(s)); }

/// Loads (or generates) the train/test split the config describes.
inline TrainTestSplit load_datasets(const RunConfig& c) {
  if (c.dataset.kind == DatasetKind::synth) {
    const auto& d = c.dataset;
    const std::size_t test_n = d.test_per_class ? d.test_per_class : std::max<std::size_t>(d.train_per_class / 2, 1);
    return TrainTestSplit{
        synth_shapes(d.train_per_class, d.classes, d.height, d.width, run_stream(c, RunStream::synth_train), d.synth),
        synth_shapes(test_n, d.classes, d.height, d.width, run_stream(c, RunStream::synth_test), d.synth, "test")};
  }
  auto split = load_cifar10(c.dataset.path);
  if (c.dataset.subset_per_class)
    split.train = subset(split.train, c.dataset.subset_per_class, run_stream(c, RunStream::subset).fork(0));
  if (c.dataset.test_per_class)
    split.test = subset(split.test, c.dataset.test_per_class, run_stream(c, RunStream::subset).fork(1));
  return split;
}

/// Fresh constant-trigger bank for the dataset geometry.
inline TriggerBank make_bank(const RunConfig& c, const Dataset& d) {
  TriggerBank bank = make_motion_bank(d.num_classes, d.height(), d.width(), c.trigger.init,
                                      run_stream(c, RunStream::triggers));
  bank.rho = c.trigger.rho;
  bank.epsilon = c.trigger.epsilon;
  bank.learnable = c.trigger.learnable;
  bank.learn_rate = c.trigger.learn_rate;
  bank.update_cap = c.trigger.update_cap;
  return bank;
}

}  // namespace flareon
