#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "flareon/defense.hpp"
#include "flareon/eval.hpp"
#include "flareon/io.hpp"
#include "flareon/train.hpp"

// Text artifacts: metrics CSVs, JSON summaries and the run manifest.
// Numbers are printed with a fixed format so identical runs produce
// byte-identical files.
namespace flareon::report {

using ojson = nlohmann::ordered_json;

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline ojson json_num(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

inline ojson json_matrix(const std::vector<std::vector<double>>& m) {
  ojson rows = ojson::array();
  for (const auto& row : m) {
    ojson r = ojson::array();
    for (double v : row) r.push_back(json_num(v));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string metrics_csv(std::span<const EpochMetrics> history) {
  std::string s = "epoch,step,lr,train_loss,train_acc,ca,asr_overall,l2_mean\n";
  for (const auto& m : history) {
    s += std::to_string(m.epoch) + "," + std::to_string(m.step) + "," + num(m.lr) + "," + num(m.train_loss) + "," +
         num(m.train_acc) + ",";
    if (m.report) s += num(m.report->ca) + "," + num(m.report->asr_overall) + "," + num(m.report->l2_mean);
    else s += ",,";
    s += "\n";
  }
  return s;
}

/// Rows are source classes, columns are targets; the diagonal is empty.
inline std::string asr_matrix_csv(const MetricsReport& r) {
  std::string s = "class";
  for (std::size_t t = 0; t < r.asr.size(); ++t) s += ",target_" + std::to_string(t);
  s += "\n";
  for (std::size_t c = 0; c < r.asr.size(); ++c) {
    s += std::to_string(c);
    for (double v : r.asr[c]) s += "," + (std::isnan(v) ? std::string() : num(v));
    s += "\n";
  }
  return s;
}

inline ojson metrics_json(const MetricsReport& r) {
  ojson j;
  j["ca"] = json_num(r.ca);
  j["asr_overall"] = json_num(r.asr_overall);
  ojson per = ojson::array();
  for (double v : r.asr_per_target) per.push_back(json_num(v));
  j["asr_per_target"] = std::move(per);
  j["asr"] = json_matrix(r.asr);
  j["confusion"] = r.confusion;
  j["l2_mean"] = json_num(r.l2_mean);
  return j;
}

inline std::string strip_csv(const defense::StripReport& r) {
  std::string s = "set,index,entropy\n";
  for (std::size_t i = 0; i < r.clean_entropy.size(); ++i) s += "clean," + std::to_string(i) + "," + num(r.clean_entropy[i]) + "\n";
  for (std::size_t i = 0; i < r.triggered_entropy.size(); ++i)
    s += "triggered," + std::to_string(i) + "," + num(r.triggered_entropy[i]) + "\n";
  return s;
}

inline ojson strip_json(const defense::StripReport& r, std::size_t n_overlays, double target_frr) {
  ojson j;
  j["n_overlays"] = n_overlays;
  j["target_frr"] = target_frr;
  j["threshold"] = json_num(r.threshold);
  j["frr"] = json_num(r.frr);
  j["far"] = json_num(r.far);
  j["clean_inputs"] = r.clean_entropy.size();
  j["triggered_inputs"] = r.triggered_entropy.size();
  return j;
}

inline std::string prune_csv(std::span<const defense::PruneRow> rows) {
  std::string s = "sparsity,pruned_channels,ca,asr\n";
  for (const auto& r : rows) s += num(r.sparsity) + "," + std::to_string(r.pruned) + "," + num(r.ca) + "," + num(r.asr) + "\n";
  return s;
}

inline ojson prune_json(std::span<const defense::PruneRow> rows, std::size_t finetune_steps) {
  ojson j;
  j["finetune_steps"] = finetune_steps;
  ojson curve = ojson::array();
  for (const auto& r : rows)
    curve.push_back({{"sparsity", r.sparsity}, {"pruned", r.pruned}, {"ca", json_num(r.ca)}, {"asr", json_num(r.asr)}});
  j["curve"] = std::move(curve);
  return j;
}

inline std::string nc_csv(const defense::NcReport& r) {
  std::string s = "target,mask_l1,anomaly_index,converged,flagged,final_success\n";
  for (std::size_t t = 0; t < r.mask_norms.size(); ++t) {
    const bool flagged = std::ranges::find(r.flagged, t) != r.flagged.end();
    s += std::to_string(t) + "," + num(r.mask_norms[t]) + "," + num(r.anomaly_index[t]) + "," +
         (r.converged[t] ? "1" : "0") + "," + (flagged ? "1" : "0") + "," + num(r.final_success[t]) + "\n";
  }
  return s;
}

inline ojson nc_json(const defense::NcReport& r, const defense::NcOptions& opt) {
  ojson j;
  j["steps"] = opt.steps;
  j["lambda"] = opt.lambda;
  j["lr"] = opt.lr;
  ojson norms = ojson::array(), idx = ojson::array();
  for (double v : r.mask_norms) norms.push_back(json_num(v));
  for (double v : r.anomaly_index) idx.push_back(json_num(v));
  j["mask_l1"] = std::move(norms);
  j["anomaly_index"] = std::move(idx);
  j["flagged"] = r.flagged;
  j["backdoor_detected"] = !r.flagged.empty();
  return j;
}

inline std::uint64_t fnv1a(std::span<const char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Records every artifact a command writes; `finish` writes manifest.json
/// after all of them, so its presence marks a complete output directory.
class Manifest {
 public:
  explicit Manifest(std::filesystem::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {}

  void write(const std::string& name, std::string_view kind, std::span<const char> bytes) {
    io::write_file(dir_ / name, bytes);
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
    files_.push_back({{"path", name}, {"kind", kind}, {"bytes", bytes.size()}, {"fnv1a64", hash}});
  }

  void write_text(const std::string& name, std::string_view kind, std::string_view text) {
    write(name, kind, std::span<const char>(text.data(), text.size()));
  }

  void write_json(const std::string& name, std::string_view kind, const ojson& j) {
    write_text(name, kind, j.dump(2) + "\n");
  }

  const std::filesystem::path& dir() const { return dir_; }

  void finish(const ojson& extra = ojson::object()) const {
    ojson m;
    m["command"] = command_;
    m["files"] = files_;
    for (const auto& [k, v] : extra.items()) m[k] = v;
    io::write_text(dir_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::filesystem::path dir_;
  std::string command_;
  ojson files_ = ojson::array();
};

}  // namespace flareon::report
