#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/io.hpp"
#include "flareon/rng.hpp"
#include "flareon/tensor.hpp"
#include "flareon/warp.hpp"

namespace flareon {

enum class TriggerKind { motion, pixelwise };

/// Label-indexed triggers plus the attack hyperparameters that drive them.
///
/// Motion banks hold one FlowField per label. Pixel-wise banks (the
/// additive baseline) hold one C x H x W delta per label instead; a label
/// whose delta is all zero carries no trigger.
struct TriggerBank {
  TriggerKind kind = TriggerKind::motion;
  std::vector<FlowField> flows;
  std::vector<Tensor> deltas;
  InitSpec init;
  double rho = 0.8;
  double epsilon = 0.2;
  double learn_rate = 0.0;
  bool learnable = false;
  // Trigger updates run only for steps below this cap; unset means I / 60.
  std::optional<std::size_t> update_cap;

  std::size_t num_labels() const noexcept { return kind == TriggerKind::motion ? flows.size() : deltas.size(); }

  bool updates_enabled() const noexcept { return learnable && learn_rate > 0.0 && kind == TriggerKind::motion; }

  void validate(std::size_t num_classes, std::size_t channels, std::size_t height, std::size_t width) const {
    expect(rho >= 0.0 && rho <= 1.0, "TriggerBank: rho must be in [0,1], got ", rho);
    expect(epsilon > 0.0, "TriggerBank: epsilon must be > 0, got ", epsilon);
    expect(learn_rate >= 0.0, "TriggerBank: trigger learning rate must be >= 0");
    expect(num_labels() == num_classes, "TriggerBank: ", num_labels(), " triggers for ", num_classes, " classes");
    for (std::size_t t = 0; t < num_labels(); ++t) {
      if (kind == TriggerKind::motion) {
        const auto& f = flows[t];
        expect(f.height() == height && f.width() == width, "TriggerBank: trigger ", t, " is ", f.height(), "x",
               f.width(), ", images are ", height, "x", width);
        for (float v : f.values()) expect(v >= -1.0f && v <= 1.0f, "TriggerBank: trigger ", t, " entry outside [-1,1]");
      } else {
        expect_shape(deltas[t], {channels, height, width}, "TriggerBank pixel-wise delta");
      }
    }
  }

  /// Writes the triggered version of one C x H x W image for target `label`.
  void apply(std::size_t label, std::span<const float> x, std::size_t channels, std::span<float> out) const {
    expect(label < num_labels(), "TriggerBank: no trigger for label ", label);
    if (kind == TriggerKind::motion) {
      warp_sample(x, channels, flows[label], out);
    } else {
      const Tensor& d = deltas[label];
      expect(d.size() == x.size() && out.size() == x.size(), "TriggerBank: pixel-wise delta size mismatch");
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + d[i], 0.0f, 1.0f);
    }
  }

  /// FNV-1a over the raw trigger bytes; changes whenever any trigger does.
  std::uint64_t fingerprint() const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::span<const float> vs) {
      for (float v : vs) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) {
          h ^= (bits >> (8 * b)) & 0xffu;
          h *= 0x100000001b3ULL;
        }
      }
    };
    for (const auto& f : flows) mix(f.values());
    for (const auto& d : deltas) mix(d.values());
    return h;
  }
};

/// Motion bank with one independently seeded trigger per label.
inline TriggerBank make_motion_bank(std::size_t num_classes, std::size_t height, std::size_t width,
                                    const InitSpec& init, RngStream rng) {
  TriggerBank bank;
  bank.kind = TriggerKind::motion;
  bank.init = init;
  bank.flows.reserve(num_classes);
  for (std::size_t t = 0; t < num_classes; ++t) bank.flows.push_back(sample_flow(init, height, width, rng.fork(t)));
  return bank;
}

inline constexpr std::string_view kTriggerMagic = "FLTR";
inline constexpr std::uint32_t kTriggerVersion = 1;

/// FLTR layout: magic, version u32, |C| u32, H u32, W u32, then |C|*H*W*2
/// little-endian f32 in (label, row, column, component) order.
inline std::vector<char> encode_triggers(std::span<const FlowField> flows) {
  expect(!flows.empty(), "encode_triggers: empty bank");
  const std::size_t h = flows[0].height(), w = flows[0].width();
  io::ByteWriter out;
  out.bytes(kTriggerMagic);
  out.u32(kTriggerVersion);
  out.u32(static_cast<std::uint32_t>(flows.size()));
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(w));
  for (const auto& f : flows) {
    expect(f.height() == h && f.width() == w, "encode_triggers: triggers differ in shape");
    out.f32s(f.values());
  }
  return out.buffer();
}

inline std::vector<FlowField> decode_triggers(std::span<const char> bytes, const std::string& source = "<triggers>") {
  io::ByteReader in(bytes, source);
  if (bytes.size() < 4 || in.bytes(4) != kTriggerMagic)
    throw FormatError(source + ": bad magic (expected FLTR)");
  const std::uint32_t version = in.u32();
  if (version != kTriggerVersion)
    throw FormatError(detail::concat(source, ": unsupported trigger version ", version));
  const std::uint32_t count = in.u32(), h = in.u32(), w = in.u32();
  if (count == 0 || h == 0 || w == 0) throw FormatError(source + ": empty trigger bank");
  const std::size_t expected = static_cast<std::size_t>(count) * h * w * 2 * 4;
  if (in.remaining() != expected)
    throw FormatError(detail::concat(source, ": payload is ", in.remaining(), " bytes, expected ", expected));
  std::vector<FlowField> flows;
  flows.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    FlowField f(h, w);
    in.f32s(f.values());
    flows.push_back(std::move(f));
  }
  return flows;
}

inline void save_triggers(const std::filesystem::path& path, std::span<const FlowField> flows) {
  io::write_file(path, encode_triggers(flows));
}

inline std::vector<FlowField> load_triggers(const std::filesystem::path& path) {
  return decode_triggers(io::read_file(path), path.string());
}

/// Perturbation image 0.5 + gain * (trigger(x) - x), clamped to [0,1].
inline std::vector<float> amplified_perturbation(std::span<const float> x, std::size_t channels, const FlowField& tau,
                                                 float gain = 4.0f) {
  std::vector<float> warped(x.size());
  warp_sample(x, channels, tau, warped);
  for (std::size_t i = 0; i < x.size(); ++i) warped[i] = std::clamp(0.5f + gain * (warped[i] - x[i]), 0.0f, 1.0f);
  return warped;
}

}  // namespace flareon
