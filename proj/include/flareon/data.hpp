#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/io.hpp"
#include "flareon/rng.hpp"
#include "flareon/tensor.hpp"

namespace flareon {

/// Labeled images, N x C x H x W with values in [0,1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::string split = "train";
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t image_size() const { return channels() * height() * width(); }

  std::span<const float> image(std::size_t i) const { return images.slice(i); }

  void validate() const {
    expect(!labels.empty(), "Dataset: empty");
    expect_rank(images, 4, "Dataset images");
    expect(images.dim(0) == labels.size(), "Dataset: ", images.dim(0), " images but ", labels.size(), " labels");
    for (int y : labels)
      expect(y >= 0 && static_cast<std::size_t>(y) < num_classes, "Dataset: label ", y, " out of range");
    for (float v : images.values()) expect(v >= 0.0f && v <= 1.0f, "Dataset: pixel value ", v, " outside [0,1]");
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  /// Copy of the selected records, in the given order.
  Dataset gather(std::span<const std::size_t> indices) const {
    Dataset out;
    out.split = split;
    out.num_classes = num_classes;
    out.images = Tensor({indices.size(), channels(), height(), width()});
    out.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      expect(indices[k] < size(), "Dataset::gather: index ", indices[k], " out of range");
      std::ranges::copy(image(indices[k]), out.images.slice(k).begin());
      out.labels.push_back(labels[indices[k]]);
    }
    return out;
  }
};

/// Fixed-size record layout: one label byte then C*H*W pixel bytes,
/// channel-planar, row-major. CIFAR-10 is {3, 32, 32, 10}; other
/// datasets can be dropped in as flat files of the same shape.
struct RecordLayout {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;

  std::size_t record_bytes() const noexcept { return 1 + channels * height * width; }
};

inline constexpr RecordLayout kCifar10Layout{};

inline Dataset parse_records(std::span<const char> bytes, const RecordLayout& layout, const std::string& source,
                             const std::string& split = "train") {
  const std::size_t rec = layout.record_bytes();
  if (bytes.empty() || bytes.size() % rec != 0)
    throw FormatError(detail::concat(source, ": size ", bytes.size(), " is not a positive multiple of the ", rec,
                                     "-byte record (offset ", bytes.size() - bytes.size() % rec, ")"));
  const std::size_t n = bytes.size() / rec;
  const std::size_t pixels = rec - 1;
  Dataset d;
  d.split = split;
  d.num_classes = layout.num_classes;
  d.images = Tensor({n, layout.channels, layout.height, layout.width});
  d.labels.resize(n);
  constexpr float kScale = 1.0f / 255.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const auto* r = reinterpret_cast<const unsigned char*>(bytes.data() + i * rec);
    if (r[0] >= layout.num_classes)
      throw FormatError(detail::concat(source, ": label byte ", static_cast<int>(r[0]), " at offset ", i * rec,
                                       " exceeds ", layout.num_classes - 1));
    d.labels[i] = r[0];
    float* dst = d.images.slice(i).data();
    for (std::size_t p = 0; p < pixels; ++p) dst[p] = static_cast<float>(r[1 + p]) * kScale;
  }
  return d;
}

/// Inverse of parse_records; pixels are rounded to the nearest byte.
inline std::vector<char> encode_records(const Dataset& d) {
  const std::size_t pixels = d.image_size();
  std::vector<char> out;
  out.reserve(d.size() * (pixels + 1));
  for (std::size_t i = 0; i < d.size(); ++i) {
    expect(d.labels[i] >= 0 && d.labels[i] < 256, "encode_records: label ", d.labels[i], " does not fit a byte");
    out.push_back(static_cast<char>(d.labels[i]));
    for (float v : d.image(i)) out.push_back(static_cast<char>(io::to_byte(v)));
  }
  return out;
}

inline Dataset load_records(const std::filesystem::path& path, const RecordLayout& layout,
                            const std::string& split = "train") {
  return parse_records(io::read_file(path), layout, path.string(), split);
}

inline Dataset concat(std::span<const Dataset> parts) {
  expect(!parts.empty(), "concat: no datasets");
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Dataset out;
  out.split = parts[0].split;
  out.num_classes = parts[0].num_classes;
  out.images = Tensor({n, parts[0].channels(), parts[0].height(), parts[0].width()});
  std::size_t off = 0;
  for (const auto& p : parts) {
    expect(p.image_size() == parts[0].image_size(), "concat: image shapes differ");
    std::ranges::copy(p.images.values(), out.images.values().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

/// Reads the standard CIFAR-10 binary distribution: data_batch_1..5.bin
/// and test_batch.bin.
inline TrainTestSplit load_cifar10(const std::filesystem::path& dir) {
  std::vector<Dataset> parts;
  for (int b = 1; b <= 5; ++b)
    parts.push_back(load_records(dir / ("data_batch_" + std::to_string(b) + ".bin"), kCifar10Layout, "train"));
  TrainTestSplit s{concat(parts), load_records(dir / "test_batch.bin", kCifar10Layout, "test")};
  s.test.split = "test";
  return s;
}

inline bool has_cifar10(const std::filesystem::path& dir) {
  if (dir.empty()) return false;
  for (int b = 1; b <= 5; ++b)
    if (!std::filesystem::exists(dir / ("data_batch_" + std::to_string(b) + ".bin"))) return false;
  return std::filesystem::exists(dir / "test_batch.bin");
}

/// In-place Fisher-Yates shuffle.
template <typename T>
void shuffle(std::span<T> items, RngStream& rng) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
}

/// Class-balanced sample of `per_class` records per class. The chosen
/// records keep their original relative order.
inline Dataset subset(const Dataset& d, std::size_t per_class, RngStream rng) {
  const auto counts = d.class_counts();
  const std::size_t smallest = *std::ranges::min_element(counts);
  expect(per_class <= smallest, "subset: ", per_class, " per class requested, smallest class has ", smallest);
  std::vector<std::vector<std::size_t>> by_class(d.num_classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
  std::vector<std::size_t> chosen;
  chosen.reserve(per_class * d.num_classes);
  for (std::size_t c = 0; c < d.num_classes; ++c) {
    auto stream = rng.fork(c);
    shuffle(std::span<std::size_t>(by_class[c]), stream);
    chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::ranges::sort(chosen);
  return d.gather(chosen);
}

struct SynthOptions {
  bool jitter = true;        // random glyph position and scale
  float texture = 0.2f;      // amplitude of the per-pixel background texture
};

namespace detail {

inline constexpr std::array<std::array<float, 3>, 8> kGlyphColors{{
    {0.90f, 0.15f, 0.15f},
    {0.15f, 0.80f, 0.20f},
    {0.20f, 0.30f, 0.95f},
    {0.95f, 0.85f, 0.10f},
    {0.85f, 0.20f, 0.85f},
    {0.10f, 0.85f, 0.90f},
    {0.95f, 0.55f, 0.10f},
    {0.95f, 0.95f, 0.95f},
}};

// Glyph membership in coordinates normalized to the glyph box [-1,1]^2.
inline bool glyph_contains(std::size_t cls, float u, float v) {
  const float au = std::abs(u), av = std::abs(v), r = std::sqrt(u * u + v * v);
  switch (cls) {
    case 0: return au <= 0.8f && av <= 0.8f;                        // square
    case 1: return r <= 0.9f;                                       // disk
    case 2: return v <= 0.8f && v >= -0.8f && au <= (v + 0.8f) * 0.55f;  // triangle
    case 3: return (au <= 0.25f && av <= 0.9f) || (av <= 0.25f && au <= 0.9f);  // plus
    case 4: return av <= 0.3f && au <= 0.95f;                       // horizontal bar
    case 5: return au <= 0.3f && av <= 0.95f;                       // vertical bar
    case 6: return r <= 0.9f && r >= 0.5f;                          // ring
    case 7: return au + av <= 0.95f;                                // diamond
    default: return false;
  }
}

}  // namespace detail

/// Synthetic classification set: each class is a distinctly colored glyph
/// on a textured gray background.
inline Dataset synth_shapes(std::size_t n_per_class, std::size_t classes, std::size_t height, std::size_t width,
                            RngStream rng, const SynthOptions& opt = {}, const std::string& split = "train") {
  expect(classes >= 1 && classes <= 8, "synth_shapes: classes must be in [1,8], got ", classes);
  expect(height >= 4 && width >= 4, "synth_shapes: image too small");
  expect(opt.texture >= 0.0f && opt.texture <= 0.5f, "synth_shapes: texture amplitude must be in [0,0.5]");
  Dataset d;
  d.split = split;
  d.num_classes = classes;
  const std::size_t n = n_per_class * classes;
  d.images = Tensor({n, 3, height, width});
  d.labels.resize(n);
  const float hf = static_cast<float>(height), wf = static_cast<float>(width);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % classes;
    d.labels[i] = static_cast<int>(cls);
    auto r = rng.fork(i);
    float cy = (hf - 1.0f) / 2.0f, cx = (wf - 1.0f) / 2.0f, scale = 1.0f;
    if (opt.jitter) {
      cy += static_cast<float>(r.uniform(-1.0, 1.0)) * hf / 8.0f;
      cx += static_cast<float>(r.uniform(-1.0, 1.0)) * wf / 8.0f;
      scale = static_cast<float>(r.uniform(0.8, 1.2));
    }
    const float half_h = 0.3f * hf * scale, half_w = 0.3f * wf * scale;
    const float base = opt.jitter ? static_cast<float>(r.uniform(0.35, 0.55)) : 0.45f;
    const auto& color = detail::kGlyphColors[cls];
    float* img = d.images.slice(i).data();
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const float u = (static_cast<float>(x) - cx) / half_w;
        const float v = (static_cast<float>(y) - cy) / half_h;
        const bool inside = detail::glyph_contains(cls, u, v);
        const float noise = opt.texture > 0.0f ? opt.texture * static_cast<float>(r.uniform(-1.0, 1.0)) : 0.0f;
        for (std::size_t c = 0; c < 3; ++c) {
          const float value = (inside ? color[c] : base) + noise;
          img[(c * height + y) * width + x] = std::clamp(value, 0.0f, 1.0f);
        }
      }
  }
  return d;
}

}  // namespace flareon
