#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/io.hpp"
#include "flareon/kernels.hpp"
#include "flareon/optim.hpp"
#include "flareon/rng.hpp"
#include "flareon/tensor.hpp"

namespace flareon {

/// conv3x3(C->w0) relu, conv3x3(w0->w1) relu, maxpool2, conv3x3(w1->w2) relu,
/// maxpool2, global average pool, linear(w2->classes). All convs use pad 1.
struct Architecture {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;
  std::array<std::size_t, 3> widths{32, 64, 128};

  void validate() const {
    expect(channels > 0 && num_classes > 1, "Architecture: need channels > 0 and at least two classes");
    expect(height >= 4 && width >= 4, "Architecture: input ", height, "x", width, " too small for two poolings");
    for (auto w : widths) expect(w > 0, "Architecture: zero-width layer");
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Parameters (with momentum buffers) of the classifier. Parameter order is
/// fixed: conv1.weight, conv1.bias, conv2.*, conv3.*, fc.weight, fc.bias.
struct ModelState {
  Architecture arch;
  std::vector<Parameter> params;

  enum Index : std::size_t { conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, fc_w, fc_b, count };

  const Tensor& operator[](Index i) const { return params[i].value; }
  Tensor& operator[](Index i) { return params[i].value; }
};

namespace detail {

inline Shape parameter_shape(const Architecture& a, std::size_t i) {
  const auto [w0, w1, w2] = a.widths;
  switch (i) {
    case ModelState::conv1_w: return {w0, a.channels, 3, 3};
    case ModelState::conv1_b: return {w0};
    case ModelState::conv2_w: return {w1, w0, 3, 3};
    case ModelState::conv2_b: return {w1};
    case ModelState::conv3_w: return {w2, w1, 3, 3};
    case ModelState::conv3_b: return {w2};
    case ModelState::fc_w: return {a.num_classes, w2};
    case ModelState::fc_b: return {a.num_classes};
    default: throw ContractViolation("parameter index out of range");
  }
}

inline constexpr std::array<const char*, ModelState::count> kParameterNames{
    "conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
    "conv3.weight", "conv3.bias", "fc.weight",    "fc.bias"};

inline constexpr kernels::Conv2dParams kSame3x3{1, 1};

}  // namespace detail

/// Kaiming-uniform (fan-in) weights, zero biases.
inline ModelState init_model(const Architecture& arch, RngStream rng) {
  arch.validate();
  ModelState s;
  s.arch = arch;
  for (std::size_t i = 0; i < ModelState::count; ++i) {
    Shape shape = detail::parameter_shape(arch, i);
    Parameter p{detail::kParameterNames[i], Tensor(shape), Tensor(shape)};
    if (shape.size() > 1) {
      const std::size_t fan_in = shape_volume(shape) / shape[0];
      const double gain = i == ModelState::fc_w ? 1.0 : std::sqrt(2.0);
      const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
      auto stream = rng.fork(i);
      for (float& v : p.value.values()) v = static_cast<float>(stream.uniform(-bound, bound));
    }
    s.params.push_back(std::move(p));
  }
  return s;
}

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
  Tensor input;
  Tensor a1;  // conv1 + relu
  Tensor a2;  // conv2 + relu
  kernels::MaxPoolResult p1;
  Tensor a3;  // conv3 + relu (the last conv feature maps)
  kernels::MaxPoolResult p2;
  Tensor pooled;  // N x w2
  Tensor logits;
};

inline void check_input(const ModelState& s, const Tensor& x) {
  expect_rank(x, 4, "model input");
  expect(x.dim(0) > 0, "model input: empty batch");
  expect(x.dim(1) == s.arch.channels && x.dim(2) == s.arch.height && x.dim(3) == s.arch.width,
         "model input: expected N x ", s.arch.channels, " x ", s.arch.height, " x ", s.arch.width, ", got ",
         shape_string(x.shape()));
}

inline ForwardCache forward_cached(const ModelState& s, Tensor x) {
  using namespace kernels;
  check_input(s, x);
  ForwardCache c;
  c.input = std::move(x);
  c.a1 = relu_forward(conv2d_forward(c.input, s[ModelState::conv1_w], s[ModelState::conv1_b], detail::kSame3x3));
  c.a2 = relu_forward(conv2d_forward(c.a1, s[ModelState::conv2_w], s[ModelState::conv2_b], detail::kSame3x3));
  c.p1 = maxpool2_forward(c.a2);
  c.a3 = relu_forward(conv2d_forward(c.p1.y, s[ModelState::conv3_w], s[ModelState::conv3_b], detail::kSame3x3));
  c.p2 = maxpool2_forward(c.a3);
  c.pooled = global_avg_pool_forward(c.p2.y);
  c.logits = linear_forward(c.pooled, s[ModelState::fc_w], s[ModelState::fc_b]);
  return c;
}

inline Tensor forward(const ModelState& s, const Tensor& x) { return forward_cached(s, x).logits; }

struct Gradients {
  std::vector<Tensor> params;  // same order as ModelState::params
  Tensor input;                // dL/dx; empty unless requested
  Tensor features;             // dL/d(last conv activations)
};

/// Back-propagates dL/dlogits through the cached forward pass.
inline Gradients backward(const ModelState& s, const ForwardCache& c, const Tensor& dlogits, bool need_input_grad) {
  using namespace kernels;
  expect(dlogits.shape() == c.logits.shape(), "backward: logit gradient shape mismatch");
  Gradients g;
  g.params.resize(ModelState::count);
  auto fc = linear_backward(c.pooled, s[ModelState::fc_w], dlogits);
  g.params[ModelState::fc_w] = std::move(fc.dw);
  g.params[ModelState::fc_b] = std::move(fc.db);
  Tensor d = global_avg_pool_backward(c.p2.y.shape(), fc.dx);
  d = maxpool2_backward(c.a3.shape(), c.p2, d);
  g.features = d;
  d = relu_backward(c.a3, d);
  auto c3 = conv2d_backward(c.p1.y, s[ModelState::conv3_w], s[ModelState::conv3_b], d, detail::kSame3x3);
  g.params[ModelState::conv3_w] = std::move(c3.dw);
  g.params[ModelState::conv3_b] = std::move(c3.db);
  d = maxpool2_backward(c.a2.shape(), c.p1, c3.dx);
  d = relu_backward(c.a2, d);
  auto c2 = conv2d_backward(c.a1, s[ModelState::conv2_w], s[ModelState::conv2_b], d, detail::kSame3x3);
  g.params[ModelState::conv2_w] = std::move(c2.dw);
  g.params[ModelState::conv2_b] = std::move(c2.db);
  d = relu_backward(c.a1, c2.dx);
  auto c1 = conv2d_backward(c.input, s[ModelState::conv1_w], s[ModelState::conv1_b], d, detail::kSame3x3,
                            need_input_grad);
  g.params[ModelState::conv1_w] = std::move(c1.dw);
  g.params[ModelState::conv1_b] = std::move(c1.db);
  if (need_input_grad) g.input = std::move(c1.dx);
  return g;
}

struct LossAndGradients {
  double loss = 0.0;
  Tensor logits;
  Gradients grads;
};

/// Mean softmax cross-entropy of the model on (x, y) with all gradients.
inline LossAndGradients loss_and_gradients(const ModelState& s, Tensor x, std::span<const int> labels,
                                           bool need_input_grad = true) {
  auto cache = forward_cached(s, std::move(x));
  auto xent = kernels::softmax_xent(cache.logits, labels);
  if (!std::isfinite(xent.loss)) throw NonFiniteError("model loss is not finite");
  LossAndGradients r;
  r.loss = xent.loss;
  r.grads = backward(s, cache, xent.dlogits, need_input_grad);
  r.logits = std::move(cache.logits);
  return r;
}

inline std::vector<int> predict(const ModelState& s, const Tensor& x) { return kernels::argmax_rows(forward(s, x)); }

inline constexpr std::string_view kCheckpointMagic = "FLRN";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// FLRN layout: magic, version u32, tensor count u32, then per tensor:
/// name length u32, name bytes, rank u32, dims u32 each, f32 payload.
/// Parameters come first, then their momentum buffers ("<name>.momentum").
inline std::vector<char> encode_checkpoint(const ModelState& s) {
  io::ByteWriter out;
  out.bytes(kCheckpointMagic);
  out.u32(kCheckpointVersion);
  out.u32(static_cast<std::uint32_t>(2 * s.params.size()));
  auto put = [&out](const std::string& name, const Tensor& t) {
    out.u32(static_cast<std::uint32_t>(name.size()));
    out.bytes(name);
    out.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) out.u32(static_cast<std::uint32_t>(d));
    out.f32s(t.values());
  };
  for (const auto& p : s.params) put(p.name, p.value);
  for (const auto& p : s.params) put(p.name + ".momentum", p.velocity);
  return out.buffer();
}

inline ModelState decode_checkpoint(std::span<const char> bytes, const std::string& source = "<checkpoint>") {
  io::ByteReader in(bytes, source);
  if (bytes.size() < 4 || in.bytes(4) != kCheckpointMagic)
    throw FormatError(source + ": bad magic (expected FLRN)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    throw FormatError(detail::concat(source, ": unsupported checkpoint version ", version));
  const std::uint32_t count = in.u32();
  if (count != 2 * ModelState::count)
    throw FormatError(detail::concat(source, ": expected ", 2 * ModelState::count, " tensors, found ", count));
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = in.u32();
    std::string name(in.bytes(name_len));
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw FormatError(detail::concat(source, ": tensor '", name, "' has implausible rank ", rank));
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    Tensor value(shape);
    in.f32s(value.values());
    tensors.emplace_back(std::move(name), std::move(value));
  }
  if (in.remaining() != 0) throw FormatError(detail::concat(source, ": ", in.remaining(), " trailing bytes"));

  ModelState s;
  const Tensor& w1 = tensors[ModelState::conv1_w].second;
  const Tensor& fcw = tensors[ModelState::fc_w].second;
  if (w1.rank() != 4 || fcw.rank() != 2) throw FormatError(source + ": malformed layer shapes");
  s.arch.channels = w1.dim(1);
  s.arch.num_classes = fcw.dim(0);
  s.arch.widths = {w1.dim(0), tensors[ModelState::conv2_w].second.dim(0), tensors[ModelState::conv3_w].second.dim(0)};
  for (std::size_t i = 0; i < ModelState::count; ++i) {
    auto& [name, value] = tensors[i];
    auto& [mname, momentum] = tensors[i + ModelState::count];
    if (name != detail::kParameterNames[i] || mname != name + ".momentum")
      throw FormatError(detail::concat(source, ": unexpected tensor '", name, "' at position ", i));
    if (value.shape() != detail::parameter_shape(s.arch, i) || momentum.shape() != value.shape())
      throw FormatError(detail::concat(source, ": tensor '", name, "' has inconsistent shape ",
                                       shape_string(value.shape())));
    s.params.push_back(Parameter{name, std::move(value), std::move(momentum)});
  }
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelState& s) {
  io::write_file(path, encode_checkpoint(s));
}

/// Input height/width are not stored; they are restored from `height`/`width`.
inline ModelState load_checkpoint(const std::filesystem::path& path, std::size_t height, std::size_t width) {
  ModelState s = decode_checkpoint(io::read_file(path), path.string());
  s.arch.height = height;
  s.arch.width = width;
  return s;
}

}  // namespace flareon
