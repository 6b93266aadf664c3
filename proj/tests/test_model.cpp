#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "test_support.hpp"

using namespace flareon;
using oracle::random_tensor;

namespace {

Tensor images(std::size_t n, std::uint64_t seed, std::size_t hw = 8) {
  return random_tensor({n, 3, hw, hw}, RngStream(seed), 0.0, 1.0);
}

}  // namespace

TEST(Model, InitShapesAndNames) {
  const auto m = init_model(oracle::tiny_arch(), RngStream(1));
  ASSERT_EQ(m.params.size(), static_cast<std::size_t>(ModelState::count));
  EXPECT_EQ(m[ModelState::conv1_w].shape(), (Shape{4, 3, 3, 3}));
  EXPECT_EQ(m[ModelState::conv3_w].shape(), (Shape{8, 6, 3, 3}));
  EXPECT_EQ(m[ModelState::fc_w].shape(), (Shape{4, 8}));
  EXPECT_EQ(m.params[ModelState::fc_b].name, "fc.bias");
  for (float v : m[ModelState::conv2_b].values()) EXPECT_EQ(v, 0.0f);
  // Kaiming-uniform bound sqrt(2) * sqrt(3 / fan_in) for conv2 (fan_in 36).
  const float bound = static_cast<float>(std::sqrt(2.0) * std::sqrt(3.0 / 36.0));
  for (float v : m[ModelState::conv2_w].values()) EXPECT_LE(std::abs(v), bound);
}

TEST(Model, ZeroFinalLayerGivesUniformLogits) {
  auto m = init_model(oracle::tiny_arch(3, 8, 5), RngStream(2));
  m[ModelState::fc_w].fill(0.0f);
  const auto x = images(3, 3);
  const auto logits = forward(m, x);
  for (float v : logits.values()) EXPECT_EQ(v, 0.0f);
  const std::vector<int> y{0, 2, 4};
  EXPECT_NEAR(loss_and_gradients(m, x, y).loss, std::log(5.0), 1e-12);
}

TEST(Model, DuplicateImagesGiveIdenticalRows) {
  const auto m = init_model(oracle::tiny_arch(), RngStream(4));
  auto x = images(3, 5);
  std::ranges::copy(x.slice(0), x.slice(2).begin());
  const auto logits = forward(m, x);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(logits[j], logits[8 + j]);
}

TEST(Model, SeededInitAndForwardAreReproducible) {
  const auto a = init_model(oracle::tiny_arch(), RngStream(6));
  const auto b = init_model(oracle::tiny_arch(), RngStream(6));
  const auto x = images(4, 7);
  EXPECT_EQ(forward(a, x), forward(b, x));
  EXPECT_NE(forward(a, x), forward(init_model(oracle::tiny_arch(), RngStream(8)), x));
}

TEST(Model, MatchesDoubleReference) {
  const auto m = init_model(oracle::tiny_arch(), RngStream(9));
  const auto x = images(2, 10);
  const std::vector<int> y{1, 3};
  const auto ref = oracle::ReferenceNet(m).loss(oracle::to_double(x.values()), 2, y);
  EXPECT_NEAR(loss_and_gradients(m, x, y).loss, ref.loss, 1e-5);
}

TEST(Model, InputGradientMatchesFiniteDifferences) {
  const auto m = init_model(oracle::tiny_arch(), RngStream(11));
  const auto x = images(2, 12);
  const std::vector<int> y{2, 0};
  const auto lg = loss_and_gradients(m, x, y, true);
  oracle::ReferenceNet net(m);
  auto xd = oracle::to_double(x.values());
  const auto r = oracle::check_gradient(xd, lg.grads.input.values(), 1e-3, [&] { return net.loss(xd, 2, y); });
  EXPECT_LT(r.max_rel, 1e-3);
  EXPECT_LT(r.skipped, r.checked / 20);
}

TEST(Model, ParameterGradientsMatchFiniteDifferences) {
  const auto m = init_model(oracle::tiny_arch(), RngStream(13));
  const auto x = images(2, 14);
  const std::vector<int> y{3, 1};
  const auto lg = loss_and_gradients(m, x, y, false);
  EXPECT_TRUE(lg.grads.input.empty());
  oracle::ReferenceNet net(m);
  const auto xd = oracle::to_double(x.values());
  for (std::size_t i = 0; i < ModelState::count; ++i) {
    const auto r = oracle::check_gradient(net.param(i), lg.grads.params[i].values(), 1e-3,
                                          [&] { return net.loss(xd, 2, y); });
    EXPECT_LT(r.max_rel, 1e-3) << m.params[i].name;
    EXPECT_GT(r.checked, 0u) << m.params[i].name;
  }
}

TEST(Model, SaturatedCorrectPredictionHasVanishingInputGradient) {
  auto m = init_model(oracle::tiny_arch(), RngStream(15));
  m[ModelState::fc_b][2] = 200.0f;
  const std::vector<int> y{2, 2};
  const auto lg = loss_and_gradients(m, images(2, 16), y);
  EXPECT_LT(std::sqrt(squared_norm(lg.grads.input.values())), 1e-12);
}

TEST(Model, DuplicatedBatchGivesSameMeanGradients) {
  const auto m = init_model(oracle::tiny_arch(), RngStream(17));
  const auto x = images(2, 18);
  const std::vector<int> y{0, 1};
  Tensor xx({4, 3, 8, 8});
  std::ranges::copy(x.values(), xx.values().begin());
  std::ranges::copy(x.values(), xx.values().begin() + static_cast<std::ptrdiff_t>(x.size()));
  const std::vector<int> yy{0, 1, 0, 1};
  const auto a = loss_and_gradients(m, x, y);
  const auto b = loss_and_gradients(m, xx, yy);
  EXPECT_NEAR(a.loss, b.loss, 1e-6);
  for (std::size_t i = 0; i < ModelState::count; ++i)
    for (std::size_t q = 0; q < a.grads.params[i].size(); ++q)
      ASSERT_NEAR(a.grads.params[i][q], b.grads.params[i][q], 1e-6) << m.params[i].name;
  // Per-image input gradients halve when the batch doubles.
  for (std::size_t q = 0; q < a.grads.input.size(); ++q) ASSERT_NEAR(a.grads.input[q], 2.0f * b.grads.input[q], 1e-6);
}

TEST(Model, RejectsWrongInputShape) {
  const auto m = init_model(oracle::tiny_arch(), RngStream(19));
  EXPECT_THROW(forward(m, Tensor({1, 1, 8, 8})), ContractViolation);
  EXPECT_THROW(forward(m, Tensor({1, 3, 8, 9})), ContractViolation);
  Architecture bad = oracle::tiny_arch();
  bad.num_classes = 1;
  EXPECT_THROW(init_model(bad, RngStream(0)), ContractViolation);
}

TEST(Sgd, PlainStepSubtractsGradient) {
  std::vector<Parameter> p{{"w", Tensor({2}, std::vector<float>{1.0f, -2.0f}), Tensor({2})}};
  const std::vector<Tensor> g{Tensor({2}, std::vector<float>{0.5f, 0.25f})};
  sgd_step(p, g, {1.0, 0.0, 0.0});
  EXPECT_EQ(p[0].value.storage(), (std::vector<float>{0.5f, -2.25f}));
}

TEST(Sgd, MomentumAccumulates) {
  // v1 = g, v2 = 0.9 g + g; total displacement g + 1.9 g.
  std::vector<Parameter> p{{"w", Tensor({1}, 0.0f), Tensor({1})}};
  const std::vector<Tensor> g{Tensor({1}, 1.0f)};
  sgd_step(p, g, {1.0, 0.9, 0.0});
  sgd_step(p, g, {1.0, 0.9, 0.0});
  EXPECT_FLOAT_EQ(p[0].value[0], -2.9f);
}

TEST(Sgd, ZeroLearningRateUpdatesOnlyVelocity) {
  std::vector<Parameter> p{{"w", Tensor({1}, 3.0f), Tensor({1})}};
  const std::vector<Tensor> g{Tensor({1}, 2.0f)};
  sgd_step(p, g, {0.0, 0.9, 0.0});
  EXPECT_EQ(p[0].value[0], 3.0f);
  EXPECT_EQ(p[0].velocity[0], 2.0f);
}

TEST(Sgd, WeightDecayAddsToGradient) {
  std::vector<Parameter> p{{"w", Tensor({1}, 2.0f), Tensor({1})}};
  const std::vector<Tensor> g{Tensor({1}, 0.0f)};
  sgd_step(p, g, {0.5, 0.0, 0.1});
  EXPECT_FLOAT_EQ(p[0].value[0], 1.9f);
}

TEST(Sgd, NonFiniteGradientLeavesStateUntouched) {
  std::vector<Parameter> p{{"a", Tensor({1}, 1.0f), Tensor({1})}, {"b", Tensor({1}, 1.0f), Tensor({1})}};
  const std::vector<Tensor> g{Tensor({1}, 1.0f), Tensor({1}, std::nanf(""))};
  EXPECT_THROW(sgd_step(p, g, {}), NonFiniteError);
  EXPECT_EQ(p[0].value[0], 1.0f);
  EXPECT_EQ(p[0].velocity[0], 0.0f);
}

TEST(Checkpoint, RoundTripsExactly) {
  auto m = init_model(oracle::tiny_arch(), RngStream(20));
  for (auto& p : m.params) p.velocity = random_tensor(p.value.shape(), RngStream(21));
  const auto bytes = encode_checkpoint(m);
  EXPECT_EQ(std::string(bytes.data(), 4), "FLRN");
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(back.params[i].name, m.params[i].name);
    EXPECT_EQ(back.params[i].value, m.params[i].value);
    EXPECT_EQ(back.params[i].velocity, m.params[i].velocity);
  }
  EXPECT_EQ(back.arch.widths, m.arch.widths);
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "flareon_test_model.flrn";
  save_checkpoint(path, m);
  const auto loaded = load_checkpoint(path, 8, 8);
  EXPECT_EQ(loaded.arch, m.arch);
  EXPECT_EQ(forward(loaded, images(2, 22)), forward(m, images(2, 22)));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsAFormatError) {
  const auto good = encode_checkpoint(init_model(oracle::tiny_arch(), RngStream(23)));
  auto bad = good;
  bad[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = good;
  bad[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = good;
  bad.resize(bad.size() - 3);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = good;
  bad.push_back(1);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = good;
  bad[16] = 'X';  // first byte of the first tensor name
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}
