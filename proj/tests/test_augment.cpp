#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace flareon;
using oracle::random_tensor;

namespace {

Tensor batch(std::size_t n, std::uint64_t seed, std::size_t hw = 8) {
  return random_tensor({n, 3, hw, hw}, RngStream(seed), 0.0, 1.0);
}

AugmentPolicy only(AugmentOp op, std::size_t n_ops = 1, double magnitude = 0.5) {
  AugmentPolicy p = AugmentPolicy::none();
  p.ops = {op};
  p.n_ops = n_ops;
  p.magnitude = magnitude;
  return p;
}

std::size_t images_changed(const Tensor& a, const Tensor& b) {
  std::size_t k = 0;
  for (std::size_t i = 0; i < a.dim(0); ++i) k += !std::ranges::equal(a.slice(i), b.slice(i));
  return k;
}

}  // namespace

TEST(Augment, NoOpsNoCutoutIsIdentity) {
  const auto x = batch(5, 1);
  EXPECT_EQ(augment(x, AugmentPolicy::none(), RngStream(2)), x);
}

TEST(Augment, HorizontalFlipTwiceRestores) {
  const auto x = batch(4, 3);
  const auto once = augment(x, only(AugmentOp::hflip), RngStream(4));
  EXPECT_NE(once, x);
  EXPECT_EQ(once.at(0, 1, 2, 0), x.at(0, 1, 2, 7));
  EXPECT_EQ(augment(x, only(AugmentOp::hflip, 2), RngStream(4)), x);
}

TEST(Augment, FixedSeedIsByteIdentical) {
  const auto x = batch(16, 5);
  AugmentPolicy p;
  p.n_ops = 3;
  const auto a = augment(x, p, RngStream(6));
  const auto b = augment(x, p, RngStream(6));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, augment(x, p, RngStream(7)));
}

TEST(Augment, ImageDependsOnlyOnItsIndex) {
  const auto x = batch(6, 8);
  AugmentPolicy p;
  const auto full = augment(x, p, RngStream(9));
  Tensor head({3, 3, 8, 8});
  std::ranges::copy(x.values().subspan(0, head.size()), head.values().begin());
  const auto part = augment(head, p, RngStream(9));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(std::ranges::equal(part.slice(i), full.slice(i)));
}

TEST(Augment, EveryOpKeepsRangeAndShape) {
  const auto x = batch(8, 10);
  for (AugmentOp op : kAllAugmentOps)
    for (double m : {0.0, 0.5, 1.0}) {
      const auto y = augment(x, only(op, 1, m), RngStream(11));
      ASSERT_EQ(y.shape(), x.shape()) << to_string(op);
      for (float v : y.values()) {
        ASSERT_GE(v, 0.0f) << to_string(op);
        ASSERT_LE(v, 1.0f) << to_string(op);
      }
    }
}

TEST(Augment, GeometricOpsAtZeroMagnitudeAreIdentity) {
  const auto x = batch(4, 12);
  for (AugmentOp op : {AugmentOp::rotate, AugmentOp::translate_x, AugmentOp::translate_y, AugmentOp::shear_x,
                       AugmentOp::shear_y, AugmentOp::brightness, AugmentOp::contrast, AugmentOp::color,
                       AugmentOp::sharpness, AugmentOp::posterize}) {
    const auto y = augment(x, only(op, 1, 0.0), RngStream(13));
    for (std::size_t i = 0; i < x.size(); ++i)
      ASSERT_NEAR(y[i], op == AugmentOp::posterize ? static_cast<float>(io::to_byte(x[i])) / 255.0f : x[i], 1e-6)
          << to_string(op);
  }
}

TEST(Augment, OpNamesRoundTrip) {
  for (AugmentOp op : kAllAugmentOps) EXPECT_EQ(parse_augment_op(to_string(op)), op);
  EXPECT_THROW(parse_augment_op("mixup"), ContractViolation);
}

TEST(Augment, AutocontrastStretchesEachChannel) {
  const auto x = random_tensor({1, 3, 6, 6}, RngStream(14), 0.3, 0.6);
  const auto y = augment(x, only(AugmentOp::autocontrast), RngStream(15));
  for (std::size_t c = 0; c < 3; ++c) {
    const auto plane = y.values().subspan(c * 36, 36);
    const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
    EXPECT_FLOAT_EQ(*lo, 0.0f);
    EXPECT_FLOAT_EQ(*hi, 1.0f);
  }
}

TEST(Augment, EqualizeTwoLevelPlane) {
  // Half the pixels at level 10, half at 200: the darker level maps to 0
  // and the brighter to 255.
  Tensor x({1, 1, 16, 32});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (i % 2 ? 200.0f : 10.0f) / 255.0f;
  const auto y = augment(x, only(AugmentOp::equalize), RngStream(16));
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(y[i], i % 2 ? 1.0f : 0.0f);
  const Tensor flat({1, 1, 4, 4}, 0.4f);
  EXPECT_EQ(augment(flat, only(AugmentOp::equalize), RngStream(17)), flat);
}

TEST(Augment, SolarizeInvertsAboveThreshold) {
  const Tensor x({1, 1, 1, 2}, std::vector<float>{0.2f, 0.9f});
  const auto y = augment(x, only(AugmentOp::solarize, 1, 0.5), RngStream(18));
  EXPECT_FLOAT_EQ(y[0], 0.2f);
  EXPECT_FLOAT_EQ(y[1], 0.1f);
}

TEST(Augment, CutoutZeroesASquare) {
  const Tensor x({1, 1, 8, 8}, 0.7f);
  AugmentPolicy p = AugmentPolicy::none();
  p.cutout = 4;
  const auto y = augment(x, p, RngStream(19));
  std::size_t zeros = 0;
  for (float v : y.values()) zeros += v == 0.0f;
  EXPECT_GE(zeros, 4u);
  EXPECT_LE(zeros, 16u);
}

TEST(Augment, ValidatesPolicy) {
  AugmentPolicy p;
  p.magnitude = 1.5;
  EXPECT_THROW(augment(batch(1, 0), p, RngStream(0)), ContractViolation);
  p = AugmentPolicy{};
  p.cutout = 0;
  EXPECT_THROW(augment(batch(1, 0), p, RngStream(0)), ContractViolation);
}

TEST(Inject, ZeroRhoLeavesBatchUnchanged) {
  const auto x = batch(16, 20);
  const std::vector<int> y(16, 1);
  const auto bank = make_motion_bank(4, 8, 8, {}, RngStream(21));
  RngStream r(22);
  const auto out = flareon_inject(x, y, bank, 0.0, r);
  EXPECT_EQ(out.images, x);
  EXPECT_TRUE(out.triggered.empty());
}

TEST(Inject, FullRhoWarpsEveryImageWithOwnLabel) {
  const auto x = batch(8, 23);
  const std::vector<int> y{0, 1, 2, 3, 3, 2, 1, 0};
  const auto bank = make_motion_bank(4, 8, 8, {}, RngStream(24));
  const auto out = flareon_inject(x, y, bank, 1.0, RngStream(25));
  ASSERT_EQ(out.triggered.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    std::vector<float> expect_img(x.slice(i).size());
    warp_sample(x.slice(i), 3, bank.flows[static_cast<std::size_t>(y[i])], expect_img);
    EXPECT_TRUE(std::ranges::equal(out.images.slice(i), expect_img));
  }
  EXPECT_EQ(images_changed(x, out.images), 8u);
}

TEST(Inject, FloorOfRhoTimesBatchImagesChange) {
  const auto x = batch(128, 26);
  std::vector<int> y(128);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 4);
  const auto bank = make_motion_bank(4, 8, 8, {}, RngStream(27));
  const auto out = flareon_inject(x, y, bank, 0.8, RngStream(28));
  EXPECT_EQ(out.triggered.size(), 102u);
  EXPECT_EQ(images_changed(x, out.images), 102u);
  EXPECT_TRUE(std::ranges::is_sorted(out.triggered));
}

TEST(Inject, TriggeredCountIsFloor) {
  EXPECT_EQ(triggered_count(0.8, 128), 102u);
  EXPECT_EQ(triggered_count(0.5, 3), 1u);
  EXPECT_EQ(triggered_count(1.0, 7), 7u);
  EXPECT_EQ(triggered_count(0.3, 10), 3u);  // 0.3 * 10 is 2.9999... in binary
  EXPECT_THROW(triggered_count(1.1, 4), ContractViolation);
}

TEST(Inject, ChoiceIsUniformOverPositions) {
  std::vector<std::size_t> hits(10, 0);
  for (std::uint64_t s = 0; s < 5000; ++s) {
    RngStream r(29, s);
    for (auto j : choose_triggered(10, 0.3, r)) ++hits[j];
  }
  // Each position is chosen with probability 0.3; 5 sigma is about 160.
  for (auto h : hits) EXPECT_NEAR(static_cast<double>(h), 1500.0, 160.0);
}

TEST(Inject, RejectsLabelWithoutTrigger) {
  const auto x = batch(2, 30);
  const std::vector<int> y{0, 5};
  const auto bank = make_motion_bank(4, 8, 8, {}, RngStream(31));
  EXPECT_THROW(flareon_inject(x, y, bank, 1.0, RngStream(32)), ContractViolation);
}
