#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_support.hpp"

using namespace flareon;
using namespace flareon::defense;

namespace {

ModelState random_model(std::uint64_t seed) { return init_model(oracle::tiny_arch(3, 8, 8), RngStream(seed, 0)); }

Dataset small_test(std::uint64_t seed, std::size_t per_class = 4) {
  return synth_shapes(per_class, 8, 8, 8, RngStream(seed, 7), {}, "test");
}

}  // namespace

// ------------------------------------------------------------- median/MAD

TEST(AnomalyIndex, MedianOddAndEven) {
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_THROW(median({}), ContractViolation);
}

TEST(AnomalyIndex, MatchesHandComputedMad) {
  const std::vector<double> norms{1.0, 2.0, 3.0, 4.0, 100.0};
  // median 3; deviations {2,1,0,1,97} -> median 1; scaled MAD 1.4826.
  const auto idx = anomaly_indices(norms, std::vector<bool>(5, true));
  const std::vector<double> want{2 / 1.4826, 1 / 1.4826, 0.0, 1 / 1.4826, 97 / 1.4826};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(idx[i], want[i], 1e-12);
}

TEST(AnomalyIndex, UnconvergedEntriesAreExcluded) {
  const std::vector<double> norms{1.0, 2.0, std::nan(""), 3.0};
  const auto idx = anomaly_indices(norms, {true, true, false, true});
  EXPECT_EQ(idx[2], 0.0);
  // median 2; deviations {1,0,1} -> 1.
  EXPECT_NEAR(idx[0], 1 / 1.4826, 1e-12);
  EXPECT_NEAR(idx[3], 1 / 1.4826, 1e-12);
}

TEST(AnomalyIndex, ZeroMadStaysFinite) {
  const auto idx = anomaly_indices(std::vector<double>{5.0, 5.0, 5.0, 6.0}, std::vector<bool>(4, true));
  for (double v : idx) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(idx[0], 0.0);
  EXPECT_GT(idx[3], kNcFlagThreshold);
}

// ------------------------------------------------------------------ STRIP

TEST(Strip, EntropyOfDistributions) {
  EXPECT_DOUBLE_EQ(shannon_entropy(std::vector<double>{1.0, 0.0}), 0.0);
  EXPECT_NEAR(shannon_entropy(std::vector<double>(4, 0.25)), std::log(4.0), 1e-12);
}

TEST(Strip, UniformModelGivesMaximalEntropyEverywhere) {
  const auto model = oracle::constant_model(oracle::tiny_arch(3, 8, 8));
  const auto test = small_test(1);
  const auto bank = make_motion_bank(8, 8, 8, InitSpec{}, RngStream(1, 2));
  const auto r = strip(model, test.images, triggered_copies(test, bank, RngStream(1, 3)), test, 4, RngStream(1, 4));
  for (double e : r.clean_entropy) EXPECT_NEAR(e, std::log(8.0), 1e-6);
  for (double e : r.triggered_entropy) EXPECT_NEAR(e, std::log(8.0), 1e-6);
  EXPECT_DOUBLE_EQ(r.far, 1.0);
  EXPECT_DOUBLE_EQ(r.frr, 0.0);
}

TEST(Strip, ZeroOverlaysIsPlainPredictionEntropy) {
  const auto model = random_model(3);
  const auto test = small_test(3, 2);
  const auto e = strip_entropies(model, test.images, test, 0, RngStream(3, 1));
  const Tensor p = kernels::softmax(forward(model, test.images));
  ASSERT_EQ(e.size(), test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    double h = 0.0;
    for (std::size_t j = 0; j < 8; ++j) h -= p[i * 8 + j] * std::log(p[i * 8 + j]);
    EXPECT_NEAR(e[i], h, 1e-5);
  }
}

TEST(Strip, EntropiesAreBoundedAndSeeded) {
  const auto model = random_model(4);
  const auto test = small_test(4, 2);
  const auto a = strip_entropies(model, test.images, test, 5, RngStream(4, 1));
  const auto b = strip_entropies(model, test.images, test, 5, RngStream(4, 1));
  EXPECT_EQ(a, b);
  for (double e : a) {
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, std::log(8.0) + 1e-9);
  }
}

TEST(Strip, ThresholdCalibration) {
  std::vector<double> clean;
  for (int i = 1; i <= 10; ++i) clean.push_back(0.1 * i);
  const auto r = strip_from_entropies(clean, {0.05, clean[2], 0.9}, 0.2);
  EXPECT_DOUBLE_EQ(r.threshold, clean[2]);
  EXPECT_DOUBLE_EQ(r.frr, 0.2);
  EXPECT_NEAR(r.far, 2.0 / 3.0, 1e-12);
  const auto none = strip_from_entropies(clean, {}, 0.0);
  EXPECT_DOUBLE_EQ(none.frr, 0.0);
  EXPECT_DOUBLE_EQ(none.far, 0.0);
  EXPECT_THROW(strip_from_entropies({}, {1.0}), ContractViolation);
  EXPECT_THROW(strip_from_entropies(clean, {}, 1.0), ContractViolation);
}

TEST(Strip, TriggeredCopiesNeverUseTheOwnLabel) {
  const auto test = small_test(5, 3);
  const auto bank = make_motion_bank(8, 8, 8, InitSpec{}, RngStream(5, 2));
  const Tensor t = triggered_copies(test, bank, RngStream(5, 3));
  std::vector<float> buf(test.image_size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t matches = 0;
    for (std::size_t c = 0; c < 8; ++c) {
      bank.apply(c, test.image(i), 3, buf);
      if (std::ranges::equal(buf, t.slice(i))) {
        ++matches;
        EXPECT_NE(static_cast<int>(c), test.labels[i]);
      }
    }
    EXPECT_GE(matches, 1u);
  }
}

// ----------------------------------------------------------- Fine-pruning

TEST(FinePrune, OrderIsLeastActiveFirstWithStableTies) {
  const std::vector<double> act{0.5, 0.1, 0.5, 0.0};
  EXPECT_EQ(prune_order(act), (std::vector<std::size_t>{3, 1, 0, 2}));
}

TEST(FinePrune, ZeroedChannelsAreSilent) {
  auto model = random_model(6);
  const auto test = small_test(6, 2);
  const std::vector<std::size_t> gone{0, 2, 5};
  zero_channels(model, gone);
  const auto act = last_conv_activity(model, test);
  for (std::size_t c : gone) EXPECT_EQ(act[c], 0.0);
  for (double a : act) EXPECT_GE(a, 0.0);
}

TEST(FinePrune, EndpointsOfTheCurve) {
  const auto model = random_model(7);
  const auto test = small_test(7, 4);
  const auto bank = make_motion_bank(8, 8, 8, InitSpec{}, RngStream(7, 2));
  const std::vector<double> grid{0.0, 0.5, 1.0};
  const auto rows = fine_prune(model, test, test, bank, grid, {}, RngStream(7, 3));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].pruned, 0u);
  EXPECT_EQ(rows[1].pruned, 4u);
  EXPECT_EQ(rows[2].pruned, 8u);
  EXPECT_DOUBLE_EQ(rows[0].ca, eval_clean(model, test));
  EXPECT_DOUBLE_EQ(rows[0].asr, eval_asr(model, test, bank).overall);
  // With every channel gone the logits are the classifier bias: one class
  // for every input, so CA is that class's share of the balanced test set.
  EXPECT_DOUBLE_EQ(rows[2].ca, 1.0 / 8.0);
}

TEST(FinePrune, FineTuningIsDeterministic) {
  const auto model = random_model(8);
  const auto test = small_test(8, 4);
  const auto bank = make_motion_bank(8, 8, 8, InitSpec{}, RngStream(8, 2));
  FinePruneOptions opt;
  opt.finetune_steps = 5;
  opt.batch_size = 16;
  const std::vector<double> grid{0.25};
  const auto a = fine_prune(model, test, test, bank, grid, opt, RngStream(8, 3));
  const auto b = fine_prune(model, test, test, bank, grid, opt, RngStream(8, 3));
  EXPECT_EQ(a[0].ca, b[0].ca);
  EXPECT_EQ(a[0].asr, b[0].asr);
  EXPECT_EQ(a[0].pruned, 2u);
}

TEST(FinePrune, RejectsSparsityOutsideUnitInterval) {
  const auto model = random_model(9);
  const auto test = small_test(9, 1);
  const auto bank = make_motion_bank(8, 8, 8, InitSpec{}, RngStream(9, 2));
  for (double s : {-0.1, 1.5}) {
    const std::vector<double> grid{s};
    EXPECT_THROW(fine_prune(model, test, test, bank, grid, {}, RngStream(9, 3)), ContractViolation);
  }
}

// --------------------------------------------------------- Neural Cleanse

TEST(NeuralCleanse, ZeroLambdaReportIsWellFormed) {
  const auto model = random_model(10);
  const auto test = small_test(10, 2);
  NcOptions opt;
  opt.steps = 20;
  opt.lambda = 0.0;
  const auto r = neural_cleanse(model, test, opt, RngStream(10, 1));
  ASSERT_EQ(r.mask_norms.size(), 8u);
  ASSERT_EQ(r.anomaly_index.size(), 8u);
  ASSERT_EQ(r.final_success.size(), 8u);
  for (std::size_t t = 0; t < 8; ++t) {
    EXPECT_TRUE(r.converged[t]);
    EXPECT_GE(r.mask_norms[t], 0.0);
    EXPECT_LE(r.mask_norms[t], 64.0);
    EXPECT_TRUE(std::isfinite(r.anomaly_index[t]));
  }
  for (std::size_t t : r.flagged) EXPECT_LT(t, 8u);
}

TEST(NeuralCleanse, RejectsBadOptions) {
  const auto model = random_model(11);
  const auto test = small_test(11, 1);
  NcOptions opt;
  opt.lambda = -1.0;
  EXPECT_THROW(neural_cleanse(model, test, opt, RngStream(11, 1)), ContractViolation);
  opt.lambda = 0.01;
  opt.lr = 0.0;
  EXPECT_THROW(neural_cleanse(model, test, opt, RngStream(11, 1)), ContractViolation);
}

// Shared patch-backdoored model; training it takes a while.
class PatchBackdoor : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { fixture_ = new oracle::PatchFixture(oracle::patch_fixture(1)); }
  static void TearDownTestSuite() {
    delete fixture_;
    fixture_ = nullptr;
  }
  static oracle::PatchFixture* fixture_;
};

oracle::PatchFixture* PatchBackdoor::fixture_ = nullptr;

TEST_F(PatchBackdoor, FixtureCarriesTheBackdoor) {
  const auto& f = *fixture_;
  const auto r = evaluate(f.model, f.test, f.bank);
  EXPECT_GE(r.ca, 0.95);
  EXPECT_GE(r.asr_per_target[f.target], 0.9);
}

TEST_F(PatchBackdoor, NeuralCleanseFlagsThePatchTarget) {
  const auto& f = *fixture_;
  const auto r = neural_cleanse(f.model, f.test, {}, RngStream(1, 9));
  const auto smallest = std::ranges::min_element(r.mask_norms) - r.mask_norms.begin();
  EXPECT_EQ(static_cast<std::size_t>(smallest), f.target);
  EXPECT_GT(r.anomaly_index[f.target], kNcFlagThreshold);
  EXPECT_NE(std::ranges::find(r.flagged, f.target), r.flagged.end());
}

TEST_F(PatchBackdoor, GradCamLooksAtThePatch) {
  const auto& f = *fixture_;
  // The map has one cell per 4x4 block (two 2x pools), coarser than the
  // 3x3 patch, so the trigger region is the patch grown by one cell.
  const std::size_t side = f.test.height(), stride = 4, lo = side - 3 - stride;
  const std::size_t top = side * side / 10;
  auto top_decile_share = [&](const Tensor& cam) {
    std::vector<std::size_t> order(side * side);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return cam[a] > cam[b]; });
    std::size_t in = 0;
    for (std::size_t q = 0; q < top; ++q) in += order[q] / side >= lo && order[q] % side >= lo;
    return static_cast<double>(in) / static_cast<double>(top);
  };
  double triggered = 0.0, clean = 0.0;
  std::size_t n = 0;
  std::vector<float> buf(f.test.image_size());
  for (std::size_t i = 0; i < f.test.size(); ++i) {
    const auto label = static_cast<std::size_t>(f.test.labels[i]);
    if (label == f.target) continue;
    f.bank.apply(f.target, f.test.image(i), 3, buf);
    triggered += top_decile_share(grad_cam(f.model, buf, f.target));
    clean += top_decile_share(grad_cam(f.model, f.test.image(i), label));
    ++n;
  }
  ASSERT_GT(n, 0u);
  const double uniform = static_cast<double>((side - lo) * (side - lo)) / static_cast<double>(side * side);
  EXPECT_GT(triggered / n, uniform);
  EXPECT_GT(triggered / n, clean / n);
}
