#include <gtest/gtest.h>

#include <filesystem>

#include "test_support.hpp"

using namespace flareon;
using oracle::random_tensor;

namespace {

TriggerBank bank4() { return make_motion_bank(4, 6, 5, {InitFamily::beta, 2.0}, RngStream(7)); }

}  // namespace

TEST(TriggerBank, MotionBankIsSeededPerLabel) {
  const auto a = bank4(), b = bank4();
  ASSERT_EQ(a.num_labels(), 4u);
  EXPECT_EQ(a.flows, b.flows);
  EXPECT_NE(a.flows[0], a.flows[1]);
  EXPECT_EQ(a.flows[2], sample_flow({InitFamily::beta, 2.0}, 6, 5, RngStream(7).fork(2)));
  EXPECT_NO_THROW(a.validate(4, 3, 6, 5));
}

TEST(TriggerBank, ApplyWarpsWithOwnLabelField) {
  const auto bank = bank4();
  const auto x = random_tensor({3, 6, 5}, RngStream(1), 0.0, 1.0);
  Tensor out(x.shape());
  bank.apply(3, x.values(), 3, out.values());
  EXPECT_EQ(out, warp_sample(x, bank.flows[3]));
  EXPECT_THROW(bank.apply(4, x.values(), 3, out.values()), ContractViolation);
}

TEST(TriggerBank, PixelwiseApplyAddsAndClamps) {
  TriggerBank bank;
  bank.kind = TriggerKind::pixelwise;
  bank.deltas = {Tensor({1, 2, 2}), Tensor({1, 2, 2}, 0.3f)};
  const Tensor x({1, 2, 2}, 0.8f);
  Tensor out(x.shape());
  bank.apply(0, x.values(), 1, out.values());
  EXPECT_EQ(out, x);
  bank.apply(1, x.values(), 1, out.values());
  for (float v : out.values()) EXPECT_EQ(v, 1.0f);
  EXPECT_FALSE(bank.updates_enabled());
}

TEST(TriggerBank, ValidateRejectsBadBanks) {
  auto bank = bank4();
  EXPECT_THROW(bank.validate(5, 3, 6, 5), ContractViolation);
  EXPECT_THROW(bank.validate(4, 3, 6, 6), ContractViolation);
  bank.rho = 1.5;
  EXPECT_THROW(bank.validate(4, 3, 6, 5), ContractViolation);
  bank = bank4();
  bank.epsilon = 0.0;
  EXPECT_THROW(bank.validate(4, 3, 6, 5), ContractViolation);
  bank = bank4();
  bank.flows[1].values()[0] = 1.5f;
  EXPECT_THROW(bank.validate(4, 3, 6, 5), ContractViolation);
}

TEST(TriggerBank, UpdatesNeedLearnableAndPositiveRate) {
  auto bank = bank4();
  EXPECT_FALSE(bank.updates_enabled());
  bank.learnable = true;
  EXPECT_FALSE(bank.updates_enabled());
  bank.learn_rate = 0.1;
  EXPECT_TRUE(bank.updates_enabled());
}

TEST(TriggerBank, FingerprintTracksContent) {
  auto bank = bank4();
  const auto before = bank.fingerprint();
  EXPECT_EQ(before, bank4().fingerprint());
  bank.flows[2].values()[7] += 0.01f;
  EXPECT_NE(bank.fingerprint(), before);
}

TEST(TriggerFile, RoundTripsExactly) {
  const auto bank = bank4();
  const auto bytes = encode_triggers(bank.flows);
  EXPECT_EQ(bytes.size(), 4 + 16 + 4u * 6 * 5 * 2 * 4);
  EXPECT_EQ(std::string(bytes.data(), 4), "FLTR");
  EXPECT_EQ(decode_triggers(bytes), bank.flows);

  const auto path = std::filesystem::temp_directory_path() / "flareon_test_triggers.fltr";
  save_triggers(path, bank.flows);
  EXPECT_EQ(load_triggers(path), bank.flows);
  EXPECT_EQ(io::read_file(path), bytes);
  std::filesystem::remove(path);
}

TEST(TriggerFile, HeaderIsLittleEndian) {
  const auto bytes = encode_triggers(bank4().flows);
  auto u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(bytes[off + static_cast<std::size_t>(b)]);
    return v;
  };
  EXPECT_EQ(u32(4), 1u);
  EXPECT_EQ(u32(8), 4u);
  EXPECT_EQ(u32(12), 6u);
  EXPECT_EQ(u32(16), 5u);
}

TEST(TriggerFile, CorruptionIsAFormatError) {
  const auto good = encode_triggers(bank4().flows);
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_triggers(bad), FormatError);
  bad = good;
  bad[4] = 9;
  EXPECT_THROW(decode_triggers(bad), FormatError);
  bad = good;
  bad.pop_back();
  EXPECT_THROW(decode_triggers(bad), FormatError);
  bad = good;
  bad.push_back(0);
  EXPECT_THROW(decode_triggers(bad), FormatError);
  EXPECT_THROW(decode_triggers(std::vector<char>{'F', 'L'}), FormatError);
  EXPECT_THROW(load_triggers("/nonexistent/triggers.fltr"), std::exception);
}

TEST(AmplifiedPerturbation, ZeroFlowIsMidGrey) {
  const auto x = random_tensor({3, 4, 4}, RngStream(2), 0.0, 1.0);
  for (float v : amplified_perturbation(x.values(), 3, FlowField(4, 4))) EXPECT_EQ(v, 0.5f);
}
