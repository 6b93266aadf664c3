#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "flareon/rng.hpp"
#include "flareon/warp.hpp"

using flareon::InitFamily;
using flareon::InitSpec;
using flareon::RngStream;

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;
};

template <typename Draw>
Moments moments(std::size_t n, Draw draw) {
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = draw();
    s += v;
    s2 += v * v;
  }
  const double m = s / static_cast<double>(n);
  return {m, s2 / static_cast<double>(n) - m * m};
}

}  // namespace

TEST(RngStream, SameSeedSameSequence) {
  RngStream a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, AtIsRandomAccess) {
  RngStream a(7, 3);
  const RngStream probe(7, 3);
  for (std::uint64_t i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), probe.at(i));
  EXPECT_EQ(a.counter(), 100u);
}

TEST(RngStream, ForksAreDistinctAndStable) {
  const RngStream root(1);
  std::set<std::uint64_t> firsts;
  for (std::uint64_t c = 0; c < 256; ++c) firsts.insert(root.fork(c).at(0));
  EXPECT_EQ(firsts.size(), 256u);
  EXPECT_EQ(root.fork(5).fork(9).at(3), RngStream(1).fork(5).fork(9).at(3));
  EXPECT_NE(root.fork(5).fork(9).at(0), root.fork(9).fork(5).at(0));
}

TEST(RngStream, ForkIgnoresParentCounter) {
  RngStream a(3);
  const auto before = a.fork(2).at(0);
  a.next_u64();
  EXPECT_EQ(a.fork(2).at(0), before);
}

TEST(RngStream, UniformRanges) {
  RngStream r(11);
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double o = r.uniform_open();
    ASSERT_GT(o, 0.0);
    ASSERT_LT(o, 1.0);
  }
}

TEST(RngStream, BelowIsUniform) {
  RngStream r(5);
  std::vector<std::size_t> counts(7, 0);
  const std::size_t n = 70000;
  for (std::size_t i = 0; i < n; ++i) ++counts[r.below(7)];
  // Each bin is Binomial(n, 1/7); 5 sigma is about 450.
  for (auto c : counts) EXPECT_NEAR(static_cast<double>(c), n / 7.0, 450.0);
  EXPECT_THROW(r.below(0), flareon::ContractViolation);
}

TEST(RngStream, NormalMoments) {
  RngStream r(9);
  const auto m = moments(400000, [&] { return r.normal(); });
  EXPECT_NEAR(m.mean, 0.0, 0.01);
  EXPECT_NEAR(m.var, 1.0, 0.01);
}

TEST(RngStream, GammaMoments) {
  // Gamma(k, 1) has mean k and variance k.
  for (double k : {0.5, 1.0, 2.0, 8.0}) {
    RngStream r(static_cast<std::uint64_t>(k * 100));
    const auto m = moments(200000, [&] { return r.gamma(k); });
    EXPECT_NEAR(m.mean, k, 0.02 * k + 0.01) << "k=" << k;
    EXPECT_NEAR(m.var, k, 0.05 * k + 0.01) << "k=" << k;
  }
  RngStream r(1);
  EXPECT_THROW(r.gamma(0.0), flareon::ContractViolation);
  EXPECT_THROW(r.gamma(-1.0), flareon::ContractViolation);
}

TEST(RngStream, BetaMoments) {
  // Beta(a, b): mean a/(a+b), variance ab / ((a+b)^2 (a+b+1)).
  const std::pair<double, double> cases[] = {{2, 2}, {1, 3}, {8, 8}, {0.5, 0.5}};
  for (auto [a, b] : cases) {
    RngStream r(static_cast<std::uint64_t>(a * 10 + b));
    const double mean = a / (a + b);
    const double var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
    const auto m = moments(200000, [&] { return r.beta(a, b); });
    EXPECT_NEAR(m.mean, mean, 0.005) << a << "," << b;
    EXPECT_NEAR(m.var, var, 0.04 * var) << a << "," << b;
  }
}

// Var(2B - 1) for B ~ Beta(b, b) is 4 * b^2 / ((2b)^2 (2b + 1)) = 1 / (2b + 1).
TEST(SampleFlow, BetaEntryVarianceMatchesClosedForm) {
  for (double beta : {1.0, 2.0, 8.0}) {
    const double expected = 1.0 / (2.0 * beta + 1.0);
    const auto tau = flareon::sample_flow({InitFamily::beta, beta}, 250, 250, RngStream(17, 1));
    double s = 0.0, s2 = 0.0;
    for (float v : tau.values()) {
      s += v;
      s2 += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(tau.size());
    const double mean = s / n;
    EXPECT_NEAR(mean, 0.0, 0.005) << "beta=" << beta;
    EXPECT_NEAR(s2 / n - mean * mean, expected, 0.05 * expected) << "beta=" << beta;
  }
}

TEST(SampleFlow, BetaTwoVarianceIsPointTwo) {
  const auto tau = flareon::sample_flow({InitFamily::beta, 2.0}, 500, 1000, RngStream(3));
  double s = 0.0, s2 = 0.0;
  for (float v : tau.values()) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(tau.size());
  EXPECT_NEAR(s / n, 0.0, 0.005);
  EXPECT_NEAR(s2 / n - (s / n) * (s / n), 0.2, 0.01);
}

TEST(SampleFlow, UniformUnitVarianceIsOneThird) {
  const auto tau = flareon::sample_flow({InitFamily::uniform, 1.0}, 300, 300, RngStream(4));
  double s2 = 0.0;
  for (float v : tau.values()) {
    ASSERT_GE(v, -1.0f);
    ASSERT_LE(v, 1.0f);
    s2 += static_cast<double>(v) * v;
  }
  EXPECT_NEAR(s2 / static_cast<double>(tau.size()), 1.0 / 3.0, 0.01);
}

TEST(SampleFlow, LargeBetaConcentrates) {
  const auto tau = flareon::sample_flow({InitFamily::beta, 1000.0}, 32, 32, RngStream(5));
  for (float v : tau.values()) ASSERT_LT(std::abs(v), 0.1f);
}

TEST(SampleFlow, GaussianIsClampedAndDeterministic) {
  const InitSpec spec{InitFamily::gaussian, 3.0};
  const auto a = flareon::sample_flow(spec, 16, 16, RngStream(6));
  const auto b = flareon::sample_flow(spec, 16, 16, RngStream(6));
  EXPECT_EQ(a, b);
  bool saturated = false;
  for (float v : a.values()) {
    ASSERT_GE(v, -1.0f);
    ASSERT_LE(v, 1.0f);
    saturated |= std::abs(v) == 1.0f;
  }
  EXPECT_TRUE(saturated);
}

TEST(SampleFlow, RejectsBadParameters) {
  EXPECT_THROW(flareon::sample_flow({InitFamily::beta, 0.0}, 4, 4, RngStream(0)), flareon::ContractViolation);
  EXPECT_THROW(flareon::sample_flow({InitFamily::uniform, 1.5}, 4, 4, RngStream(0)), flareon::ContractViolation);
  EXPECT_THROW(flareon::sample_flow({InitFamily::gaussian, -1.0}, 4, 4, RngStream(0)), flareon::ContractViolation);
  EXPECT_THROW(flareon::parse_init_family("laplace"), flareon::ContractViolation);
  EXPECT_EQ(flareon::parse_init_family("uniform"), InitFamily::uniform);
}
