#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <set>

#include "lottalora/init_family.hpp"
#include "lottalora/prng.hpp"

namespace ll = lottalora;

// Reference values computed with an independent Python splitmix64.
TEST(Prng, SplitmixReferenceSequence) {
  ll::Stream s(0);
  EXPECT_EQ(s.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(s.next_u64(), 0x6E789E6AA1B965F4ULL);
}

TEST(Prng, DeriveStreamGolden) {
  EXPECT_EQ(ll::derive_stream(42, 0, ll::DrawKind::BackboneWeight).state(), 0x196e01eba8e0a0d4ULL);
  EXPECT_EQ(ll::derive_stream(42, 1, ll::DrawKind::BackboneWeight).state(), 0xf9c2c0931cd997a5ULL);
  EXPECT_EQ(ll::derive_stream(42, 0, ll::DrawKind::DropoutMask).state(), 0x98f6cbcfed6843e8ULL);
  EXPECT_EQ(ll::derive_stream(7, 3, ll::DrawKind::DataShuffle).state(), 0xf4e26a2b64444c87ULL);
}

TEST(Prng, DeriveStreamDeterministic) {
  EXPECT_EQ(ll::derive_stream(9, 4, ll::DrawKind::HeadInit), ll::derive_stream(9, 4, ll::DrawKind::HeadInit));
  EXPECT_NE(ll::derive_stream(42, 0, ll::DrawKind::BackboneWeight).state(),
            ll::derive_stream(42, 1, ll::DrawKind::BackboneWeight).state());
}

TEST(Prng, KindsAndLayersNeverAlias) {
  std::set<std::uint64_t> states;
  const ll::DrawKind kinds[] = {ll::DrawKind::BackboneWeight, ll::DrawKind::AdapterAInit, ll::DrawKind::DropoutMask,
                                ll::DrawKind::DataShuffle, ll::DrawKind::HeadInit};
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 43ULL}) {
    for (std::uint64_t layer = 0; layer < 64; ++layer) {
      for (auto k : kinds) states.insert(ll::derive_stream(seed, layer, k).state());
    }
  }
  EXPECT_EQ(states.size(), 4u * 64u * 5u);
}

TEST(Prng, UnitRangeAndMean) {
  ll::Stream s(123);
  double sum = 0.0;
  const int n = 1'000'000;
  for (int i = 0; i < n; ++i) {
    const double x = s.next_unit();
    ASSERT_GE(x, 0.0);
    ASSERT_LT(x, 1.0);
    sum += x;
  }
  const double mean = sum / n;
  EXPECT_GE(mean, 0.499);
  EXPECT_LE(mean, 0.501);
}

TEST(Prng, GaussianMoments) {
  ll::Stream s(2024);
  const int n = 1'000'000;
  double sum = 0.0;
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double g = s.next_gaussian();
    sum += g;
    sq += g * g;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  EXPECT_LE(std::abs(mean), 0.005);
  EXPECT_GE(var, 0.99);
  EXPECT_LE(var, 1.01);
}

TEST(Prng, BoxMullerDrawOrder) {
  ll::Stream s(0);
  const double first = s.next_gaussian();
  const auto state_after_pair = s.state();
  const double second = s.next_gaussian();
  EXPECT_EQ(s.state(), state_after_pair);  // sine branch is cached, not drawn
  EXPECT_DOUBLE_EQ(first, -1.8839083333524405);
  EXPECT_DOUBLE_EQ(second, 0.8645068595575148);
}

TEST(Prng, GaussianReproducible) {
  ll::Stream a(77);
  ll::Stream b(77);
  for (int i = 0; i < 1001; ++i) {
    const double x = a.next_gaussian();
    const double y = b.next_gaussian();
    ASSERT_EQ(std::memcmp(&x, &y, sizeof x), 0);
  }
  EXPECT_EQ(a, b);
}

TEST(Prng, NextBelowInRangeAndCoversValues) {
  ll::Stream s(5);
  std::array<int, 7> hist{};
  for (int i = 0; i < 70'000; ++i) {
    const auto v = s.next_below(7);
    ASSERT_LT(v, 7u);
    ++hist[v];
  }
  for (int h : hist) {
    EXPECT_GT(h, 9'400);
    EXPECT_LT(h, 10'600);
  }
}

TEST(Prng, ResampleSeeds) {
  EXPECT_EQ(ll::resample_seed(42, 0), 42u);
  EXPECT_EQ(ll::resample_seed(42, 1), 0x6534e4286be49d9eULL);
  std::set<std::uint64_t> seen;
  for (std::uint64_t e = 0; e < 10'000; ++e) seen.insert(ll::resample_seed(42, e));
  EXPECT_EQ(seen.size(), 10'000u);
}

TEST(Prng, OtherStreamsDoNotPerturbBackbone) {
  const auto fam = ll::InitFamily::normal_sigma(0.1);
  const auto before = ll::hash_bytes(ll::make_backbone<float>(42, 0, fam, 32, 16).entries);
  ll::Stream dropout = ll::derive_stream(42, 0, ll::DrawKind::DropoutMask);
  for (int i = 0; i < 1000; ++i) dropout.next_unit();
  ll::Stream shuffle = ll::derive_stream(42, 0, ll::DrawKind::DataShuffle);
  shuffle.next_below(100);
  const auto after = ll::hash_bytes(ll::make_backbone<float>(42, 0, fam, 32, 16).entries);
  EXPECT_EQ(before, after);
}

TEST(Prng, AlgorithmIdIsVersioned) {
  EXPECT_EQ(ll::Stream::algorithm_id(), "splitmix64-boxmuller-v1");
}
