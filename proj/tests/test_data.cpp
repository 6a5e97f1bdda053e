#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>

#include "lottalora/data.hpp"

namespace ll = lottalora;

namespace {

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> concat(std::initializer_list<std::vector<std::uint8_t>> parts) {
  std::vector<std::uint8_t> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::filesystem::path mnist_dir() {
  if (auto d = ll::resolve_data_dir("")) return *d;
  return LOTTALORA_TEST_DATA_DIR;
}

bool have_mnist() { return std::filesystem::exists(mnist_dir() / "train-images-idx3-ubyte"); }

}  // namespace

TEST(Idx, HandBuiltLabels) {
  const auto bytes = concat({be32(0x801), be32(2), {7, 3}});
  EXPECT_EQ(ll::parse_idx_labels(bytes), (std::vector<int>{7, 3}));
}

TEST(Idx, PixelNormalization) {
  const auto bytes = concat({be32(0x803), be32(1), be32(1), be32(2), {255, 0}});
  const auto m = ll::parse_idx_images(bytes);
  ASSERT_EQ(m.rows(), 1);
  ASSERT_EQ(m.cols(), 2);
  EXPECT_NEAR(m(0, 0), (1.0 - 0.1307) / 0.3081, 1e-6);
  EXPECT_NEAR(m(0, 0), 2.8215, 1e-4);
  EXPECT_NEAR(m(0, 1), -0.1307 / 0.3081, 1e-6);
}

TEST(Idx, TruncatedPayloadIsParseError) {
  const auto bytes = concat({be32(0x803), be32(2), be32(2), be32(2), {1, 2, 3}});
  try {
    ll::parse_idx_images(bytes);
    FAIL();
  } catch (const ll::Error& e) {
    EXPECT_EQ(e.category(), ll::ErrorCategory::parse);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
}

TEST(Idx, BadMagicIsParseError) {
  const auto bytes = concat({be32(0x804), be32(1), {0}});
  try {
    ll::parse_idx(bytes);
    FAIL();
  } catch (const ll::Error& e) {
    EXPECT_EQ(e.category(), ll::ErrorCategory::parse);
  }
  EXPECT_THROW(ll::parse_idx(std::vector<std::uint8_t>{0, 0}), ll::Error);
  EXPECT_THROW(ll::parse_idx_images(concat({be32(0x801), be32(1), {0}})), ll::Error);
}

TEST(Idx, MissingDirectoryIsDataError) {
  try {
    ll::load_mnist("/nonexistent/mnist");
    FAIL();
  } catch (const ll::Error& e) {
    EXPECT_EQ(e.category(), ll::ErrorCategory::data);
  }
}

TEST(Mnist, OfficialFilesRoundTrip) {
  if (!have_mnist()) GTEST_SKIP() << "MNIST not found at " << mnist_dir();
  const auto set = ll::load_mnist(mnist_dir());
  ASSERT_EQ(set.train.size(), 60'000u);
  ASSERT_EQ(set.test.size(), 10'000u);
  EXPECT_EQ(set.train.features(), 784);
  std::array<int, 10> train_hist{};
  std::array<int, 10> test_hist{};
  for (int y : set.train.labels) ++train_hist[static_cast<std::size_t>(y)];
  for (int y : set.test.labels) ++test_hist[static_cast<std::size_t>(y)];
  EXPECT_EQ(train_hist, (std::array<int, 10>{5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949}));
  EXPECT_EQ(test_hist, (std::array<int, 10>{980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009}));
  // Normalization applied exactly once: the pixel mean sits at ~0, std ~1.
  const double mean = set.train.images.cast<double>().mean();
  EXPECT_NEAR(mean, 0.0, 0.01);
}

TEST(Split, NinetyTenAndDeterministic) {
  const auto d = ll::synthetic_blobs(1000, 4, 5, 3.0, 1);
  const auto a = ll::split_train_val(d, 42);
  const auto b = ll::split_train_val(d, 42);
  const auto c = ll::split_train_val(d, 43);
  EXPECT_EQ(a.train.size(), 900u);
  EXPECT_EQ(a.val.size(), 100u);
  EXPECT_EQ(a.val.labels, b.val.labels);
  EXPECT_EQ(ll::hash_bytes(a.val.images), ll::hash_bytes(b.val.images));
  EXPECT_NE(ll::hash_bytes(a.val.images), ll::hash_bytes(c.val.images));
  EXPECT_EQ(a.train.split, ll::Split::train);
  EXPECT_EQ(a.val.split, ll::Split::val);
}

TEST(Partition, PaperPartitionValid) {
  const auto p = ll::make_partition({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}}, {42, 43, 44}, false);
  EXPECT_EQ(p.num_outputs(), 10);
  EXPECT_EQ(p.target(0, 2), 2);
  EXPECT_FALSE(p.target(0, 5).has_value());
  EXPECT_FALSE(p.target(1, 0).has_value());
}

TEST(Partition, OverlapRejected) {
  try {
    ll::make_partition({{1, 2}, {2, 3}}, {1, 2}, false);
    FAIL();
  } catch (const ll::Error& e) {
    EXPECT_EQ(e.category(), ll::ErrorCategory::configuration);
  }
  EXPECT_THROW(ll::make_partition({{1, 2}}, {1, 2}, false), ll::Error);
  EXPECT_THROW(ll::make_partition({{1, 12}}, {1}, false), ll::Error);
}

TEST(Partition, OocModeMapsZeroToOocUnderEverySeed) {
  const auto p = ll::make_partition({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}}, {42, 43, 44}, true);
  EXPECT_EQ(p.num_outputs(), 11);
  for (std::size_t g = 0; g < 3; ++g) EXPECT_EQ(p.target(g, 0), p.ooc_label());
  EXPECT_EQ(p.target(0, 5), p.ooc_label());
  EXPECT_EQ(p.target(1, 5), 5);
}

TEST(Blobs, DeterministicAndShaped) {
  const auto a = ll::synthetic_blobs(30, 8, 3, 10.0, 5);
  const auto b = ll::synthetic_blobs(30, 8, 3, 10.0, 5);
  EXPECT_EQ(ll::hash_bytes(a.images), ll::hash_bytes(b.images));
  EXPECT_EQ(a.labels, b.labels);
  const auto one = ll::synthetic_blobs(3, 8, 3, 10.0, 5);
  EXPECT_EQ(one.labels, (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(ll::synthetic_blobs(2, 8, 3, 10.0, 5), ll::Error);
}

TEST(Permutation, IsAPermutation) {
  ll::Stream s(3);
  auto p = ll::permutation(500, s);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(p[i], i);
}
