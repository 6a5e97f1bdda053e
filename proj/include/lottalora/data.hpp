#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lottalora/error.hpp"
#include "lottalora/prng.hpp"
#include "lottalora/tensor.hpp"

namespace lottalora {

inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

enum class Split { train, val, test };

struct Dataset {
  MatrixF images;  // n x features, already normalized
  std::vector<int> labels;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  Eigen::Index features() const { return images.cols(); }
};

/// Decoded IDX container: dims plus the raw unsigned-byte payload.
struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::span<const std::uint8_t> payload;
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) {
    throw Error(ErrorCategory::parse, "idx: truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

/// Parses an unsigned-byte IDX file (magic 0x0801 labels, 0x0803 images).
inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  IdxArray out;
  out.magic = detail::read_be32(bytes, 0);
  std::size_t rank = 0;
  if (out.magic == kIdxLabelMagic) rank = 1;
  else if (out.magic == kIdxImageMagic) rank = 3;
  else {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", out.magic);
    throw Error(ErrorCategory::parse, std::string("idx: bad magic ") + buf + " at offset 0");
  }
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    out.dims.push_back(detail::read_be32(bytes, 4 + 4 * i));
    count *= out.dims.back();
  }
  const std::size_t start = 4 + 4 * rank;
  if (bytes.size() < start + count) {
    throw Error(ErrorCategory::parse, "idx: payload truncated at offset " + std::to_string(bytes.size()) +
                                          ", expected " + std::to_string(start + count) + " bytes");
  }
  out.payload = bytes.subspan(start, count);
  return out;
}

/// Pixels scaled to [0, 1] then standardized with the MNIST mean/std.
inline MatrixF parse_idx_images(std::span<const std::uint8_t> bytes) {
  const IdxArray idx = parse_idx(bytes);
  if (idx.magic != kIdxImageMagic) throw Error(ErrorCategory::parse, "idx: expected image file (0x00000803)");
  const Eigen::Index n = idx.dims[0];
  const Eigen::Index features = static_cast<Eigen::Index>(idx.dims[1]) * idx.dims[2];
  MatrixF m(n, features);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double x = idx.payload[static_cast<std::size_t>(i)] / 255.0;
    m.data()[i] = static_cast<float>((x - kMnistMean) / kMnistStd);
  }
  return m;
}

inline std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const IdxArray idx = parse_idx(bytes);
  if (idx.magic != kIdxLabelMagic) throw Error(ErrorCategory::parse, "idx: expected label file (0x00000801)");
  return std::vector<int>(idx.payload.begin(), idx.payload.end());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::data, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

struct MnistSet {
  Dataset train;  // full 60k training file, split later
  Dataset test;
};

/// Loads the four standard MNIST IDX files from `dir`.
inline MnistSet load_mnist(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCategory::data, "data dir not found: " + dir.string());
  auto load = [&](const char* images, const char* labels, Split split) {
    Dataset d;
    d.images = parse_idx_images(read_file(dir / images));
    d.labels = parse_idx_labels(read_file(dir / labels));
    d.split = split;
    if (static_cast<std::size_t>(d.images.rows()) != d.labels.size()) {
      throw Error(ErrorCategory::data, std::string("image/label count mismatch in ") + images);
    }
    return d;
  };
  return {load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::train),
          load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::test)};
}

/// Data directory from an explicit flag, else $LOTTALORA_DATA_DIR.
inline std::optional<std::filesystem::path> resolve_data_dir(const std::string& flag) {
  if (!flag.empty()) return std::filesystem::path(flag);
  if (const char* env = std::getenv("LOTTALORA_DATA_DIR"); env != nullptr && *env != '\0') {
    return std::filesystem::path(env);
  }
  return std::nullopt;
}

inline Dataset subset(const Dataset& d, std::span<const std::size_t> rows, Split split) {
  Dataset out;
  out.split = split;
  out.images.resize(static_cast<Eigen::Index>(rows.size()), d.images.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.images.row(static_cast<Eigen::Index>(i)) = d.images.row(static_cast<Eigen::Index>(rows[i]));
    out.labels.push_back(d.labels[rows[i]]);
  }
  return out;
}

/// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(std::size_t n, Stream& s) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[s.next_below(i)]);
  }
  return idx;
}

struct TrainValSplit {
  Dataset train;
  Dataset val;
};

/// 90/10 split shuffled by the run's DataShuffle stream (layer index 0).
inline TrainValSplit split_train_val(const Dataset& full, std::uint64_t seed) {
  Stream s = derive_stream(seed, 0, DrawKind::DataShuffle);
  const auto perm = permutation(full.size(), s);
  const std::size_t n_val = full.size() / 10;
  std::span<const std::size_t> all(perm);
  return {subset(full, all.subspan(n_val), Split::train), subset(full, all.first(n_val), Split::val)};
}

/// Disjoint digit groups, each paired with the backbone seed that serves it.
struct LabelPartition {
  std::vector<std::vector<int>> groups;
  std::vector<std::uint64_t> seeds;
  bool ooc_mode = false;
  int num_digits = 10;

  int ooc_label() const { return num_digits; }
  int num_outputs() const { return ooc_mode ? num_digits + 1 : num_digits; }

  bool assigned(std::size_t group, int digit) const {
    return std::find(groups[group].begin(), groups[group].end(), digit) != groups[group].end();
  }

  /// Training target for `digit` under `group`'s seed; nullopt when the digit
  /// is not trained under that seed.
  std::optional<int> target(std::size_t group, int digit) const {
    if (assigned(group, digit)) return digit;
    if (ooc_mode) return ooc_label();
    return std::nullopt;
  }
};

inline LabelPartition make_partition(std::vector<std::vector<int>> groups, std::vector<std::uint64_t> seeds,
                                     bool ooc_mode, int num_digits = 10) {
  if (groups.empty()) throw config_error("groups", "need at least one group");
  if (groups.size() != seeds.size()) {
    throw config_error("seeds", std::to_string(seeds.size()) + " seeds for " + std::to_string(groups.size()) + " groups");
  }
  std::set<int> seen;
  for (const auto& g : groups) {
    if (g.empty()) throw config_error("groups", "empty group");
    for (int d : g) {
      if (d < 0 || d >= num_digits) throw config_error("groups", "digit " + std::to_string(d) + " out of range");
      if (!seen.insert(d).second) throw config_error("groups", "digit " + std::to_string(d) + " in two groups");
    }
  }
  return LabelPartition{std::move(groups), std::move(seeds), ooc_mode, num_digits};
}

/// Gaussian clusters: class centers ~ sep * N(0, I), points = center + N(0, I).
/// Labels cycle 0, 1, ..., classes-1.
inline Dataset synthetic_blobs(std::size_t n, int d, int classes, double sep, std::uint64_t seed) {
  if (classes < 1 || n < static_cast<std::size_t>(classes)) throw config_error("n", "must be >= classes");
  if (d < 1) throw config_error("d", "must be >= 1");
  Stream s = derive_stream(seed, 0xB10B5ULL, DrawKind::DataShuffle);
  MatrixD centers(classes, d);
  for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = sep * s.next_gaussian();
  Dataset out;
  out.images.resize(static_cast<Eigen::Index>(n), d);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(classes));
    out.labels[i] = y;
    for (int j = 0; j < d; ++j) {
      out.images(static_cast<Eigen::Index>(i), j) = static_cast<float>(centers(y, j) + s.next_gaussian());
    }
  }
  return out;
}

inline MatrixF gather_rows(const MatrixF& m, std::span<const std::size_t> rows) {
  MatrixF out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace lottalora
