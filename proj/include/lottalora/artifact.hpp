#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lottalora/error.hpp"
#include "lottalora/init_family.hpp"
#include "lottalora/model.hpp"
#include "lottalora/prng.hpp"

namespace lottalora {

using json = nlohmann::json;

inline constexpr std::array<char, 4> kArtifactMagic = {'L', 'T', 'L', 'R'};
inline constexpr std::uint16_t kArtifactVersion = 1;

struct ArtifactTensor {
  std::string name;
  MatrixF value;
};

/// Parsed .ltlr file: JSON header plus the trainable tensors in payload order.
struct Artifact {
  std::uint16_t version = kArtifactVersion;
  json header;
  std::vector<ArtifactTensor> tensors;
};

inline json to_json(const ModelConfig& c) {
  return json{{"preset", c.preset},
              {"hidden", c.hidden},
              {"input_dim", c.input_dim},
              {"num_classes", c.num_classes},
              {"rank", c.rank},
              {"alpha", c.alpha},
              {"scaling", std::string(to_string(c.scaling))},
              {"head_mode", std::string(to_string(c.head))},
              {"dropout", c.dropout},
              {"layernorm", c.layernorm},
              {"mode", std::string(to_string(c.mode))},
              {"b_init", std::string(to_string(c.b_init))}};
}

inline ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.hidden = j.at("hidden").get<std::vector<int>>();
    c.input_dim = j.at("input_dim").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.rank = j.at("rank").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.scaling = parse_scaling_mode(j.at("scaling").get<std::string>());
    c.head = parse_head_mode(j.at("head_mode").get<std::string>());
    c.dropout = j.at("dropout").get<double>();
    c.layernorm = j.at("layernorm").get<bool>();
    c.mode = parse_training_mode(j.at("mode").get<std::string>());
    c.b_init = parse_b_init(j.at("b_init").get<std::string>());
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, std::string("artifact architecture: ") + e.what());
  }
}

/// Header block: everything needed to regenerate the frozen matrices.
template <class T>
json artifact_header(const Model<T>& model) {
  const auto& spec = model.backbone_spec();
  json layers = json::array();
  for (const auto& b : model.backbones()) {
    layers.push_back({{"layer", b->provenance.layer_index},
                      {"rows", b->rows()},
                      {"cols", b->cols()},
                      {"family", b->provenance.family.to_string()}});
  }
  return json{{"prng", spec.algorithm_id},
              {"seed", spec.seed},
              {"architecture", to_json(model.config())},
              {"init", {{"family", spec.family.to_string()}, {"layers", std::move(layers)}}}};
}

template <class T>
Artifact make_artifact(const Model<T>& model, json extra = json::object()) {
  Artifact a;
  a.header = artifact_header(model);
  for (auto& [k, v] : extra.items()) a.header[k] = v;
  for (const auto* p : model.trainable()) a.tensors.push_back({p->name, p->value.template cast<float>()});
  return a;
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCategory::format, std::string("artifact truncated reading ") + what + " at offset " +
                                             std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint64_t uint(std::size_t width, const char* what) {
    auto s = take(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= std::uint64_t{s[i]} << (8 * i);
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/*
 * Layout (all integers little-endian):
 *   magic "LTLR" | version u16 | header_len u32 | header JSON (UTF-8)
 *   | tensor count u32 | per tensor: name_len u16, name, rows u32, cols u32
 *   | payload: f32 row-major, tensors in table order | crc32 u32
 * The CRC covers every byte before it.
 */
inline std::vector<std::uint8_t> pack(const Artifact& a) {
  std::vector<std::uint8_t> out(kArtifactMagic.begin(), kArtifactMagic.end());
  detail::put_u16(out, a.version);
  const std::string header = a.header.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  detail::put_u32(out, static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& t : a.tensors) {
    detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
  }
  for (const auto& t : a.tensors) {
    for (Eigen::Index i = 0; i < t.value.size(); ++i) detail::put_u32(out, std::bit_cast<std::uint32_t>(t.value.data()[i]));
  }
  detail::put_u32(out, detail::crc32_of(out));
  return out;
}

template <class T>
std::vector<std::uint8_t> pack(const Model<T>& model, json extra = json::object()) {
  return pack(make_artifact(model, std::move(extra)));
}

inline Artifact unpack(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kArtifactMagic.begin())) {
    throw Error(ErrorCategory::format, "not an LTLR artifact (bad magic)");
  }
  Artifact a;
  a.version = static_cast<std::uint16_t>(r.uint(2, "version"));
  if (a.version != kArtifactVersion) {
    throw Error(ErrorCategory::incompatibility, "artifact format version " + std::to_string(a.version) +
                                                    " unsupported; expected " + std::to_string(kArtifactVersion));
  }
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(
      bytes[bytes.size() - 4] | (bytes[bytes.size() - 3] << 8) | (bytes[bytes.size() - 2] << 16) |
      (std::uint32_t{bytes[bytes.size() - 1]} << 24));
  if (detail::crc32_of(bytes.first(bytes.size() - 4)) != stored_crc) {
    throw Error(ErrorCategory::integrity, "artifact checksum mismatch");
  }
  r = detail::Reader(bytes.first(bytes.size() - 4));
  r.take(6, "preamble");
  const auto header_len = r.uint(4, "header length");
  const auto header = r.take(header_len, "header");
  try {
    a.header = json::parse(header.begin(), header.end());
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, std::string("artifact header is not valid JSON: ") + e.what());
  }
  const std::string prng = a.header.value("prng", std::string());
  if (prng != kPrngAlgorithmId) {
    throw Error(ErrorCategory::incompatibility,
                "artifact PRNG '" + prng + "' unsupported; expected '" + std::string(kPrngAlgorithmId) + "'");
  }
  const auto count = r.uint(4, "tensor count");
  std::vector<std::pair<std::string, std::array<std::uint32_t, 2>>> table;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.uint(2, "tensor name length");
    const auto name = r.take(name_len, "tensor name");
    const auto rows = static_cast<std::uint32_t>(r.uint(4, "tensor rows"));
    const auto cols = static_cast<std::uint32_t>(r.uint(4, "tensor cols"));
    table.push_back({std::string(name.begin(), name.end()), {rows, cols}});
  }
  for (const auto& [name, shape] : table) {
    ArtifactTensor t{name, MatrixF(shape[0], shape[1])};
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      t.value.data()[i] = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4, "payload")));
    }
    a.tensors.push_back(std::move(t));
  }
  if (r.offset() != bytes.size() - 4) {
    throw Error(ErrorCategory::format, "artifact has " + std::to_string(bytes.size() - 4 - r.offset()) +
                                           " trailing bytes before the checksum");
  }
  return a;
}

inline BackboneSpec backbone_spec_from(const Artifact& a) {
  try {
    BackboneSpec spec;
    spec.algorithm_id = a.header.at("prng").get<std::string>();
    spec.seed = a.header.at("seed").get<std::uint64_t>();
    spec.family = InitFamily::parse(a.header.at("init").at("family").get<std::string>());
    return spec;
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, std::string("artifact header: ") + e.what());
  }
}

/// Rebuilds the model: regenerates every frozen matrix from the header and
/// loads the trainable tensors. A nonzero `scaffold_event` selects that
/// resample draw instead of the base seed.
inline Model<float> reconstruct(const Artifact& a) {
  const BackboneSpec spec = backbone_spec_from(a);
  Model<float> model(model_config_from_json(a.header.at("architecture")), spec);
  auto params = model.trainable();
  if (params.size() != a.tensors.size()) {
    throw Error(ErrorCategory::format, "artifact holds " + std::to_string(a.tensors.size()) +
                                           " tensors; architecture needs " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = a.tensors[i];
    if (t.name != params[i]->name || t.value.rows() != params[i]->value.rows() ||
        t.value.cols() != params[i]->value.cols()) {
      throw Error(ErrorCategory::format, "artifact tensor " + std::to_string(i) + " is '" + t.name + "' " +
                                             shape_string(t.value) + "; expected '" + params[i]->name + "' " +
                                             shape_string(params[i]->value));
    }
    params[i]->value = t.value;
  }
  const auto ev = a.header.find("scaffold_event");
  if (ev != a.header.end() && ev->get<std::uint64_t>() > 0) {
    model.install_backbones(generate_backbones<float>(model.config(), resample_seed(spec.seed, ev->get<std::uint64_t>()),
                                                      spec.family));
  }
  return model;
}

/// Writes via a sibling temp file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCategory::data, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCategory::data, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Fixed pseudo-random probe inputs for bit-exactness checks without data.
inline MatrixF probe_batch(Eigen::Index rows, Eigen::Index cols) {
  Stream s(0x9B0BE5EEDULL);
  MatrixF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(s.next_gaussian());
  return m;
}

template <class T>
std::uint64_t probe_hash(Model<T>& model, Eigen::Index rows = 64) {
  return hash_bytes(model.logits(probe_batch(rows, model.config().input_dim).template cast<T>()));
}

}  // namespace lottalora
