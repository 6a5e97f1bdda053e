#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lottalora/error.hpp"

namespace lottalora {

struct FlopReport {
  double full = 0.0;
  double lottalora = 0.0;
  double ratio = 0.0;
};

/// Training FLOPs over M tokens: full 6MN, LottaLoRA M(4N + 2N_tr).
/// Frozen weights skip the weight-gradient pass, hence 2/3 + N_tr/(3N).
inline FlopReport flops(double tokens, double n, double n_tr) {
  if (!(n > 0.0)) throw Error(ErrorCategory::domain, "flops: N must be > 0");
  if (tokens < 0.0) throw Error(ErrorCategory::domain, "flops: M must be >= 0");
  if (n_tr < 0.0 || n_tr > n) throw Error(ErrorCategory::domain, "flops: need 0 <= N_tr <= N");
  return {6.0 * tokens * n, tokens * (4.0 * n + 2.0 * n_tr), 2.0 / 3.0 + n_tr / (3.0 * n)};
}

struct MemoryReport {
  double full = 0.0;       // bytes
  double lottalora = 0.0;  // bytes
  double ratio = 0.0;
};

/// Mixed-precision optimizer footprint: 16 bytes per trainable weight
/// (fp16 weight + fp16 grad + two fp32 moments + fp32 master), 2 per frozen.
inline MemoryReport opt_memory(double n, double n_tr) {
  if (!(n > 0.0)) throw Error(ErrorCategory::domain, "opt_memory: N must be > 0");
  if (n_tr < 0.0 || n_tr > n) throw Error(ErrorCategory::domain, "opt_memory: need 0 <= N_tr <= N");
  return {16.0 * n, 2.0 * n + 14.0 * n_tr, 1.0 / 8.0 + 7.0 / 8.0 * n_tr / n};
}

/// Decoder-only transformer: tied embeddings, RMSNorm, no biases.
struct TransformerArch {
  std::string name;
  std::int64_t n_layers = 0;
  std::int64_t d = 0;
  std::int64_t heads = 0;
  std::int64_t mlp = 0;
  std::int64_t vocab = 32000;
  bool tied_embeddings = true;

  void validate() const {
    if (n_layers < 1) throw config_error("n_layers", "must be >= 1");
    if (d < 1) throw config_error("d", "must be >= 1");
    if (mlp < 1) throw config_error("mlp", "must be >= 1");
    if (vocab < 1) throw config_error("vocab", "must be >= 1");
  }
};

inline const std::vector<TransformerArch>& transformer_presets() {
  static const std::vector<TransformerArch> presets = {
      {"3M", 6, 64, 4, 192},
      {"30M", 10, 384, 6, 1024},
      {"300M", 22, 1024, 16, 2816},
      {"600M", 30, 1344, 21, 3584},
      {"900M", 34, 1664, 26, 4608},
  };
  return presets;
}

inline TransformerArch transformer_preset(std::string_view name) {
  for (const auto& a : transformer_presets()) {
    if (a.name == name) return a;
  }
  throw config_error("arch", "unknown transformer scale '" + std::string(name) + "'");
}

struct TransformerCounts {
  std::int64_t total = 0;          // full model
  std::int64_t internal = 0;       // total minus embeddings
  std::int64_t lora_internal = 0;  // adapters + betas on the attention projections
  std::int64_t lottalora_total = 0;
  std::int64_t norm = 0;           // RMSNorm gains, 2d per block + final d
};

/*
 * total         = vocab d + n (4d^2 + 3dm + 2d) + d
 * lora_internal = n (8 r d + 4)
 * The adapter figure covers the four d x d attention projections
 * (2rd + 1 each); lottalora_total adds it to the full count.
 */
inline TransformerCounts transformer_counts(const TransformerArch& a, std::int64_t rank) {
  a.validate();
  if (rank < 0) throw config_error("rank", "must be >= 0");
  TransformerCounts c;
  const std::int64_t d = a.d;
  c.norm = a.n_layers * 2 * d + d;
  c.total = a.vocab * d + a.n_layers * (4 * d * d + 3 * d * a.mlp + 2 * d) + d;
  c.internal = c.total - a.vocab * d;
  c.lora_internal = rank > 0 ? a.n_layers * (8 * rank * d + 4) : 0;
  c.lottalora_total = c.total + c.lora_internal;
  return c;
}

enum class DistFormat { fp16, int4_grouped, lottalora };

inline std::string_view to_string(DistFormat f) {
  switch (f) {
    case DistFormat::fp16: return "fp16";
    case DistFormat::int4_grouped: return "int4_grouped";
    case DistFormat::lottalora: return "lottalora";
  }
  return "fp16";
}

inline constexpr double kMiB = 1024.0 * 1024.0;

/// Distributable bytes. int4 stores 4 bits per weight plus one fp16 scale per
/// 32 weights (4.5 bits); lottalora ships the 8-byte seed plus embeddings,
/// adapters and norm gains in fp16.
inline double dist_size(const TransformerArch& a, std::int64_t rank, DistFormat f) {
  const TransformerCounts c = transformer_counts(a, rank);
  switch (f) {
    case DistFormat::fp16: return 2.0 * static_cast<double>(c.total);
    case DistFormat::int4_grouped: return static_cast<double>(c.total) * 4.5 / 8.0;
    case DistFormat::lottalora:
      return 8.0 + 2.0 * static_cast<double>(a.vocab * a.d + c.lora_internal + c.norm);
  }
  return 0.0;
}

inline double to_mib(double bytes) { return bytes / kMiB; }

/// Smallest rank whose loss is within epsilon of the fully trained loss.
inline std::optional<int> rank_star(const std::map<int, double>& losses, double full_loss, double epsilon) {
  if (epsilon < 0.0 || std::isnan(epsilon)) throw Error(ErrorCategory::domain, "rank_star: epsilon must be >= 0");
  if (losses.empty()) throw config_error("losses", "need at least one rank");
  for (const auto& [r, loss] : losses) {
    if (loss <= full_loss + epsilon) return r;
  }
  return std::nullopt;
}

/// Random-matrix prediction of the largest singular value: 2 sqrt(d) sigma.
inline double rmt_sigma1(double d, double sigma_init) {
  if (d < 1.0) throw Error(ErrorCategory::domain, "rmt_sigma1: d must be >= 1");
  if (!(sigma_init > 0.0)) throw Error(ErrorCategory::domain, "rmt_sigma1: sigma must be > 0");
  return 2.0 * std::sqrt(d) * sigma_init;
}

struct CostReport {
  TransformerArch arch;
  std::int64_t rank = 0;
  TransformerCounts counts;
  FlopReport flops_per_token;
  MemoryReport memory;
  double fp16_bytes = 0.0;
  double int4_bytes = 0.0;
  double lottalora_bytes = 0.0;
};

/// Cost summary for one transformer scale; trainable = adapters + embeddings
/// + norm gains, frozen = the remaining block weights.
inline CostReport cost_report(const TransformerArch& a, std::int64_t rank) {
  CostReport r;
  r.arch = a;
  r.rank = rank;
  r.counts = transformer_counts(a, rank);
  const double n = static_cast<double>(r.counts.lottalora_total);
  const double n_tr = static_cast<double>(r.counts.lora_internal + a.vocab * a.d + r.counts.norm);
  r.flops_per_token = flops(1.0, n, n_tr);
  r.memory = opt_memory(n, n_tr);
  r.fp16_bytes = dist_size(a, rank, DistFormat::fp16);
  r.int4_bytes = dist_size(a, rank, DistFormat::int4_grouped);
  r.lottalora_bytes = dist_size(a, rank, DistFormat::lottalora);
  return r;
}

}  // namespace lottalora
