#pragma once

#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lottalora/error.hpp"
#include "lottalora/prng.hpp"
#include "lottalora/tensor.hpp"

namespace lottalora {

/// The 22 scaffold initialization families, plus `zero` for the
/// backbone-removed ablation.
enum class Family {
  normal,
  truncated_normal,
  uniform,
  orthogonal,
  kaiming_normal,
  kaiming_uniform,
  xavier_normal,
  xavier_uniform,
  spectral_radius,
  cauchy,
  laplace,
  student_t,
  gaussian_mixture,
  sparse_normal,
  sparse_erdos_renyi,
  beta,
  exponential,
  lowbit16,
  lowbit8,
  lowbit4,
  lowbit2,
  binary,
  zero,
};

/// How sigma is chosen for the sigma-parameterized families. Families with
/// their own variance schedule (Kaiming, Xavier, orthogonal, spectral radius)
/// or an absolute parameterization (uniform, Cauchy, Laplace, mixture, Beta,
/// exponential) ignore it.
enum class Scaling { fan_in, explicit_sigma };

namespace detail {

struct FamilyInfo {
  Family family;
  std::string_view tag;
  bool uses_sigma;
  std::vector<std::pair<std::string_view, double>> defaults;
};

inline const std::vector<FamilyInfo>& family_table() {
  static const std::vector<FamilyInfo> table = {
      {Family::normal, "normal", true, {{"sigma", 1.0}}},
      {Family::truncated_normal, "truncated_normal", true, {{"sigma", 1.0}}},
      {Family::uniform, "uniform", false, {{"a", 0.1}}},
      {Family::orthogonal, "orthogonal", false, {{"gain", 1.0}}},
      {Family::kaiming_normal, "kaiming_normal", false, {{"a", std::sqrt(5.0)}}},
      {Family::kaiming_uniform, "kaiming_uniform", false, {{"a", std::sqrt(5.0)}}},
      {Family::xavier_normal, "xavier_normal", false, {{"gain", 1.0}}},
      {Family::xavier_uniform, "xavier_uniform", false, {{"gain", 1.0}}},
      {Family::spectral_radius, "spectral_radius", false, {{"rho", 0.95}}},
      {Family::cauchy, "cauchy", false, {{"s", 0.1}}},
      {Family::laplace, "laplace", false, {{"b", 0.1}}},
      {Family::student_t, "student_t", true, {{"nu", 3.0}, {"sigma", 1.0}}},
      {Family::gaussian_mixture, "gaussian_mixture", false,
       {{"w1", 0.9}, {"sigma1", 0.05}, {"sigma2", 0.5}}},
      {Family::sparse_normal, "sparse_normal", true, {{"p", 0.2}, {"sigma", 1.0}}},
      {Family::sparse_erdos_renyi, "sparse_erdos_renyi", true, {{"p", 0.2}, {"sigma", 1.0}}},
      {Family::beta, "beta", false, {{"alpha", 2.0}, {"beta", 2.0}, {"scale", 0.1}}},
      {Family::exponential, "exponential", false, {{"lambda", 10.0}}},
      {Family::lowbit16, "lowbit16", true, {{"bits", 16.0}, {"sigma", 1.0}}},
      {Family::lowbit8, "lowbit8", true, {{"bits", 8.0}, {"sigma", 1.0}}},
      {Family::lowbit4, "lowbit4", true, {{"bits", 4.0}, {"sigma", 1.0}}},
      {Family::lowbit2, "lowbit2", true, {{"bits", 2.0}, {"sigma", 1.0}}},
      {Family::binary, "binary", true, {{"sigma", 1.0}}},
      {Family::zero, "zero", false, {}},
  };
  return table;
}

inline const FamilyInfo& info(Family f) {
  for (const auto& e : family_table()) {
    if (e.family == f) return e;
  }
  throw Error(ErrorCategory::configuration, "unregistered family");
}

inline std::string format_real(double v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), end);
}

}  // namespace detail

inline std::string_view family_tag(Family f) { return detail::info(f).tag; }

inline std::optional<Family> parse_family(std::string_view tag) {
  for (const auto& e : detail::family_table()) {
    if (e.tag == tag) return e.family;
  }
  return std::nullopt;
}

/// All 22 families of the distribution-robustness grid (excludes `zero`).
inline std::vector<Family> scaffold_families() {
  std::vector<Family> out;
  for (const auto& e : detail::family_table()) {
    if (e.family != Family::zero) out.push_back(e.family);
  }
  return out;
}

struct InitFamily {
  Family family = Family::normal;
  std::map<std::string, double> params;
  Scaling scaling = Scaling::fan_in;

  /// Family with its default parameters, overridden by `overrides`. Throws a
  /// configuration error naming the offending field.
  static InitFamily make(Family f, const std::map<std::string, double>& overrides = {},
                         Scaling scaling = Scaling::fan_in) {
    InitFamily fam;
    fam.family = f;
    fam.scaling = scaling;
    for (const auto& [k, v] : detail::info(f).defaults) fam.params[std::string(k)] = v;
    for (const auto& [k, v] : overrides) {
      if (!fam.params.contains(k)) {
        throw config_error(k, "not a parameter of family " + std::string(family_tag(f)));
      }
      fam.params[k] = v;
    }
    fam.validate();
    return fam;
  }

  /// N(0, sigma^2) with an explicit sigma; the fixed-scale scaffold of the
  /// MNIST protocol uses sigma = 0.1.
  static InitFamily normal_sigma(double sigma) {
    return make(Family::normal, {{"sigma", sigma}}, Scaling::explicit_sigma);
  }

  double param(const std::string& key) const {
    auto it = params.find(key);
    if (it == params.end()) throw config_error(key, "missing parameter");
    return it->second;
  }

  bool uses_sigma() const { return detail::info(family).uses_sigma; }

  /// Effective sigma for a layer with `fan_in` inputs.
  double sigma_for(Eigen::Index fan_in) const {
    if (scaling == Scaling::fan_in) return 1.0 / std::sqrt(static_cast<double>(fan_in));
    return param("sigma");
  }

  void validate() const {
    auto require = [&](const char* key, bool ok, const char* why) {
      if (!ok) throw config_error(key, why);
    };
    auto has = [&](const char* key) { return params.contains(key); };
    auto is_int = [](double v) { return v == std::floor(v); };
    if (has("sigma")) require("sigma", param("sigma") > 0.0, "must be > 0");
    if (has("a")) require("a", param("a") >= 0.0 && (family != Family::uniform || param("a") > 0.0),
                          "must be positive");
    if (has("gain")) require("gain", param("gain") > 0.0, "must be > 0");
    if (has("rho")) require("rho", param("rho") > 0.0 && param("rho") <= 1.0, "must lie in (0, 1]");
    if (has("s")) require("s", param("s") > 0.0, "must be > 0");
    if (has("b")) require("b", param("b") > 0.0, "must be > 0");
    if (has("nu")) require("nu", param("nu") >= 1.0 && is_int(param("nu")), "must be a positive integer");
    if (has("w1")) require("w1", param("w1") >= 0.0 && param("w1") <= 1.0, "must lie in [0, 1]");
    if (has("sigma1")) require("sigma1", param("sigma1") > 0.0, "must be > 0");
    if (has("sigma2")) require("sigma2", param("sigma2") > 0.0, "must be > 0");
    if (has("p")) require("p", param("p") >= 0.0 && param("p") < 1.0, "must lie in [0, 1)");
    if (has("alpha")) require("alpha", param("alpha") >= 1.0 && is_int(param("alpha")), "must be a positive integer");
    if (has("beta")) require("beta", param("beta") >= 1.0 && is_int(param("beta")), "must be a positive integer");
    if (has("scale")) require("scale", param("scale") > 0.0, "must be > 0");
    if (has("lambda")) require("lambda", param("lambda") > 0.0, "must be > 0");
    if (has("bits")) {
      static const std::set<double> allowed = {1, 2, 4, 8, 16};
      require("bits", allowed.contains(param("bits")), "must be one of 1, 2, 4, 8, 16");
    }
  }

  /// Canonical form, e.g. `normal:scaling=explicit,sigma=0.1`. Parameters are
  /// printed in key order with shortest round-trip formatting.
  std::string to_string() const {
    std::string out(family_tag(family));
    out += ":scaling=";
    out += scaling == Scaling::fan_in ? "fan_in" : "explicit";
    for (const auto& [k, v] : params) {
      out += "," + k + "=" + detail::format_real(v);
    }
    return out;
  }

  static InitFamily parse(std::string_view text) {
    const auto colon = text.find(':');
    const auto tag = text.substr(0, colon);
    const auto fam = parse_family(tag);
    if (!fam) throw config_error("family", "unknown family '" + std::string(tag) + "'");
    std::map<std::string, double> overrides;
    Scaling scaling = Scaling::fan_in;
    if (colon != std::string_view::npos) {
      std::string_view rest = text.substr(colon + 1);
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        const auto item = rest.substr(0, comma);
        const auto eq = item.find('=');
        if (eq == std::string_view::npos) throw config_error("family", "malformed item '" + std::string(item) + "'");
        const std::string key(item.substr(0, eq));
        const std::string_view val = item.substr(eq + 1);
        if (key == "scaling") {
          if (val == "fan_in") scaling = Scaling::fan_in;
          else if (val == "explicit") scaling = Scaling::explicit_sigma;
          else throw config_error("scaling", "expected fan_in or explicit");
        } else {
          double v = 0.0;
          auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
          if (ec != std::errc() || p != val.data() + val.size()) {
            throw config_error(key, "not a number: '" + std::string(val) + "'");
          }
          overrides[key] = v;
        }
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
      }
    }
    return make(*fam, overrides, scaling);
  }

  friend bool operator==(const InitFamily&, const InitFamily&) = default;
};

/// Where a frozen matrix came from; sufficient to regenerate it.
struct Provenance {
  std::uint64_t seed = 0;
  std::uint64_t layer_index = 0;
  InitFamily family;
};

template <class T>
struct BackboneMatrix {
  Matrix<T> entries;
  Provenance provenance;

  Eigen::Index rows() const { return entries.rows(); }
  Eigen::Index cols() const { return entries.cols(); }
};

namespace detail {

inline double open_unit(Stream& s) {
  return (static_cast<double>(s.next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

inline double quantize(double x, double sigma, int bits) {
  const double lo = -3.0 * sigma;
  const double hi = 3.0 * sigma;
  const double levels = std::ldexp(1.0, bits);
  const double step = (hi - lo) / (levels - 1.0);
  const double v = std::clamp(x, lo, hi);
  const double idx = std::nearbyint((v - lo) / step);
  return lo + idx * step;
}

inline double gamma_int(Stream& s, int shape) {
  double acc = 0.0;
  for (int i = 0; i < shape; ++i) acc -= std::log1p(-s.next_unit());
  return acc;
}

inline MatrixD gaussian_matrix(Stream& s, Eigen::Index rows, Eigen::Index cols) {
  MatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s.next_gaussian();
  return m;
}

inline MatrixD orthogonalize(const MatrixD& g) {
  const bool tall = g.rows() >= g.cols();
  const Eigen::MatrixXd work = tall ? Eigen::MatrixXd(g) : Eigen::MatrixXd(g.transpose());
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(work);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(work.rows(), work.cols());
  const auto diag = qr.matrixQR().diagonal();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (diag(j) < 0.0) q.col(j) *= -1.0;
  }
  return tall ? MatrixD(q) : MatrixD(q.transpose());
}

inline double largest_singular_value(const MatrixD& m) {
  const Eigen::MatrixXd cm = m;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(cm);
  return svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
}

}  // namespace detail

/// Draws a rows x cols matrix from `fam`, consuming `stream` in row-major
/// order. fan_in = cols, fan_out = rows.
inline MatrixD draw_matrix(Stream& stream, const InitFamily& fam, Eigen::Index rows, Eigen::Index cols) {
  if (rows < 1) throw config_error("rows", "must be >= 1");
  if (cols < 1) throw config_error("cols", "must be >= 1");
  fam.validate();
  const double fan_in = static_cast<double>(cols);
  const double fan_out = static_cast<double>(rows);
  MatrixD m(rows, cols);
  double* out = m.data();
  const Eigen::Index n = m.size();
  auto fill = [&](auto&& draw) {
    for (Eigen::Index i = 0; i < n; ++i) out[i] = draw();
  };

  switch (fam.family) {
    case Family::normal: {
      const double sigma = fam.sigma_for(cols);
      fill([&] { return sigma * stream.next_gaussian(); });
      break;
    }
    case Family::truncated_normal: {
      const double sigma = fam.sigma_for(cols);
      fill([&] {
        double g = stream.next_gaussian();
        while (std::abs(g) > 2.0) g = stream.next_gaussian();
        return sigma * g;
      });
      break;
    }
    case Family::uniform: {
      const double a = fam.param("a");
      fill([&] { return a * (2.0 * stream.next_unit() - 1.0); });
      break;
    }
    case Family::orthogonal: {
      m = fam.param("gain") * detail::orthogonalize(detail::gaussian_matrix(stream, rows, cols));
      break;
    }
    case Family::kaiming_normal: {
      const double a = fam.param("a");
      const double sd = std::sqrt(2.0 / (fan_in * (1.0 + a * a)));
      fill([&] { return sd * stream.next_gaussian(); });
      break;
    }
    case Family::kaiming_uniform: {
      const double a = fam.param("a");
      const double bound = std::sqrt(6.0 / (fan_in * (1.0 + a * a)));
      fill([&] { return bound * (2.0 * stream.next_unit() - 1.0); });
      break;
    }
    case Family::xavier_normal: {
      const double sd = fam.param("gain") * std::sqrt(2.0 / (fan_in + fan_out));
      fill([&] { return sd * stream.next_gaussian(); });
      break;
    }
    case Family::xavier_uniform: {
      const double bound = fam.param("gain") * std::sqrt(6.0 / (fan_in + fan_out));
      fill([&] { return bound * (2.0 * stream.next_unit() - 1.0); });
      break;
    }
    case Family::spectral_radius: {
      m = detail::gaussian_matrix(stream, rows, cols);
      const double top = detail::largest_singular_value(m);
      if (top > 0.0) m *= fam.param("rho") / top;
      break;
    }
    case Family::cauchy: {
      const double s = fam.param("s");
      fill([&] {
        const double c = s * std::tan(std::numbers::pi * (detail::open_unit(stream) - 0.5));
        return std::clamp(c, -10.0 * s, 10.0 * s);
      });
      break;
    }
    case Family::laplace: {
      const double b = fam.param("b");
      fill([&] {
        const double u = detail::open_unit(stream);
        return u < 0.5 ? b * std::log(2.0 * u) : -b * std::log(2.0 * (1.0 - u));
      });
      break;
    }
    case Family::student_t: {
      const double sigma = fam.sigma_for(cols);
      const int nu = static_cast<int>(fam.param("nu"));
      fill([&] {
        const double z = stream.next_gaussian();
        double chi2 = 0.0;
        for (int k = 0; k < nu; ++k) {
          const double g = stream.next_gaussian();
          chi2 += g * g;
        }
        return sigma * z / std::sqrt(chi2 / nu);
      });
      break;
    }
    case Family::gaussian_mixture: {
      const double w1 = fam.param("w1");
      const double s1 = fam.param("sigma1");
      const double s2 = fam.param("sigma2");
      fill([&] {
        const double sd = stream.next_unit() < w1 ? s1 : s2;
        return sd * stream.next_gaussian();
      });
      break;
    }
    case Family::sparse_normal: {
      const double sigma = fam.sigma_for(cols);
      const double p = fam.param("p");
      fill([&] { return stream.next_unit() < p ? 0.0 : sigma * stream.next_gaussian(); });
      break;
    }
    case Family::sparse_erdos_renyi: {
      // Connectivity pass over the whole matrix first, then edge weights.
      const double sigma = fam.sigma_for(cols);
      const double p = fam.param("p");
      std::vector<char> present(static_cast<std::size_t>(n));
      for (auto& e : present) e = stream.next_unit() >= p;
      for (Eigen::Index i = 0; i < n; ++i) {
        out[i] = present[static_cast<std::size_t>(i)] ? sigma * stream.next_gaussian() : 0.0;
      }
      break;
    }
    case Family::beta: {
      const int ka = static_cast<int>(fam.param("alpha"));
      const int kb = static_cast<int>(fam.param("beta"));
      const double scale = fam.param("scale");
      fill([&] {
        const double x = detail::gamma_int(stream, ka);
        const double y = detail::gamma_int(stream, kb);
        const double u = (x + y) > 0.0 ? x / (x + y) : 0.5;
        return scale * (2.0 * u - 1.0);
      });
      break;
    }
    case Family::exponential: {
      const double lambda = fam.param("lambda");
      fill([&] { return -std::log1p(-stream.next_unit()) / lambda - 1.0 / lambda; });
      break;
    }
    case Family::lowbit16:
    case Family::lowbit8:
    case Family::lowbit4:
    case Family::lowbit2: {
      const double sigma = fam.sigma_for(cols);
      const int bits = static_cast<int>(fam.param("bits"));
      fill([&] { return detail::quantize(sigma * stream.next_gaussian(), sigma, bits); });
      break;
    }
    case Family::binary: {
      const double sigma = fam.sigma_for(cols);
      fill([&] { return stream.next_gaussian() < 0.0 ? -sigma : sigma; });
      break;
    }
    case Family::zero:
      m.setZero();
      break;
  }
  return m;
}

/// Frozen matrix for `layer_index` of the backbone seeded by `seed`.
template <class T>
BackboneMatrix<T> make_backbone(std::uint64_t seed, std::uint64_t layer_index, const InitFamily& fam,
                                Eigen::Index rows, Eigen::Index cols) {
  Stream stream = derive_stream(seed, layer_index, DrawKind::BackboneWeight);
  BackboneMatrix<T> out;
  out.entries = draw_matrix(stream, fam, rows, cols).template cast<T>();
  out.provenance = Provenance{seed, layer_index, fam};
  return out;
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Empirical mean and (population) variance of `n_samples` draws, taken from
/// a matrix `cols` wide. Property-test support.
inline Moments family_moments(const InitFamily& fam, std::int64_t n_samples, Stream& stream,
                              Eigen::Index cols = 256) {
  if (n_samples < 10000) throw config_error("n_samples", "must be >= 10^4");
  const Eigen::Index rows = static_cast<Eigen::Index>((n_samples + cols - 1) / cols);
  const MatrixD m = draw_matrix(stream, fam, rows, cols);
  double sum = 0.0;
  for (std::int64_t i = 0; i < n_samples; ++i) sum += m.data()[i];
  const double mean = sum / static_cast<double>(n_samples);
  double ss = 0.0;
  for (std::int64_t i = 0; i < n_samples; ++i) {
    const double d = m.data()[i] - mean;
    ss += d * d;
  }
  return {mean, ss / static_cast<double>(n_samples)};
}

}  // namespace lottalora
