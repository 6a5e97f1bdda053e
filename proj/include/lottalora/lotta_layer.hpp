#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <string_view>

#include "lottalora/autograd.hpp"
#include "lottalora/init_family.hpp"
#include "lottalora/prng.hpp"
#include "lottalora/tensor.hpp"

namespace lottalora {

/// Adapter path coefficient: alpha / r (standard) or alpha / sqrt(r).
enum class ScalingMode { standard, rank_stabilized };

/// Initial value of B. zeros keeps the adapter path silent at step 0; matched
/// draws B uniform with variance 1 / (scale^2 r), so scale * B A has the entry
/// variance of a Kaiming-uniform dense layer.
enum class BInit { zeros, kaiming_uniform, matched };

inline std::string_view to_string(ScalingMode m) {
  return m == ScalingMode::standard ? "standard" : "rslora";
}

inline std::string_view to_string(BInit b) {
  switch (b) {
    case BInit::zeros: return "zeros";
    case BInit::kaiming_uniform: return "kaiming_uniform";
    case BInit::matched: return "matched";
  }
  return "zeros";
}

inline double adapter_scale(double alpha, int rank, ScalingMode mode) {
  return mode == ScalingMode::standard ? alpha / rank : alpha / std::sqrt(static_cast<double>(rank));
}

/// Kaiming-uniform bound with a = sqrt(5): sqrt(6 / (fan_in (1 + a^2))).
inline double kaiming_uniform_bound(Eigen::Index fan_in) {
  return std::sqrt(6.0 / (static_cast<double>(fan_in) * 6.0));
}

template <class T>
Matrix<T> kaiming_uniform(Stream& s, Eigen::Index rows, Eigen::Index cols) {
  const double bound = kaiming_uniform_bound(cols);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<T>(bound * (2.0 * s.next_unit() - 1.0));
  }
  return m;
}

/// Trainable low-rank correction (A, B) plus the backbone gate beta.
template <class T>
struct AdapterState {
  Parameter<T> A;     // r x d_in
  Parameter<T> B;     // d_out x r
  Parameter<T> beta;  // 1 x 1
  double alpha = 1.0;
  int rank = 1;
  ScalingMode mode = ScalingMode::standard;

  double scale() const { return adapter_scale(alpha, rank, mode); }
};

/// A Kaiming-uniform from `stream`, B per `b_init` (random B is drawn from the
/// same stream after A), beta = 1.
template <class T>
AdapterState<T> init_adapter(int rank, Eigen::Index d_in, Eigen::Index d_out, double alpha, ScalingMode mode,
                             Stream& stream, BInit b_init = BInit::zeros, const std::string& prefix = "") {
  if (rank < 1) throw config_error("rank", "must be >= 1");
  if (!(alpha > 0.0)) throw config_error("alpha", "must be > 0");
  AdapterState<T> a;
  a.alpha = alpha;
  a.rank = rank;
  a.mode = mode;
  a.A = Parameter<T>(prefix + "A", kaiming_uniform<T>(stream, rank, d_in));
  Matrix<T> b = Matrix<T>::Zero(d_out, rank);
  if (b_init == BInit::kaiming_uniform) b = kaiming_uniform<T>(stream, d_out, rank);
  if (b_init == BInit::matched) {
    const double bound = std::sqrt(3.0 / static_cast<double>(rank)) / a.scale();
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<T>(bound * (2.0 * stream.next_unit() - 1.0));
  }
  a.B = Parameter<T>(prefix + "B", std::move(b));
  a.beta = Parameter<T>(prefix + "beta", Matrix<T>::Constant(1, 1, T(1)));
  return a;
}

/*
 * h_out = beta * W_seed h_in + scale * B A h_in
 *
 * W_seed is shared and never written; it enters every graph as a constant
 * leaf. With LayerNorm enabled the normalization (trainable affine) is applied
 * to the sum, before the caller's activation. Bias is outside both paths and
 * fixed at zero, so it is not materialized.
 */
template <class T>
struct LottaLayer {
  std::shared_ptr<const BackboneMatrix<T>> backbone;
  AdapterState<T> adapter;
  bool layernorm = false;
  Parameter<T> ln_gamma;
  Parameter<T> ln_beta;

  Eigen::Index d_in() const { return backbone->cols(); }
  Eigen::Index d_out() const { return backbone->rows(); }

  void enable_layernorm(const std::string& prefix = "") {
    layernorm = true;
    ln_gamma = Parameter<T>(prefix + "ln_gamma", Matrix<T>::Ones(1, d_out()));
    ln_beta = Parameter<T>(prefix + "ln_beta", Matrix<T>::Zero(1, d_out()));
  }

  Var<T> forward(Graph<T>& g, Var<T> h) {
    if (h.cols() != d_in()) {
      throw Error(ErrorCategory::dimension, "lotta layer expects d_in " + std::to_string(d_in()) +
                                                ", got input " + shape_string(h.value()));
    }
    Var<T> frozen = g.linear(h, g.input(backbone->entries));
    Var<T> gated = g.scale(frozen, g.param(adapter.beta));
    Var<T> low = g.linear(h, g.param(adapter.A));
    Var<T> up = g.linear(low, g.param(adapter.B));
    Var<T> out = g.add(gated, g.scale(up, static_cast<T>(adapter.scale())));
    if (layernorm) out = g.layernorm(out, g.param(ln_gamma), g.param(ln_beta));
    return out;
  }

  /// Merged d_out x d_in matrix beta W_seed + scale B A.
  Matrix<T> effective_weight() const {
    Matrix<T> w = adapter.beta.value(0, 0) * backbone->entries;
    w.noalias() += static_cast<T>(adapter.scale()) * (adapter.B.value * adapter.A.value);
    return w;
  }
};

/// Standard trainable affine layer y = x W^T + b (full-training mode and the
/// full classification head).
template <class T>
struct DenseLayer {
  Parameter<T> weight;  // d_out x d_in
  Parameter<T> bias;    // 1 x d_out

  Var<T> forward(Graph<T>& g, Var<T> h) {
    return g.add_row(g.linear(h, g.param(weight)), g.param(bias));
  }
};

/// Kaiming-uniform weight, zero bias.
template <class T>
DenseLayer<T> make_dense(Eigen::Index d_in, Eigen::Index d_out, Stream& s, const std::string& prefix) {
  DenseLayer<T> d;
  d.weight = Parameter<T>(prefix + "weight", kaiming_uniform<T>(s, d_out, d_in));
  d.bias = Parameter<T>(prefix + "bias", Matrix<T>::Zero(1, d_out));
  return d;
}

/// Power-iteration estimate of the largest singular value, in double.
template <class Derived>
double spectral_norm(const Eigen::MatrixBase<Derived>& w, int iters = 100) {
  const Eigen::MatrixXd m = w.template cast<double>();
  if (m.size() == 0 || m.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  Stream s(0x5EC7A1ULL);
  Eigen::VectorXd v(m.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = s.next_gaussian();
  v.normalize();
  double sigma = 0.0;
  for (int k = 0; k < iters; ++k) {
    Eigen::VectorXd u = m * v;
    const double un = u.norm();
    if (un == 0.0) return 0.0;
    v = m.transpose() * (u / un);
    const double vn = v.norm();
    if (vn == 0.0) return 0.0;
    sigma = vn;
    v /= vn;
  }
  return sigma;
}

}  // namespace lottalora
