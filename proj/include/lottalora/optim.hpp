#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "lottalora/error.hpp"
#include "lottalora/tensor.hpp"

namespace lottalora {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments for one parameter list, index-aligned with it.
template <class T>
struct AdamWState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t step = 0;
};

/*
 * Decoupled-decay Adam, PyTorch ordering:
 *   p <- p (1 - lr wd)
 *   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
 *   p <- p - lr m_hat / (sqrt(v_hat) + eps)
 * Only the parameters passed in are touched; frozen matrices never are.
 */
template <class T>
void adamw_step(std::span<Parameter<T>* const> params, AdamWState<T>& state, const AdamWConfig& cfg, double lr_t) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.m.size() != params.size()) {
    throw Error(ErrorCategory::dimension, "adamw: state holds " + std::to_string(state.m.size()) +
                                              " tensors, got " + std::to_string(params.size()));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T decay = static_cast<T>(1.0 - lr_t * cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(lr_t / bc1);
  const T sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
      throw Error(ErrorCategory::dimension, "adamw: gradient of '" + p.name + "' is " + shape_string(p.grad) +
                                                ", value is " + shape_string(p.value));
    }
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto g = p.grad.array();
    p.value.array() *= decay;
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.square();
    p.value.array() -= step_size * m / (v.sqrt() / sqrt_bc2 + eps);
  }
}

/// lr0 (1 + cos(pi step / total)) / 2.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0) {
  if (total_steps <= 0) throw config_error("total_steps", "must be >= 1");
  if (step < 0 || step > total_steps) throw Error(ErrorCategory::domain, "cosine_lr: step outside [0, total]");
  return lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps))) / 2.0;
}

}  // namespace lottalora
