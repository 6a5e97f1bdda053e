#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

#include "lottalora/error.hpp"

namespace lottalora {

/// Dense row-major matrix; every tensor in this library is rank 2.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <class Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Trainable or frozen tensor living outside any graph.
template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Matrix<T> v, bool trainable = true)
      : name(std::move(n)), value(std::move(v)), requires_grad(trainable) {
    grad = Matrix<T>::Zero(value.rows(), value.cols());
  }

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// 64-bit FNV-1a over the raw bytes of a matrix; used as a bit-exactness probe.
template <class T>
std::uint64_t hash_bytes(const Matrix<T>& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = reinterpret_cast<const unsigned char*>(m.data());
  const auto n = static_cast<std::size_t>(m.size()) * sizeof(T);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace lottalora
