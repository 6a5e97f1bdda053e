#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lottalora/error.hpp"
#include "lottalora/prng.hpp"
#include "lottalora/tensor.hpp"

namespace lottalora {

template <class T>
class Graph;

/// Handle to a node of a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
};

/*
 * Tape of operations for reverse-mode differentiation.
 *
 * Nodes are appended in evaluation order, which is a topological order, and
 * backward() walks them once in reverse. Leaves bound to a Parameter add their
 * gradient into Parameter::grad; frozen leaves (requires_grad == false) and
 * everything depending only on them receive no gradient at all, so no weight
 * gradient is ever formed for a frozen matrix.
 */
template <class T>
class Graph {
 public:
  using Mat = Matrix<T>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const Mat& value(Var<T> v) const { return nodes_.at(v.id).value(); }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() target with respect to `v`; zeros if
  /// nothing flowed into it.
  Mat grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    if (!n.has_grad) return Mat::Zero(n.value().rows(), n.value().cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return visits_; }

  // Leaves --------------------------------------------------------------

  /// Constant leaf referencing caller-owned storage, which must outlive the graph.
  Var<T> input(const Mat& m) {
    auto& n = push();
    n.external = &m;
    return last();
  }

  Var<T> constant(Mat m) {
    auto& n = push();
    n.owned = std::move(m);
    return last();
  }

  /// Leaf bound to a parameter; gradients accumulate into p.grad.
  Var<T> param(Parameter<T>& p) {
    auto& n = push();
    n.external = &p.value;
    n.requires_grad = p.requires_grad;
    n.param = p.requires_grad ? &p : nullptr;
    return last();
  }

  /// Leaf that records gradients on the node only (read back with grad()).
  Var<T> variable(Mat m) {
    auto& n = push();
    n.owned = std::move(m);
    n.requires_grad = true;
    return last();
  }

  // Operations -----------------------------------------------------------

  /// x[m x k] * w[n x k]^T -> [m x n]
  Var<T> linear(Var<T> x, Var<T> w) {
    const Mat& xv = value(x);
    const Mat& wv = value(w);
    if (xv.cols() != wv.cols()) {
      throw Error(ErrorCategory::dimension,
                  "linear: input " + shape_string(xv) + " vs weight " + shape_string(wv));
    }
    Mat out(xv.rows(), wv.rows());
    out.noalias() = xv * wv.transpose();
    return record(std::move(out), {x, w}, [x, w](Graph& g, const Mat& dy) {
      if (g.requires_grad(x)) g.accumulate(x, dy * g.value(w));
      if (g.requires_grad(w)) g.accumulate(w, dy.transpose() * g.value(x));
    });
  }

  /// a[m x k] * b[k x n] -> [m x n]
  Var<T> matmul(Var<T> a, Var<T> b) {
    const Mat& av = value(a);
    const Mat& bv = value(b);
    if (av.cols() != bv.rows()) {
      throw Error(ErrorCategory::dimension,
                  "matmul: " + shape_string(av) + " x " + shape_string(bv));
    }
    Mat out(av.rows(), bv.cols());
    out.noalias() = av * bv;
    return record(std::move(out), {a, b}, [a, b](Graph& g, const Mat& dy) {
      if (g.requires_grad(a)) g.accumulate(a, dy * g.value(b).transpose());
      if (g.requires_grad(b)) g.accumulate(b, g.value(a).transpose() * dy);
    });
  }

  Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape("add", a, b);
    Mat out = value(a) + value(b);
    return record(std::move(out), {a, b}, [a, b](Graph& g, const Mat& dy) {
      if (g.requires_grad(a)) g.accumulate(a, dy);
      if (g.requires_grad(b)) g.accumulate(b, dy);
    });
  }

  /// x[m x n] + bias[1 x n] broadcast over rows.
  Var<T> add_row(Var<T> x, Var<T> bias) {
    const Mat& xv = value(x);
    const Mat& bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
      throw Error(ErrorCategory::dimension,
                  "add_row: input " + shape_string(xv) + " vs bias " + shape_string(bv));
    }
    Mat out = xv.rowwise() + bv.row(0);
    return record(std::move(out), {x, bias}, [x, bias](Graph& g, const Mat& dy) {
      if (g.requires_grad(x)) g.accumulate(x, dy);
      if (g.requires_grad(bias)) g.accumulate(bias, column_sums(dy));
    });
  }

  /// s[1 x 1] * x
  Var<T> scale(Var<T> x, Var<T> s) {
    const Mat& sv = value(s);
    if (sv.rows() != 1 || sv.cols() != 1) {
      throw Error(ErrorCategory::dimension, "scale: factor must be [1x1], got " + shape_string(sv));
    }
    Mat out = sv(0, 0) * value(x);
    return record(std::move(out), {x, s}, [x, s](Graph& g, const Mat& dy) {
      if (g.requires_grad(x)) g.accumulate(x, g.value(s)(0, 0) * dy);
      if (g.requires_grad(s)) {
        const Mat& xv = g.value(x);
        double acc = 0.0;
        for (Eigen::Index i = 0; i < xv.size(); ++i) {
          acc += static_cast<double>(dy.data()[i]) * static_cast<double>(xv.data()[i]);
        }
        g.accumulate(s, Mat::Constant(1, 1, static_cast<T>(acc)));
      }
    });
  }

  Var<T> scale(Var<T> x, T c) {
    Mat out = c * value(x);
    return record(std::move(out), {x}, [x, c](Graph& g, const Mat& dy) {
      if (g.requires_grad(x)) g.accumulate(x, c * dy);
    });
  }

  Var<T> relu(Var<T> x) {
    Mat out = value(x).cwiseMax(T(0));
    const std::size_t self = nodes_.size();
    return record(std::move(out), {x}, [x, self](Graph& g, const Mat& dy) {
      if (!g.requires_grad(x)) return;
      const Mat& y = g.nodes_[self].value();
      g.accumulate(x, (y.array() > T(0)).select(dy.array(), T(0)).matrix());
    });
  }

  /// Inverted dropout: survivors scaled by 1/(1-p). Identity when !train or
  /// p == 0. Consumes one next_unit() per element, row-major.
  Var<T> dropout(Var<T> x, double p, Stream& mask_stream, bool train) {
    if (!(p >= 0.0 && p < 1.0)) throw config_error("dropout", "p must lie in [0, 1)");
    if (!train || p == 0.0) return x;
    const Mat& xv = value(x);
    Mat mask(xv.rows(), xv.cols());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = mask_stream.next_unit() >= p ? keep_scale : T(0);
    }
    Mat out = xv.cwiseProduct(mask);
    return record(std::move(out), {x}, [x, mask = std::move(mask)](Graph& g, const Mat& dy) {
      if (g.requires_grad(x)) g.accumulate(x, dy.cwiseProduct(mask));
    });
  }

  /// Per-row normalization over the last dimension, eps = 1e-5, followed by
  /// the affine gamma[1 x n] * xhat + beta[1 x n].
  Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
    const Mat& xv = value(x);
    const Eigen::Index n = xv.cols();
    if (value(gamma).rows() != 1 || value(gamma).cols() != n || value(beta).rows() != 1 ||
        value(beta).cols() != n) {
      throw Error(ErrorCategory::dimension, "layernorm: input " + shape_string(xv) + " vs gamma " +
                                                shape_string(value(gamma)) + " / beta " +
                                                shape_string(value(beta)));
    }
    Mat xhat(xv.rows(), n);
    std::vector<double> inv_std(static_cast<std::size_t>(xv.rows()));
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      double mean = 0.0;
      for (Eigen::Index c = 0; c < n; ++c) mean += xv(r, c);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (Eigen::Index c = 0; c < n; ++c) {
        const double d = xv(r, c) - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      for (Eigen::Index c = 0; c < n; ++c) xhat(r, c) = static_cast<T>((xv(r, c) - mean) * is);
    }
    Mat out = (xhat.array().rowwise() * value(gamma).row(0).array()).matrix();
    out.rowwise() += value(beta).row(0);
    return record(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, const Mat& dy) {
          const Eigen::Index cols = xhat.cols();
          if (g.requires_grad(gamma)) {
            g.accumulate(gamma, column_sums(Mat(dy.cwiseProduct(xhat))));
          }
          if (g.requires_grad(beta)) g.accumulate(beta, column_sums(dy));
          if (!g.requires_grad(x)) return;
          const auto& gv = g.value(gamma);
          Mat dx(dy.rows(), cols);
          for (Eigen::Index r = 0; r < dy.rows(); ++r) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (Eigen::Index c = 0; c < cols; ++c) {
              const double d = static_cast<double>(dy(r, c)) * gv(0, c);
              mean_d += d;
              mean_dx += d * xhat(r, c);
            }
            mean_d /= static_cast<double>(cols);
            mean_dx /= static_cast<double>(cols);
            const double is = inv_std[static_cast<std::size_t>(r)];
            for (Eigen::Index c = 0; c < cols; ++c) {
              const double d = static_cast<double>(dy(r, c)) * gv(0, c);
              dx(r, c) = static_cast<T>(is * (d - mean_d - xhat(r, c) * mean_dx));
            }
          }
          g.accumulate(x, dx);
        });
  }

  /// Mean softmax cross-entropy over the batch; returns a [1x1] node.
  Var<T> softmax_xent(Var<T> logits, std::span<const int> labels) {
    const Mat& z = value(logits);
    if (static_cast<Eigen::Index>(labels.size()) != z.rows()) {
      throw Error(ErrorCategory::dimension, "softmax_xent: " + std::to_string(labels.size()) +
                                                " labels for logits " + shape_string(z));
    }
    Mat probs = softmax_rows(z);
    double loss = 0.0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const int y = labels[static_cast<std::size_t>(r)];
      if (y < 0 || y >= z.cols()) {
        throw Error(ErrorCategory::data, "label " + std::to_string(y) + " out of range [0, " +
                                             std::to_string(z.cols()) + ")");
      }
      double m = z(r, 0);
      for (Eigen::Index c = 1; c < z.cols(); ++c) m = std::max<double>(m, z(r, c));
      double s = 0.0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) s += std::exp(static_cast<double>(z(r, c)) - m);
      loss += std::log(s) + m - static_cast<double>(z(r, y));
    }
    const double n = static_cast<double>(z.rows());
    std::vector<int> ys(labels.begin(), labels.end());
    return record(Mat::Constant(1, 1, static_cast<T>(loss / n)), {logits},
                  [logits, probs = std::move(probs), ys = std::move(ys), n](Graph& g, const Mat& dy) {
                    if (!g.requires_grad(logits)) return;
                    Mat d = probs;
                    for (std::size_t r = 0; r < ys.size(); ++r) {
                      d(static_cast<Eigen::Index>(r), ys[r]) -= T(1);
                    }
                    g.accumulate(logits, (dy(0, 0) / static_cast<T>(n)) * d);
                  });
  }

  /// Mean squared error over all elements; returns a [1x1] node.
  Var<T> mse(Var<T> pred, const Mat& target) {
    const Mat& pv = value(pred);
    if (pv.rows() != target.rows() || pv.cols() != target.cols()) {
      throw Error(ErrorCategory::dimension,
                  "mse: prediction " + shape_string(pv) + " vs target " + shape_string(target));
    }
    Mat diff = pv - target;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < diff.size(); ++i) {
      acc += static_cast<double>(diff.data()[i]) * diff.data()[i];
    }
    const double n = static_cast<double>(diff.size());
    return record(Mat::Constant(1, 1, static_cast<T>(acc / n)), {pred},
                  [pred, diff = std::move(diff), n](Graph& g, const Mat& dy) {
                    if (g.requires_grad(pred)) g.accumulate(pred, (dy(0, 0) * static_cast<T>(2.0 / n)) * diff);
                  });
  }

  // Backward ---------------------------------------------------------------

  /// Reverse sweep from a [1x1] node. A graph may be swept once.
  void backward(Var<T> loss) {
    if (swept_) throw Error(ErrorCategory::run, "backward called twice on the same graph");
    auto& root = nodes_.at(loss.id);
    if (root.value().rows() != 1 || root.value().cols() != 1) {
      throw Error(ErrorCategory::dimension, "backward: target must be [1x1], got " + shape_string(root.value()));
    }
    swept_ = true;
    if (!root.requires_grad) return;
    root.grad = Mat::Ones(1, 1);
    root.has_grad = true;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad) continue;
      ++visits_;
      if (n.param != nullptr) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        n.backward(*this, n.grad);
      }
    }
  }

  static Mat softmax_rows(const Mat& z) {
    Mat p(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      double m = z(r, 0);
      for (Eigen::Index c = 1; c < z.cols(); ++c) m = std::max<double>(m, z(r, c));
      double s = 0.0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) s += std::exp(static_cast<double>(z(r, c)) - m);
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        p(r, c) = static_cast<T>(std::exp(static_cast<double>(z(r, c)) - m) / s);
      }
    }
    return p;
  }

 private:
  using Backward = std::function<void(Graph&, const Mat&)>;

  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    Backward backward;

    const Mat& value() const { return external != nullptr ? *external : owned; }
  };

  Node& push() {
    nodes_.emplace_back();
    return nodes_.back();
  }

  Var<T> last() { return Var<T>{this, nodes_.size() - 1}; }

  Var<T> record(Mat out, std::initializer_list<Var<T>> inputs, Backward bw) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    auto& n = push();
    n.owned = std::move(out);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(bw);
    return last();
  }

  template <class Expr>
  void accumulate(Var<T> v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  static Mat column_sums(const Mat& m) {
    Mat out(1, m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double s = 0.0;
      for (Eigen::Index r = 0; r < m.rows(); ++r) s += m(r, c);
      out(0, c) = static_cast<T>(s);
    }
    return out;
  }

  void require_same_shape(const char* op, Var<T> a, Var<T> b) const {
    const Mat& av = value(a);
    const Mat& bv = value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
      throw Error(ErrorCategory::dimension,
                  std::string(op) + ": " + shape_string(av) + " vs " + shape_string(bv));
    }
  }

  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
  bool swept_ = false;
};

/// Builds a scalar loss into the supplied graph. Must be deterministic.
template <class T>
using LossBuilder = std::function<Var<T>(Graph<T>&)>;

/*
 * Central-difference gradient check.
 *
 * Analytic gradients come from one backward pass; numeric ones from
 * (L(p + eps) - L(p - eps)) / 2eps on every coordinate when there are at most
 * `n_coords`, otherwise on `n_coords` coordinates sampled with a fixed stream.
 * Relative error is |a - n| / max(|a|, |n|, 1e-6).
 */
template <class T>
double finite_diff_check(const LossBuilder<T>& loss_fn, std::span<Parameter<T>* const> params,
                         double eps = 1e-5, std::size_t n_coords = 64) {
  if (!(eps > 0.0)) throw Error(ErrorCategory::domain, "finite_diff_check: eps must be > 0");
  n_coords = std::max<std::size_t>(n_coords, 64);
  for (auto* p : params) p->zero_grad();
  {
    Graph<T> g;
    g.backward(loss_fn(g));
  }
  struct Coord {
    Parameter<T>* p;
    Eigen::Index i;
  };
  std::vector<Coord> all;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) all.push_back({p, i});
  }
  std::vector<Coord> picked;
  if (all.size() <= n_coords) {
    picked = all;
  } else {
    Stream s(0xF1D1FFULL);
    for (std::size_t k = 0; k < n_coords; ++k) picked.push_back(all[s.next_below(all.size())]);
  }
  auto eval = [&] {
    Graph<T> g;
    return static_cast<double>(loss_fn(g).scalar());
  };
  double worst = 0.0;
  for (const auto& c : picked) {
    T& x = c.p->value.data()[c.i];
    const T saved = x;
    x = static_cast<T>(saved + eps);
    const double up = eval();
    x = static_cast<T>(saved - eps);
    const double down = eval();
    x = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = c.p->grad.data()[c.i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

}  // namespace lottalora
