#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lottalora/autograd.hpp"
#include "lottalora/data.hpp"
#include "lottalora/error.hpp"
#include "lottalora/model.hpp"
#include "lottalora/optim.hpp"
#include "lottalora/prng.hpp"

namespace lottalora {

/// Scaffold redraw cadence (Meta-LoRA ablation).
struct Resample {
  enum class Kind { static_scaffold, per_epoch, per_batch, microbatch };
  Kind kind = Kind::static_scaffold;
  int k = 1;

  /// "static", "epoch", "batch:k", "micro:k".
  static Resample parse(std::string_view s) {
    auto with_k = [&](std::string_view prefix, Kind kind) -> std::optional<Resample> {
      if (s.substr(0, prefix.size()) != prefix) return std::nullopt;
      int k = 0;
      const auto digits = s.substr(prefix.size());
      auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
      if (ec != std::errc() || p != digits.data() + digits.size() || digits.empty()) {
        throw config_error("resample", "bad k in '" + std::string(s) + "'");
      }
      Resample r{kind, k};
      r.validate();
      return r;
    };
    if (s == "static") return {};
    if (s == "epoch" || s == "per_epoch") return {Kind::per_epoch, 1};
    if (auto r = with_k("batch:", Kind::per_batch)) return *r;
    if (auto r = with_k("micro:", Kind::microbatch)) return *r;
    throw config_error("resample", "expected static, epoch, batch:k or micro:k, got '" + std::string(s) + "'");
  }

  void validate() const {
    if ((kind == Kind::per_batch || kind == Kind::microbatch) && k < 2) {
      throw config_error("resample", "k must be >= 2");
    }
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::static_scaffold: return "static";
      case Kind::per_epoch: return "epoch";
      case Kind::per_batch: return "batch:" + std::to_string(k);
      case Kind::microbatch: return "micro:" + std::to_string(k);
    }
    return "static";
  }

  bool is_static() const { return kind == Kind::static_scaffold; }
};

struct TrainConfig {
  AdamWConfig optimizer;
  int batch_size = 128;
  int epochs = 20;
  Resample resample;
  /// Static schedules only; resampled runs always report their final weights.
  bool select_best_val = true;

  void validate() const {
    if (!(optimizer.lr > 0.0)) throw config_error("lr", "must be > 0");
    if (optimizer.weight_decay < 0.0) throw config_error("weight_decay", "must be >= 0");
    if (batch_size < 1) throw config_error("batch_size", "must be >= 1");
    if (epochs < 1) throw config_error("epochs", "must be >= 1");
    resample.validate();
  }
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  std::vector<double> betas;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  int best_epoch = -1;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  std::int64_t test_correct = 0;
  std::vector<double> final_betas;
  std::uint64_t backbone_hash = 0;
  std::uint64_t scaffold_event = 0;  // resample event the selected weights were evaluated with
  std::int64_t scaffold_redraws = 0;
  double wall_seconds = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::int64_t correct = 0;
};

/// Eval-mode loss and accuracy over a dataset, in chunks.
template <class T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::span<const int> targets = {},
                    std::size_t chunk = 2000) {
  const std::span<const int> labels = targets.empty() ? std::span<const int>(data.labels) : targets;
  EvalResult r;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    const Matrix<T> x = data.images.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n))
                            .template cast<T>();
    Graph<T> g;
    Var<T> logits = model.forward(g, x, false);
    const auto y = labels.subspan(start, n);
    loss_sum += static_cast<double>(g.softmax_xent(logits, y).scalar()) * static_cast<double>(n);
    const Matrix<T>& z = logits.value();
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      Eigen::Index arg = 0;
      z.row(i).maxCoeff(&arg);
      if (arg == y[static_cast<std::size_t>(i)]) ++r.correct;
    }
  }
  r.loss = data.size() == 0 ? 0.0 : loss_sum / static_cast<double>(data.size());
  r.accuracy = data.size() == 0 ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(data.size());
  return r;
}

/// Redraws every frozen matrix for resample event `event` (event 0 is the
/// original backbone). A no-op for the static schedule.
template <class T>
void resample_backbone(Model<T>& model, const Resample& schedule, std::uint64_t event) {
  if (schedule.is_static()) return;
  if (model.config().mode != TrainingMode::lottalora) {
    throw config_error("resample", "only meaningful in lottalora mode");
  }
  const auto& spec = model.backbone_spec();
  model.install_backbones(
      generate_backbones<T>(model.config(), resample_seed(spec.seed, event), spec.family));
}

template <class T>
struct RunResult {
  Model<T> model;
  RunMetrics metrics;
};

namespace detail {

template <class T>
struct Snapshot {
  std::vector<Matrix<T>> values;
  BackboneSet<T> backbones;
  std::uint64_t event = 0;
};

template <class T>
Snapshot<T> snapshot(Model<T>& model, std::uint64_t event) {
  Snapshot<T> s;
  for (const auto* p : model.trainable()) s.values.push_back(p->value);
  s.backbones = model.backbones();
  s.event = event;
  return s;
}

template <class T>
void restore(Model<T>& model, const Snapshot<T>& s) {
  auto params = model.trainable();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.values[i];
  if (!s.backbones.empty()) model.install_backbones(s.backbones);
}

template <class T>
std::int64_t count_correct(const Matrix<T>& z, std::span<const int> y) {
  std::int64_t c = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index arg = 0;
    z.row(i).maxCoeff(&arg);
    if (arg == y[static_cast<std::size_t>(i)]) ++c;
  }
  return c;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochMetrics&)>;

/*
 * Static or resampled training of one model.
 *
 * Randomness: data order per epoch from DataShuffle(seed, epoch + 1), dropout
 * masks from DropoutMask(seed, 0), scaffold redraw n from resample_seed(seed, n).
 * Schedules:
 *   static      one scaffold throughout
 *   epoch       fresh scaffold at the start of every epoch after the first
 *   batch:k     k fresh scaffolds per optimizer step; the loss is the mean of
 *               the k full-batch losses
 *   micro:k     the batch is cut into k sub-batches, each with its own fresh
 *               scaffold; the loss is the batch mean
 * Validation and test use whichever scaffold is installed. With
 * select_best_val on a static schedule the weights of the best validation
 * epoch are restored before the test pass; a resampled run is tested with its
 * final weights and final scaffold.
 */
template <class T = float>
RunResult<T> train_run(const ModelConfig& model_cfg, const BackboneSpec& spec, const TrainConfig& cfg,
                       const TrainValSplit& data, const Dataset* test = nullptr, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunResult<T> out{build_model<T>(model_cfg, spec), {}};
  Model<T>& model = out.model;
  RunMetrics& m = out.metrics;
  if (!cfg.resample.is_static() && model_cfg.mode != TrainingMode::lottalora) {
    throw config_error("resample", "only meaningful in lottalora mode");
  }

  const Dataset& train = data.train;
  if (train.size() == 0) throw Error(ErrorCategory::data, "empty training set");
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((train.size() + bs - 1) / bs);
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  Stream dropout = derive_stream(spec.seed, 0, DrawKind::DropoutMask);
  AdamWState<T> opt;
  auto params = model.trainable();
  std::uint64_t event = 0;
  std::int64_t step = 0;
  std::optional<detail::Snapshot<T>> best;
  double best_val = -1.0;
  const bool select_best = cfg.select_best_val && cfg.resample.is_static();

  auto redraw = [&]() {
    ++event;
    ++m.scaffold_redraws;
    resample_backbone(model, cfg.resample, event);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.resample.kind == Resample::Kind::per_epoch && epoch > 0) redraw();
    Stream shuffle = derive_stream(spec.seed, static_cast<std::uint64_t>(epoch) + 1, DrawKind::DataShuffle);
    const auto order = permutation(train.size(), shuffle);
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = cosine_lr(step, total_steps, cfg.optimizer.lr);
    double loss_sum = 0.0;
    std::int64_t correct = 0;

    for (std::size_t start = 0; start < train.size(); start += bs) {
      const std::size_t n = std::min(bs, train.size() - start);
      const std::span<const std::size_t> rows(order.data() + start, n);
      model.zero_grad();
      auto run_chunk = [&](std::span<const std::size_t> idx, double weight) {
        const Matrix<T> x = gather_rows(train.images, idx).template cast<T>();
        std::vector<int> y(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) y[i] = train.labels[idx[i]];
        Graph<T> g;
        Var<T> logits = model.forward(g, x, true, &dropout);
        Var<T> loss = g.softmax_xent(logits, y);
        const double lv = static_cast<double>(loss.scalar());
        if (!std::isfinite(lv)) {
          throw Error(ErrorCategory::run, "non-finite loss in epoch " + std::to_string(epoch) +
                                              "; last finite epoch " + std::to_string(epoch - 1));
        }
        g.backward(g.scale(loss, static_cast<T>(weight)));
        loss_sum += lv * static_cast<double>(idx.size()) * (cfg.resample.kind == Resample::Kind::per_batch ? weight : 1.0);
        correct += detail::count_correct(logits.value(), y);
      };
      switch (cfg.resample.kind) {
        case Resample::Kind::static_scaffold:
        case Resample::Kind::per_epoch:
          run_chunk(rows, 1.0);
          break;
        case Resample::Kind::per_batch:
          for (int j = 0; j < cfg.resample.k; ++j) {
            redraw();
            run_chunk(rows, 1.0 / cfg.resample.k);
          }
          break;
        case Resample::Kind::microbatch: {
          const std::size_t k = static_cast<std::size_t>(cfg.resample.k);
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t lo = n * j / k;
            const std::size_t hi = n * (j + 1) / k;
            if (hi == lo) continue;
            redraw();
            run_chunk(rows.subspan(lo, hi - lo), static_cast<double>(hi - lo) / static_cast<double>(n));
          }
          break;
        }
      }
      adamw_step<T>(params, opt, cfg.optimizer, cosine_lr(step, total_steps, cfg.optimizer.lr));
      ++step;
    }

    const double passes = cfg.resample.kind == Resample::Kind::per_batch ? cfg.resample.k : 1.0;
    em.train_loss = loss_sum / static_cast<double>(train.size());
    em.train_accuracy = static_cast<double>(correct) / (static_cast<double>(train.size()) * passes);
    if (data.val.size() > 0) {
      const EvalResult v = evaluate(model, data.val);
      em.val_loss = v.loss;
      em.val_accuracy = v.accuracy;
    }
    em.betas = model.betas();
    m.epochs.push_back(em);
    if (on_epoch) on_epoch(em);
    if (select_best && em.val_accuracy > best_val) {
      best_val = em.val_accuracy;
      best = detail::snapshot(model, event);
      m.best_epoch = epoch;
    }
  }

  if (select_best && best) {
    detail::restore(model, *best);
    m.scaffold_event = best->event;
  } else {
    m.best_epoch = cfg.epochs - 1;
    m.scaffold_event = event;
  }
  if (test != nullptr) {
    const EvalResult r = evaluate(model, *test);
    m.test_loss = r.loss;
    m.test_accuracy = r.accuracy;
    m.test_correct = r.correct;
  }
  m.final_betas = model.betas();
  m.backbone_hash = model.backbone_hash();
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct BetaSummary {
  double mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double min = 0.0;
  std::size_t count = 0;
};

/// Descriptive statistics of final per-layer betas pooled across runs.
/// Quartiles use linear interpolation between order statistics.
inline BetaSummary beta_summary(std::span<const double> betas) {
  if (betas.empty()) throw config_error("betas", "need at least one value");
  std::vector<double> v(betas.begin(), betas.end());
  std::sort(v.begin(), v.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  BetaSummary s;
  s.count = v.size();
  double sum = 0.0;
  for (double b : v) sum += b;
  s.mean = sum / static_cast<double>(v.size());
  s.median = quantile(0.5);
  s.q1 = quantile(0.25);
  s.q3 = quantile(0.75);
  s.min = v.front();
  return s;
}

inline BetaSummary beta_summary(std::span<const RunMetrics> runs) {
  std::vector<double> all;
  for (const auto& r : runs) all.insert(all.end(), r.final_betas.begin(), r.final_betas.end());
  return beta_summary(std::span<const double>(all));
}

struct SeedGateResult {
  /// Per seed: rows = true digit, cols = predicted output, row-normalized.
  std::vector<MatrixD> confusion;
  std::vector<double> assigned_accuracy;
  std::vector<double> other_accuracy;
  std::vector<double> zero_ooc_rate;  // share of digit 0 sent to the OOC class; 0 outside ooc_mode
  std::vector<std::vector<EpochMetrics>> history;
};

/*
 * One shared adapter (and head) trained across several backbone seeds. Each
 * epoch interleaves one batch per group, round robin; before every batch the
 * group's backbone is installed. Targets follow LabelPartition::target. The
 * final weights are evaluated on every test digit under every seed.
 */
template <class T = float>
SeedGateResult seed_gated_train(const LabelPartition& partition, ModelConfig model_cfg, const InitFamily& family,
                                const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                                const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (partition.groups.empty() || partition.groups.size() != partition.seeds.size()) {
    throw config_error("partition", "groups and seeds must pair up");
  }
  if (model_cfg.mode != TrainingMode::lottalora) throw config_error("mode", "seed gating needs lottalora mode");
  model_cfg.num_classes = partition.num_outputs();
  BackboneSpec spec;
  spec.seed = partition.seeds.front();
  spec.family = family;
  Model<T> model = build_model<T>(model_cfg, spec);
  const std::size_t n_groups = partition.groups.size();
  std::vector<BackboneSet<T>> backbones;
  for (auto s : partition.seeds) backbones.push_back(generate_backbones<T>(model_cfg, s, family));

  std::vector<std::vector<std::size_t>> members(n_groups);
  std::vector<std::vector<int>> targets(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    targets[g].assign(train.size(), -1);
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (auto t = partition.target(g, train.labels[i])) {
        members[g].push_back(i);
        targets[g][i] = *t;
      }
    }
    if (members[g].empty()) throw Error(ErrorCategory::data, "no training samples for group " + std::to_string(g));
  }

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  std::int64_t steps_per_epoch = 0;
  for (const auto& mem : members) steps_per_epoch += static_cast<std::int64_t>((mem.size() + bs - 1) / bs);
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  Stream dropout = derive_stream(spec.seed, 0, DrawKind::DropoutMask);
  AdamWState<T> opt;
  auto params = model.trainable();
  std::int64_t step = 0;
  SeedGateResult result;
  result.history.resize(1);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> orders(n_groups);
    for (std::size_t g = 0; g < n_groups; ++g) {
      Stream shuffle = derive_stream(partition.seeds[g], static_cast<std::uint64_t>(epoch) + 1, DrawKind::DataShuffle);
      const auto perm = permutation(members[g].size(), shuffle);
      for (auto p : perm) orders[g].push_back(members[g][p]);
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = cosine_lr(step, total_steps, cfg.optimizer.lr);
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    std::int64_t correct = 0;
    std::vector<std::size_t> cursor(n_groups, 0);
    bool any = true;
    while (any) {
      any = false;
      for (std::size_t g = 0; g < n_groups; ++g) {
        if (cursor[g] >= orders[g].size()) continue;
        any = true;
        const std::size_t n = std::min(bs, orders[g].size() - cursor[g]);
        const std::span<const std::size_t> rows(orders[g].data() + cursor[g], n);
        cursor[g] += n;
        model.install_backbones(backbones[g]);
        model.zero_grad();
        const Matrix<T> x = gather_rows(train.images, rows).template cast<T>();
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = targets[g][rows[i]];
        Graph<T> graph;
        Var<T> logits = model.forward(graph, x, true, &dropout);
        Var<T> loss = graph.softmax_xent(logits, y);
        const double lv = static_cast<double>(loss.scalar());
        if (!std::isfinite(lv)) throw Error(ErrorCategory::run, "non-finite loss in epoch " + std::to_string(epoch));
        graph.backward(loss);
        adamw_step<T>(params, opt, cfg.optimizer, cosine_lr(step, total_steps, cfg.optimizer.lr));
        ++step;
        loss_sum += lv * static_cast<double>(n);
        seen += static_cast<std::int64_t>(n);
        correct += detail::count_correct(logits.value(), y);
      }
    }
    em.train_loss = loss_sum / static_cast<double>(seen);
    em.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    em.betas = model.betas();
    result.history[0].push_back(em);
    if (on_epoch) on_epoch(em);
  }

  const int outputs = partition.num_outputs();
  const int digits = partition.num_digits;
  for (std::size_t g = 0; g < n_groups; ++g) {
    model.install_backbones(backbones[g]);
    MatrixD counts = MatrixD::Zero(digits, outputs);
    for (std::size_t start = 0; start < test.size(); start += 2000) {
      const std::size_t n = std::min<std::size_t>(2000, test.size() - start);
      const Matrix<T> x = test.images.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n))
                              .template cast<T>();
      const Matrix<T> z = model.logits(x);
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::Index arg = 0;
        z.row(i).maxCoeff(&arg);
        counts(test.labels[start + static_cast<std::size_t>(i)], arg) += 1.0;
      }
    }
    for (Eigen::Index r = 0; r < counts.rows(); ++r) {
      const double total = counts.row(r).sum();
      if (total > 0.0) counts.row(r) /= total;
    }
    double assigned = 0.0;
    double other = 0.0;
    int n_assigned = 0;
    int n_other = 0;
    for (int d = 0; d < digits; ++d) {
      if (partition.assigned(g, d)) {
        assigned += counts(d, d);
        ++n_assigned;
      } else {
        other += counts(d, d);
        ++n_other;
      }
    }
    result.assigned_accuracy.push_back(n_assigned > 0 ? assigned / n_assigned : 0.0);
    result.other_accuracy.push_back(n_other > 0 ? other / n_other : 0.0);
    result.zero_ooc_rate.push_back(partition.ooc_mode ? counts(0, partition.ooc_label()) : 0.0);
    result.confusion.push_back(std::move(counts));
  }
  return result;
}

}  // namespace lottalora
