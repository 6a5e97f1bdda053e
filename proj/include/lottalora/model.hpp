#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lottalora/autograd.hpp"
#include "lottalora/init_family.hpp"
#include "lottalora/lotta_layer.hpp"
#include "lottalora/prng.hpp"

namespace lottalora {

enum class HeadMode { full, lora, lora_bias };
enum class TrainingMode { full_training, lottalora };

inline std::string_view to_string(HeadMode h) {
  switch (h) {
    case HeadMode::full: return "full";
    case HeadMode::lora: return "lora";
    case HeadMode::lora_bias: return "lora_bias";
  }
  return "full";
}

inline std::string_view to_string(TrainingMode m) {
  return m == TrainingMode::full_training ? "full_training" : "lottalora";
}

inline HeadMode parse_head_mode(std::string_view s) {
  if (s == "full") return HeadMode::full;
  if (s == "lora") return HeadMode::lora;
  if (s == "lora_bias" || s == "lora+bias") return HeadMode::lora_bias;
  throw config_error("head_mode", "unknown head mode '" + std::string(s) + "'");
}

inline TrainingMode parse_training_mode(std::string_view s) {
  if (s == "full_training" || s == "full") return TrainingMode::full_training;
  if (s == "lottalora") return TrainingMode::lottalora;
  throw config_error("mode", "unknown training mode '" + std::string(s) + "'");
}

inline ScalingMode parse_scaling_mode(std::string_view s) {
  if (s == "standard") return ScalingMode::standard;
  if (s == "rslora" || s == "rank_stabilized") return ScalingMode::rank_stabilized;
  throw config_error("scaling", "unknown scaling mode '" + std::string(s) + "'");
}

inline BInit parse_b_init(std::string_view s) {
  if (s == "zeros") return BInit::zeros;
  if (s == "kaiming_uniform" || s == "kaiming") return BInit::kaiming_uniform;
  if (s == "matched") return BInit::matched;
  throw config_error("b_init", "unknown B init '" + std::string(s) + "'");
}

/// Hidden widths of the MNIST architecture presets.
inline std::vector<int> preset_dims(std::string_view preset) {
  if (preset == "tiny") return {128, 64};
  if (preset == "small") return {256, 128, 64};
  if (preset == "medium") return {512, 256, 128, 64};
  if (preset == "large") return {1024, 512, 256, 128, 64};
  throw config_error("preset", "unknown preset '" + std::string(preset) + "'");
}

struct ModelConfig {
  std::string preset = "medium";  // empty when `hidden` is explicit
  std::vector<int> hidden = preset_dims("medium");
  int input_dim = 784;
  int num_classes = 10;
  int rank = 8;
  double alpha = 1.0;
  ScalingMode scaling = ScalingMode::standard;
  HeadMode head = HeadMode::full;
  double dropout = 0.1;
  bool layernorm = false;
  TrainingMode mode = TrainingMode::lottalora;
  BInit b_init = BInit::zeros;

  static ModelConfig from_preset(std::string_view name, TrainingMode mode = TrainingMode::lottalora,
                                 int rank = 8) {
    ModelConfig c;
    c.preset = std::string(name);
    c.hidden = preset_dims(name);
    c.mode = mode;
    c.rank = rank;
    return c;
  }

  void validate() const {
    if (!preset.empty() && preset_dims(preset) != hidden) {
      throw config_error("hidden", "does not match preset '" + preset + "'");
    }
    if (hidden.empty()) throw config_error("hidden", "needs at least one layer");
    for (int d : hidden) {
      if (d < 1) throw config_error("hidden", "widths must be >= 1");
    }
    if (input_dim < 1) throw config_error("input_dim", "must be >= 1");
    if (num_classes < 2) throw config_error("num_classes", "must be >= 2");
    if (mode == TrainingMode::lottalora && rank < 1) throw config_error("rank", "must be >= 1");
    if (!(alpha > 0.0)) throw config_error("alpha", "must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw config_error("dropout", "must lie in [0, 1)");
    if (mode == TrainingMode::full_training && head != HeadMode::full) {
      throw config_error("head_mode", "full training uses a full head");
    }
  }

  /// Number of linear maps whose matrix comes from the backbone seed.
  int frozen_layer_count() const {
    if (mode == TrainingMode::full_training) return 0;
    return static_cast<int>(hidden.size()) + (head == HeadMode::full ? 0 : 1);
  }
};

/// Everything that determines the frozen matrices.
struct BackboneSpec {
  std::uint64_t seed = 42;
  InitFamily family = InitFamily::normal_sigma(0.1);
  std::string algorithm_id = std::string(kPrngAlgorithmId);
};

template <class T>
using BackboneSet = std::vector<std::shared_ptr<const BackboneMatrix<T>>>;

/// Frozen matrices for every backbone-carrying layer of `cfg`, in layer order.
template <class T>
BackboneSet<T> generate_backbones(const ModelConfig& cfg, std::uint64_t seed, const InitFamily& family) {
  BackboneSet<T> out;
  int d_in = cfg.input_dim;
  std::uint64_t index = 0;
  for (int d : cfg.hidden) {
    out.push_back(std::make_shared<const BackboneMatrix<T>>(make_backbone<T>(seed, index++, family, d, d_in)));
    d_in = d;
  }
  if (cfg.head != HeadMode::full) {
    out.push_back(
        std::make_shared<const BackboneMatrix<T>>(make_backbone<T>(seed, index, family, cfg.num_classes, d_in)));
  }
  return out;
}

struct TrainableCount {
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> groups;  // adapter, beta, layernorm, head, dense
};

/*
 * Seeded MLP: hidden layers are either Lotta layers (frozen
 * seeded matrix + adapter) or ordinary dense layers (full training), each
 * followed by ReLU and dropout; then the classification head.
 */
template <class T>
class Model {
 public:
  Model(ModelConfig cfg, BackboneSpec spec) : cfg_(std::move(cfg)), spec_(std::move(spec)) {
    cfg_.validate();
    spec_.family.validate();
    if (spec_.algorithm_id != kPrngAlgorithmId) {
      throw Error(ErrorCategory::incompatibility,
                  "backbone PRNG '" + spec_.algorithm_id + "' != this build's '" + std::string(kPrngAlgorithmId) + "'");
    }
    Stream adapter_stream = derive_stream(spec_.seed, 0, DrawKind::AdapterAInit);
    Stream head_stream = derive_stream(spec_.seed, 0, DrawKind::HeadInit);
    int d_in = cfg_.input_dim;
    if (cfg_.mode == TrainingMode::lottalora) {
      BackboneSet<T> bb = generate_backbones<T>(cfg_, spec_.seed, spec_.family);
      for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
        const std::string prefix = "layers." + std::to_string(i) + ".";
        LottaLayer<T> layer;
        layer.backbone = bb[i];
        layer.adapter = init_adapter<T>(cfg_.rank, d_in, cfg_.hidden[i], cfg_.alpha, cfg_.scaling, adapter_stream,
                                        cfg_.b_init, prefix);
        if (cfg_.layernorm) layer.enable_layernorm(prefix);
        lotta_.push_back(std::move(layer));
        d_in = cfg_.hidden[i];
      }
      if (cfg_.head != HeadMode::full) {
        LottaLayer<T> head;
        head.backbone = bb.back();
        head.adapter = init_adapter<T>(cfg_.rank, d_in, cfg_.num_classes, cfg_.alpha, cfg_.scaling, adapter_stream,
                                       cfg_.b_init, "head.");
        head_lotta_ = std::move(head);
        if (cfg_.head == HeadMode::lora_bias) {
          head_bias_ = Parameter<T>("head.bias", Matrix<T>::Zero(1, cfg_.num_classes));
        }
      }
    } else {
      Stream dense_stream = derive_stream(spec_.seed, 0, DrawKind::BackboneWeight);
      for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
        dense_.push_back(make_dense<T>(d_in, cfg_.hidden[i], dense_stream, "layers." + std::to_string(i) + "."));
        d_in = cfg_.hidden[i];
      }
    }
    if (cfg_.head == HeadMode::full) head_dense_ = make_dense<T>(d_in, cfg_.num_classes, head_stream, "head.");
  }

  const ModelConfig& config() const { return cfg_; }
  const BackboneSpec& backbone_spec() const { return spec_; }

  /// Logits node; dropout is active only when `train` is set.
  Var<T> forward(Graph<T>& g, const Matrix<T>& batch, bool train, Stream* dropout_stream = nullptr) {
    if (batch.cols() != cfg_.input_dim) {
      throw Error(ErrorCategory::dimension,
                  "model expects " + std::to_string(cfg_.input_dim) + " features, got " + shape_string(batch));
    }
    if (train && cfg_.dropout > 0.0 && dropout_stream == nullptr) {
      throw Error(ErrorCategory::run, "training forward needs a dropout stream");
    }
    Var<T> h = g.input(batch);
    auto activate = [&](Var<T> z) {
      Var<T> a = g.relu(z);
      return train ? g.dropout(a, cfg_.dropout, *dropout_stream, true) : a;
    };
    for (auto& layer : lotta_) h = activate(layer.forward(g, h));
    for (auto& layer : dense_) h = activate(layer.forward(g, h));
    if (head_dense_) return head_dense_->forward(g, h);
    Var<T> logits = head_lotta_->forward(g, h);
    if (head_bias_) logits = g.add_row(logits, g.param(*head_bias_));
    return logits;
  }

  /// Eval-mode logits.
  Matrix<T> logits(const Matrix<T>& batch) {
    Graph<T> g;
    return forward(g, batch, false).value();
  }

  /// Trainable parameters in canonical order (the artifact payload order).
  std::vector<Parameter<T>*> trainable() {
    std::vector<Parameter<T>*> out;
    for (auto& l : lotta_) append_lotta(out, l);
    for (auto& d : dense_) {
      out.push_back(&d.weight);
      out.push_back(&d.bias);
    }
    if (head_dense_) {
      out.push_back(&head_dense_->weight);
      out.push_back(&head_dense_->bias);
    }
    if (head_lotta_) append_lotta(out, *head_lotta_);
    if (head_bias_) out.push_back(&*head_bias_);
    return out;
  }

  std::vector<const Parameter<T>*> trainable() const {
    std::vector<const Parameter<T>*> out;
    for (auto* p : const_cast<Model*>(this)->trainable()) out.push_back(p);
    return out;
  }

  Parameter<T>* find(const std::string& name) {
    for (auto* p : trainable()) {
      if (p->name == name) return p;
    }
    return nullptr;
  }

  std::vector<LottaLayer<T>*> lotta_layers() {
    std::vector<LottaLayer<T>*> out;
    for (auto& l : lotta_) out.push_back(&l);
    if (head_lotta_) out.push_back(&*head_lotta_);
    return out;
  }

  std::vector<const LottaLayer<T>*> lotta_layers() const {
    std::vector<const LottaLayer<T>*> out;
    for (const auto& l : lotta_) out.push_back(&l);
    if (head_lotta_) out.push_back(&*head_lotta_);
    return out;
  }

  /// Current beta of every Lotta layer, in layer order.
  std::vector<double> betas() const {
    std::vector<double> out;
    for (const auto* l : lotta_layers()) out.push_back(static_cast<double>(l->adapter.beta.value(0, 0)));
    return out;
  }

  BackboneSet<T> backbones() const {
    BackboneSet<T> out;
    for (const auto* l : lotta_layers()) out.push_back(l->backbone);
    return out;
  }

  /// Swap in another set of frozen matrices (seed gating, resampling,
  /// scaffold removal). Shapes must match layer for layer.
  void install_backbones(const BackboneSet<T>& set) {
    auto layers = lotta_layers();
    if (set.size() != layers.size()) {
      throw Error(ErrorCategory::dimension, "install_backbones: " + std::to_string(set.size()) + " matrices for " +
                                                std::to_string(layers.size()) + " layers");
    }
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set[i]->rows() != layers[i]->d_out() || set[i]->cols() != layers[i]->d_in()) {
        throw Error(ErrorCategory::dimension, "install_backbones: layer " + std::to_string(i) + " expects " +
                                                  shape_string(layers[i]->d_out(), layers[i]->d_in()) + ", got " +
                                                  shape_string(set[i]->entries));
      }
      layers[i]->backbone = set[i];
    }
  }

  /// FNV-1a over every frozen matrix in layer order.
  std::uint64_t backbone_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* l : lotta_layers()) h = hash_bytes(l->backbone->entries, h);
    return h;
  }

  std::uint64_t trainable_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : trainable()) h = hash_bytes(p->value, h);
    return h;
  }

  TrainableCount count_trainable() const {
    TrainableCount c;
    for (const auto* p : trainable()) {
      c.groups[group_of(p->name)] += p->size();
      c.total += p->size();
    }
    return c;
  }

  void zero_grad() {
    for (auto* p : trainable()) p->zero_grad();
  }

 private:
  static void append_lotta(std::vector<Parameter<T>*>& out, LottaLayer<T>& l) {
    out.push_back(&l.adapter.A);
    out.push_back(&l.adapter.B);
    out.push_back(&l.adapter.beta);
    if (l.layernorm) {
      out.push_back(&l.ln_gamma);
      out.push_back(&l.ln_beta);
    }
  }

  static std::string group_of(const std::string& name) {
    auto ends_with = [&](std::string_view s) {
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".A") || ends_with(".B")) return "adapter";
    if (ends_with(".beta")) return "beta";
    if (ends_with(".ln_gamma") || ends_with(".ln_beta")) return "layernorm";
    if (name.rfind("head.", 0) == 0) return "head";
    return "dense";
  }

  ModelConfig cfg_;
  BackboneSpec spec_;
  std::vector<LottaLayer<T>> lotta_;
  std::vector<DenseLayer<T>> dense_;
  std::optional<DenseLayer<T>> head_dense_;
  std::optional<LottaLayer<T>> head_lotta_;
  std::optional<Parameter<T>> head_bias_;
};

template <class T>
Model<T> build_model(const ModelConfig& cfg, const BackboneSpec& spec) {
  return Model<T>(cfg, spec);
}

/// Closed-form trainable count, without building the model.
inline std::int64_t expected_trainable(const ModelConfig& cfg) {
  std::int64_t total = 0;
  std::int64_t d_in = cfg.input_dim;
  for (int d : cfg.hidden) {
    if (cfg.mode == TrainingMode::full_training) {
      total += d_in * d + d;
    } else {
      total += static_cast<std::int64_t>(cfg.rank) * (d_in + d) + 1;
      if (cfg.layernorm) total += 2LL * d;
    }
    d_in = d;
  }
  switch (cfg.head) {
    case HeadMode::full: total += d_in * cfg.num_classes + cfg.num_classes; break;
    case HeadMode::lora: total += static_cast<std::int64_t>(cfg.rank) * (d_in + cfg.num_classes) + 1; break;
    case HeadMode::lora_bias:
      total += static_cast<std::int64_t>(cfg.rank) * (d_in + cfg.num_classes) + 1 + cfg.num_classes;
      break;
  }
  return total;
}

}  // namespace lottalora
