// lottalora: command-line front end for training, sweeps, artifacts and cost analytics.

#include <CLI11.hpp>

#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lottalora/lottalora.hpp"

namespace ll = lottalora;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016" PRIx64, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Settings: one flat map of dotted keys. Defaults < --config file < flags.

json default_settings() {
  return json{
      {"model.preset", "medium"},
      {"model.mode", "lottalora"},
      {"model.rank", 8},
      {"model.alpha", 1.0},
      {"model.scaling", "standard"},
      {"model.head", "full"},
      {"model.dropout", 0.1},
      {"model.layernorm", false},
      {"model.b_init", "auto"},
      {"backbone.seed", 42},
      {"backbone.family", "normal:scaling=explicit,sigma=0.1"},
      {"train.epochs", 20},
      {"train.batch_size", 128},
      {"train.lr", 1e-3},
      {"train.weight_decay", 1e-2},
      {"train.resample", "static"},
      {"train.select_best_val", true},
      {"data.dir", ""},
      {"data.train_limit", 0},
      {"out.dir", "runs"},
  };
}

bool is_family_param_key(const std::string& key) { return key.rfind("backbone.family_param.", 0) == 0; }

/// Coerces `text` to the JSON type of the default for `key`.
json coerce(const std::string& key, const std::string& text) {
  const json defaults = default_settings();
  auto fail = [&](const char* what) -> json { throw ll::config_error(key, std::string("expected ") + what + ", got '" + text + "'"); };
  if (is_family_param_key(key)) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(text, &pos);
      if (pos != text.size()) return fail("a number");
      return v;
    } catch (const std::logic_error&) {
      return fail("a number");
    }
  }
  const auto it = defaults.find(key);
  if (it == defaults.end()) throw ll::config_error(key, "unknown setting");
  try {
    std::size_t pos = 0;
    switch (it->type()) {
      case json::value_t::boolean:
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        return fail("true or false");
      case json::value_t::number_integer:
      case json::value_t::number_unsigned: {
        const long long v = std::stoll(text, &pos);
        if (pos != text.size()) return fail("an integer");
        return v;
      }
      case json::value_t::number_float: {
        const double v = std::stod(text, &pos);
        if (pos != text.size()) return fail("a number");
        return v;
      }
      default:
        return text;
    }
  } catch (const std::logic_error&) {
    return fail("a number");
  }
}

/// Merges a flat JSON config object into `settings`, checking key names and value types.
void merge_config(json& settings, const json& config, const std::string& origin) {
  if (!config.is_object()) throw ll::Error(ll::ErrorCategory::parse, origin + ": top level must be an object");
  const json defaults = default_settings();
  for (const auto& [key, value] : config.items()) {
    if (is_family_param_key(key)) {
      if (!value.is_number()) throw ll::config_error(key, "must be a number");
      settings[key] = value;
      continue;
    }
    const auto it = defaults.find(key);
    if (it == defaults.end()) throw ll::config_error(key, "unknown setting in " + origin);
    const bool ok = (it->is_boolean() && value.is_boolean()) || (it->is_number_integer() && value.is_number_integer()) ||
                    (it->is_number_float() && value.is_number()) || (it->is_string() && value.is_string());
    if (!ok) throw ll::config_error(key, "wrong type in " + origin);
    settings[key] = value;
  }
}

json load_json_file(const fs::path& path) {
  const auto bytes = ll::read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ll::Error(ll::ErrorCategory::parse, path.string() + ": " + e.what());
  }
}

/// Flag-to-setting bindings shared by every command that builds a model.
struct SettingFlags {
  std::string config_path;
  std::map<std::string, std::string> raw;   // key -> text
  std::map<std::string, CLI::Option*> opts;  // key -> option
  std::vector<std::string> family_params;
  bool layernorm = false;
  CLI::Option* layernorm_opt = nullptr;

  void bind(CLI::App& app, bool training) {
    app.add_option("--config", config_path, "Flat dotted-key JSON config; flags override it");
    auto add = [&](const std::string& flag, const std::string& key, const std::string& help) {
      opts[key] = app.add_option(flag, raw[key], help);
    };
    add("--preset", "model.preset", "Architecture preset: tiny, small, medium, large");
    add("--mode", "model.mode", "lottalora or full");
    add("--rank", "model.rank", "Adapter rank r");
    add("--alpha", "model.alpha", "Adapter scale numerator");
    add("--scaling", "model.scaling", "standard (alpha/r) or rslora (alpha/sqrt r)");
    add("--head", "model.head", "Output head: full, lora, lora_bias");
    add("--dropout", "model.dropout", "Dropout probability");
    add("--b-init", "model.b_init", "B initialization: auto, zeros, kaiming_uniform, matched");
    add("--seed", "backbone.seed", "Backbone seed");
    add("--family", "backbone.family", "Backbone init family, e.g. binary or normal:scaling=explicit,sigma=0.1");
    app.add_option("--family-param", family_params, "Family parameter override k=v (repeatable)");
    layernorm_opt = app.add_flag("--layernorm", layernorm, "LayerNorm on the combined path");
    if (training) {
      add("--epochs", "train.epochs", "Training epochs");
      add("--batch-size", "train.batch_size", "Mini-batch size");
      add("--lr", "train.lr", "Peak learning rate");
      add("--weight-decay", "train.weight_decay", "AdamW weight decay");
      add("--resample", "train.resample", "Scaffold schedule: static, epoch, batch:k, micro:k");
      add("--train-limit", "data.train_limit", "Use only the first N training images (0 = all)");
      add("--data-dir", "data.dir", "MNIST IDX directory (falls back to LOTTALORA_DATA_DIR)");
      add("--out-dir", "out.dir", "Output directory");
    }
  }

  json resolve() const {
    json settings = default_settings();
    if (!config_path.empty()) merge_config(settings, load_json_file(config_path), config_path);
    for (const auto& [key, opt] : opts) {
      if (opt->count() > 0) settings[key] = coerce(key, raw.at(key));
    }
    if (layernorm_opt->count() > 0) settings["model.layernorm"] = layernorm;
    for (const auto& kv : family_params) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ll::config_error("family-param", "expected k=v, got '" + kv + "'");
      const std::string key = "backbone.family_param." + kv.substr(0, eq);
      settings[key] = coerce(key, kv.substr(eq + 1));
    }
    return settings;
  }
};

ll::InitFamily family_from(const json& s) {
  auto fam = ll::InitFamily::parse(s.at("backbone.family").get<std::string>());
  std::map<std::string, double> overrides = fam.params;
  bool any = false;
  for (const auto& [key, value] : s.items()) {
    if (is_family_param_key(key)) {
      overrides[key.substr(std::string("backbone.family_param.").size())] = value.get<double>();
      any = true;
    }
  }
  return any ? ll::InitFamily::make(fam.family, overrides, fam.scaling) : fam;
}

struct RunSpec {
  ll::ModelConfig model;
  ll::BackboneSpec backbone;
  ll::TrainConfig train;
  std::string data_dir;
  std::size_t train_limit = 0;
  fs::path out_dir;
  json settings;
};

RunSpec run_spec_from(const json& s) {
  RunSpec r;
  r.settings = s;
  const auto mode = ll::parse_training_mode(s.at("model.mode").get<std::string>());
  r.model = ll::ModelConfig::from_preset(s.at("model.preset").get<std::string>(), mode, s.at("model.rank").get<int>());
  r.model.alpha = s.at("model.alpha").get<double>();
  r.model.scaling = ll::parse_scaling_mode(s.at("model.scaling").get<std::string>());
  r.model.head = ll::parse_head_mode(s.at("model.head").get<std::string>());
  r.model.dropout = s.at("model.dropout").get<double>();
  r.model.layernorm = s.at("model.layernorm").get<bool>();
  r.backbone.seed = s.at("backbone.seed").get<std::uint64_t>();
  r.backbone.family = family_from(s);
  const auto b_init = s.at("model.b_init").get<std::string>();
  if (b_init == "auto") {
    r.model.b_init = r.backbone.family.family == ll::Family::zero ? ll::BInit::matched : ll::BInit::zeros;
  } else {
    r.model.b_init = ll::parse_b_init(b_init);
  }
  r.model.validate();
  r.train.epochs = s.at("train.epochs").get<int>();
  r.train.batch_size = s.at("train.batch_size").get<int>();
  r.train.optimizer.lr = s.at("train.lr").get<double>();
  r.train.optimizer.weight_decay = s.at("train.weight_decay").get<double>();
  r.train.resample = ll::Resample::parse(s.at("train.resample").get<std::string>());
  r.train.select_best_val = s.at("train.select_best_val").get<bool>();
  r.train.validate();
  r.data_dir = s.at("data.dir").get<std::string>();
  const auto limit = s.at("data.train_limit").get<long long>();
  if (limit < 0) throw ll::config_error("data.train_limit", "must be >= 0");
  r.train_limit = static_cast<std::size_t>(limit);
  r.out_dir = s.at("out.dir").get<std::string>();
  return r;
}

// ---------------------------------------------------------------------------
// Data and outputs.

ll::MnistSet load_data(const std::string& flag, std::size_t train_limit) {
  const auto dir = ll::resolve_data_dir(flag);
  if (!dir) throw ll::Error(ll::ErrorCategory::data, "no MNIST directory: pass --data-dir or set LOTTALORA_DATA_DIR");
  auto set = ll::load_mnist(*dir);
  if (train_limit > 0 && train_limit < set.train.size()) {
    std::vector<std::size_t> rows(train_limit);
    for (std::size_t i = 0; i < train_limit; ++i) rows[i] = i;
    set.train = ll::subset(set.train, rows, ll::Split::train);
  }
  return set;
}

json manifest(const std::string& command, const std::vector<std::string>& argv, const json& body) {
  json m{{"tool", "lottalora"},
         {"version", kToolVersion},
         {"command", command},
         {"argv", argv},
         {"prng", std::string(ll::kPrngAlgorithmId)}};
  for (const auto& [k, v] : body.items()) m[k] = v;
  return m;
}

void write_json(const fs::path& path, const json& j) { ll::write_file_atomic(path, j.dump(2) + "\n"); }

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  return ll::beta_summary(std::span<const double>(v)).median;
}

double min_of(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::min_element(v.begin(), v.end()); }

std::string metrics_csv(const ll::RunMetrics& m) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "epoch,split,loss,accuracy,lr,beta_min,beta_median\n";
  for (const auto& e : m.epochs) {
    const double bmin = min_of(e.betas);
    const double bmed = median_of(e.betas);
    out << e.epoch << ",train," << e.train_loss << "," << e.train_accuracy << "," << e.lr << "," << bmin << "," << bmed
        << "\n";
    out << e.epoch << ",val," << e.val_loss << "," << e.val_accuracy << "," << e.lr << "," << bmin << "," << bmed << "\n";
  }
  const double lr = m.epochs.empty() ? 0.0 : m.epochs.back().lr;
  out << m.best_epoch << ",test," << m.test_loss << "," << m.test_accuracy << "," << lr << "," << min_of(m.final_betas)
      << "," << median_of(m.final_betas) << "\n";
  return out.str();
}

json summary_json(const RunSpec& spec, const ll::RunMetrics& m, std::uint64_t probe) {
  return json{{"preset", spec.model.preset},
              {"mode", std::string(ll::to_string(spec.model.mode))},
              {"rank", spec.model.rank},
              {"seed", spec.backbone.seed},
              {"family", spec.backbone.family.to_string()},
              {"resample", spec.train.resample.to_string()},
              {"trainable", ll::expected_trainable(spec.model)},
              {"test_accuracy", m.test_accuracy},
              {"test_loss", m.test_loss},
              {"test_correct", m.test_correct},
              {"best_epoch", m.best_epoch},
              {"final_betas", m.final_betas},
              {"backbone_hash", hex64(m.backbone_hash)},
              {"probe_hash", hex64(probe)},
              {"scaffold_event", m.scaffold_event},
              {"scaffold_redraws", m.scaffold_redraws},
              {"wall_seconds", m.wall_seconds}};
}

/// Trains one configuration and writes metrics.csv, summary.json, model.ltlr and manifest.json into `dir`.
json train_one(const RunSpec& spec, const ll::MnistSet& data, const fs::path& dir, const std::string& command,
               const std::vector<std::string>& argv, std::mutex* log_mutex, bool verbose) {
  const auto split = ll::split_train_val(data.train, spec.backbone.seed);
  auto on_epoch = [&](const ll::EpochMetrics& e) {
    if (!verbose) return;
    std::unique_lock<std::mutex> lock;
    if (log_mutex) lock = std::unique_lock<std::mutex>(*log_mutex);
    std::cerr << dir.filename().string() << " epoch " << e.epoch << " train_loss " << e.train_loss << " val_acc "
              << e.val_accuracy << "\n";
  };
  auto result = ll::train_run<float>(spec.model, spec.backbone, spec.train, split, &data.test, on_epoch);
  const std::uint64_t probe = ll::probe_hash(result.model);
  json summary = summary_json(spec, result.metrics, probe);
  fs::create_directories(dir);
  ll::write_file_atomic(dir / "metrics.csv", metrics_csv(result.metrics));
  json extra{{"scaffold_event", result.metrics.scaffold_event},
             {"metrics",
              {{"test_accuracy", result.metrics.test_accuracy},
               {"test_correct", result.metrics.test_correct},
               {"probe_hash", hex64(probe)}}},
             {"data", {{"train_limit", spec.train_limit}}}};
  const auto bytes = ll::pack(result.model, extra);
  ll::write_file_atomic(dir / "model.ltlr", bytes);
  summary["artifact"] = (dir / "model.ltlr").string();
  summary["artifact_bytes"] = bytes.size();
  write_json(dir / "summary.json", summary);
  write_json(dir / "manifest.json",
             manifest(command, argv, {{"config", spec.settings}, {"seeds", {spec.backbone.seed}}}));
  return summary;
}

// ---------------------------------------------------------------------------
// Commands.

struct Context {
  std::vector<std::string> argv;
};

int cmd_train(const Context& ctx, const SettingFlags& flags, bool quiet) {
  const RunSpec spec = run_spec_from(flags.resolve());
  const auto data = load_data(spec.data_dir, spec.train_limit);
  const json summary = train_one(spec, data, spec.out_dir, "train", ctx.argv, nullptr, !quiet);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

struct Grid {
  std::vector<std::string> presets;
  std::vector<int> ranks;
  std::vector<std::string> families;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> resamples;
  bool include_full = false;
  int jobs = 1;
  bool verbose = false;
};

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
  }
  return s;
}

int run_grid(const Context& ctx, const std::string& command, const SettingFlags& flags, const Grid& grid) {
  const json base = flags.resolve();
  const RunSpec base_spec = run_spec_from(base);
  if (grid.jobs < 1) throw ll::config_error("jobs", "must be >= 1");

  struct Job {
    std::string name;
    RunSpec spec;
  };
  std::vector<Job> jobs;
  auto add_job = [&](json s, const std::string& name) { jobs.push_back({name, run_spec_from(s)}); };
  for (const auto& preset : grid.presets) {
    for (auto seed : grid.seeds) {
      if (grid.include_full) {
        json s = base;
        s["model.preset"] = preset;
        s["model.mode"] = "full";
        s["backbone.seed"] = seed;
        s["train.resample"] = "static";
        add_job(s, preset + "_full_s" + std::to_string(seed));
      }
      for (const auto& fam : grid.families) {
        for (int rank : grid.ranks) {
          for (const auto& rs : grid.resamples) {
            json s = base;
            s["model.preset"] = preset;
            s["model.mode"] = "lottalora";
            s["model.rank"] = rank;
            s["backbone.family"] = fam;
            s["backbone.seed"] = seed;
            s["train.resample"] = rs;
            add_job(s, preset + "_r" + std::to_string(rank) + "_" + sanitize(fam) + "_" + sanitize(rs) + "_s" +
                           std::to_string(seed));
          }
        }
      }
    }
  }
  if (jobs.empty()) throw ll::config_error("grid", "no runs selected");

  const auto data = load_data(base_spec.data_dir, base_spec.train_limit);
  std::vector<json> results(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = train_one(jobs[i].spec, data, base_spec.out_dir / jobs[i].name, command, ctx.argv, &log_mutex,
                               grid.verbose);
        std::lock_guard lock(log_mutex);
        std::cerr << "[" << command << "] " << jobs[i].name << " test_accuracy "
                  << results[i].at("test_accuracy").get<double>() << "\n";
      } catch (const std::exception& e) {
        errors[i] = e.what();
        std::lock_guard lock(log_mutex);
        std::cerr << "[" << command << "] " << jobs[i].name << " failed: " << e.what() << "\n";
      }
    }
  };
  const int n_threads = std::min<int>(grid.jobs, static_cast<int>(jobs.size()));
  std::vector<std::thread> threads;
  for (int t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  // Group by everything except the seed.
  std::map<std::string, std::vector<double>> groups;
  json runs = json::array();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& n = jobs[i].name;
    if (!errors[i].empty()) {
      runs.push_back({{"name", n}, {"error", errors[i]}});
      continue;
    }
    runs.push_back({{"name", n}, {"summary", results[i]}});
    groups[n.substr(0, n.rfind("_s"))].push_back(results[i].at("test_accuracy").get<double>());
  }
  json table = json::object();
  for (const auto& [key, accs] : groups) {
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    const double sd = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
    table[key] = {{"mean_accuracy", mean}, {"std_accuracy", sd}, {"n", accs.size()}};
  }
  json out{{"runs", runs}, {"groups", table}};
  fs::create_directories(base_spec.out_dir);
  write_json(base_spec.out_dir / (command + ".json"), out);
  std::vector<std::uint64_t> seeds(grid.seeds.begin(), grid.seeds.end());
  write_json(base_spec.out_dir / "manifest.json",
             manifest(command, ctx.argv,
                      {{"config", base},
                       {"seeds", seeds},
                       {"grid",
                        {{"presets", grid.presets},
                         {"ranks", grid.ranks},
                         {"families", grid.families},
                         {"resamples", grid.resamples},
                         {"include_full", grid.include_full}}}}));
  std::cout << table.dump(2) << "\n";
  for (const auto& e : errors) {
    if (!e.empty()) throw ll::Error(ll::ErrorCategory::run, "one or more runs failed; see " + command + ".json");
  }
  return 0;
}

std::vector<int> parse_digits(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ll::config_error("groups", "bad digit '" + item + "'");
    }
  }
  return out;
}

json matrix_json(const ll::MatrixD& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

int cmd_seedgate(const Context& ctx, const SettingFlags& flags, const std::vector<std::string>& groups,
                 const std::vector<std::uint64_t>& seeds, bool ooc, bool verbose) {
  const json settings = flags.resolve();
  const RunSpec spec = run_spec_from(settings);
  std::vector<std::vector<int>> digit_groups;
  for (const auto& g : groups) digit_groups.push_back(parse_digits(g));
  const auto partition = ll::make_partition(digit_groups, seeds, ooc);
  const auto data = load_data(spec.data_dir, spec.train_limit);
  auto on_epoch = [&](const ll::EpochMetrics& e) {
    if (verbose) std::cerr << "seedgate epoch " << e.epoch << " train_loss " << e.train_loss << "\n";
  };
  const auto r = ll::seed_gated_train<float>(partition, spec.model, spec.backbone.family, spec.train, data.train,
                                             data.test, on_epoch);
  json per_seed = json::array();
  for (std::size_t g = 0; g < seeds.size(); ++g) {
    per_seed.push_back({{"seed", seeds[g]},
                        {"digits", digit_groups[g]},
                        {"assigned_accuracy", r.assigned_accuracy[g]},
                        {"other_accuracy", r.other_accuracy[g]},
                        {"zero_ooc_rate", r.zero_ooc_rate[g]},
                        {"confusion", matrix_json(r.confusion[g])}});
  }
  json out{{"ooc_mode", ooc}, {"rank", spec.model.rank}, {"epochs", spec.train.epochs}, {"seeds", per_seed}};
  fs::create_directories(spec.out_dir);
  write_json(spec.out_dir / "seedgate.json", out);
  write_json(spec.out_dir / "manifest.json",
             manifest("seedgate", ctx.argv, {{"config", settings}, {"seeds", seeds}, {"groups", groups}, {"ooc", ooc}}));
  json brief = out;
  for (auto& s : brief["seeds"]) s.erase("confusion");
  std::cout << brief.dump(2) << "\n";
  return 0;
}

json tensor_table(const ll::Artifact& a) {
  json t = json::array();
  std::size_t floats = 0;
  for (const auto& x : a.tensors) {
    t.push_back({{"name", x.name}, {"rows", x.value.rows()}, {"cols", x.value.cols()}});
    floats += static_cast<std::size_t>(x.value.size());
  }
  return json{{"tensors", t}, {"floats", floats}};
}

int cmd_pack(const Context& ctx, const SettingFlags& flags, const std::string& from, const std::string& out) {
  if (out.empty()) throw ll::Error(ll::ErrorCategory::usage, "pack: --out is required");
  std::vector<std::uint8_t> bytes;
  json settings;
  if (!from.empty()) {
    bytes = ll::pack(ll::unpack(ll::read_file(from)));
  } else {
    settings = flags.resolve();
    const RunSpec spec = run_spec_from(settings);
    ll::Model<float> model(spec.model, spec.backbone);
    bytes = ll::pack(model);
  }
  ll::write_file_atomic(out, bytes);
  const auto a = ll::unpack(bytes);
  json report{{"artifact", out}, {"bytes", bytes.size()}, {"seed", a.header.at("seed")}};
  report.update(tensor_table(a));
  report.erase("tensors");
  fs::path m = fs::path(out);
  m += ".manifest.json";
  write_json(m, manifest("pack", ctx.argv, {{"config", settings}, {"from", from}}));
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_unpack(const Context& ctx, const std::string& in, const std::string& out_dir) {
  const auto a = ll::unpack(ll::read_file(in));
  json report{{"version", a.version}, {"header", a.header}};
  report.update(tensor_table(a));
  if (!out_dir.empty()) {
    json values = json::object();
    for (const auto& t : a.tensors) values[t.name] = matrix_json(t.value.cast<double>());
    write_json(fs::path(out_dir) / "header.json", a.header);
    write_json(fs::path(out_dir) / "tensors.json", values);
    write_json(fs::path(out_dir) / "manifest.json", manifest("unpack", ctx.argv, {{"input", in}}));
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_verify(const std::string& in, const std::string& data_dir) {
  const auto a = ll::unpack(ll::read_file(in));
  auto model = ll::reconstruct(a);
  json report{{"artifact", in}, {"backbone_hash", hex64(model.backbone_hash())}};
  const std::string probe = hex64(ll::probe_hash(model));
  report["probe_hash"] = probe;
  bool ok = true;
  const auto metrics = a.header.find("metrics");
  if (metrics != a.header.end()) {
    const bool probe_ok = metrics->at("probe_hash").get<std::string>() == probe;
    report["probe_match"] = probe_ok;
    ok = ok && probe_ok;
    if (const auto dir = ll::resolve_data_dir(data_dir)) {
      const auto set = ll::load_mnist(*dir);
      const auto eval = ll::evaluate(model, set.test);
      const auto expect = metrics->at("test_correct").get<std::int64_t>();
      report["test_accuracy"] = eval.accuracy;
      report["test_correct"] = eval.correct;
      report["expected_test_correct"] = expect;
      report["accuracy_match"] = eval.correct == expect;
      ok = ok && eval.correct == expect;
    } else {
      report["accuracy_match"] = nullptr;
    }
  }
  report["ok"] = ok;
  std::cout << report.dump(2) << "\n";
  if (!ok) throw ll::Error(ll::ErrorCategory::verification, "reconstructed model does not match the recorded metrics");
  return 0;
}

json cost_json(const ll::CostReport& r) {
  return json{{"arch", r.arch.name},
              {"rank", r.rank},
              {"total_params", r.counts.total},
              {"internal_params", r.counts.internal},
              {"lora_internal", r.counts.lora_internal},
              {"lottalora_total", r.counts.lottalora_total},
              {"flops_per_token", {{"full", r.flops_per_token.full}, {"lottalora", r.flops_per_token.lottalora}}},
              {"flop_ratio", r.flops_per_token.ratio},
              {"mem_full_bytes", r.memory.full},
              {"mem_lottalora_bytes", r.memory.lottalora},
              {"mem_ratio", r.memory.ratio},
              {"dist_bytes", {{"fp16", r.fp16_bytes}, {"int4_grouped", r.int4_bytes}, {"lottalora", r.lottalora_bytes}}},
              {"dist_mib",
               {{"fp16", ll::to_mib(r.fp16_bytes)},
                {"int4_grouped", ll::to_mib(r.int4_bytes)},
                {"lottalora", ll::to_mib(r.lottalora_bytes)}}}};
}

int cmd_cost(const std::string& arch, int rank, bool json_only) {
  std::vector<ll::TransformerArch> archs;
  if (arch.empty() || arch == "all") {
    archs = ll::transformer_presets();
  } else {
    archs.push_back(ll::transformer_preset(arch));
  }
  std::vector<ll::CostReport> reports;
  for (const auto& a : archs) reports.push_back(ll::cost_report(a, rank));
  if (!json_only) {
    std::cout << std::left << std::setw(6) << "arch" << std::right << std::setw(16) << "total" << std::setw(14)
              << "lora" << std::setw(9) << "flops" << std::setw(9) << "mem" << std::setw(11) << "fp16 MiB"
              << std::setw(11) << "int4 MiB" << std::setw(11) << "seed MiB" << "\n";
    for (const auto& r : reports) {
      std::cout << std::left << std::setw(6) << r.arch.name << std::right << std::setw(16) << r.counts.total
                << std::setw(14) << r.counts.lora_internal << std::fixed << std::setprecision(4) << std::setw(9)
                << r.flops_per_token.ratio << std::setw(9) << r.memory.ratio << std::setprecision(1) << std::setw(11)
                << ll::to_mib(r.fp16_bytes) << std::setw(11) << ll::to_mib(r.int4_bytes) << std::setw(11)
                << ll::to_mib(r.lottalora_bytes) << "\n";
      std::cout.unsetf(std::ios::fixed);
    }
  }
  json out = json::array();
  for (const auto& r : reports) out.push_back(cost_json(r));
  std::cout << (out.size() == 1 ? out[0] : out).dump(2) << "\n";
  return 0;
}

int cmd_rankstar(const std::string& losses_path, double full, double eps) {
  const json j = load_json_file(losses_path);
  if (!j.is_object()) throw ll::Error(ll::ErrorCategory::parse, losses_path + ": expected an object rank -> loss");
  std::map<int, double> losses;
  for (const auto& [k, v] : j.items()) {
    int r = 0;
    auto [p, ec] = std::from_chars(k.data(), k.data() + k.size(), r);
    if (ec != std::errc() || p != k.data() + k.size() || r < 1 || !v.is_number()) {
      throw ll::Error(ll::ErrorCategory::parse, losses_path + ": bad entry '" + k + "'");
    }
    losses[r] = v.get<double>();
  }
  const auto r = ll::rank_star(losses, full, eps);
  json out{{"rank_star", r ? json(*r) : json(nullptr)}, {"full_loss", full}, {"epsilon", eps}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

void collect_summaries(const fs::path& p, std::vector<fs::path>& out) {
  if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file() && e.path().filename() == "summary.json") out.push_back(e.path());
    }
  } else if (fs::exists(p)) {
    out.push_back(p);
  } else {
    throw ll::Error(ll::ErrorCategory::data, "no such file or directory: " + p.string());
  }
}

int cmd_betastats(const std::vector<std::string>& inputs, bool static_only) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) collect_summaries(in, files);
  std::sort(files.begin(), files.end());
  std::vector<double> betas;
  std::size_t runs = 0;
  for (const auto& f : files) {
    const json s = load_json_file(f);
    if (static_only && s.value("resample", "static") != "static") continue;
    if (s.value("mode", "lottalora") != "lottalora") continue;
    for (const auto& b : s.at("final_betas")) betas.push_back(b.get<double>());
    ++runs;
  }
  if (betas.empty()) throw ll::Error(ll::ErrorCategory::data, "no beta values found in the given runs");
  const auto st = ll::beta_summary(std::span<const double>(betas));
  json out{{"runs", runs},   {"count", st.count}, {"mean", st.mean}, {"median", st.median},
           {"q1", st.q1},    {"q3", st.q3},       {"min", st.min},   {"all_positive", st.min > 0.0}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

void report_error(std::string_view category, int code, const std::string& message) {
  std::cerr << json{{"error", {{"category", category}, {"code", code}, {"message", message}}}}.dump() << "\n";
}

int run(int argc, char** argv) {
  Context ctx;
  ctx.argv.assign(argv, argv + argc);
  CLI::App app{"Frozen-seed scaffolds with trainable low-rank adapters"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  bool quiet = false;
  SettingFlags train_flags;
  auto* train = app.add_subcommand("train", "Train one configuration on MNIST");
  train_flags.bind(*train, true);
  train->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  Grid sweep_grid{{"medium"}, {1, 2, 4, 8}, {"normal:scaling=explicit,sigma=0.1"}, {42}, {"static"}};
  SettingFlags sweep_flags;
  auto* sweep = app.add_subcommand("sweep", "Preset x rank x family x seed grid");
  sweep_flags.bind(*sweep, true);
  sweep->add_option("--presets", sweep_grid.presets, "Presets to sweep");
  sweep->add_option("--ranks", sweep_grid.ranks, "Ranks to sweep");
  sweep->add_option("--families", sweep_grid.families, "Init families to sweep");
  sweep->add_option("--seeds", sweep_grid.seeds, "Seeds to sweep");
  sweep->add_flag("--full", sweep_grid.include_full, "Add a fully trained baseline per preset and seed");
  sweep->add_option("--jobs", sweep_grid.jobs, "Runs in parallel");
  sweep->add_flag("--verbose", sweep_grid.verbose, "Per-epoch progress");

  Grid meta_grid{{"medium"}, {2, 4, 8}, {"normal:scaling=explicit,sigma=0.1"}, {42}, {"static", "epoch", "batch:2", "micro:4"}};
  SettingFlags meta_flags;
  auto* meta = app.add_subcommand("metalora", "Scaffold resampling schedules");
  meta_flags.bind(*meta, true);
  meta->add_option("--schedules", meta_grid.resamples, "Schedules: static, epoch, batch:k, micro:k");
  meta->add_option("--ranks", meta_grid.ranks, "Ranks");
  meta->add_option("--seeds", meta_grid.seeds, "Seeds");
  meta->add_option("--jobs", meta_grid.jobs, "Runs in parallel");
  meta->add_flag("--verbose", meta_grid.verbose, "Per-epoch progress");

  SettingFlags gate_flags;
  std::vector<std::string> gate_groups = {"1,2,3", "4,5,6", "7,8,9"};
  std::vector<std::uint64_t> gate_seeds = {42, 43, 44};
  bool gate_ooc = false;
  bool gate_verbose = false;
  auto* gate = app.add_subcommand("seedgate", "One shared adapter across several backbone seeds");
  gate_flags.bind(*gate, true);
  gate->add_option("--groups", gate_groups, "Digit groups, e.g. 1,2,3 4,5,6 7,8,9");
  gate->add_option("--gate-seeds", gate_seeds, "Backbone seed per group");
  gate->add_flag("--ooc", gate_ooc, "Map non-assigned digits to an out-of-class label");
  gate->add_flag("--verbose", gate_verbose, "Per-epoch progress");

  SettingFlags pack_flags;
  std::string pack_from;
  std::string pack_out;
  auto* pack = app.add_subcommand("pack", "Write an artifact for a fresh model, or re-pack one");
  pack_flags.bind(*pack, false);
  pack->add_option("--from", pack_from, "Existing artifact to re-pack");
  pack->add_option("--out", pack_out, "Output artifact path")->required();

  std::string unpack_in;
  std::string unpack_out;
  auto* unpack = app.add_subcommand("unpack", "Print an artifact's header and tensor table");
  unpack->add_option("--in", unpack_in, "Artifact")->required();
  unpack->add_option("--out-dir", unpack_out, "Also write header.json and tensors.json here");

  std::string verify_in;
  std::string verify_data;
  auto* verify = app.add_subcommand("verify", "Reconstruct an artifact and re-check its recorded metrics");
  verify->add_option("--in", verify_in, "Artifact")->required();
  verify->add_option("--data-dir", verify_data, "MNIST directory for the test-set check");

  std::string cost_arch = "all";
  int cost_rank = 8;
  bool cost_json_only = false;
  auto* cost = app.add_subcommand("cost", "FLOPs, optimizer memory and distributable size");
  cost->add_option("--arch", cost_arch, "3M, 30M, 300M, 600M, 900M or all");
  cost->add_option("--rank", cost_rank, "Adapter rank");
  cost->add_flag("--json", cost_json_only, "JSON only");

  std::string rs_losses;
  double rs_full = 0.0;
  double rs_eps = 0.0;
  auto* rankstar = app.add_subcommand("rankstar", "Minimum sufficient rank");
  rankstar->add_option("--losses", rs_losses, "JSON object rank -> loss")->required();
  rankstar->add_option("--full", rs_full, "Fully trained loss")->required();
  rankstar->add_option("--eps", rs_eps, "Tolerance epsilon")->required();

  std::vector<std::string> bs_inputs;
  bool bs_all = false;
  auto* betastats = app.add_subcommand("betastats", "Pooled statistics of final per-layer betas");
  betastats->add_option("inputs", bs_inputs, "summary.json files or run directories")->required();
  betastats->add_flag("--include-resampled", bs_all, "Also pool resampled runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_error("usage", static_cast<int>(ll::ErrorCategory::usage), e.what());
    return static_cast<int>(ll::ErrorCategory::usage);
  }

  if (*train) return cmd_train(ctx, train_flags, quiet);
  if (*sweep) return run_grid(ctx, "sweep", sweep_flags, sweep_grid);
  if (*meta) return run_grid(ctx, "metalora", meta_flags, meta_grid);
  if (*gate) return cmd_seedgate(ctx, gate_flags, gate_groups, gate_seeds, gate_ooc, gate_verbose);
  if (*pack) return cmd_pack(ctx, pack_flags, pack_from, pack_out);
  if (*unpack) return cmd_unpack(ctx, unpack_in, unpack_out);
  if (*verify) return cmd_verify(verify_in, verify_data);
  if (*cost) return cmd_cost(cost_arch, cost_rank, cost_json_only);
  if (*rankstar) return cmd_rankstar(rs_losses, rs_full, rs_eps);
  if (*betastats) return cmd_betastats(bs_inputs, !bs_all);
  return static_cast<int>(ll::ErrorCategory::usage);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ll::Error& e) {
    report_error(ll::to_string(e.category()), static_cast<int>(e.category()), e.what());
    return static_cast<int>(e.category());
  } catch (const fs::filesystem_error& e) {
    report_error("data", static_cast<int>(ll::ErrorCategory::data), e.what());
    return static_cast<int>(ll::ErrorCategory::data);
  } catch (const std::exception& e) {
    report_error("run", static_cast<int>(ll::ErrorCategory::run), e.what());
    return static_cast<int>(ll::ErrorCategory::run);
  }
}
