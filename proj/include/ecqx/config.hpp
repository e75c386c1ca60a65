#pragma once

// Experiment configuration (JSON, strict keys) and the named model presets.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecqx/data.hpp"
#include "ecqx/nn.hpp"
#include "ecqx/qat.hpp"

namespace ecqx {

enum class TaskKind { blobs, idx_images, csv_features };

inline const char* task_name(TaskKind t) {
  switch (t) {
    case TaskKind::blobs: return "blobs";
    case TaskKind::idx_images: return "idx_images";
    case TaskKind::csv_features: return "csv_features";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "blobs") return TaskKind::blobs;
  if (s == "idx_images") return TaskKind::idx_images;
  if (s == "csv_features") return TaskKind::csv_features;
  throw ConfigError("unknown task kind '" + s + "'");
}

struct TaskConfig {
  TaskKind kind = TaskKind::blobs;
  std::uint64_t seed = 42;  // data generation and split
  std::size_t n_classes = 4;
  // blobs
  std::size_t dim = 16;
  std::size_t n_per_class = 250;
  double spread = 1.5;
  // idx_images
  std::string images;
  std::string labels;
  // csv_features
  std::string csv;

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

struct PretrainConfig {
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 1e-2;

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct QatSettings {
  std::size_t epochs = 20;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::vector<int> bitwidths{4};
  std::vector<double> lambda_grid{1e-4, 1.5e-4, 2.5e-4, 4e-4, 5e-4, 6e-4, 7.5e-4, 9e-4};
  std::vector<double> p_grid{0.05};
  double rho = 2.0;
  double momentum = 0.9;
  std::size_t refresh_interval = 1;
  QuantMode mode = QuantMode::ecqx;

  friend bool operator==(const QatSettings&, const QatSettings&) = default;
};

struct ExperimentConfig {
  TaskConfig task;
  std::string preset = "mlp_small";  // empty when `layers` is given
  std::vector<LayerSpec> layers;
  std::vector<std::uint64_t> seeds{0};
  PretrainConfig pretrain;
  QatSettings qat;
  std::string out_dir = "runs";
  std::string checkpoint;  // pretrained model; empty = pretrain on the fly
  unsigned threads = 1;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// ---------------------------------------------------------------------------
// presets

inline bool is_preset(const std::string& name) {
  return name == "mlp_small" || name == "cnn_small" || name == "cnn_small_bn";
}

/// Layer list for a named preset. MLPs flatten image inputs; CNNs need a
/// (C,H,W) sample shape.
inline std::vector<LayerSpec> preset_layers(const std::string& name, const Shape& sample, std::size_t n_classes) {
  if (name == "mlp_small") {
    std::vector<LayerSpec> out;
    if (sample.size() != 1) out.push_back(LayerSpec::flatten());
    const std::size_t in = shape_size(sample);
    for (auto l : {LayerSpec::dense(in, 512), LayerSpec::relu(), LayerSpec::dense(512, 256), LayerSpec::relu(),
                   LayerSpec::dense(256, 128), LayerSpec::relu(), LayerSpec::dense(128, n_classes)})
      out.push_back(l);
    return out;
  }
  if (name == "cnn_small" || name == "cnn_small_bn") {
    if (sample.size() != 3) throw ConfigError("preset " + name + " needs (C,H,W) samples, got " + shape_str(sample));
    if (sample[1] < 4 || sample[2] < 4) throw ConfigError("preset " + name + " needs images of at least 4x4");
    const bool bn = name == "cnn_small_bn";
    std::vector<LayerSpec> out{LayerSpec::conv2d(sample[0], 8, 3, 1, 1, !bn)};
    if (bn) out.push_back(LayerSpec::batchnorm(8));
    out.push_back(LayerSpec::relu());
    out.push_back(LayerSpec::maxpool2d(2));
    out.push_back(LayerSpec::conv2d(8, 16, 3, 1, 1, !bn));
    if (bn) out.push_back(LayerSpec::batchnorm(16));
    out.push_back(LayerSpec::relu());
    out.push_back(LayerSpec::maxpool2d(2));
    out.push_back(LayerSpec::flatten());
    const std::size_t flat = 16 * (sample[1] / 4) * (sample[2] / 4);
    out.push_back(LayerSpec::dense(flat, 64));
    out.push_back(LayerSpec::relu());
    out.push_back(LayerSpec::dense(64, n_classes));
    return out;
  }
  throw ConfigError("unknown model preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// validation

inline void validate_config(const ExperimentConfig& c) {
  const auto& t = c.task;
  if (t.n_classes < 2) throw ConfigError("task.n_classes must be at least 2");
  switch (t.kind) {
    case TaskKind::blobs:
      if (t.dim < 1) throw ConfigError("task.dim must be at least 1");
      if (t.n_per_class < 1) throw ConfigError("task.n_per_class must be positive");
      if (!(t.spread >= 0.0) || !std::isfinite(t.spread)) throw ConfigError("task.spread must be finite and >= 0");
      break;
    case TaskKind::idx_images:
      for (const auto& p : {t.images, t.labels})
        if (p.empty() || !std::filesystem::exists(p)) throw ConfigError("IDX file not found: '" + p + "'");
      break;
    case TaskKind::csv_features:
      if (t.csv.empty() || !std::filesystem::exists(t.csv)) throw ConfigError("CSV file not found: '" + t.csv + "'");
      break;
  }
  if (c.preset.empty() == c.layers.empty()) throw ConfigError("give exactly one of model preset or layer list");
  if (!c.preset.empty() && !is_preset(c.preset)) throw ConfigError("unknown model preset '" + c.preset + "'");
  for (const auto& l : c.layers) {
    try {
      validate_spec(l);
    } catch (const ShapeError& e) {
      throw ConfigError(std::string("model layer: ") + e.what());
    }
  }
  if (c.seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (c.pretrain.batch_size == 0 || c.qat.batch_size == 0) throw ConfigError("batch sizes must be positive");
  if (!(c.pretrain.lr > 0.0) || !(c.qat.lr >= 0.0)) throw ConfigError("learning rates must be positive");
  if (!(c.pretrain.weight_decay >= 0.0)) throw ConfigError("pretrain.weight_decay must be >= 0");
  if (c.qat.bitwidths.empty() || c.qat.lambda_grid.empty() || c.qat.p_grid.empty())
    throw ConfigError("qat grids must be non-empty");
  for (int bw : c.qat.bitwidths)
    if (bw < 2 || bw > 5) throw ConfigError("bit width " + std::to_string(bw) + " outside [2, 5]");
  for (double l : c.qat.lambda_grid)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda values must be finite and >= 0");
  for (double p : c.qat.p_grid)
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("p values must lie in [0, 1]");
  if (!(c.qat.rho > 1.0)) throw ConfigError("rho must exceed 1");
  if (!(c.qat.momentum >= 0.0 && c.qat.momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (c.qat.refresh_interval == 0) throw ConfigError("refresh_interval must be positive");
  if (!c.checkpoint.empty() && !std::filesystem::exists(c.checkpoint))
    throw ConfigError("checkpoint not found: '" + c.checkpoint + "'");
  if (c.threads == 0) throw ConfigError("threads must be positive");
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void get_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  nlohmann::json j{{"kind", kind_name(l.kind)}};
  switch (l.kind) {
    case LayerKind::dense: j.update({{"in", l.in}, {"out", l.out}, {"bias", l.has_bias}}); break;
    case LayerKind::conv2d:
      j.update({{"in", l.in}, {"out", l.out}, {"kernel", l.kernel}, {"stride", l.stride}, {"padding", l.padding},
                {"bias", l.has_bias}});
      break;
    case LayerKind::maxpool2d: j["pool"] = l.pool; break;
    case LayerKind::batchnorm: j["channels"] = l.in; break;
    default: break;
  }
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  check_keys(j, "model layer", {"kind", "in", "out", "kernel", "stride", "padding", "bias", "pool", "channels"});
  std::string kind;
  get_opt(j, "kind", kind, "layer");
  LayerKind k;
  try {
    k = parse_kind(kind);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  std::size_t in = 0, out = 0, kernel = 0, stride = 1, padding = 0, pool = 0, channels = 0;
  bool bias = true;
  get_opt(j, "in", in, "layer");
  get_opt(j, "out", out, "layer");
  get_opt(j, "kernel", kernel, "layer");
  get_opt(j, "stride", stride, "layer");
  get_opt(j, "padding", padding, "layer");
  get_opt(j, "pool", pool, "layer");
  get_opt(j, "channels", channels, "layer");
  get_opt(j, "bias", bias, "layer");
  switch (k) {
    case LayerKind::dense: return LayerSpec::dense(in, out, bias);
    case LayerKind::conv2d: return LayerSpec::conv2d(in, out, kernel, stride, padding, bias);
    case LayerKind::relu: return LayerSpec::relu();
    case LayerKind::maxpool2d: return LayerSpec::maxpool2d(pool);
    case LayerKind::flatten: return LayerSpec::flatten();
    case LayerKind::batchnorm: return LayerSpec::batchnorm(channels);
  }
  return LayerSpec::relu();
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json task{{"kind", task_name(c.task.kind)}, {"seed", c.task.seed}, {"n_classes", c.task.n_classes}};
  switch (c.task.kind) {
    case TaskKind::blobs:
      task.update({{"dim", c.task.dim}, {"n_per_class", c.task.n_per_class}, {"spread", c.task.spread}});
      break;
    case TaskKind::idx_images: task.update({{"images", c.task.images}, {"labels", c.task.labels}}); break;
    case TaskKind::csv_features: task["path"] = c.task.csv; break;
  }
  nlohmann::json model;
  if (!c.preset.empty()) {
    model = c.preset;
  } else {
    model = nlohmann::json::array();
    for (const auto& l : c.layers) model.push_back(detail::layer_to_json(l));
  }
  nlohmann::json j{
      {"task", task},
      {"model", model},
      {"seeds", c.seeds},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"lr", c.pretrain.lr},
        {"batch_size", c.pretrain.batch_size},
        {"weight_decay", c.pretrain.weight_decay}}},
      {"qat",
       {{"epochs", c.qat.epochs},
        {"lr", c.qat.lr},
        {"batch_size", c.qat.batch_size},
        {"bitwidths", c.qat.bitwidths},
        {"lambda_grid", c.qat.lambda_grid},
        {"p_grid", c.qat.p_grid},
        {"rho", c.qat.rho},
        {"momentum", c.qat.momentum},
        {"refresh_interval", c.qat.refresh_interval},
        {"mode", mode_name(c.qat.mode)}}},
      {"paths", {{"out_dir", c.out_dir}, {"checkpoint", c.checkpoint}}},
      {"threads", c.threads}};
  return j;
}

/// Parses and validates. Unknown keys anywhere are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::get_opt;
  detail::check_keys(j, "config", {"task", "model", "seeds", "pretrain", "qat", "paths", "threads"});
  ExperimentConfig c;
  if (j.contains("task")) {
    const auto& t = j["task"];
    detail::check_keys(t, "task",
                       {"kind", "seed", "n_classes", "dim", "n_per_class", "spread", "images", "labels", "path"});
    std::string kind = "blobs";
    get_opt(t, "kind", kind, "task");
    c.task.kind = parse_task(kind);
    get_opt(t, "seed", c.task.seed, "task");
    get_opt(t, "n_classes", c.task.n_classes, "task");
    get_opt(t, "dim", c.task.dim, "task");
    get_opt(t, "n_per_class", c.task.n_per_class, "task");
    get_opt(t, "spread", c.task.spread, "task");
    get_opt(t, "images", c.task.images, "task");
    get_opt(t, "labels", c.task.labels, "task");
    get_opt(t, "path", c.task.csv, "task");
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (m.is_string()) {
      c.preset = m.get<std::string>();
    } else if (m.is_array()) {
      c.preset.clear();
      for (const auto& l : m) c.layers.push_back(detail::layer_from_json(l));
    } else {
      throw ConfigError("model must be a preset name or a layer list");
    }
  }
  get_opt(j, "seeds", c.seeds, "config");
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    detail::check_keys(p, "pretrain", {"epochs", "lr", "batch_size", "weight_decay"});
    get_opt(p, "epochs", c.pretrain.epochs, "pretrain");
    get_opt(p, "lr", c.pretrain.lr, "pretrain");
    get_opt(p, "batch_size", c.pretrain.batch_size, "pretrain");
    get_opt(p, "weight_decay", c.pretrain.weight_decay, "pretrain");
  }
  if (j.contains("qat")) {
    const auto& q = j["qat"];
    detail::check_keys(q, "qat",
                       {"epochs", "lr", "batch_size", "bitwidths", "lambda_grid", "p_grid", "rho", "momentum",
                        "refresh_interval", "mode"});
    get_opt(q, "epochs", c.qat.epochs, "qat");
    get_opt(q, "lr", c.qat.lr, "qat");
    get_opt(q, "batch_size", c.qat.batch_size, "qat");
    get_opt(q, "bitwidths", c.qat.bitwidths, "qat");
    get_opt(q, "lambda_grid", c.qat.lambda_grid, "qat");
    get_opt(q, "p_grid", c.qat.p_grid, "qat");
    get_opt(q, "rho", c.qat.rho, "qat");
    get_opt(q, "momentum", c.qat.momentum, "qat");
    get_opt(q, "refresh_interval", c.qat.refresh_interval, "qat");
    std::string mode = mode_name(c.qat.mode);
    get_opt(q, "mode", mode, "qat");
    try {
      c.qat.mode = parse_mode(mode);
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    detail::check_keys(p, "paths", {"out_dir", "checkpoint"});
    get_opt(p, "out_dir", c.out_dir, "paths");
    get_opt(p, "checkpoint", c.checkpoint, "paths");
  }
  get_opt(j, "threads", c.threads, "config");
  validate_config(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("config file not found: '" + path + "'");
  return parse_config(read_file(path));
}

inline std::string serialize_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// building data and models from a config

inline SplitDataset load_task(const TaskConfig& t) {
  switch (t.kind) {
    case TaskKind::blobs: return gen_blobs(t.seed, t.n_classes, t.dim, t.n_per_class, t.spread);
    case TaskKind::idx_images: {
      Dataset d = load_idx(t.images, t.labels);
      d.n_classes = std::max(d.n_classes, t.n_classes);
      return split_dataset(d, t.seed);
    }
    case TaskKind::csv_features: return split_dataset(load_csv_features(t.csv, t.n_classes), t.seed);
  }
  throw ConfigError("unknown task");
}

/// CNN presets on flat features reshape each sample to 1 x k x k (needs a
/// square feature count).
inline SplitDataset prepare_inputs(SplitDataset d, const ExperimentConfig& c) {
  const bool cnn = c.preset == "cnn_small" || c.preset == "cnn_small_bn" ||
                   (!c.layers.empty() && c.layers.front().kind == LayerKind::conv2d);
  const Shape s = d.train.sample_shape();
  if (cnn && s.size() == 1) {
    const auto k = std::size_t(std::llround(std::sqrt(double(s[0]))));
    if (k * k != s[0]) throw ConfigError("conv models need a square feature count, got " + std::to_string(s[0]));
    const Shape img{1, k, k};
    d.train = reshape_samples(d.train, img);
    d.val = reshape_samples(d.val, img);
    d.test = reshape_samples(d.test, img);
  }
  return d;
}

inline Model build_model(const ExperimentConfig& c, const Shape& sample, std::size_t n_classes, std::uint64_t seed) {
  const auto specs = c.preset.empty() ? c.layers : preset_layers(c.preset, sample, n_classes);
  return make_model(sample, specs, seed);
}

inline QatConfig qat_config(const ExperimentConfig& c, std::uint64_t seed) {
  QatConfig q;
  q.mode = c.qat.mode;
  q.bitwidth = c.qat.bitwidths.front();
  q.lambda = c.qat.lambda_grid.front();
  q.p = c.qat.p_grid.front();
  q.rho = c.qat.rho;
  q.momentum = c.qat.momentum;
  q.refresh_interval = c.qat.refresh_interval;
  q.lr = c.qat.lr;
  q.batch_size = c.qat.batch_size;
  q.epochs = c.qat.epochs;
  q.seed = seed;
  return q;
}

}  // namespace ecqx
