#pragma once

// Run configuration: `key = value` lines, `#` comments, dotted keys. Every key
// maps onto a field of RunConfig; unknown or repeated keys are rejected.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nlxct/encoder.hpp"
#include "nlxct/mim.hpp"
#include "nlxct/optim.hpp"
#include "nlxct/synth.hpp"

namespace nlxct {

enum class Replay { Full, None };
enum class OptimizerKind { DeepMomentum, Momentum, AdamW };

struct PretrainSettings {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.005;
  double mask_ratio = 0.6;
  std::size_t mask_patch = 8;
};

struct FinetuneSettings {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double weight_decay = 1e-4;
  std::size_t patience = 10;
  double labeled_fraction = 1.0;
  std::string init;  // optional pretrained checkpoint
};

struct ContinualSettings {
  Replay replay = Replay::Full;
  std::size_t epochs_per_batch = 15;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double backbone_lr_mult = 0.1;
  double head_lr_mult = 20.0;
  double weight_decay = 1e-4;
  std::string init;  // fine-tuned checkpoint
};

struct OptimSettings {
  OptimizerKind kind = OptimizerKind::DeepMomentum;
  double momentum = 0.9;
  double rho = 0.99;
  double gamma = 0.1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_root;   // generated dataset directory
  std::string checkpoint;  // model evaluated by `eval`
  DatasetSpec data{};
  ContinualSpec continual_data{};
  AugmentConfig augment{};
  EncoderConfig model{};
  OptimSettings optim{};
  PretrainSettings pretrain{};
  FinetuneSettings finetune{};
  ContinualSettings continual{};

  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size() || !std::isfinite(v))
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  return v;
}

inline std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace detail

/// Binds config keys to RunConfig fields for parsing and echoing.
class ConfigSchema {
 public:
  struct Binding {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };

  explicit ConfigSchema(RunConfig& c) {
    using namespace detail;
    num("seed", c.seed);
    str("data.root", c.data_root);
    str("eval.checkpoint", c.checkpoint);

    num("data.slices", c.data.slices);
    array("data.orders", c.data.orders);
    array("data.split_fractions", c.data.split_fractions);
    array("data.class_mix", c.data.class_mix);
    num("data.drift_start", c.data.drift_start);
    num("data.drift_end", c.data.drift_end);
    num("data.unlabeled", c.data.unlabeled);
    num("data.unlabeled_orders", c.data.unlabeled_orders);
    num("data.unlabeled_drift_max", c.data.unlabeled_drift_max);
    num("data.image_size", c.data.render.image_size);
    num("data.pitch", c.data.render.pitch);
    num("data.wall_sigma", c.data.render.wall_sigma);
    num("data.background", c.data.render.background);
    num("data.contrast", c.data.render.contrast);
    num("data.noise", c.data.render.noise);
    num("data.phase_jitter", c.data.render.phase_jitter);

    num("continual.batches", c.continual_data.batches);
    num("continual.slices_per_batch", c.continual_data.slices_per_batch);
    num("continual.orders_per_batch", c.continual_data.orders_per_batch);
    num("continual.eval_orders_per_batch", c.continual_data.eval_orders_per_batch);
    num("continual.drift_first", c.continual_data.drift_first);
    num("continual.drift_step", c.continual_data.drift_step);

    num("augment.min_scale", c.augment.min_scale);
    num("augment.flip_probability", c.augment.flip_probability);
    num("augment.eval_crop", c.augment.eval_crop);

    num("model.image_size", c.model.image_size);
    array("model.stage_channels", c.model.stage_channels);
    array("model.stage_depths", c.model.stage_depths);
    array("model.patch_strides", c.model.patch_strides);
    num("model.d_state", c.model.d_state);
    num("model.group_width", c.model.group_width);
    boolean("model.context_gate", c.model.context_gate);

    boolean("nl.enabled", c.model.nl_enabled);
    num("nl.alpha", c.model.continuum.alpha);
    num("nl.lambda", c.model.continuum.lambda);

    bindings_["optim.name"] = {[&c](const std::string& v) {
                                 if (v == "deep_momentum") c.optim.kind = OptimizerKind::DeepMomentum;
                                 else if (v == "momentum") c.optim.kind = OptimizerKind::Momentum;
                                 else if (v == "adamw") c.optim.kind = OptimizerKind::AdamW;
                                 else throw ConfigError("optim.name: expected deep_momentum, momentum or adamw, got '" + v + "'");
                               },
                               [&c] {
                                 switch (c.optim.kind) {
                                   case OptimizerKind::DeepMomentum: return std::string("deep_momentum");
                                   case OptimizerKind::Momentum: return std::string("momentum");
                                   case OptimizerKind::AdamW: return std::string("adamw");
                                 }
                                 return std::string();
                               }};
    order_.push_back("optim.name");
    num("optim.momentum", c.optim.momentum);
    num("optim.rho", c.optim.rho);
    num("optim.gamma", c.optim.gamma);

    num("pretrain.epochs", c.pretrain.epochs);
    num("pretrain.batch_size", c.pretrain.batch_size);
    num("pretrain.lr", c.pretrain.lr);
    num("pretrain.weight_decay", c.pretrain.weight_decay);
    num("pretrain.mask_ratio", c.pretrain.mask_ratio);
    num("pretrain.mask_patch", c.pretrain.mask_patch);

    num("finetune.epochs", c.finetune.epochs);
    num("finetune.batch_size", c.finetune.batch_size);
    num("finetune.lr", c.finetune.lr);
    num("finetune.weight_decay", c.finetune.weight_decay);
    num("finetune.patience", c.finetune.patience);
    num("finetune.labeled_fraction", c.finetune.labeled_fraction);
    str("finetune.init", c.finetune.init);

    bindings_["continual.replay"] = {[&c](const std::string& v) {
                                       if (v == "full") c.continual.replay = Replay::Full;
                                       else if (v == "none") c.continual.replay = Replay::None;
                                       else throw ConfigError("continual.replay: expected full or none, got '" + v + "'");
                                     },
                                     [&c] { return std::string(c.continual.replay == Replay::Full ? "full" : "none"); }};
    order_.push_back("continual.replay");
    num("continual.epochs_per_batch", c.continual.epochs_per_batch);
    num("continual.batch_size", c.continual.batch_size);
    num("continual.lr", c.continual.lr);
    num("continual.backbone_lr_mult", c.continual.backbone_lr_mult);
    num("continual.head_lr_mult", c.continual.head_lr_mult);
    num("continual.weight_decay", c.continual.weight_decay);
    str("continual.init", c.continual.init);
  }

  bool has(const std::string& key) const { return bindings_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) {
    const auto it = bindings_.find(key);
    if (it == bindings_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(value);
  }

  /// All keys in declaration order, `key = value` per line.
  std::string echo() const {
    std::string out;
    for (const auto& k : order_) out += k + " = " + bindings_.at(k).get() + "\n";
    return out;
  }

  const std::vector<std::string>& keys() const { return order_; }

 private:
  template <class T>
  void num(const std::string& key, T& field) {
    if constexpr (std::is_floating_point_v<T>) {
      bindings_[key] = {[&field, key](const std::string& v) { field = detail::parse_double(key, v); },
                        [&field] { return detail::format_double(field); }};
    } else {
      bindings_[key] = {[&field, key](const std::string& v) { field = static_cast<T>(detail::parse_unsigned(key, v)); },
                        [&field] { return std::to_string(field); }};
    }
    order_.push_back(key);
  }

  void str(const std::string& key, std::string& field) {
    bindings_[key] = {[&field](const std::string& v) { field = v; }, [&field] { return field; }};
    order_.push_back(key);
  }

  void boolean(const std::string& key, bool& field) {
    bindings_[key] = {[&field, key](const std::string& v) { field = detail::parse_bool(key, v); },
                      [&field] { return std::string(field ? "true" : "false"); }};
    order_.push_back(key);
  }

  template <class T, std::size_t N>
  void array(const std::string& key, std::array<T, N>& field) {
    bindings_[key] = {[&field, key](const std::string& v) {
                        const auto items = detail::split_list(v);
                        if (items.size() != N)
                          throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated values");
                        for (std::size_t i = 0; i < N; ++i) {
                          if constexpr (std::is_floating_point_v<T>) field[i] = detail::parse_double(key, items[i]);
                          else field[i] = static_cast<T>(detail::parse_unsigned(key, items[i]));
                        }
                      },
                      [&field] {
                        std::string out;
                        for (std::size_t i = 0; i < N; ++i) {
                          if (i) out += ",";
                          if constexpr (std::is_floating_point_v<T>) out += detail::format_double(field[i]);
                          else out += std::to_string(field[i]);
                        }
                        return out;
                      }};
    order_.push_back(key);
  }

  std::map<std::string, Binding> bindings_;
  std::vector<std::string> order_;
};

inline void RunConfig::validate() const {
  data.validate();
  continual_data.validate();
  model.validate();
  if (model.image_size != data.render.image_size)
    throw ConfigError("model.image_size must equal data.image_size");
  if (model.image_size % pretrain.mask_patch) throw ConfigError("pretrain.mask_patch must divide the image size");
  if (!(augment.min_scale > 0.0 && augment.min_scale <= 1.0)) throw ConfigError("augment.min_scale must lie in (0, 1]");
  if (!(augment.flip_probability >= 0.0 && augment.flip_probability <= 1.0))
    throw ConfigError("augment.flip_probability must lie in [0, 1]");
  if (!(augment.eval_crop > 0.0 && augment.eval_crop <= 1.0)) throw ConfigError("augment.eval_crop must lie in (0, 1]");
  if (!(optim.momentum >= 0.0 && optim.momentum < 1.0)) throw ConfigError("optim.momentum must lie in [0, 1)");
  if (!(optim.rho > 0.0 && optim.rho < 1.0)) throw ConfigError("optim.rho must lie in (0, 1)");
  if (!(optim.gamma >= 0.0 && optim.gamma <= 1.0)) throw ConfigError("optim.gamma must lie in [0, 1]");
  auto positive = [](double v, const char* key) {
    if (!(v > 0.0)) throw ConfigError(std::string(key) + " must be positive");
  };
  auto non_negative = [](double v, const char* key) {
    if (!(v >= 0.0)) throw ConfigError(std::string(key) + " must be non-negative");
  };
  positive(pretrain.lr, "pretrain.lr");
  positive(finetune.lr, "finetune.lr");
  positive(continual.lr, "continual.lr");
  positive(continual.backbone_lr_mult, "continual.backbone_lr_mult");
  positive(continual.head_lr_mult, "continual.head_lr_mult");
  non_negative(pretrain.weight_decay, "pretrain.weight_decay");
  non_negative(finetune.weight_decay, "finetune.weight_decay");
  non_negative(continual.weight_decay, "continual.weight_decay");
  if (pretrain.batch_size == 0 || finetune.batch_size == 0 || continual.batch_size == 0)
    throw ConfigError("batch sizes must be positive");
  if (pretrain.epochs == 0 || finetune.epochs == 0 || continual.epochs_per_batch == 0)
    throw ConfigError("epoch counts must be positive");
  if (finetune.patience == 0) throw ConfigError("finetune.patience must be positive");
  if (!(pretrain.mask_ratio >= 0.0 && pretrain.mask_ratio <= 1.0)) throw ConfigError("pretrain.mask_ratio must lie in [0, 1]");
  if (!(finetune.labeled_fraction > 0.0 && finetune.labeled_fraction <= 1.0))
    throw ConfigError("finetune.labeled_fraction must lie in (0, 1]");
}

/// Applies `key = value` lines onto cfg.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  ConfigSchema schema(cfg);
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key");
    if (!schema.has(key)) throw ConfigError(where + "unknown config key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
    try {
      schema.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  RunConfig cfg;
  apply_config_text(cfg, text, origin);
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

inline std::string resolved_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  return ConfigSchema(copy).echo();
}

}  // namespace nlxct
