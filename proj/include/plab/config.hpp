#pragma once

// Experiment configuration: "section.key = value" text with typed, range-checked
// keys, defaults for everything, and a canonical echo.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "plab/attack.hpp"
#include "plab/bench.hpp"
#include "plab/data.hpp"
#include "plab/defense.hpp"
#include "plab/errors.hpp"
#include "plab/eval.hpp"
#include "plab/nn.hpp"
#include "plab/noise.hpp"
#include "plab/train.hpp"

namespace plab {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

enum class KeyType { integer, real, boolean, text, choice, int_list, real_list };

struct KeyDef {
  std::string name;
  KeyType type;
  std::string fallback;
  double lo = -INFINITY;  // numeric range, inclusive
  double hi = INFINITY;
  std::vector<std::string> choices;
};

/// Every recognized key, in echo order.
inline const std::vector<KeyDef>& config_keys() {
  using K = KeyType;
  static const std::vector<KeyDef> keys = {
      {"seed", K::integer, "0", 0, 9.007199254740992e15},
      {"output", K::text, "run"},

      {"data.source", K::choice, "synthetic", 0, 0, {"synthetic", "idx", "cifar"}},
      {"data.train_images", K::text, ""},
      {"data.train_labels", K::text, ""},
      {"data.test_images", K::text, ""},
      {"data.test_labels", K::text, ""},
      {"data.classes", K::integer, "10", 2, 1000},
      {"data.per_class", K::integer, "500", 1, 1e6},
      {"data.test_per_class", K::integer, "100", 1, 1e6},
      {"data.channels", K::integer, "3", 1, 3},
      {"data.height", K::integer, "16", 4, 256},
      {"data.width", K::integer, "16", 4, 256},
      {"data.pixel_noise", K::real, "0.06", 0, 1},
      {"data.hue_jitter", K::real, "0.05", 0, 1},
      {"data.foreign_color", K::real, "0.25", 0, 1},
      {"data.position_jitter", K::real, "2", 0, 8},
      {"data.bg_low", K::real, "0", 0, 1},
      {"data.bg_high", K::real, "0.35", 0, 1},
      {"data.modes", K::integer, "0", 0, 1000},
      {"data.mode_jitter", K::real, "1", 0, 8},
      {"data.contrast", K::real, "1", 0, 1},

      {"model.arch", K::choice, "smallconv", 0, 0, {"mlp", "smallconv", "transfer-head"}},
      {"model.hidden", K::int_list, "128", 1, 1e5},
      {"model.conv", K::int_list, "8,16", 1, 1e4},
      {"model.activation", K::choice, "relu", 0, 0, {"relu", "tanh", "identity"}},

      {"attack.kind", K::choice, "gradient-matching", 0, 0, {"gradient-matching", "feature-collision", "backdoor-patch"}},
      {"attack.budget", K::real, "0.01", 1e-12, 0.5},
      {"attack.xi", K::integer, "16", 0, 255},
      {"attack.steps", K::integer, "250", 0, 1e6},
      {"attack.restarts", K::integer, "4", 1, 1000},
      {"attack.step_size", K::real, "0", 0, 255},
      {"attack.augment", K::boolean, "true"},
      {"attack.adaptive", K::choice, "none", 0, 0, {"none", "bernoulli", "friendly"}},
      {"attack.target", K::integer, "-1", -1, 1e9},
      {"attack.trigger_size", K::integer, "3", 0, 64},

      {"defense.kind", K::choice, "none", 0, 0, {"none", "friends", "noise-only", "friendly-only"}},
      {"defense.zeta", K::integer, "16", 0, 255},
      {"defense.mu", K::integer, "16", 0, 255},
      {"defense.noise", K::choice, "bernoulli", 0, 0, {"bernoulli", "uniform", "gaussian"}},
      {"defense.lambda", K::real, "1", 0, 1e6},
      {"defense.norm", K::choice, "l2", 0, 0, {"l1", "l2", "linf"}},
      {"defense.def_epoch", K::integer, "5", 0, 1e6},
      {"defense.steps", K::integer, "20", 0, 1e6},
      {"defense.lr", K::real, "20", 1e-12, 1e9},
      {"defense.momentum", K::real, "0.9", 0, 1},
      {"defense.batch", K::integer, "128", 1, 1e6},
      {"defense.init", K::real, "-1", -1, 255},
      {"defense.search", K::boolean, "false"},
      {"defense.transfer", K::boolean, "false"},
      {"defense.noise_file", K::text, ""},

      {"train.epochs", K::integer, "20", 0, 1e6},
      {"train.batch", K::integer, "128", 1, 1e6},
      {"train.lr", K::real, "0.05", 1e-12, 1e3},
      {"train.momentum", K::real, "0.9", 0, 0.999},
      {"train.nesterov", K::boolean, "true"},
      {"train.weight_decay", K::real, "5e-4", 0, 1},
      {"train.milestones", K::int_list, "8,13,17", 0, 1e6},
      {"train.gamma", K::real, "0.1", 0, 1},
      {"train.augment", K::boolean, "true"},

      {"probe.extent", K::real, "16", 0, 255},
      {"probe.steps", K::integer, "10", 1, 1000},
      {"probe.radii", K::real_list, "2,4,8,16", 0, 255},
      {"probe.samples", K::integer, "10", 2, 1e6},
      {"probe.center", K::integer, "-1", -1, 1e9},
      {"probe.draws", K::integer, "4", 1, 1e6},
  };
  return keys;
}

inline const KeyDef* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

/// Resolved key=value settings. Every key is always present.
class ExperimentConfig {
 public:
  ExperimentConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.fallback;
  }

  /// Validates and stores one value; `line` is reported in errors (0 for flags).
  void set(const std::string& raw_key, const std::string& raw_value, std::size_t line = 0) {
    const std::string key = detail::trim(raw_key), value = detail::trim(raw_value);
    const KeyDef* def = find_key(key);
    if (!def) throw ConfigError(line, "unknown key '" + key + "'");
    check(*def, value, line);
    values_[key] = canonical(*def, value);
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(0, "unknown key '" + key + "'");
    return it->second;
  }
  std::int64_t integer(const std::string& key) const { return std::stoll(text(key)); }
  double real(const std::string& key) const { return std::stod(text(key)); }
  bool boolean(const std::string& key) const { return text(key) == "true"; }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : detail::split_list(text(key))) out.push_back(std::stod(s));
    return out;
  }
  std::vector<std::int64_t> integers(const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const auto& s : detail::split_list(text(key))) out.push_back(std::stoll(s));
    return out;
  }

  std::uint64_t seed() const { return std::uint64_t(integer("seed")); }

  /// Canonical text, one "key = value" per line in table order.
  std::string echo() const {
    std::string out;
    for (const auto& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
    return out;
  }

  /// Cross-key checks that single values cannot express.
  void validate() const {
    const std::string src = text("data.source");
    if (src != "synthetic")
      for (const char* k : {"data.train_images", "data.test_images"})
        if (text(k).empty()) throw ConfigError(0, std::string(k) + " is required when data.source = " + src);
    if (src == "idx")
      for (const char* k : {"data.train_labels", "data.test_labels"})
        if (text(k).empty()) throw ConfigError(0, std::string(k) + " is required when data.source = idx");
    if (real("data.bg_low") > real("data.bg_high")) throw ConfigError(0, "data.bg_low exceeds data.bg_high");
    if (integers("model.conv").size() != 2) throw ConfigError(0, "model.conv needs exactly two widths");
    const auto kind = text("defense.kind");
    const bool friendly = kind == "friends" || kind == "friendly-only";
    if (friendly && !boolean("defense.transfer") && integer("defense.def_epoch") >= integer("train.epochs"))
      throw ConfigError(0, "defense.def_epoch must be below train.epochs");
    if (real("defense.init") > double(integer("defense.zeta")))
      throw ConfigError(0, "defense.init exceeds defense.zeta");
  }

 private:
  static bool parse_int(const std::string& s, std::int64_t& out) {
    std::size_t pos = 0;
    try {
      out = std::stoll(s, &pos);
    } catch (const std::exception&) {
      return false;
    }
    return pos == s.size();
  }

  static bool parse_real(const std::string& s, double& out) {
    std::size_t pos = 0;
    try {
      out = std::stod(s, &pos);
    } catch (const std::exception&) {
      return false;
    }
    return pos == s.size() && std::isfinite(out);
  }

  static void in_range(const KeyDef& d, double v, const std::string& shown, std::size_t line) {
    if (v < d.lo || v > d.hi) {
      std::ostringstream os;
      os << "value " << shown << " for '" << d.name << "' is out of range [" << d.lo << ", " << d.hi << "]";
      throw ConfigError(line, os.str());
    }
  }

  static void check(const KeyDef& d, const std::string& v, std::size_t line) {
    auto type_error = [&](const std::string& want) {
      throw ConfigError(line, "type error: '" + d.name + "' expects " + want + ", got '" + v + "'");
    };
    switch (d.type) {
      case KeyType::integer: {
        std::int64_t x;
        if (!parse_int(v, x)) type_error("an integer");
        in_range(d, double(x), v, line);
        break;
      }
      case KeyType::real: {
        double x;
        if (!parse_real(v, x)) type_error("a number");
        in_range(d, x, v, line);
        break;
      }
      case KeyType::boolean:
        if (v != "true" && v != "false" && v != "1" && v != "0") type_error("true or false");
        break;
      case KeyType::text: break;
      case KeyType::choice:
        if (std::find(d.choices.begin(), d.choices.end(), v) == d.choices.end()) {
          std::string opts;
          for (const auto& c : d.choices) opts += (opts.empty() ? "" : "|") + c;
          type_error("one of " + opts);
        }
        break;
      case KeyType::int_list:
      case KeyType::real_list:
        for (const auto& item : detail::split_list(v)) {
          double x;
          std::int64_t i;
          if (d.type == KeyType::int_list ? !parse_int(item, i) : !parse_real(item, x))
            type_error(d.type == KeyType::int_list ? "a comma-separated integer list" : "a comma-separated number list");
          in_range(d, d.type == KeyType::int_list ? double(i) : x, item, line);
        }
        break;
    }
  }

  static std::string canonical(const KeyDef& d, const std::string& v) {
    if (d.type == KeyType::boolean) return v == "true" || v == "1" ? "true" : "false";
    if (d.type == KeyType::int_list || d.type == KeyType::real_list) {
      std::string out;
      for (const auto& item : detail::split_list(v)) out += (out.empty() ? "" : ",") + item;
      return out;
    }
    return v;
  }

  std::map<std::string, std::string> values_;
};

/// Applies "section.key = value" lines; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(no, "expected 'key = value'");
    cfg.set(line.substr(0, eq), line.substr(eq + 1), no);
  }
}

/// File values first, then `overrides` ("key=value" each) on top.
inline ExperimentConfig parse_config(const std::optional<std::filesystem::path>& path,
                                     const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  ExperimentConfig cfg;
  if (path) {
    std::ifstream in(*path, std::ios::binary);
    if (!in) throw ConfigError(0, "cannot read config file " + path->string());
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str());
  }
  for (const auto& [k, v] : overrides) cfg.set(k, v, 0);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Module configurations from the resolved settings

inline SynthConfig synth_config(const ExperimentConfig& c) {
  SynthConfig s;
  s.seed = derive_seed(c.seed(), {stream::synth});
  s.classes = std::size_t(c.integer("data.classes"));
  s.per_class = std::size_t(c.integer("data.per_class"));
  s.test_per_class = std::size_t(c.integer("data.test_per_class"));
  s.channels = std::size_t(c.integer("data.channels"));
  s.height = std::size_t(c.integer("data.height"));
  s.width = std::size_t(c.integer("data.width"));
  s.pixel_noise = c.real("data.pixel_noise");
  s.hue_jitter = c.real("data.hue_jitter");
  s.foreign_color = c.real("data.foreign_color");
  s.position_jitter = c.real("data.position_jitter");
  s.bg_low = c.real("data.bg_low");
  s.bg_high = c.real("data.bg_high");
  s.modes = std::size_t(c.integer("data.modes"));
  s.mode_jitter = c.real("data.mode_jitter");
  s.contrast = c.real("data.contrast");
  return s;
}

inline ModelSpec model_spec(const ExperimentConfig& c, const Dataset& train) {
  ModelSpec m;
  m.arch = parse_arch(c.text("model.arch"));
  m.hidden.clear();
  for (auto h : c.integers("model.hidden")) m.hidden.push_back(std::size_t(h));
  const auto conv = c.integers("model.conv");
  m.conv = {std::size_t(conv.at(0)), std::size_t(conv.at(1))};
  m.activation = parse_activation(c.text("model.activation"));
  return spec_for(m, train);
}

inline TrainConfig train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.epochs = int(c.integer("train.epochs"));
  t.batch = std::size_t(c.integer("train.batch"));
  t.sgd.lr = c.real("train.lr");
  t.sgd.momentum = c.real("train.momentum");
  t.sgd.nesterov = c.boolean("train.nesterov");
  t.sgd.weight_decay = c.real("train.weight_decay");
  t.sgd.schedule.milestones.clear();
  for (auto m : c.integers("train.milestones")) t.sgd.schedule.milestones.push_back(int(m));
  t.sgd.schedule.factor = c.real("train.gamma");
  t.augment = c.boolean("train.augment");
  t.seed = derive_seed(c.seed(), {stream::shuffle});
  return t;
}

inline AttackConfig attack_config(const ExperimentConfig& c) {
  AttackConfig a;
  a.kind = parse_attack_kind(c.text("attack.kind"));
  a.budget = c.real("attack.budget");
  a.xi = int(c.integer("attack.xi"));
  a.steps = int(c.integer("attack.steps"));
  a.restarts = int(c.integer("attack.restarts"));
  a.step_size = c.real("attack.step_size");
  a.augment = c.boolean("attack.augment");
  a.seed = derive_seed(c.seed(), {stream::craft});
  return a;
}

/// Friendly and random components as configured, whatever defense.kind says.
inline DefenseConfig defense_components(const ExperimentConfig& c) {
  DefenseConfig d;
  d.noise.zeta = int(c.integer("defense.zeta"));
  d.noise.lambda = c.real("defense.lambda");
  d.noise.norm = parse_noise_norm(c.text("defense.norm"));
  d.noise.steps = int(c.integer("defense.steps"));
  d.noise.lr = c.real("defense.lr");
  d.noise.momentum = c.real("defense.momentum");
  d.noise.batch = std::size_t(c.integer("defense.batch"));
  d.noise.init = c.real("defense.init");
  d.noise.search = c.boolean("defense.search");
  d.noise.seed = derive_seed(c.seed(), {stream::friendly_init});
  d.random.dist = parse_noise_dist(c.text("defense.noise"));
  d.random.mu = int(c.integer("defense.mu"));
  d.random.seed = derive_seed(c.seed(), {stream::random_noise});
  d.schedule.def_epoch = int(c.integer("defense.def_epoch"));
  d.schedule.transfer = c.boolean("defense.transfer");
  return d;
}

/// The defense selected by defense.kind.
inline DefenseConfig defense_config(const ExperimentConfig& c) {
  const DefenseConfig d = defense_components(c);
  const auto kind = c.text("defense.kind");
  if (kind == "none") return no_defense();
  if (kind == "noise-only") return noise_only_defense(d);
  if (kind == "friendly-only") return friendly_only_defense(d);
  return d;
}

inline GridSpec grid_spec(const ExperimentConfig& c) {
  GridSpec g;
  g.extent = c.real("probe.extent") / 255.0;
  g.steps = int(c.integer("probe.steps"));
  g.seed = derive_seed(c.seed(), {stream::probe});
  return g;
}

}  // namespace plab
