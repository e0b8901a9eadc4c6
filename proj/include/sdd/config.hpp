#pragma once

// Run configuration: a flat `section.key = value` file, `--set` overrides,
// and a JSON echo of every effective value.
//
// Precedence is flags > file > defaults; keys are applied in that order, so a
// later assignment always wins. Unknown keys are rejected by name.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdd/data.hpp"
#include "sdd/errors.hpp"
#include "sdd/models.hpp"
#include "sdd/sdd_loss.hpp"
#include "sdd/training.hpp"

namespace sdd {

struct DataConfig {
  std::string source = "synth";  // synth | idx
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_size = 1024;
  std::size_t test_size = 1024;
};

struct BenchConfig {
  std::size_t batches = 200;
  std::size_t warmup_batches = 10;
};

struct AppConfig {
  DataConfig data;
  SynthSpec synth;
  std::vector<ConvBlockSpec> teacher_blocks = reference_teacher(1).blocks;
  std::vector<ConvBlockSpec> student_blocks = reference_student(1).blocks;
  TrainConfig train;
  DistillConfig sdd;
  BenchConfig bench;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError(key + ": cannot parse '" + value + "' as " + expected);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') bad_value(key, v, "a non-negative integer");
    x = std::stoull(v, &pos);
  } catch (const std::logic_error&) {
    bad_value(key, v, "a non-negative integer");
  }
  if (pos != v.size()) bad_value(key, v, "a non-negative integer");
  return static_cast<std::size_t>(x);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::logic_error&) {
    bad_value(key, v, "a real number");
  }
  if (pos != v.size()) bad_value(key, v, "a real number");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "a boolean (true/false)");
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split(v, ',')) out.push_back(parse_size(key, item));
  return out;
}

/// "out:kernel:stride[:padding],..."
inline std::vector<ConvBlockSpec> parse_blocks(const std::string& key, const std::string& v) {
  std::vector<ConvBlockSpec> out;
  for (const auto& item : split(v, ',')) {
    std::vector<std::string> f;
    std::stringstream ss(item);
    std::string part;
    while (std::getline(ss, part, ':')) f.push_back(trim(part));
    if (f.size() != 3 && f.size() != 4) bad_value(key, item, "out:kernel:stride[:padding]");
    auto b = conv_block(parse_size(key, f[0]), parse_size(key, f[1]), parse_size(key, f[2]));
    if (f.size() == 4) b.padding = parse_size(key, f[3]);
    if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0) bad_value(key, item, "positive block sizes");
    out.push_back(b);
  }
  if (out.empty()) bad_value(key, v, "a non-empty block list");
  return out;
}

inline std::string blocks_to_string(const std::vector<ConvBlockSpec>& blocks) {
  std::string s;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) s += ',';
    const auto& b = blocks[i];
    s += std::to_string(b.out_channels) + ':' + std::to_string(b.kernel) + ':' + std::to_string(b.stride) + ':' +
         std::to_string(b.padding);
  }
  return s;
}

struct ConfigKey {
  std::function<void(AppConfig&, const std::string&)> set;
  std::function<nlohmann::json(const AppConfig&)> get;
};

inline const std::map<std::string, ConfigKey>& config_keys() {
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    auto size_key = [&](const std::string& name, auto field) {
      k[name] = {[=](AppConfig& c, const std::string& v) { field(c) = parse_size(name, v); },
                 [=](const AppConfig& c) { return nlohmann::json(field(const_cast<AppConfig&>(c))); }};
    };
    auto real_key = [&](const std::string& name, auto field) {
      k[name] = {[=](AppConfig& c, const std::string& v) { field(c) = parse_real(name, v); },
                 [=](const AppConfig& c) { return nlohmann::json(field(const_cast<AppConfig&>(c))); }};
    };
    auto bool_key = [&](const std::string& name, auto field) {
      k[name] = {[=](AppConfig& c, const std::string& v) { field(c) = parse_bool(name, v); },
                 [=](const AppConfig& c) { return nlohmann::json(field(const_cast<AppConfig&>(c))); }};
    };
    auto string_key = [&](const std::string& name, auto field) {
      k[name] = {[=](AppConfig& c, const std::string& v) { field(c) = v; },
                 [=](const AppConfig& c) { return nlohmann::json(field(const_cast<AppConfig&>(c))); }};
    };
    auto list_key = [&](const std::string& name, auto field) {
      k[name] = {[=](AppConfig& c, const std::string& v) { field(c) = parse_size_list(name, v); },
                 [=](const AppConfig& c) { return nlohmann::json(field(const_cast<AppConfig&>(c))); }};
    };

    k["data.source"] = {[](AppConfig& c, const std::string& v) {
                          if (v != "synth" && v != "idx") bad_value("data.source", v, "synth or idx");
                          c.data.source = v;
                        },
                        [](const AppConfig& c) { return nlohmann::json(c.data.source); }};
    string_key("data.train_images", [](AppConfig& c) -> auto& { return c.data.train_images; });
    string_key("data.train_labels", [](AppConfig& c) -> auto& { return c.data.train_labels; });
    string_key("data.test_images", [](AppConfig& c) -> auto& { return c.data.test_images; });
    string_key("data.test_labels", [](AppConfig& c) -> auto& { return c.data.test_labels; });
    size_key("data.train_size", [](AppConfig& c) -> auto& { return c.data.train_size; });
    size_key("data.test_size", [](AppConfig& c) -> auto& { return c.data.test_size; });

    size_key("synth.num_superclasses", [](AppConfig& c) -> auto& { return c.synth.num_superclasses; });
    size_key("synth.classes_per_superclass", [](AppConfig& c) -> auto& { return c.synth.classes_per_superclass; });
    size_key("synth.image_size", [](AppConfig& c) -> auto& { return c.synth.image_size; });
    size_key("synth.patch_size", [](AppConfig& c) -> auto& { return c.synth.patch_size; });
    real_key("synth.noise_std", [](AppConfig& c) -> auto& { return c.synth.noise_std; });
    k["synth.seed"] = {[](AppConfig& c, const std::string& v) { c.synth.seed = parse_size("synth.seed", v); },
                       [](const AppConfig& c) { return nlohmann::json(c.synth.seed); }};
    real_key("synth.template_amplitude", [](AppConfig& c) -> auto& { return c.synth.template_amplitude; });
    real_key("synth.motif_amplitude", [](AppConfig& c) -> auto& { return c.synth.motif_amplitude; });
    real_key("synth.distractor_amplitude", [](AppConfig& c) -> auto& { return c.synth.distractor_amplitude; });

    k["teacher.blocks"] = {
        [](AppConfig& c, const std::string& v) { c.teacher_blocks = parse_blocks("teacher.blocks", v); },
        [](const AppConfig& c) { return nlohmann::json(blocks_to_string(c.teacher_blocks)); }};
    k["student.blocks"] = {
        [](AppConfig& c, const std::string& v) { c.student_blocks = parse_blocks("student.blocks", v); },
        [](const AppConfig& c) { return nlohmann::json(blocks_to_string(c.student_blocks)); }};

    size_key("train.epochs", [](AppConfig& c) -> auto& { return c.train.epochs; });
    size_key("train.batch_size", [](AppConfig& c) -> auto& { return c.train.batch_size; });
    real_key("train.lr", [](AppConfig& c) -> auto& { return c.train.lr; });
    list_key("train.lr_decay_epochs", [](AppConfig& c) -> auto& { return c.train.lr_decay_epochs; });
    real_key("train.lr_decay_factor", [](AppConfig& c) -> auto& { return c.train.lr_decay_factor; });
    real_key("train.momentum", [](AppConfig& c) -> auto& { return c.train.momentum; });
    real_key("train.weight_decay", [](AppConfig& c) -> auto& { return c.train.weight_decay; });
    k["train.seed"] = {[](AppConfig& c, const std::string& v) { c.train.seed = parse_size("train.seed", v); },
                       [](const AppConfig& c) { return nlohmann::json(c.train.seed); }};
    bool_key("train.log_timing", [](AppConfig& c) -> auto& { return c.train.log_timing; });

    list_key("sdd.scales", [](AppConfig& c) -> auto& { return c.sdd.scales; });
    real_key("sdd.alpha", [](AppConfig& c) -> auto& { return c.sdd.alpha; });
    real_key("sdd.beta", [](AppConfig& c) -> auto& { return c.sdd.beta; });
    real_key("sdd.temperature", [](AppConfig& c) -> auto& { return c.sdd.temperature; });
    k["sdd.base_loss"] = {[](AppConfig& c, const std::string& v) { c.sdd.base_loss = parse_base_loss(v); },
                          [](const AppConfig& c) { return nlohmann::json(to_string(c.sdd.base_loss)); }};
    real_key("sdd.dkd_alpha", [](AppConfig& c) -> auto& { return c.sdd.dkd_alpha; });
    real_key("sdd.dkd_beta", [](AppConfig& c) -> auto& { return c.sdd.dkd_beta; });
    real_key("sdd.nkd_gamma", [](AppConfig& c) -> auto& { return c.sdd.nkd_gamma; });
    size_key("sdd.warmup_epochs", [](AppConfig& c) -> auto& { return c.sdd.warmup_epochs; });
    k["sdd.groups"] = {[](AppConfig& c, const std::string& v) { c.sdd.groups = parse_knowledge_groups(v); },
                       [](const AppConfig& c) { return nlohmann::json(to_string(c.sdd.groups)); }};
    k["sdd.label_mode"] = {[](AppConfig& c, const std::string& v) { c.sdd.label_mode = parse_label_mode(v); },
                           [](const AppConfig& c) { return nlohmann::json(to_string(c.sdd.label_mode)); }};
    bool_key("sdd.normalize_by_cells", [](AppConfig& c) -> auto& { return c.sdd.normalize_by_cells; });

    size_key("bench.batches", [](AppConfig& c) -> auto& { return c.bench.batches; });
    size_key("bench.warmup_batches", [](AppConfig& c) -> auto& { return c.bench.warmup_batches; });
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(AppConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, detail::trim(value));
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(key, 0) == 0) throw;
    throw ConfigError(key + ": " + msg);
  }
}

/// "section.key=value" as given to --set.
inline void apply_override(AppConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Whole-file parse; '#' starts a comment.
inline void apply_config_text(AppConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'section.key = value'");
    }
    set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline void apply_config_file(AppConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

/// Every key with its effective value.
inline nlohmann::json config_to_json(const AppConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, key] : detail::config_keys()) j[name] = key.get(cfg);
  return j;
}

/// Inverse of config_to_json: a summary's "config" object reproduces the run.
inline AppConfig config_from_json(const nlohmann::json& j) {
  AppConfig cfg;
  for (const auto& [name, value] : j.items()) {
    if (value.is_string()) {
      set_config_value(cfg, name, value.get<std::string>());
    } else if (value.is_array()) {
      std::string s;
      for (const auto& v : value) s += (s.empty() ? "" : ",") + v.dump();
      set_config_value(cfg, name, s);
    } else {
      set_config_value(cfg, name, value.dump());
    }
  }
  return cfg;
}

inline std::vector<std::string> config_keys_list() {
  std::vector<std::string> out;
  for (const auto& [name, key] : detail::config_keys()) out.push_back(name);
  return out;
}

}  // namespace sdd
