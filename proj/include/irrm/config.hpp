#pragma once

// Flat `key = value` run configuration. Keys are the union of the model and
// training settings; `#` starts a comment. Unknown or repeated keys are errors.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "irrm/checkpoint.hpp"
#include "irrm/train.hpp"

namespace irrm {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate(model.scale);
  }
};

inline std::string shortest_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace detail {

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Field>
ConfigKey size_key(std::string name, Field field) {
  return {name, [=](RunConfig& c, const std::string& v) { field(c) = parse_size(name, v); },
          [=](const RunConfig& c) { return std::to_string(field(c)); }};
}

template <class Field>
ConfigKey real_key(std::string name, Field field) {
  return {name, [=](RunConfig& c, const std::string& v) { field(c) = parse_real(name, v); },
          [=](const RunConfig& c) { return shortest_real(field(c)); }};
}

template <class Field>
ConfigKey bool_key(std::string name, Field field) {
  return {name, [=](RunConfig& c, const std::string& v) { field(c) = parse_bool(name, v); },
          [=](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); }};
}

// Every key except `preset`, in the order the resolved configuration is printed.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"scale",
                 [](RunConfig& c, const std::string& v) { c.model.scale = static_cast<int>(parse_size("scale", v)); },
                 [](const RunConfig& c) { return std::to_string(c.model.scale); }});
    k.push_back(size_key("channels", [](auto& c) -> auto& { return c.model.channels; }));
    k.push_back(size_key("irbs_per_rdm", [](auto& c) -> auto& { return c.model.irbs_per_rdm; }));
    k.push_back(size_key("hidden", [](auto& c) -> auto& { return c.model.hidden; }));
    k.push_back({"eb_kind", [](RunConfig& c, const std::string& v) { c.model.eb_kind = parse_eb_kind(v); },
                 [](const RunConfig& c) { return to_string(c.model.eb_kind); }});
    k.push_back({"coupling_mode",
                 [](RunConfig& c, const std::string& v) { c.model.coupling = parse_coupling_mode(v); },
                 [](const RunConfig& c) { return to_string(c.model.coupling); }});
    k.push_back(real_key("clamp_alpha", [](auto& c) -> auto& { return c.model.clamp_alpha; }));
    k.push_back(bool_key("long_skip", [](auto& c) -> auto& { return c.model.long_skip; }));
    k.push_back(real_key("slope", [](auto& c) -> auto& { return c.model.slope; }));
    k.push_back(real_key("lambda1", [](auto& c) -> auto& { return c.train.lambda1; }));
    k.push_back(real_key("lambda2", [](auto& c) -> auto& { return c.train.lambda2; }));
    k.push_back(real_key("lambda3", [](auto& c) -> auto& { return c.train.lambda3; }));
    k.push_back(real_key("lr0", [](auto& c) -> auto& { return c.train.lr0; }));
    k.push_back(real_key("beta1", [](auto& c) -> auto& { return c.train.beta1; }));
    k.push_back(real_key("beta2", [](auto& c) -> auto& { return c.train.beta2; }));
    k.push_back(real_key("eps_adam", [](auto& c) -> auto& { return c.train.eps_adam; }));
    k.push_back(size_key("halve_every", [](auto& c) -> auto& { return c.train.halve_every; }));
    k.push_back(size_key("batch", [](auto& c) -> auto& { return c.train.batch; }));
    k.push_back(size_key("patch", [](auto& c) -> auto& { return c.train.patch; }));
    k.push_back(bool_key("augment_flip", [](auto& c) -> auto& { return c.train.augment_flip; }));
    k.push_back(bool_key("augment_rotate", [](auto& c) -> auto& { return c.train.augment_rotate; }));
    k.push_back(size_key("seed", [](auto& c) -> auto& { return c.train.seed; }));
    k.push_back(size_key("total_steps", [](auto& c) -> auto& { return c.train.total_steps; }));
    k.push_back(real_key("clip_norm", [](auto& c) -> auto& { return c.train.clip_norm; }));
    k.push_back(size_key("checkpoint_every", [](auto& c) -> auto& { return c.train.checkpoint_every; }));
    return k;
  }();
  return keys;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Names accepted in configuration files and `--set` overrides.
inline std::vector<std::string> config_key_names() {
  std::vector<std::string> names{"preset"};
  for (const auto& k : detail::config_keys()) names.push_back(k.name);
  return names;
}

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

/// Splits configuration text into entries. `source` prefixes error messages.
inline ConfigEntries parse_config_entries(const std::string& text, const std::string& source = "config") {
  ConfigEntries out;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(n);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + ": expected 'key = value', got '" + line + "'");
    std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError(where + ": missing key");
    if (value.empty()) throw UsageError(where + ": missing value for '" + key + "'");
    if (key.find_first_of(" \t.[]{}") != std::string::npos) {
      throw UsageError(where + ": '" + key + "' is not a flat key");
    }
    for (const auto& [k, v] : out) {
      if (k == key) throw UsageError(where + ": key '" + key + "' given twice");
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

/// Applies entries on top of `base`. A `preset` entry is applied first so
/// explicit width and depth keys override it regardless of order.
inline RunConfig apply_config(RunConfig base, const ConfigEntries& entries, const std::string& source = "config") {
  const auto& keys = detail::config_keys();
  for (const auto& [k, v] : entries) {
    if (k != "preset") continue;
    try {
      const int scale = base.model.scale;
      const ModelConfig p = preset_config(parse_preset(v), scale);
      base.model.irbs_per_rdm = p.irbs_per_rdm;
      base.model.hidden = p.hidden;
    } catch (const Error& e) {
      throw UsageError(source + ": " + e.what());
    }
  }
  for (const auto& [k, v] : entries) {
    if (k == "preset") continue;
    auto it = std::find_if(keys.begin(), keys.end(), [&](const detail::ConfigKey& c) { return c.name == k; });
    if (it == keys.end()) throw UsageError(source + ": unknown configuration key '" + k + "'");
    try {
      it->set(base, v);
    } catch (const Error& e) {
      throw UsageError(source + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return apply_config(std::move(base), parse_config_entries(ss.str(), path.string()), path.string());
}

/// Fully resolved configuration in the same `key = value` format, one key per line.
inline std::string format_config(const RunConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

}  // namespace irrm
