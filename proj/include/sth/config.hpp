#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sth/data_synth.hpp"
#include "sth/network.hpp"
#include "sth/training.hpp"

namespace sth {

/// Everything a command needs: network, optimiser and dataset settings.
struct RunConfig {
  NetworkConfig net;
  TrainConfig train;
  SynthConfig data;
  std::size_t eval_clips = 1;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

inline std::size_t parse_size(const std::string& v) {
  std::size_t used = 0;
  if (v.empty() || v[0] == '-') throw std::invalid_argument("expected a non-negative integer");
  const auto x = std::stoull(v, &used);
  if (used != v.size()) throw std::invalid_argument("expected a non-negative integer");
  return static_cast<std::size_t>(x);
}

inline double parse_real(const std::string& v) {
  std::size_t used = 0;
  const double x = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("expected a number");
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected true or false");
}

inline std::vector<std::size_t> parse_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(trim(item)));
  return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string real_str(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

struct KeyHandler {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, KeyHandler>& config_keys() {
  static const std::map<std::string, KeyHandler> keys = [] {
    std::map<std::string, KeyHandler> k;
    auto size_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string& v) { member(c) = parse_size(v); },
                 [member](const RunConfig& c) { return std::to_string(member(c)); }};
    };
    auto real_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string& v) { member(c) = parse_real(v); },
                 [member](const RunConfig& c) { return real_str(member(c)); }};
    };
    auto bool_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string& v) { member(c) = parse_bool(v); },
                 [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); }};
    };
    auto list_key = [&](const std::string& name, auto member) {
      k[name] = {[member](RunConfig& c, const std::string& v) { member(c) = parse_size_list(v); },
                 [member](const RunConfig& c) { return join_sizes(member(c)); }};
    };

    size_key("net.frames", [](auto& c) -> auto& { return c.net.frames; });
    size_key("net.input_hw", [](auto& c) -> auto& { return c.net.input_hw; });
    size_key("net.in_channels", [](auto& c) -> auto& { return c.net.in_channels; });
    size_key("net.num_class", [](auto& c) -> auto& { return c.net.num_class; });
    size_key("net.scale_factor", [](auto& c) -> auto& { return c.net.scale_factor; });
    size_key("net.stem_width", [](auto& c) -> auto& { return c.net.stem_width; });
    list_key("net.widths", [](auto& c) -> auto& { return c.net.widths; });
    list_key("net.blocks", [](auto& c) -> auto& { return c.net.blocks; });
    k["net.p"] = {[](RunConfig& c, const std::string& v) {
                    const Ratio r = Ratio::parse(v);
                    if (r.num > r.den) throw std::invalid_argument("p must lie in [0, 1]");
                    c.net.p = r;
                  },
                  [](const RunConfig& c) { return c.net.p.str(); }};
    k["net.kernel_type"] = {[](RunConfig& c, const std::string& v) {
                              if (v == "fixed") c.net.kernel_type = KernelType::Fixed;
                              else if (v == "dilated") c.net.kernel_type = KernelType::Dilated;
                              else throw std::invalid_argument("expected fixed or dilated");
                            },
                            [](const RunConfig& c) { return std::string(to_string(c.net.kernel_type)); }};
    bool_key("net.attention", [](auto& c) -> auto& { return c.net.attention; });
    size_key("net.attention_ratio", [](auto& c) -> auto& { return c.net.attention_ratio; });
    bool_key("net.symmetric_attention", [](auto& c) -> auto& { return c.net.symmetric_attention; });
    k["net.variant"] = {[](RunConfig& c, const std::string& v) {
                          if (v == "hybrid") c.net.variant = Variant::Hybrid;
                          else if (v == "merge") c.net.variant = Variant::Merge;
                          else throw std::invalid_argument("expected hybrid or merge");
                        },
                        [](const RunConfig& c) { return std::string(to_string(c.net.variant)); }};

    real_key("train.lr", [](auto& c) -> auto& { return c.train.lr; });
    real_key("train.momentum", [](auto& c) -> auto& { return c.train.momentum; });
    real_key("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; });
    size_key("train.epochs", [](auto& c) -> auto& { return c.train.epochs; });
    size_key("train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; });
    list_key("train.lr_steps", [](auto& c) -> auto& { return c.train.lr_steps; });
    k["train.seed"] = {[](RunConfig& c, const std::string& v) { c.train.seed = parse_size(v); },
                       [](const RunConfig& c) { return std::to_string(c.train.seed); }};
    real_key("train.target_top1", [](auto& c) -> auto& { return c.train.target_top1; });
    size_key("train.eval_clips", [](auto& c) -> auto& { return c.eval_clips; });

    k["data.task"] = {[](RunConfig& c, const std::string& v) {
                        if (v == "motion") c.data.task = Task::Motion;
                        else if (v == "appearance") c.data.task = Task::Appearance;
                        else throw std::invalid_argument("expected motion or appearance");
                      },
                      [](const RunConfig& c) { return std::string(to_string(c.data.task)); }};
    size_key("data.num_class", [](auto& c) -> auto& { return c.data.num_class; });
    size_key("data.channels", [](auto& c) -> auto& { return c.data.channels; });
    size_key("data.frames_total", [](auto& c) -> auto& { return c.data.frames_total; });
    size_key("data.resolution", [](auto& c) -> auto& { return c.data.resolution; });
    size_key("data.object_size", [](auto& c) -> auto& { return c.data.object_size; });
    size_key("data.speed", [](auto& c) -> auto& { return c.data.speed; });
    real_key("data.noise", [](auto& c) -> auto& { return c.data.noise; });
    size_key("data.samples_per_class", [](auto& c) -> auto& { return c.data.samples_per_class; });
    size_key("data.val_per_class", [](auto& c) -> auto& { return c.data.val_per_class; });
    k["data.seed"] = {[](RunConfig& c, const std::string& v) { c.data.seed = parse_size(v); },
                      [](const RunConfig& c) { return std::to_string(c.data.seed); }};
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Sets one key. Errors name `where` (e.g. "file.cfg:12").
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value,
                             const std::string& where = "<override>") {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) fail(ErrorKind::Config, where + ": unknown key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const Error& e) {
    fail(ErrorKind::Config, where + ": " + key + ": " + e.what());
  } catch (const std::exception& e) {
    fail(ErrorKind::Config, where + ": " + key + ": bad value '" + value + "' (" + e.what() + ")");
  }
}

/// Parses `key = value` lines with `#` comments on top of `base`.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "<config>", RunConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Config, where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) fail(ErrorKind::Config, where + ": empty key");
    set_config_value(base, key, value, where);
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::MissingFile, "config not found: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string(), std::move(base));
}

/// Canonical text form; parse_config(format_config(c)) reproduces c.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, h] : detail::config_keys()) out += key + " = " + h.get(cfg) + "\n";
  return out;
}

/// Checks cross-field consistency of the parts a command uses.
inline void validate_run(const RunConfig& cfg, bool net = true, bool train = true, bool data = true) {
  if (net) validate_config(cfg.net);
  if (train) validate_train(cfg.train);
  if (data) validate_synth(cfg.data);
  if (cfg.eval_clips == 0) fail(ErrorKind::Config, "train.eval_clips must be >= 1");
  if (net && data) {
    if (cfg.net.num_class != cfg.data.num_class)
      fail(ErrorKind::Config, "net.num_class " + std::to_string(cfg.net.num_class) + " != data.num_class " +
                                  std::to_string(cfg.data.num_class));
    if (cfg.net.input_hw != cfg.data.resolution)
      fail(ErrorKind::Config, "net.input_hw " + std::to_string(cfg.net.input_hw) + " != data.resolution " +
                                  std::to_string(cfg.data.resolution));
    if (cfg.net.in_channels != cfg.data.channels)
      fail(ErrorKind::Config, "net.in_channels != data.channels");
    if (cfg.net.frames > cfg.data.frames_total)
      fail(ErrorKind::Config, "net.frames exceeds data.frames_total");
  }
}

}  // namespace sth
