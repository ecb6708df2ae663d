#pragma once

// Flat key=value run configuration. Lines are `key = value`, `#` starts a
// comment. A `preset` key (desk | full) is applied before every other key
// in the same text, so explicit keys always win.

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "x2ct/binary_io.hpp"
#include "x2ct/contrastive.hpp"
#include "x2ct/drr.hpp"
#include "x2ct/encoders.hpp"
#include "x2ct/error.hpp"
#include "x2ct/evalkit.hpp"
#include "x2ct/phantom.hpp"

namespace x2ct {

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 7;
  GenConfig gen;
  DrrConfig drr;
  ModelConfig model;
  TrainConfig train;
  std::size_t teacher_epochs = 30;
  double teacher_lr = 1e-3;
  LossWeights loss;
  ProbeConfig probe;
  double fewshot_fraction = 0.2;
  std::uint64_t fewshot_seed = 11;
  std::vector<std::size_t> eval_ks{5, 10, 50};
  double ablate_fraction = 0.2;

  TrainConfig teacher_train() const {
    TrainConfig t = train;
    t.epochs = teacher_epochs;
    t.lr = teacher_lr;
    t.seed = seed;
    return t;
  }
  TrainConfig student_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
  GenConfig gen_config() const {
    GenConfig g = gen;
    g.seed = seed;
    return g;
  }
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.image_size = drr.out_size;
    return m;
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ConfigError("invalid value '" + text + "' for key '" + key + "'");
  return v;
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T, class Field>
ConfigKey number_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_number<T>(k, v); },
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(field(c));
            else return std::to_string(field(c));
          }};
}

inline const std::map<std::string, ConfigKey>& config_keys() {
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    k["preset"] = {[](RunConfig& c, const std::string& key, const std::string& v) {
                     if (v != "desk" && v != "full") throw ConfigError("unknown value '" + v + "' for key '" + key + "'");
                     c.preset = v;
                   },
                   [](const RunConfig& c) { return c.preset; }};
    k["seed"] = number_key<std::uint64_t>([](auto& c) -> auto& { return c.seed; });
    k["gen.n_train"] = number_key<std::size_t>([](auto& c) -> auto& { return c.gen.n_train; });
    k["gen.n_test"] = number_key<std::size_t>([](auto& c) -> auto& { return c.gen.n_test; });
    k["gen.n_labels"] = number_key<std::size_t>([](auto& c) -> auto& { return c.gen.n_labels; });
    k["gen.prevalence"] = number_key<double>([](auto& c) -> auto& { return c.gen.prevalence; });
    k["gen.nx"] = number_key<std::uint32_t>([](auto& c) -> auto& { return c.gen.dims[0]; });
    k["gen.ny"] = number_key<std::uint32_t>([](auto& c) -> auto& { return c.gen.dims[1]; });
    k["gen.nz"] = number_key<std::uint32_t>([](auto& c) -> auto& { return c.gen.dims[2]; });
    k["gen.spacing_mm"] = number_key<double>([](auto& c) -> auto& { return c.gen.spacing_mm; });
    k["gen.noise_hu"] = number_key<double>([](auto& c) -> auto& { return c.gen.noise_hu; });
    k["drr.mu_water"] = number_key<double>([](auto& c) -> auto& { return c.drr.mu_water; });
    k["drr.out_size"] = number_key<std::size_t>([](auto& c) -> auto& { return c.drr.out_size; });
    k["drr.axis"] = number_key<int>([](auto& c) -> auto& { return c.drr.axis; });
    k["drr.intensity"] = {[](RunConfig& c, const std::string& key, const std::string& v) {
                            if (v == "attenuation") c.drr.intensity = DrrIntensity::Attenuation;
                            else if (v == "neglog") c.drr.intensity = DrrIntensity::NegLog;
                            else throw ConfigError("unknown value '" + v + "' for key '" + key + "'");
                          },
                          [](const RunConfig& c) {
                            return std::string(c.drr.intensity == DrrIntensity::Attenuation ? "attenuation" : "neglog");
                          }};
    k["model.embed_dim"] = number_key<std::size_t>([](auto& c) -> auto& { return c.model.embed_dim; });
    k["model.hidden"] = number_key<std::size_t>([](auto& c) -> auto& { return c.model.hidden; });
    k["model.patch"] = number_key<std::size_t>([](auto& c) -> auto& { return c.model.patch; });
    k["teacher.epochs"] = number_key<std::size_t>([](auto& c) -> auto& { return c.teacher_epochs; });
    k["teacher.lr"] = number_key<double>([](auto& c) -> auto& { return c.teacher_lr; });
    k["train.tau"] = number_key<double>([](auto& c) -> auto& { return c.train.tau; });
    k["train.lr"] = number_key<double>([](auto& c) -> auto& { return c.train.lr; });
    k["train.batch_size"] = number_key<std::size_t>([](auto& c) -> auto& { return c.train.batch_size; });
    k["train.epochs"] = number_key<std::size_t>([](auto& c) -> auto& { return c.train.epochs; });
    k["train.weight_decay"] = number_key<double>([](auto& c) -> auto& { return c.train.weight_decay; });
    k["train.adam_beta1"] = number_key<double>([](auto& c) -> auto& { return c.train.adam_beta1; });
    k["train.adam_beta2"] = number_key<double>([](auto& c) -> auto& { return c.train.adam_beta2; });
    k["train.adam_eps"] = number_key<double>([](auto& c) -> auto& { return c.train.adam_eps; });
    k["train.reduction"] = {[](RunConfig& c, const std::string& key, const std::string& v) {
                              if (v == "mean") c.train.reduction = Reduction::Mean;
                              else if (v == "sum") c.train.reduction = Reduction::Sum;
                              else throw ConfigError("unknown value '" + v + "' for key '" + key + "'");
                            },
                            [](const RunConfig& c) {
                              return std::string(c.train.reduction == Reduction::Mean ? "mean" : "sum");
                            }};
    k["loss.alpha"] = number_key<double>([](auto& c) -> auto& { return c.loss.alpha; });
    k["loss.beta"] = number_key<double>([](auto& c) -> auto& { return c.loss.beta; });
    k["loss.gamma"] = number_key<double>([](auto& c) -> auto& { return c.loss.gamma; });
    k["probe.lr"] = number_key<double>([](auto& c) -> auto& { return c.probe.lr; });
    k["probe.epochs"] = number_key<std::size_t>([](auto& c) -> auto& { return c.probe.epochs; });
    k["probe.l2"] = number_key<double>([](auto& c) -> auto& { return c.probe.l2; });
    k["fewshot.fraction"] = number_key<double>([](auto& c) -> auto& { return c.fewshot_fraction; });
    k["fewshot.seed"] = number_key<std::uint64_t>([](auto& c) -> auto& { return c.fewshot_seed; });
    k["eval.ks"] = {[](RunConfig& c, const std::string& key, const std::string& v) {
                      std::vector<std::size_t> ks;
                      std::stringstream ss(v);
                      std::string item;
                      while (std::getline(ss, item, ',')) ks.push_back(parse_number<std::size_t>(key, trim(item)));
                      if (ks.empty()) throw ConfigError("key '" + key + "' needs at least one k");
                      c.eval_ks = ks;
                    },
                    [](const RunConfig& c) {
                      std::string s;
                      for (auto k : c.eval_ks) s += (s.empty() ? "" : ",") + std::to_string(k);
                      return s;
                    }};
    k["ablate.fraction"] = number_key<double>([](auto& c) -> auto& { return c.ablate_fraction; });
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(cfg, key, value);
}

// Preset overrides on top of the library defaults.
inline std::vector<std::pair<std::string, std::string>> preset_values(const std::string& name) {
  if (name == "desk") return {{"model.patch", "16"}, {"model.hidden", "128"}, {"train.epochs", "100"}};
  if (name == "full")
    return {{"train.lr", "5e-05"},  {"train.batch_size", "360"}, {"train.epochs", "50"},
            {"train.tau", "0.07"},  {"model.embed_dim", "512"},  {"drr.out_size", "224"}};
  throw ConfigError("unknown preset '" + name + "'");
}

inline std::vector<std::pair<std::string, std::string>> parse_config_lines(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " is not key = value");
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

// Validates every section; messages name the offending key.
inline void validate_config(const RunConfig& c) {
  auto check = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("invalid value for key '" + key + "': " + what);
  };
  c.gen_config().validate();
  c.drr.validate();
  c.model_config().validate();
  c.student_train().validate();
  c.teacher_train().validate();
  check(c.fewshot_fraction > 0.0 && c.fewshot_fraction < 1.0, "fewshot.fraction", "must lie in (0, 1)");
  check(c.ablate_fraction > 0.0 && c.ablate_fraction < 1.0, "ablate.fraction", "must lie in (0, 1)");
  check(c.probe.lr > 0.0, "probe.lr", "must be positive");
  check(c.probe.l2 >= 0.0, "probe.l2", "must be non-negative");
  check(c.loss.alpha >= 0 && c.loss.beta >= 0 && c.loss.gamma >= 0, "loss.alpha/beta/gamma", "must be non-negative");
  for (auto k : c.eval_ks) check(k >= 1, "eval.ks", "every k must be >= 1");
}

// Applies a config text (and then overrides) to the desk defaults.
inline RunConfig load_config_text(const std::string& text,
                                  const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  RunConfig cfg;
  auto lines = parse_config_lines(text);
  lines.insert(lines.end(), overrides.begin(), overrides.end());
  std::string preset = "desk";
  for (const auto& [k, v] : lines)
    if (k == "preset") preset = v;
  set_config_value(cfg, "preset", preset);
  for (const auto& [k, v] : preset_values(preset)) set_config_value(cfg, k, v);
  for (const auto& [k, v] : lines)
    if (k != "preset") set_config_value(cfg, k, v);
  validate_config(cfg);
  return cfg;
}

inline RunConfig load_config_file(const std::filesystem::path& path,
                                  const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const DataError&) {
    throw ConfigError("cannot read config file " + path.string());
  }
  return load_config_text(text, overrides);
}

// Every key, sorted, one `key = value` per line.
inline std::string resolved_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, entry] : detail::config_keys()) out += key + " = " + entry.get(cfg) + "\n";
  return out;
}

inline std::string config_hash(const RunConfig& cfg) { return io::sha256_hex(resolved_config(cfg)); }

}  // namespace x2ct
