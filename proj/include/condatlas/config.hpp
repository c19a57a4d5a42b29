#pragma once

// TrainConfig and its flat "key = value" text form. Lines starting with '#'
// and blank lines are ignored; unknown keys and malformed values are errors.
// emit() writes every key, so parse(emit(c)) == c.

#include <condatlas/csv.hpp>
#include <condatlas/losses.hpp>
#include <condatlas/nets.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace condatlas {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-7;
  double lr_gen = 1e-4;
  double lr_disc = 3e-4;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct Schedule {
  int epochs = 60;
  int batch = 8;
  int disc_steps = 5;  // discriminator updates per generator update
  int checkpoint_every = 10;
  friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct TrainConfig {
  ArchConfig arch;
  int ncc_window = 5;
  LossWeights weights;
  AdversarialObjective adversarial = AdversarialObjective::hinge;
  AdamConfig adam;
  Schedule schedule;
  std::uint64_t seed = 1;
  double raw_min = 21.0;
  double raw_max = 37.0;
  bool balanced_sampling = true;
  bool disc_augment = true;
  int threads = 1;  // batch members evaluated in parallel; results do not depend on it
  std::string data_dir;
  std::string out_dir;

  bool disc_enabled() const { return weights.disc > 0.0; }

  void validate() const {
    arch.validate();
    weights.validate();
    if (ncc_window < 1 || ncc_window % 2 == 0) throw ConfigError("ncc_window must be a positive odd integer");
    if (ncc_window > std::min({arch.dims.nx, arch.dims.ny, arch.dims.nz})) {
      throw ConfigError("ncc_window exceeds the grid");
    }
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0 && adam.lr_gen > 0 && adam.lr_disc > 0)) throw ConfigError("adam eps and rates must be positive");
    if (schedule.epochs < 1 || schedule.batch < 1 || schedule.disc_steps < 1 || schedule.checkpoint_every < 1) {
      throw ConfigError("schedule values must be positive");
    }
    if (!(raw_max > raw_min)) throw ConfigError("raw_max must exceed raw_min");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }

  friend bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return emit_string(a) == emit_string(b);
  }

  static std::string emit_string(const TrainConfig& c);
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
  return out;
}

inline std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, trim(item))));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "' (use true/false)");
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define CONDATLAS_NUM(key, member)                                                          \
  {key, Field{[](TrainConfig& c, const std::string& v) { c.member = parse_double(key, v); }, \
              [](const TrainConfig& c) { return csv::format_number(c.member); }}}
#define CONDATLAS_INT(key, member)                                                                         \
  {key, Field{[](TrainConfig& c, const std::string& v) {                                                   \
                c.member = static_cast<decltype(c.member)>(parse_int(key, v));                             \
              },                                                                                           \
              [](const TrainConfig& c) { return std::to_string(c.member); }}}
#define CONDATLAS_LIST(key, member)                                                       \
  {key, Field{[](TrainConfig& c, const std::string& v) { c.member = parse_ints(key, v); }, \
              [](const TrainConfig& c) { return join_ints(c.member); }}}
#define CONDATLAS_BOOL(key, member)                                                       \
  {key, Field{[](TrainConfig& c, const std::string& v) { c.member = parse_bool(key, v); }, \
              [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }}}
#define CONDATLAS_STR(key, member)                                              \
  {key, Field{[](TrainConfig& c, const std::string& v) { c.member = v; },       \
              [](const TrainConfig& c) { return c.member; }}}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table{
      {"grid", Field{[](TrainConfig& c, const std::string& v) {
                       auto d = parse_ints("grid", v);
                       if (d.size() != 3) throw ConfigError("grid needs three extents nx,ny,nz");
                       c.arch.dims = {d[0], d[1], d[2]};
                     },
                     [](const TrainConfig& c) {
                       return join_ints({c.arch.dims.nx, c.arch.dims.ny, c.arch.dims.nz});
                     }}},
      {"spacing", Field{[](TrainConfig& c, const std::string& v) {
                          std::vector<double> s;
                          std::stringstream ss(v);
                          std::string item;
                          while (std::getline(ss, item, ',')) s.push_back(parse_double("spacing", trim(item)));
                          if (s.size() != 3) throw ConfigError("spacing needs three values sx,sy,sz");
                          c.arch.spacing = {s[0], s[1], s[2]};
                        },
                        [](const TrainConfig& c) {
                          return csv::format_number(c.arch.spacing.sx) + "," + csv::format_number(c.arch.spacing.sy) +
                                 "," + csv::format_number(c.arch.spacing.sz);
                        }}},
      {"adversarial", Field{[](TrainConfig& c, const std::string& v) {
                              if (v == "hinge") {
                                c.adversarial = AdversarialObjective::hinge;
                              } else if (v == "logistic") {
                                c.adversarial = AdversarialObjective::logistic;
                              } else {
                                throw ConfigError("adversarial must be hinge or logistic, got '" + v + "'");
                              }
                            },
                            [](const TrainConfig& c) {
                              return std::string(c.adversarial == AdversarialObjective::hinge ? "hinge" : "logistic");
                            }}},
      CONDATLAS_INT("gen_seed_channels", arch.gen_seed_channels),
      CONDATLAS_LIST("gen_widths", arch.gen_widths),
      CONDATLAS_LIST("film_hidden", arch.film_hidden),
      CONDATLAS_LIST("reg_widths", arch.reg_widths),
      CONDATLAS_LIST("disc_widths", arch.disc_widths),
      CONDATLAS_INT("int_steps", arch.int_steps),
      CONDATLAS_NUM("leaky_slope", arch.leaky_slope),
      CONDATLAS_INT("ncc_window", ncc_window),
      CONDATLAS_NUM("lambda_img", weights.img),
      CONDATLAS_NUM("lambda_seg", weights.seg),
      CONDATLAS_NUM("lambda_def", weights.def),
      CONDATLAS_NUM("lambda_grad", weights.grad),
      CONDATLAS_NUM("lambda_disc", weights.disc),
      CONDATLAS_NUM("adam_beta1", adam.beta1),
      CONDATLAS_NUM("adam_beta2", adam.beta2),
      CONDATLAS_NUM("adam_eps", adam.eps),
      CONDATLAS_NUM("lr_gen", adam.lr_gen),
      CONDATLAS_NUM("lr_disc", adam.lr_disc),
      CONDATLAS_INT("epochs", schedule.epochs),
      CONDATLAS_INT("batch", schedule.batch),
      CONDATLAS_INT("disc_steps", schedule.disc_steps),
      CONDATLAS_INT("checkpoint_every", schedule.checkpoint_every),
      CONDATLAS_INT("seed", seed),
      CONDATLAS_NUM("raw_min", raw_min),
      CONDATLAS_NUM("raw_max", raw_max),
      CONDATLAS_BOOL("balanced_sampling", balanced_sampling),
      CONDATLAS_BOOL("disc_augment", disc_augment),
      CONDATLAS_INT("threads", threads),
      CONDATLAS_STR("data_dir", data_dir),
      CONDATLAS_STR("out_dir", out_dir),
  };
  return table;
}

#undef CONDATLAS_NUM
#undef CONDATLAS_INT
#undef CONDATLAS_LIST
#undef CONDATLAS_BOOL
#undef CONDATLAS_STR

}  // namespace detail

inline std::string TrainConfig::emit_string(const TrainConfig& c) {
  std::string out;
  for (const auto& [key, field] : detail::fields()) out += key + " = " + field.get(c) + "\n";
  return out;
}

inline std::string emit_config(const TrainConfig& c) { return TrainConfig::emit_string(c); }

/// Applies "key = value" lines on top of `base` (defaults if omitted) and validates.
inline TrainConfig parse_config(std::string_view text, TrainConfig base = {}) {
  std::stringstream ss{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    auto it = detail::fields().find(key);
    if (it == detail::fields().end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(base, value);
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline void save_config(const TrainConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write config: " + path.string());
  os << emit_config(c);
}

}  // namespace condatlas
