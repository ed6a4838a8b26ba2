#pragma once

// Run configuration: a flat INI file with one section per module. Unknown
// sections or keys are rejected. Command-line overrides are applied on top
// and recorded in the run manifest.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agr/data.hpp"
#include "agr/eval.hpp"
#include "agr/refine.hpp"
#include "agr/trainer.hpp"

namespace agr {

inline constexpr const char* kToolVersion = "0.1.0";

struct OracleConfig {
  std::string source = "seeded";  // seeded | uniform | identity | cycle | copy | table
  std::string table;              // JSON table file when source = table
  std::size_t vocab = 5;
  std::size_t order = 1;
  std::uint64_t seed = 1;
  double alpha = 1.0;
  std::size_t t = 4;
  std::size_t sources = 1;  // seeded sources, seeds seed .. seed+sources-1
  std::vector<std::size_t> grid_k{2, 5};
  std::vector<double> grid_w{0.0, 0.01, 0.05, 0.1};
  std::vector<double> epsilons{0.0, 0.4, 0.5, 0.6};
  std::string verdicts = "correctness";  // correctness | refiner
};

struct RunConfig {
  // [data]
  std::string corpus = "data/corpus.txt";
  TokenScheme scheme = TokenScheme::kChar;
  std::size_t bpe_merges = 256;
  // [model], [perm], [train]
  TrainConfig train;
  // [agr]
  RefineConfig refine;
  // [eval]
  EvalConfig eval;
  std::vector<std::size_t> grid_k{15};
  std::vector<double> grid_w{0.05};
  bool diagnostics = true;
  // [oracle]
  OracleConfig oracle;

  RunConfig() {
    train.eval_batches = 16;
    train.perm.T = train.model.block_size;
  }
};

namespace detail {

// Shortest text that parses back to the same value.
template <typename T>
std::string fmt_number(T x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline std::string fmt_double(double x) { return fmt_number(x); }

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt_number(v[i]);
  return out;
}

template <typename T>
T parse_value(const std::string& key, const std::string& raw);

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& raw) {
  return raw;
}

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& raw) {
  if (raw == "true" || raw == "1" || raw == "yes") return true;
  if (raw == "false" || raw == "0" || raw == "no") return false;
  throw Error("config: " + key + " expects true/false, got '" + raw + "'");
}

template <>
inline double parse_value<double>(const std::string& key, const std::string& raw) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(raw, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != raw.size()) throw Error("config: " + key + " expects a number, got '" + raw + "'");
  return v;
}

template <>
inline std::uint64_t parse_value<std::uint64_t>(const std::string& key, const std::string& raw) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    if (!raw.empty() && raw[0] != '-') v = std::stoull(raw, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != raw.size()) {
    throw Error("config: " + key + " expects a non-negative integer, got '" + raw + "'");
  }
  return v;
}

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "size_t keys are parsed as uint64_t");

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
  std::vector<T> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw Error("config: " + key + " has an empty list entry");
    out.push_back(parse_value<T>(key, item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw Error("config: " + key + " must list at least one value");
  return out;
}

/// One binding per key: how to read it into a RunConfig and how to print it.
struct Binding {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Binding>& bindings() {
  static const std::map<std::string, Binding> table = [] {
    std::map<std::string, Binding> m;
    auto scalar = [&m](const std::string& key, auto accessor) {
      using Ref = decltype(accessor(std::declval<RunConfig&>()));
      using T = std::remove_cvref_t<Ref>;
      m[key] = Binding{[key, accessor](RunConfig& c, const std::string& raw) {
                         accessor(c) = parse_value<T>(key, raw);
                       },
                       [accessor](const RunConfig& c) {
                         const T& v = accessor(const_cast<RunConfig&>(c));
                         if constexpr (std::is_same_v<T, double>) {
                           return fmt_double(v);
                         } else if constexpr (std::is_same_v<T, bool>) {
                           return std::string(v ? "true" : "false");
                         } else if constexpr (std::is_same_v<T, std::string>) {
                           return v;
                         } else {
                           return std::to_string(v);
                         }
                       }};
    };
    auto list = [&m](const std::string& key, auto accessor) {
      using T = typename std::remove_cvref_t<decltype(accessor(std::declval<RunConfig&>()))>::value_type;
      m[key] = Binding{[key, accessor](RunConfig& c, const std::string& raw) {
                         accessor(c) = parse_list<T>(key, raw);
                       },
                       [accessor](const RunConfig& c) { return join(accessor(const_cast<RunConfig&>(c))); }};
    };

    scalar("data.corpus", [](RunConfig& c) -> std::string& { return c.corpus; });
    m["data.scheme"] = Binding{[](RunConfig& c, const std::string& raw) { c.scheme = parse_scheme(raw); },
                               [](const RunConfig& c) { return scheme_name(c.scheme); }};
    scalar("data.bpe_merges", [](RunConfig& c) -> std::size_t& { return c.bpe_merges; });

    scalar("model.n_layer", [](RunConfig& c) -> std::size_t& { return c.train.model.n_layer; });
    scalar("model.n_head", [](RunConfig& c) -> std::size_t& { return c.train.model.n_head; });
    scalar("model.emb_dim", [](RunConfig& c) -> std::size_t& { return c.train.model.emb_dim; });
    scalar("model.block_size", [](RunConfig& c) -> std::size_t& { return c.train.model.block_size; });
    scalar("model.dropout", [](RunConfig& c) -> double& { return c.train.model.dropout; });

    scalar("perm.l", [](RunConfig& c) -> std::size_t& { return c.train.perm.l; });

    scalar("train.lr_max", [](RunConfig& c) -> double& { return c.train.lr_max; });
    scalar("train.min_lr_ratio", [](RunConfig& c) -> double& { return c.train.min_lr_ratio; });
    scalar("train.warmup_from_floor", [](RunConfig& c) -> bool& { return c.train.warmup_from_floor; });
    scalar("train.warmup_iters", [](RunConfig& c) -> std::size_t& { return c.train.warmup_iters; });
    scalar("train.max_iters", [](RunConfig& c) -> std::size_t& { return c.train.max_iters; });
    scalar("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    scalar("train.eval_interval", [](RunConfig& c) -> std::size_t& { return c.train.eval_interval; });
    scalar("train.eval_batches", [](RunConfig& c) -> std::size_t& { return c.train.eval_batches; });
    scalar("train.log_interval", [](RunConfig& c) -> std::size_t& { return c.train.log_interval; });
    scalar("train.grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
    scalar("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
    scalar("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });

    scalar("agr.k", [](RunConfig& c) -> std::size_t& { return c.refine.k; });
    scalar("agr.w", [](RunConfig& c) -> double& { return c.refine.w; });

    scalar("eval.samples", [](RunConfig& c) -> std::size_t& { return c.eval.samples; });
    scalar("eval.runs", [](RunConfig& c) -> std::size_t& { return c.eval.runs; });
    scalar("eval.seed", [](RunConfig& c) -> std::uint64_t& { return c.eval.seed; });
    scalar("eval.include_train", [](RunConfig& c) -> bool& { return c.eval.include_train; });
    scalar("eval.diagnostics", [](RunConfig& c) -> bool& { return c.diagnostics; });
    list("eval.grid_k", [](RunConfig& c) -> std::vector<std::size_t>& { return c.grid_k; });
    list("eval.grid_w", [](RunConfig& c) -> std::vector<double>& { return c.grid_w; });

    scalar("oracle.source", [](RunConfig& c) -> std::string& { return c.oracle.source; });
    scalar("oracle.table", [](RunConfig& c) -> std::string& { return c.oracle.table; });
    scalar("oracle.vocab", [](RunConfig& c) -> std::size_t& { return c.oracle.vocab; });
    scalar("oracle.order", [](RunConfig& c) -> std::size_t& { return c.oracle.order; });
    scalar("oracle.seed", [](RunConfig& c) -> std::uint64_t& { return c.oracle.seed; });
    scalar("oracle.alpha", [](RunConfig& c) -> double& { return c.oracle.alpha; });
    scalar("oracle.t", [](RunConfig& c) -> std::size_t& { return c.oracle.t; });
    scalar("oracle.sources", [](RunConfig& c) -> std::size_t& { return c.oracle.sources; });
    scalar("oracle.verdicts", [](RunConfig& c) -> std::string& { return c.oracle.verdicts; });
    list("oracle.grid_k", [](RunConfig& c) -> std::vector<std::size_t>& { return c.oracle.grid_k; });
    list("oracle.grid_w", [](RunConfig& c) -> std::vector<double>& { return c.oracle.grid_w; });
    list("oracle.epsilons", [](RunConfig& c) -> std::vector<double>& { return c.oracle.epsilons; });
    return m;
  }();
  return table;
}

}  // namespace detail

/// Sets "section.key" from its text form.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& b = detail::bindings();
  const auto it = b.find(key);
  if (it == b.end()) throw Error("config: unknown key '" + key + "'");
  it->second.set(c, value);
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  const auto& b = detail::bindings();
  const auto it = b.find(key);
  if (it == b.end()) throw Error("config: unknown key '" + key + "'");
  return it->second.get(c);
}

/// Derived fields and cross-module checks.
inline void finalize_config(RunConfig& c) {
  c.train.perm.T = c.train.model.block_size;
  c.refine.l = c.train.perm.l;
  c.eval.context_len = c.train.model.block_size;
  c.train.perm.validate();
  if (c.grid_k.empty() || c.grid_w.empty()) throw Error("config: eval grid must be non-empty");
  if (c.oracle.verdicts != "correctness" && c.oracle.verdicts != "refiner") {
    throw Error("config: oracle.verdicts must be 'correctness' or 'refiner', got '" + c.oracle.verdicts + "'");
  }
}

inline RunConfig parse_config(std::istream& in, const std::string& origin = "config") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(origin + ": " + e.message() + " at line " + std::to_string(e.line()));
  }
  RunConfig c;
  std::vector<std::string> unknown;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      unknown.push_back(section + " (key outside any section)");
      continue;
    }
    const bool known_section = std::any_of(detail::bindings().begin(), detail::bindings().end(),
                                           [&](const auto& kv) { return kv.first.starts_with(section + "."); });
    if (!known_section) {
      unknown.push_back("[" + section + "]");
      continue;
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (!detail::bindings().contains(full)) {
        unknown.push_back(full);
        continue;
      }
      set_config_value(c, full, value.data());
    }
  }
  if (!unknown.empty()) {
    std::string msg = origin + ": unknown keys:";
    for (const auto& u : unknown) msg += " " + u;
    throw Error(msg);
  }
  finalize_config(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  return parse_config(in, path.string());
}

/// INI text that parses back to an equivalent config.
inline std::string config_to_ini(const RunConfig& c) {
  std::ostringstream os;
  std::string current;
  for (const auto& [key, b] : detail::bindings()) {
    const auto dot = key.find('.');
    const std::string section = key.substr(0, dot);
    if (section != current) {
      os << (current.empty() ? "" : "\n") << '[' << section << "]\n";
      current = section;
    }
    os << key.substr(dot + 1) << " = " << b.get(c) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Manifest.

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct RunManifest {
  std::string subcommand;
  std::string config_ini;
  std::vector<std::pair<std::string, std::string>> overrides;  // in application order
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> artifacts;  // role -> path
  std::string started = utc_timestamp();
  std::string finished;

  nlohmann::json to_json() const {
    nlohmann::json ov = nlohmann::json::array();
    for (const auto& [k, v] : overrides) ov.push_back({{"key", k}, {"value", v}});
    return {{"tool", "agr"},         {"version", kToolVersion}, {"subcommand", subcommand},
            {"config", config_ini},  {"overrides", ov},         {"seeds", seeds},
            {"artifacts", artifacts}, {"started", started},     {"finished", finished}};
  }

  /// Stamps the finish time and writes manifest.json plus a config.ini
  /// snapshot (loadable with --config) into `dir`. Every artifact must exist.
  void write(const std::filesystem::path& dir) {
    {
      std::ofstream ini(dir / "config.ini");
      ini << config_ini;
      if (!ini) throw Error("cannot write " + (dir / "config.ini").string());
    }
    artifacts["config"] = (dir / "config.ini").string();
    for (const auto& [role, path] : artifacts) {
      if (!std::filesystem::exists(path)) throw Error("manifest: artifact '" + role + "' missing at " + path);
    }
    finished = utc_timestamp();
    std::ofstream out(dir / "manifest.json");
    out << to_json().dump(2) << '\n';
    if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
  }
};

}  // namespace agr
