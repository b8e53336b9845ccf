#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "miccd/decision.hpp"
#include "miccd/error.hpp"
#include "miccd/scm.hpp"
#include "miccd/surrogate.hpp"

namespace miccd {

/// JSON schema for experiment configs; kept identical to
/// schema/experiment.schema.json.
inline const char* experiment_schema_text() {
  return R"json({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "experiment",
  "type": "object",
  "additionalProperties": false,
  "required": ["seeds"],
  "properties": {
    "datasets": {
      "type": "array",
      "minItems": 1,
      "items": {
        "type": "object",
        "additionalProperties": false,
        "properties": {
          "structure": {"enum": ["chain", "random"]},
          "n": {"type": "integer", "minimum": 1, "maximum": 63},
          "sparsity": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
          "strength": {"enum": ["weak", "medium", "strong"]},
          "nonlinearity": {"enum": ["identity", "tanh"]}
        }
      }
    },
    "anomaly": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "patterns": {"type": "integer", "minimum": 1},
        "shift": {"type": "number"},
        "scale": {"type": "number", "exclusiveMinimum": 0},
        "samples_per_pattern": {"type": "integer", "minimum": 1},
        "normal_samples": {"type": "integer", "minimum": 0},
        "test_per_pattern": {"type": "integer", "minimum": 1},
        "test_normal": {"type": "integer", "minimum": 0},
        "threshold_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "threshold_samples": {"type": "integer", "minimum": 1}
      }
    },
    "cluster": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "k": {"type": "integer", "minimum": 0},
        "auto": {"type": "boolean"},
        "k_min": {"type": "integer", "minimum": 1},
        "k_max": {"type": "integer", "minimum": 1},
        "restarts": {"type": "integer", "minimum": 1},
        "max_iter": {"type": "integer", "minimum": 1},
        "tol": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "train": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "hidden_dim": {"type": "integer", "minimum": 0},
        "depth": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "kl_weight": {"type": "number", "minimum": 0},
        "obs_var": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "decision": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "iota": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "samples": {"type": "integer", "minimum": 1},
        "tau": {"type": "number", "minimum": 0},
        "restarts": {"type": "integer", "minimum": 1},
        "max_iter": {"type": "integer", "minimum": 0},
        "step_tol": {"type": "number", "exclusiveMinimum": 0},
        "constraint_tol": {"type": "number", "exclusiveMinimum": 0},
        "rows": {"type": "integer", "minimum": 1}
      }
    },
    "cost": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "unit_costs": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "p": {"enum": [1, 2]},
        "lambda0": {"type": "number", "minimum": 0}
      }
    },
    "eval": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "metrics": {
          "type": "array",
          "items": {"enum": ["f1", "n_cost", "ndcg", "r_mse_cf", "r_mse_recon"]}
        },
        "ndcg_k": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "variants": {
          "type": "array",
          "minItems": 1,
          "items": {"enum": ["full", "no_u", "no_graph"]}
        },
        "cf_rows": {"type": "integer", "minimum": 1},
        "recon_rows": {"type": "integer", "minimum": 1}
      }
    },
    "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
    "output": {"type": "string"}
  }
})json";
}

inline const nlohmann::json& experiment_schema() {
  static const nlohmann::json s = nlohmann::json::parse(experiment_schema_text());
  return s;
}

// ------------------------------------------------------------ validation

namespace detail {

inline std::string type_name(const nlohmann::json& v) {
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

inline bool type_matches(const nlohmann::json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>())));
  if (type == "number") return v.is_number();
  return false;
}

inline void fail(const std::string& path, const std::string& msg) {
  throw ConfigInvalid((path.empty() ? std::string("/") : path) + ": " + msg);
}

}  // namespace detail

/// Checks `v` against the subset of JSON Schema used by the experiment
/// schema: type, enum, properties, required, additionalProperties, items,
/// minItems, minimum, maximum, exclusiveMinimum, exclusiveMaximum. Throws
/// ConfigInvalid naming the offending path.
inline void validate_json(const nlohmann::json& v, const nlohmann::json& schema, const std::string& path = "") {
  if (schema.contains("type") && !detail::type_matches(v, schema["type"].get<std::string>()))
    detail::fail(path, "expected " + schema["type"].get<std::string>() + ", got " + detail::type_name(v));
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& e : schema["enum"]) ok = ok || e == v;
    if (!ok) detail::fail(path, "value " + v.dump() + " not in " + schema["enum"].dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema["minimum"].get<double>())
      detail::fail(path, "must be >= " + schema["minimum"].dump());
    if (schema.contains("maximum") && x > schema["maximum"].get<double>())
      detail::fail(path, "must be <= " + schema["maximum"].dump());
    if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>())
      detail::fail(path, "must be > " + schema["exclusiveMinimum"].dump());
    if (schema.contains("exclusiveMaximum") && x >= schema["exclusiveMaximum"].get<double>())
      detail::fail(path, "must be < " + schema["exclusiveMaximum"].dump());
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& r : schema["required"])
        if (!v.contains(r.get<std::string>())) detail::fail(path + "/" + r.get<std::string>(), "required key missing");
    const auto props = schema.value("properties", nlohmann::json::object());
    for (const auto& [key, val] : v.items()) {
      if (props.contains(key))
        validate_json(val, props[key], path + "/" + key);
      else if (schema.contains("additionalProperties") && schema["additionalProperties"] == false)
        detail::fail(path + "/" + key, "unknown key");
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>())
      detail::fail(path, "needs at least " + schema["minItems"].dump() + " items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) validate_json(v[i], schema["items"], path + "/" + std::to_string(i));
  }
}

// ---------------------------------------------------------------- config

struct DatasetSpec {
  GraphStructure structure = GraphStructure::chain;
  std::size_t n = 5;
  double sparsity = 0.3;
  Strength strength = Strength::medium;
  Nonlinearity nonlinearity = Nonlinearity::identity;

  /// Directory-safe name, e.g. chain-n5-medium-identity or
  /// random-p0.3-n5-medium-identity.
  std::string name() const {
    std::string s = structure == GraphStructure::chain ? "chain" : "random";
    if (structure == GraphStructure::random) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "-p%g", sparsity);
      s += buf;
    }
    s += "-n" + std::to_string(n);
    s += "-" + nlohmann::json(strength).get<std::string>();
    s += "-" + nlohmann::json(nonlinearity).get<std::string>();
    return s;
  }
};

struct AnomalySpec {
  std::size_t patterns = 2;
  double shift = 3.0;
  double scale = 2.0;
  std::size_t samples_per_pattern = 1000;
  std::size_t normal_samples = 4000;
  std::size_t test_per_pattern = 200;
  std::size_t test_normal = 400;
  double threshold_quantile = 0.95;
  std::size_t threshold_samples = 10000;
};

struct ClusterSpec {
  std::size_t k = 0;  // 0: one component per anomaly pattern
  bool automatic = false;  // pick K by BIC in [k_min, k_max]
  std::size_t k_min = 1;
  std::size_t k_max = 6;
  int restarts = 5;
  int max_iter = 200;
  double tol = 1e-6;
};

struct DecisionSpec {
  double iota = 0.9;
  std::size_t samples = 64;
  double tau = 0.0;
  std::size_t restarts = 8;
  int max_iter = 200;
  double step_tol = 1e-6;
  double constraint_tol = 1e-4;
  std::size_t rows = 30;  // abnormal test rows decided per cell
};

enum class Variant { full, no_u, no_graph };

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::full, "full"}, {Variant::no_u, "no_u"}, {Variant::no_graph, "no_graph"}})

struct EvalSpec {
  std::vector<std::string> metrics{"f1", "n_cost", "ndcg", "r_mse_cf", "r_mse_recon"};
  std::vector<std::size_t> ndcg_k{1, 3};
  std::vector<Variant> variants{Variant::full, Variant::no_u, Variant::no_graph};
  std::size_t cf_rows = 100;
  std::size_t recon_rows = 200;

  bool wants(const std::string& metric) const {
    for (const auto& m : metrics)
      if (m == metric) return true;
    return false;
  }
  bool has(Variant v) const {
    for (auto x : variants)
      if (x == v) return true;
    return false;
  }
};

struct ExperimentConfig {
  std::vector<DatasetSpec> datasets{DatasetSpec{}};
  AnomalySpec anomaly;
  ClusterSpec cluster;
  TrainConfig train;
  DecisionSpec decision;
  CostModel cost;
  EvalSpec eval;
  std::vector<std::uint64_t> seeds;
  std::string output = "out";
  /// Fully resolved config (defaults filled in) and its FNV-1a hash.
  nlohmann::json resolved;
  std::string hash;
};

inline nlohmann::json default_dataset_json() {
  return {{"structure", "chain"}, {"n", 5}, {"sparsity", 0.3}, {"strength", "medium"}, {"nonlinearity", "identity"}};
}

/// Every default except the seeds, which must be given explicitly.
inline nlohmann::json default_config_json() {
  return {
      {"datasets", nlohmann::json::array({default_dataset_json()})},
      {"anomaly",
       {{"patterns", 2}, {"shift", 3.0}, {"scale", 2.0}, {"samples_per_pattern", 1000}, {"normal_samples", 4000},
        {"test_per_pattern", 200}, {"test_normal", 400}, {"threshold_quantile", 0.95},
        {"threshold_samples", 10000}}},
      {"cluster", {{"k", 0}, {"auto", false}, {"k_min", 1}, {"k_max", 6}, {"restarts", 5}, {"max_iter", 200}, {"tol", 1e-6}}},
      {"train",
       {{"batch_size", 64}, {"epochs", 20}, {"hidden_dim", 0}, {"depth", 3}, {"learning_rate", 1e-3},
        {"kl_weight", 1.0}, {"obs_var", 0.01}}},
      {"decision",
       {{"iota", 0.9}, {"samples", 64}, {"tau", 0.0}, {"restarts", 8}, {"max_iter", 200}, {"step_tol", 1e-6},
        {"constraint_tol", 1e-4}, {"rows", 30}}},
      {"cost", {{"unit_costs", nlohmann::json::array()}, {"p", 2}, {"lambda0", 0.0}}},
      {"eval",
       {{"metrics", {"f1", "n_cost", "ndcg", "r_mse_cf", "r_mse_recon"}},
        {"ndcg_k", {1, 3}},
        {"variants", {"full", "no_u", "no_graph"}},
        {"cf_rows", 100},
        {"recon_rows", 200}}},
      {"output", "out"}};
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Applies one KEY=VALUE override with a dotted path (array elements by
/// index). VALUE is parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigInvalid("override '" + assignment + "' is not KEY=VALUE");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &cfg;
  std::stringstream ss(key);
  std::string part, path;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& p = parts[i];
    path += "/" + p;
    if (p.empty()) throw ConfigInvalid(path + ": empty key segment in override");
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(p);
      } catch (const std::exception&) {
        throw ConfigInvalid(path + ": expected an array index");
      }
      if (idx >= node->size()) throw ConfigInvalid(path + ": array index out of range");
      node = &(*node)[idx];
    } else {
      if (node->is_null()) *node = nlohmann::json::object();
      if (!node->is_object()) throw ConfigInvalid(path + ": cannot descend into a scalar");
      node = &(*node)[p];
    }
    if (last) *node = value;
  }
}

namespace detail {

inline void deep_merge(nlohmann::json& base, const nlohmann::json& over) {
  if (!base.is_object() || !over.is_object()) {
    base = over;
    return;
  }
  for (const auto& [k, v] : over.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object())
      deep_merge(base[k], v);
    else
      base[k] = v;
  }
}

}  // namespace detail

/// Validates a user config, fills in defaults and converts to the typed
/// form.
inline ExperimentConfig resolve_config(const nlohmann::json& user) {
  validate_json(user, experiment_schema());
  nlohmann::json r = default_config_json();
  detail::deep_merge(r, user);
  if (user.contains("datasets")) {
    r["datasets"] = nlohmann::json::array();
    for (const auto& d : user["datasets"]) {
      nlohmann::json item = default_dataset_json();
      detail::deep_merge(item, d);
      r["datasets"].push_back(item);
    }
  }
  validate_json(r, experiment_schema());

  ExperimentConfig c;
  try {
    c.datasets.clear();
    for (const auto& d : r["datasets"]) {
      DatasetSpec s;
      s.structure = d["structure"].get<GraphStructure>();
      s.n = d["n"].get<std::size_t>();
      s.sparsity = d["sparsity"].get<double>();
      s.strength = d["strength"].get<Strength>();
      s.nonlinearity = d["nonlinearity"].get<Nonlinearity>();
      c.datasets.push_back(s);
    }
    const auto& a = r["anomaly"];
    c.anomaly = {a["patterns"].get<std::size_t>(),         a["shift"].get<double>(),
                 a["scale"].get<double>(),                 a["samples_per_pattern"].get<std::size_t>(),
                 a["normal_samples"].get<std::size_t>(),   a["test_per_pattern"].get<std::size_t>(),
                 a["test_normal"].get<std::size_t>(),      a["threshold_quantile"].get<double>(),
                 a["threshold_samples"].get<std::size_t>()};
    const auto& k = r["cluster"];
    c.cluster = {k["k"].get<std::size_t>(),  k["auto"].get<bool>(),     k["k_min"].get<std::size_t>(),
                 k["k_max"].get<std::size_t>(), k["restarts"].get<int>(), k["max_iter"].get<int>(),
                 k["tol"].get<double>()};
    if (c.cluster.k_min > c.cluster.k_max) detail::fail("/cluster/k_min", "must not exceed k_max");
    const auto& t = r["train"];
    c.train.batch_size = t["batch_size"].get<std::size_t>();
    c.train.epochs = t["epochs"].get<std::size_t>();
    c.train.hidden_dim = t["hidden_dim"].get<std::size_t>();
    c.train.depth = t["depth"].get<std::size_t>();
    c.train.learning_rate = t["learning_rate"].get<double>();
    c.train.kl_weight = t["kl_weight"].get<double>();
    c.train.obs_var = t["obs_var"].get<double>();
    const auto& dd = r["decision"];
    c.decision = {dd["iota"].get<double>(),      dd["samples"].get<std::size_t>(), dd["tau"].get<double>(),
                  dd["restarts"].get<std::size_t>(), dd["max_iter"].get<int>(),    dd["step_tol"].get<double>(),
                  dd["constraint_tol"].get<double>(), dd["rows"].get<std::size_t>()};
    c.cost = r["cost"].get<CostModel>();
    const auto& e = r["eval"];
    c.eval.metrics = e["metrics"].get<std::vector<std::string>>();
    c.eval.ndcg_k = e["ndcg_k"].get<std::vector<std::size_t>>();
    c.eval.variants = e["variants"].get<std::vector<Variant>>();
    c.eval.cf_rows = e["cf_rows"].get<std::size_t>();
    c.eval.recon_rows = e["recon_rows"].get<std::size_t>();
    c.seeds = r["seeds"].get<std::vector<std::uint64_t>>();
    c.output = r["output"].get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigInvalid(std::string("config conversion: ") + ex.what());
  }
  c.resolved = r;
  c.hash = fnv1a_hex(r.dump());
  return c;
}

/// Reads a JSON config file, applies overrides, resolves.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open config file " + path);
  nlohmann::json user = nlohmann::json::parse(in, nullptr, false);
  if (user.is_discarded()) throw ConfigInvalid(path + ": not valid JSON");
  for (const auto& o : overrides) apply_override(user, o);
  return resolve_config(user);
}

}  // namespace miccd
