#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "miccd/config.hpp"
#include "miccd/csv.hpp"
#include "miccd/error.hpp"
#include "miccd/flat_surrogate.hpp"
#include "miccd/gmm.hpp"
#include "miccd/harness.hpp"
#include "miccd/metrics.hpp"
#include "miccd/scm.hpp"
#include "miccd/surrogate.hpp"

namespace miccd {

enum class Stage { gen, cluster, train, decide, eval, report, all };

inline const std::vector<std::pair<std::string, Stage>>& stage_names() {
  static const std::vector<std::pair<std::string, Stage>> names{
      {"gen", Stage::gen},       {"cluster", Stage::cluster}, {"train", Stage::train}, {"decide", Stage::decide},
      {"eval", Stage::eval},     {"report", Stage::report},   {"all", Stage::all}};
  return names;
}

inline Stage parse_stage(const std::string& s) {
  for (const auto& [name, st] : stage_names())
    if (name == s) return st;
  throw ConfigInvalid("unknown stage '" + s + "'");
}

inline std::string stage_name(Stage s) {
  for (const auto& [name, st] : stage_names())
    if (st == s) return name;
  return "?";
}

// ------------------------------------------------------------------- io

namespace io {

namespace fs = std::filesystem;

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingArtifact("missing artifact " + p.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw FormatError(p.string() + ": not valid JSON");
  return j;
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write " + p.string());
  out << j.dump(1) << '\n';
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write " + p.string());
  out << text;
}

inline std::string join(const std::vector<NodeIndex>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? " " : "") + std::to_string(v[k]);
  return s;
}

inline std::vector<NodeIndex> split_indices(const std::string& s) {
  std::vector<NodeIndex> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(static_cast<NodeIndex>(csv::parse_int(tok)));
  return out;
}

inline std::vector<int> read_labels(const fs::path& p) {
  const csv::Table t = csv::read(p.string());
  const std::size_t c = t.column("label");
  std::vector<int> out;
  for (const auto& r : t.rows) out.push_back(static_cast<int>(csv::parse_int(r[c])));
  return out;
}

}  // namespace io

// ---------------------------------------------------------------- cells

/// One (dataset, seed) unit of work and its artifact directory.
struct Cell {
  DatasetSpec dataset;
  std::uint64_t seed = 0;
  std::filesystem::path dir;

  std::filesystem::path file(const std::string& name) const { return dir / name; }
};

inline std::vector<Cell> make_cells(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  std::vector<Cell> cells;
  for (const auto& d : cfg.datasets)
    for (std::uint64_t s : cfg.seeds) cells.push_back({d, s, out / d.name() / ("seed_" + std::to_string(s))});
  return cells;
}

inline std::string variant_name(Variant v) { return nlohmann::json(v).get<std::string>(); }

/// Variants to train: the configured ones plus the full model, which the
/// decision stage always needs.
inline std::vector<Variant> trained_variants(const EvalSpec& e) {
  std::vector<Variant> v{Variant::full};
  for (Variant x : e.variants)
    if (x != Variant::full) v.push_back(x);
  return v;
}

inline CellData load_cell_data(const Cell& c) {
  const nlohmann::json j = io::read_json(c.file("scm.json"));
  CellData d;
  try {
    d.scm = scm_from_json(j.at("scm"));
    d.patterns = patterns_from_json(j.at("patterns"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scm.json: ") + e.what());
  }
  d.train = read_dataset(c.file("train.csv").string(), c.file("train_noise.csv").string(), d.scm.graph);
  d.test = read_dataset(c.file("test.csv").string(), c.file("test_noise.csv").string(), d.scm.graph);
  return d;
}

inline std::size_t load_k(const Cell& c) { return io::read_json(c.file("cluster.json")).at("K").get<std::size_t>(); }

// ---------------------------------------------------------------- stages

inline void stage_gen(const ExperimentConfig& cfg, const Cell& c) {
  std::filesystem::create_directories(c.dir);
  const CellData d = generate_cell(c.dataset, cfg.anomaly, c.seed);
  io::write_json(c.file("scm.json"), {{"scm", scm_to_json(d.scm)}, {"patterns", patterns_to_json(d.patterns)}});
  write_dataset(c.file("train.csv").string(), c.file("train_noise.csv").string(), d.scm.graph, d.train);
  write_dataset(c.file("test.csv").string(), c.file("test_noise.csv").string(), d.scm.graph, d.test);
}

inline void stage_cluster(const ExperimentConfig& cfg, const Cell& c) {
  const CellData d = load_cell_data(c);
  const ClusterOutcome o = cluster_cell(d, cfg.cluster, cfg.anomaly.patterns, c.seed);
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  io::write_json(c.file("gmm.json"), gmm_to_json(o.gmm));
  io::write_json(c.file("cluster.json"), {{"K", o.K},
                                          {"mean", vec(o.mean)},
                                          {"sd", vec(o.sd)},
                                          {"log_likelihood", o.gmm.log_likelihood},
                                          {"iterations", o.gmm.iterations},
                                          {"monotone", o.gmm.monotone},
                                          {"train_accuracy", o.train_accuracy},
                                          {"test_accuracy", o.test_accuracy}});
  csv::write(c.file("train_labeled.csv").string(), dataset_table(d.scm.graph, d.train, {{"label", o.train_labels}}));
  csv::write(c.file("test_labeled.csv").string(), dataset_table(d.scm.graph, d.test, {{"label", o.test_labels}}));
}

inline void stage_train(const ExperimentConfig& cfg, const Cell& c) {
  const CellData d = load_cell_data(c);
  const std::size_t K = load_k(c);
  const std::vector<int> labels = io::read_labels(c.file("train_labeled.csv"));
  if (labels.size() != d.train.rows()) throw FormatError("label count does not match training rows");
  TrainConfig tc = cfg.train;
  nlohmann::json log = nlohmann::json::object();
  for (Variant v : trained_variants(cfg.eval)) {
    tc.seed = derive_seed(c.seed, 0x6d6f64656c + static_cast<std::uint64_t>(v));
    const Eigen::MatrixXd u = variant_labels(labels, K, v);
    const std::string name = variant_name(v);
    if (v == Variant::no_graph) {
      io::write_json(c.file("model_" + name + ".json"), flat_surrogate_to_json(train_flat_surrogate(d.train, u, d.scm.graph, tc)));
    } else {
      TrainReport rep;
      const SurrogateModel m = train_surrogate(d.train, u, d.scm.graph, tc, &rep);
      io::write_json(c.file("model_" + name + ".json"), surrogate_to_json(m));
      log[name] = {{"initial_elbo", rep.initial_elbo}, {"epoch_elbo", rep.epoch_elbo}};
    }
  }
  io::write_json(c.file("train_log.json"), log);
}

inline void stage_decide(const ExperimentConfig& cfg, const Cell& c) {
  const CellData d = load_cell_data(c);
  const std::size_t K = load_k(c);
  const std::vector<int> labels = io::read_labels(c.file("test_labeled.csv"));
  const SurrogateModel m = surrogate_from_json(io::read_json(c.file("model_full.json")));
  const auto records = decide_cell(m, d, labels, K, cfg.decision, cfg.cost, derive_seed(c.seed, 0x646563));

  csv::Table t;
  t.header = {"row",  "root_cause", "label",     "miccd_top1", "naive_top1", "cost",       "reference_cost", "n_cost",
              "pn",   "pn_stderr",  "feasible",  "restart",    "iterations", "effective",  "miccd_rank",     "naive_rank"};
  nlohmann::json plans = nlohmann::json::array();
  for (const auto& r : records) {
    t.rows.push_back({std::to_string(r.row), std::to_string(r.root_cause), std::to_string(r.label),
                      std::to_string(r.miccd_rank.at(0)), std::to_string(r.naive_rank.at(0)),
                      csv::format_double(r.plan.cost), csv::format_double(r.reference_cost),
                      csv::format_double(normalized_cost(r.plan.cost, r.reference_cost)),
                      csv::format_double(r.plan.pn), csv::format_double(r.plan.pn_stderr),
                      std::to_string(r.plan.feasible ? 1 : 0), std::to_string(r.plan.restart),
                      std::to_string(r.plan.iterations), io::join(r.plan.effective), io::join(r.miccd_rank),
                      io::join(r.naive_rank)});
    nlohmann::json p = plan_to_json(r.plan, cfg.cost);
    p["row"] = r.row;
    plans.push_back(p);
  }
  csv::write(c.file("decisions.csv").string(), t);
  io::write_json(c.file("plans.json"), plans);
}

inline std::vector<DecisionSummaryRow> load_decisions(const Cell& c) {
  const csv::Table t = csv::read(c.file("decisions.csv").string());
  const std::size_t rc = t.column("root_cause"), mr = t.column("miccd_rank"), nr = t.column("naive_rank"),
                    co = t.column("cost"), rf = t.column("reference_cost"), fe = t.column("feasible");
  std::vector<DecisionSummaryRow> out;
  for (const auto& r : t.rows)
    out.push_back({static_cast<int>(csv::parse_int(r[rc])), io::split_indices(r[mr]), io::split_indices(r[nr]),
                   csv::parse_double(r[co]), csv::parse_double(r[rf]), csv::parse_int(r[fe]) != 0});
  return out;
}

inline void stage_eval(const ExperimentConfig& cfg, const Cell& c) {
  const CellData d = load_cell_data(c);
  const std::size_t K = load_k(c);
  const std::vector<int> labels = io::read_labels(c.file("test_labeled.csv"));
  const nlohmann::json cl = io::read_json(c.file("cluster.json"));
  nlohmann::json e{{"dataset", c.dataset.name()}, {"seed", c.seed}, {"cluster_accuracy", cl.at("test_accuracy")}};

  if (cfg.eval.wants("r_mse_cf") || cfg.eval.wants("r_mse_recon")) {
    nlohmann::json variants = nlohmann::json::object();
    for (Variant v : cfg.eval.variants) {
      const std::string name = variant_name(v);
      const nlohmann::json mj = io::read_json(c.file("model_" + name + ".json"));
      const Fidelity f = v == Variant::no_graph
                             ? evaluate_fidelity(flat_surrogate_from_json(mj), d, labels, K, v, cfg.eval)
                             : evaluate_fidelity(surrogate_from_json(mj), d, labels, K, v, cfg.eval);
      nlohmann::json fj = nlohmann::json::object();
      if (cfg.eval.wants("r_mse_cf")) fj["r_mse_cf"] = f.cf_rmse;
      if (cfg.eval.wants("r_mse_recon")) fj["r_mse_recon"] = f.recon_rmse;
      variants[name] = fj;
    }
    e["variants"] = variants;
  }

  const DecisionScores s = score_decisions(load_decisions(c), cfg.eval.ndcg_k);
  auto method = [&](const MethodScores& m, bool with_cost) {
    nlohmann::json j = nlohmann::json::object();
    if (cfg.eval.wants("f1")) j["f1"] = m.f1;
    if (cfg.eval.wants("ndcg")) {
      nlohmann::json nd = nlohmann::json::object();
      for (const auto& [k, v] : m.ndcg) nd[std::to_string(k)] = v;
      j["ndcg"] = nd;
    }
    if (with_cost && cfg.eval.wants("n_cost")) {
      j["n_cost"] = s.n_cost_mean;
      j["n_cost_std"] = s.n_cost_std;
    }
    return j;
  };
  e["decisions"] = {{"rows", s.rows}, {"feasible_rate", s.feasible_rate}};
  e["methods"] = {{"miccd", method(s.miccd, true)}, {"naive_rca", method(s.naive, false)}};
  io::write_json(c.file("eval.json"), e);
}

// ---------------------------------------------------------------- report

namespace detail {

inline nlohmann::json summary_stat(const std::vector<double>& v) {
  double mean = 0.0, var = 0.0;
  for (double x : v) mean += x / static_cast<double>(v.size());
  for (double x : v) var += (x - mean) * (x - mean) / static_cast<double>(v.size());
  return {{"median", median(v)}, {"mean", mean}, {"std", std::sqrt(var)}, {"values", v}};
}

}  // namespace detail

/// Aggregates per-cell eval.json files into the report and the per-figure
/// CSVs. Returns the report JSON.
inline nlohmann::json stage_report(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  std::map<std::string, std::vector<nlohmann::json>> by_dataset;
  std::vector<std::string> order;
  for (const Cell& c : make_cells(cfg, out)) {
    const std::string name = c.dataset.name();
    if (!by_dataset.count(name)) order.push_back(name);
    by_dataset[name].push_back(io::read_json(c.file("eval.json")));
  }

  csv::Table flat{{"dataset", "method", "metric", "seed", "value"}, {}};
  csv::Table decision_tab{{"dataset", "method", "f1_median", "n_cost_median"}, {}};
  csv::Table ndcg_tab{{"dataset", "method", "k", "ndcg_median"}, {}};
  csv::Table cf_tab{{"dataset", "variant", "r_mse_cf_median", "r_mse_cf_std"}, {}};
  csv::Table recon_tab{{"dataset", "variant", "r_mse_recon_median", "r_mse_recon_std"}, {}};
  auto fmt = [](double v) { return csv::format_double(v); };

  nlohmann::json datasets = nlohmann::json::object();
  for (const std::string& name : order) {
    const auto& evals = by_dataset[name];
    // Collect a metric across seeds; every seed reports the same keys.
    auto collect = [&](const std::vector<std::string>& path, const std::string& method, const std::string& metric) {
      std::vector<double> v;
      for (const auto& e : evals) {
        const nlohmann::json* node = &e;
        for (const auto& p : path) {
          if (!node->contains(p)) return std::vector<double>{};
          node = &(*node)[p];
        }
        v.push_back(node->get<double>());
      }
      for (std::size_t s = 0; s < v.size(); ++s)
        flat.rows.push_back({name, method, metric, std::to_string(evals[s].at("seed").get<std::uint64_t>()), fmt(v[s])});
      if (!v.empty()) flat.rows.push_back({name, method, metric, "median", fmt(median(v))});
      return v;
    };

    nlohmann::json ds = nlohmann::json::object();
    if (auto v = collect({"cluster_accuracy"}, "gmm", "cluster_accuracy"); !v.empty())
      ds["cluster_accuracy"] = detail::summary_stat(v);
    if (auto v = collect({"decisions", "feasible_rate"}, "miccd", "feasible_rate"); !v.empty())
      ds["feasible_rate"] = detail::summary_stat(v);

    std::map<std::string, double> f1_med, nc_med;
    for (const char* m : {"miccd", "naive_rca"}) {
      if (auto v = collect({"methods", m, "f1"}, m, "f1"); !v.empty()) {
        ds["f1"][m] = detail::summary_stat(v);
        f1_med[m] = median(v);
      }
      if (auto v = collect({"methods", m, "n_cost"}, m, "n_cost"); !v.empty()) {
        ds["n_cost"][m] = detail::summary_stat(v);
        nc_med[m] = median(v);
      }
      for (std::size_t k : cfg.eval.ndcg_k) {
        const std::string ks = std::to_string(k);
        if (auto v = collect({"methods", m, "ndcg", ks}, m, "ndcg@" + ks); !v.empty()) {
          ds["ndcg"][m][ks] = detail::summary_stat(v);
          ndcg_tab.rows.push_back({name, m, ks, fmt(median(v))});
        }
      }
      if (f1_med.count(m) || nc_med.count(m))
        decision_tab.rows.push_back({name, m, f1_med.count(m) ? fmt(f1_med[m]) : "", nc_med.count(m) ? fmt(nc_med[m]) : ""});
    }
    for (Variant var : cfg.eval.variants) {
      const std::string vn = variant_name(var);
      if (auto v = collect({"variants", vn, "r_mse_cf"}, vn, "r_mse_cf"); !v.empty()) {
        const auto st = detail::summary_stat(v);
        ds["r_mse_cf"][vn] = st;
        cf_tab.rows.push_back({name, vn, fmt(st["median"].get<double>()), fmt(st["std"].get<double>())});
      }
      if (auto v = collect({"variants", vn, "r_mse_recon"}, vn, "r_mse_recon"); !v.empty()) {
        const auto st = detail::summary_stat(v);
        ds["r_mse_recon"][vn] = st;
        recon_tab.rows.push_back({name, vn, fmt(st["median"].get<double>()), fmt(st["std"].get<double>())});
      }
    }
    datasets[name] = ds;
  }

  const nlohmann::json report{{"config_hash", cfg.hash}, {"seeds", cfg.seeds}, {"datasets", datasets}};
  io::write_json(out / "report.json", report);
  csv::write((out / "report.csv").string(), flat);
  csv::write((out / "decision_summary.csv").string(), decision_tab);
  csv::write((out / "ndcg_summary.csv").string(), ndcg_tab);
  csv::write((out / "counterfactual_rmse.csv").string(), cf_tab);
  csv::write((out / "reconstruction_rmse.csv").string(), recon_tab);
  return report;
}

// ---------------------------------------------------------------- driver

struct RunOptions {
  std::size_t workers = 1;
  std::ostream* log = nullptr;
};

namespace detail {

/// Runs `fn` on every cell with up to `workers` threads. Cells are
/// independent, so results do not depend on scheduling; the first failure
/// in cell order is rethrown.
template <class Fn>
void for_each_cell(const std::vector<Cell>& cells, std::size_t workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        fn(cells[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, cells.size()));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <class E>
[[noreturn]] void rethrow_with(const std::string& context, const E& e) {
  throw E(context + ": " + e.what());
}

}  // namespace detail

/// Runs one stage (or all of them in order) for every (dataset, seed)
/// cell. Each stage reads the previous stages' files from `out`.
inline void run_pipeline(const ExperimentConfig& cfg, Stage stage, const std::filesystem::path& out,
                         const RunOptions& opts = {}) {
  if (stage == Stage::all) {
    for (Stage s : {Stage::gen, Stage::cluster, Stage::train, Stage::decide, Stage::eval, Stage::report})
      run_pipeline(cfg, s, out, opts);
    return;
  }
  std::mutex log_mutex;
  auto note = [&](const std::string& msg) {
    if (!opts.log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    *opts.log << "[" << stage_name(stage) << "] " << msg << '\n';
  };
  const std::string ctx = "stage " + stage_name(stage);
  try {
    std::filesystem::create_directories(out);
    if (stage == Stage::report) {
      stage_report(cfg, out);
      io::write_json(out / "config.resolved.json", cfg.resolved);
      note("wrote " + (out / "report.json").string());
      return;
    }
    detail::for_each_cell(make_cells(cfg, out), opts.workers, [&](const Cell& c) {
      const std::string where = c.dataset.name() + " seed " + std::to_string(c.seed);
      note(where);
      try {
        switch (stage) {
          case Stage::gen: stage_gen(cfg, c); break;
          case Stage::cluster: stage_cluster(cfg, c); break;
          case Stage::train: stage_train(cfg, c); break;
          case Stage::decide: stage_decide(cfg, c); break;
          case Stage::eval: stage_eval(cfg, c); break;
          default: break;
        }
      } catch (const MissingArtifact& e) {
        detail::rethrow_with(where, e);
      } catch (const ConfigInvalid& e) {
        detail::rethrow_with(where, e);
      } catch (const Error& e) {
        detail::rethrow_with(where, e);
      }
    });
  } catch (const MissingArtifact& e) {
    detail::rethrow_with(ctx, e);
  } catch (const ConfigInvalid& e) {
    detail::rethrow_with(ctx, e);
  } catch (const Error& e) {
    detail::rethrow_with(ctx, e);
  } catch (const std::exception& e) {
    throw Error(ctx + ": " + e.what());
  }
}

/// Trains and evaluates every configured variant on every (dataset, seed)
/// cell and returns the aggregated report.
inline nlohmann::json run_ablation_suite(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                         const RunOptions& opts = {}) {
  run_pipeline(cfg, Stage::all, out, opts);
  return io::read_json(out / "report.json");
}

}  // namespace miccd
