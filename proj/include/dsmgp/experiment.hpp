#pragma once

#include <Eigen/Core>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dsmgp/baselines.hpp"
#include "dsmgp/common.hpp"
#include "dsmgp/data.hpp"
#include "dsmgp/graph_io.hpp"
#include "dsmgp/hyperopt.hpp"
#include "dsmgp/inference.hpp"
#include "dsmgp/metrics.hpp"
#include "dsmgp/structure.hpp"

namespace dsmgp {

struct ExperimentConfig {
  std::string dataset;            ///< CSV path or synth:{sine,hetero,linear}
  std::string method = "dsmgp";   ///< dsmgp | gp | nle | gpoe | rbcm
  int sum_children = 4;           ///< K_S
  int observations_per_expert = 100;  ///< M; K_P defaults to ceil((N/M)^(1/R))
  int product_children = 0;       ///< explicit K_P, 0 = derive from M
  int repetitions = 2;            ///< R
  int min_observations = 0;       ///< minN, 0 = use M
  std::uint64_t seed = 1;
  RmspropOptions optimizer{0.05, 0.9, 1e-8, 200};
  std::string mode = "global";    ///< global | finetune (dsmgp only)
  bool surrogate = true;          ///< optimize on a K_S = 1 surrogate, then transplant
  bool use_sharing = false;
  std::string nlpd = "mixture";   ///< mixture | moment (dsmgp only)
  int component_cap = 10000;
  double train_fraction = 0.7;
  int target_column = -1;
  std::string beta_rule = "";     ///< gpoe/rbcm: uniform | entropy (default per method)
  std::string output_dir = "results";
  int synth_n = 500;              ///< rows for synth: datasets

  void check() const {
    if (sum_children < 1 || repetitions < 0 || observations_per_expert < 2 ||
        optimizer.iterations < 0 || component_cap < 0 || synth_n < 1) {
      throw UsageError("ExperimentConfig: counts must be positive");
    }
    if (method != "dsmgp" && method != "gp" && method != "nle" && method != "gpoe" &&
        method != "rbcm") {
      throw UsageError("ExperimentConfig: unknown method '" + method + "'");
    }
  }
};

struct ExperimentResult {
  nlohmann::json record;
  Scores scores;
  bool failed = false;
  std::string failed_stage;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline void write_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (!target.parent_path().empty()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw UsageError("write_atomic: cannot open " + tmp.string());
    out << contents;
  }
  fs::rename(tmp, target);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return nlohmann::json{{"dataset", c.dataset},
                        {"method", c.method},
                        {"sum_children", c.sum_children},
                        {"observations_per_expert", c.observations_per_expert},
                        {"product_children", c.product_children},
                        {"repetitions", c.repetitions},
                        {"min_observations", c.min_observations},
                        {"seed", c.seed},
                        {"optimizer",
                         {{"step", c.optimizer.step},
                          {"decay", c.optimizer.decay},
                          {"epsilon", c.optimizer.epsilon},
                          {"iterations", c.optimizer.iterations}}},
                        {"mode", c.mode},
                        {"surrogate", c.surrogate},
                        {"use_sharing", c.use_sharing},
                        {"nlpd", c.nlpd},
                        {"component_cap", c.component_cap},
                        {"train_fraction", c.train_fraction},
                        {"target_column", c.target_column},
                        {"beta_rule", c.beta_rule},
                        {"synth_n", c.synth_n}};
}

struct StageTimer {
  using clock = std::chrono::steady_clock;
  clock::time_point t0 = clock::now();
  double stop() { return std::chrono::duration<double>(clock::now() - t0).count(); }
};

}  // namespace detail

/// CSV path, or a synthetic generator "synth:sine", "synth:hetero",
/// "synth:linear" sized by cfg.synth_n and seeded by cfg.seed.
inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.rfind("synth:", 0) == 0) {
    const std::string kind = cfg.dataset.substr(6);
    if (kind == "sine") return synth_sine(cfg.synth_n, cfg.seed);
    if (kind == "hetero") return synth_hetero(cfg.synth_n, cfg.seed);
    if (kind == "linear") return synth_linear(cfg.synth_n, 2, cfg.seed, 0.01);
    throw UsageError("load_dataset: unknown synthetic dataset '" + kind + "'");
  }
  return load_csv(cfg.dataset, cfg.target_column);
}

/// Derived structure parameters: K_P = ceil((N/M)^(1/R)) unless given, at
/// least 2; minN defaults to M.
inline BuildConfig structure_config(const ExperimentConfig& cfg, Eigen::Index n_train,
                                    int sum_children) {
  BuildConfig b;
  b.sum_children = sum_children;
  b.repetitions = cfg.repetitions;
  b.min_observations = cfg.min_observations > 0 ? cfg.min_observations
                                                : cfg.observations_per_expert;
  b.seed = cfg.seed;
  if (cfg.product_children > 0) {
    b.product_children = cfg.product_children;
  } else {
    const double ratio = static_cast<double>(n_train) /
                         static_cast<double>(cfg.observations_per_expert);
    const double r = std::max(1, cfg.repetitions);
    b.product_children = std::max(2, static_cast<int>(std::ceil(std::pow(ratio, 1.0 / r))));
  }
  return b;
}

/// End-to-end experiment: load, split, standardize, build, optimize
/// hyperparameters, apply the posterior, evaluate, and write the result
/// JSON plus predictions/trace CSVs. Stage failures are recorded in the
/// result with their stage tag; everything produced so far is preserved.
inline ExperimentResult run(const ExperimentConfig& cfg) {
  cfg.check();
  ExperimentResult result;
  nlohmann::json& rec = result.record;
  rec["library_version"] = library_version;
  rec["config"] = detail::config_to_json(cfg);
  rec["config_hash"] = detail::fnv1a(rec["config"].dump());
  rec["seed"] = cfg.seed;
  nlohmann::json& timing = rec["timing"];

  namespace fs = std::filesystem;
  std::string stage = "load";
  try {
    detail::StageTimer timer;
    Dataset all = load_dataset(cfg);
    rec["dataset"] = {{"name", all.name}, {"rows", all.size()}, {"dims", all.dims()}};

    stage = "split";
    auto [train, test] = split(all, cfg.train_fraction, cfg.seed);

    stage = "standardize";
    const Standardizer stdz = compute_standardizer(train);
    standardize(train, stdz);
    standardize(test, stdz);
    rec["dataset"]["n_train"] = train.size();
    rec["dataset"]["n_test"] = test.size();
    rec["dataset"]["kept_dims"] = train.dims();
    timing["prepare_seconds"] = timer.stop();

    stage = "build";
    timer = {};
    const int dims = train.dims();
    const Hyperparameters hp0 = Hyperparameters::isotropic(dims, 1.0, 1.0, 0.1);
    // The K_S = 1 partition doubles as the baseline shard layout and the
    // surrogate for hyperparameter optimization.
    BuildConfig partition_cfg = structure_config(cfg, train.size(), 1);
    partition_cfg.leaf_hp = hp0;
    if (cfg.method == "gp") partition_cfg.min_observations = static_cast<int>(train.size());
    DsmgpGraph partition = build(train.X, partition_cfg);

    std::optional<DsmgpGraph> model;
    if (cfg.method == "dsmgp") {
      BuildConfig model_cfg = structure_config(cfg, train.size(), cfg.sum_children);
      model_cfg.leaf_hp = hp0;
      model = build(train.X, model_cfg);
    }
    timing["build_seconds"] = timer.stop();

    stage = "optimize";
    timer = {};
    InferenceOptions infer;
    infer.use_sharing = cfg.use_sharing;
    infer.component_cap = cfg.component_cap;
    Hyperparameters hp = hp0;
    OptimizeResult opt;
    if (cfg.optimizer.iterations > 0) {
      DsmgpGraph& surrogate = (cfg.method == "dsmgp" && !cfg.surrogate) ? *model : partition;
      opt = optimize(surrogate, train.X, train.y, OptimizeMode::global, cfg.optimizer, infer);
      hp = opt.best_shared;
      rec["optimize"] = {{"iterations", opt.trace.size()},
                         {"best_log_marginal", opt.best_log_marginal},
                         {"aborted", opt.aborted}};
      // Mean seconds per iteration, skipping 3 warm-up iterations when the
      // trace is long enough to leave 20 measured ones.
      if (!opt.trace.empty()) {
        std::size_t skip = opt.trace.size() >= 23 ? 3 : 0;
        double total = 0.0;
        for (std::size_t i = skip; i < opt.trace.size(); ++i) total += opt.trace[i].seconds;
        timing["per_iteration_seconds"] =
            total / static_cast<double>(opt.trace.size() - skip);
      }
    }
    timing["optimize_seconds"] = timer.stop();

    stage = "fit";
    timer = {};
    std::optional<ExpertEnsemble> ensemble;
    if (cfg.method == "dsmgp") {
      for (int id : model->leaves()) model->nodes[static_cast<std::size_t>(id)].hp = hp;
      if (cfg.mode == "finetune") {
        optimize(*model, train.X, train.y, OptimizeMode::finetune, cfg.optimizer, infer);
      }
      posterior_update(*model, train.X, train.y, infer);
      rec["effective_components"] = count_induced_trees(*model).str();
      rec["graph_hash"] = detail::fnv1a(graph_to_json(*model).dump());
    } else if (cfg.method == "gp") {
      for (int id : partition.leaves()) partition.nodes[static_cast<std::size_t>(id)].hp = hp;
      posterior_update(partition, train.X, train.y, infer);
      rec["effective_components"] = "1";
      rec["graph_hash"] = detail::fnv1a(graph_to_json(partition).dump());
    } else {
      ensemble = make_partition_ensemble(train.X, train.y, partition, hp);
      rec["effective_components"] = std::to_string(ensemble->experts.size());
      rec["graph_hash"] = detail::fnv1a(graph_to_json(partition).dump());
    }
    timing["fit_seconds"] = timer.stop();

    stage = "predict";
    timer = {};
    const Eigen::Index n_test = test.size();
    Eigen::VectorXd mean(n_test), var(n_test), logd(n_test);
    const BetaRule gpoe_rule =
        cfg.beta_rule == "entropy" ? BetaRule::entropy : BetaRule::uniform;
    const BetaRule rbcm_rule =
        cfg.beta_rule == "uniform" ? BetaRule::uniform : BetaRule::entropy;
    for (Eigen::Index i = 0; i < n_test; ++i) {
      const Eigen::VectorXd x = test.X.row(i).transpose();
      if (cfg.method == "dsmgp") {
        const PredictiveMixture m = predict_moments(*model, x, 0);
        mean(i) = m.mm_mean;
        var(i) = m.mm_var;
        logd(i) = cfg.nlpd == "moment" ? predictive_logdensity_mm(*model, x, test.y(i))
                                       : predictive_logdensity(*model, x, test.y(i));
      } else if (cfg.method == "gp") {
        const PredictiveMixture m = predict_moments(partition, x, 0);
        mean(i) = m.mm_mean;
        var(i) = m.mm_var;
        logd(i) = gaussian_logpdf(test.y(i), m.mm_mean, m.mm_var + hp.noise_var());
      } else if (cfg.method == "nle") {
        const GpPrediction p = nle_predict(*ensemble, x);
        mean(i) = p.mean;
        var(i) = p.var;
        logd(i) = gaussian_logpdf(test.y(i), p.mean, p.var + hp.noise_var());
      } else {
        const GpPrediction p = cfg.method == "gpoe" ? gpoe_predict(*ensemble, x, gpoe_rule)
                                                    : rbcm_predict(*ensemble, x, rbcm_rule);
        mean(i) = p.mean;
        var(i) = p.var;  // aggregated observation variance
        logd(i) = gaussian_logpdf(test.y(i), p.mean, p.var);
      }
    }
    timing["predict_seconds"] = timer.stop();

    stage = "metrics";
    result.scores = metrics(mean, logd, test.y);
    rec["metrics"] = {{"rmse", result.scores.rmse},
                      {"mae", result.scores.mae},
                      {"nlpd", result.scores.nlpd}};

    stage = "write";
    const fs::path dir = fs::path(cfg.output_dir);
    std::ostringstream pred_csv;
    pred_csv.precision(10);
    for (int c = 0; c < test.dims(); ++c) pred_csv << "x" << (c + 1) << ",";
    pred_csv << "mean,variance,nlpd\n";
    for (Eigen::Index i = 0; i < n_test; ++i) {
      for (int c = 0; c < test.dims(); ++c) pred_csv << test.X(i, c) << ",";
      pred_csv << mean(i) << "," << var(i) << "," << -logd(i) << "\n";
    }
    detail::write_atomic((dir / "predictions.csv").string(), pred_csv.str());
    rec["predictions_file"] = (dir / "predictions.csv").string();

    if (!opt.trace.empty()) {
      std::ostringstream trace_csv;
      trace_csv.precision(12);
      trace_csv << "iteration,log_marginal,seconds\n";
      for (const TracePoint& t : opt.trace) {
        trace_csv << t.iteration << "," << t.log_marginal << "," << t.seconds << "\n";
      }
      detail::write_atomic((dir / "trace.csv").string(), trace_csv.str());
      rec["trace_file"] = (dir / "trace.csv").string();
    }
    detail::write_atomic((dir / "result.json").string(), rec.dump(2) + "\n");
  } catch (const std::exception& e) {
    result.failed = true;
    result.failed_stage = stage;
    rec["error"] = {{"stage", stage}, {"message", e.what()}};
    try {
      detail::write_atomic((fs::path(cfg.output_dir) / "result.json").string(),
                           rec.dump(2) + "\n");
    } catch (...) {
    }
  }
  return result;
}

inline nlohmann::json standardizer_to_json(const Standardizer& s) {
  return nlohmann::json{
      {"kept_columns", s.kept_columns},
      {"x_mean", std::vector<double>(s.x_mean.begin(), s.x_mean.end())},
      {"x_std", std::vector<double>(s.x_std.begin(), s.x_std.end())},
      {"y_mean", s.y_mean},
      {"y_std", s.y_std}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
  Standardizer s;
  s.kept_columns = j.at("kept_columns").get<std::vector<int>>();
  const auto xm = j.at("x_mean").get<std::vector<double>>();
  const auto xs = j.at("x_std").get<std::vector<double>>();
  s.x_mean = Eigen::Map<const Eigen::VectorXd>(xm.data(), static_cast<Eigen::Index>(xm.size()));
  s.x_std = Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  s.y_mean = j.at("y_mean").get<double>();
  s.y_std = j.at("y_std").get<double>();
  return s;
}

struct TrainedModel {
  DsmgpGraph graph;
  Standardizer stdz;
  Hyperparameters hp;
  OptimizeResult opt;
  Dataset train;
  Dataset test;
  int input_columns = 0;  ///< covariate columns before standardization
};

/// Training pipeline for the dsmgp method: load, split, standardize, build,
/// optimize (on the K_S = 1 surrogate unless configured otherwise),
/// optional fine-tuning, and the exact posterior update.
inline TrainedModel train_dsmgp(const ExperimentConfig& cfg) {
  cfg.check();
  TrainedModel m;
  Dataset all = load_dataset(cfg);
  m.input_columns = all.dims();
  std::tie(m.train, m.test) = split(all, cfg.train_fraction, cfg.seed);
  m.stdz = compute_standardizer(m.train);
  standardize(m.train, m.stdz);
  standardize(m.test, m.stdz);

  const Hyperparameters hp0 = Hyperparameters::isotropic(m.train.dims(), 1.0, 1.0, 0.1);
  BuildConfig model_cfg = structure_config(cfg, m.train.size(), cfg.sum_children);
  model_cfg.leaf_hp = hp0;
  m.graph = build(m.train.X, model_cfg);

  InferenceOptions infer;
  infer.use_sharing = cfg.use_sharing;
  infer.component_cap = cfg.component_cap;
  m.hp = hp0;
  if (cfg.optimizer.iterations > 0) {
    if (cfg.surrogate) {
      BuildConfig s_cfg = structure_config(cfg, m.train.size(), 1);
      s_cfg.leaf_hp = hp0;
      DsmgpGraph surrogate = build(m.train.X, s_cfg);
      m.opt = optimize(surrogate, m.train.X, m.train.y, OptimizeMode::global, cfg.optimizer, infer);
    } else {
      m.opt = optimize(m.graph, m.train.X, m.train.y, OptimizeMode::global, cfg.optimizer, infer);
    }
    m.hp = m.opt.best_shared;
  }
  for (int id : m.graph.leaves()) m.graph.nodes[static_cast<std::size_t>(id)].hp = m.hp;
  if (cfg.mode == "finetune") {
    optimize(m.graph, m.train.X, m.train.y, OptimizeMode::finetune, cfg.optimizer, infer);
  }
  posterior_update(m.graph, m.train.X, m.train.y, infer);
  return m;
}

inline void save_model(const TrainedModel& m, const ExperimentConfig& cfg,
                       const std::string& path) {
  nlohmann::json doc;
  doc["format"] = "dsmgp-model";
  doc["version"] = 1;
  doc["library_version"] = library_version;
  doc["config"] = detail::config_to_json(cfg);
  doc["input_columns"] = m.input_columns;
  doc["standardizer"] = standardizer_to_json(m.stdz);
  doc["graph"] = graph_to_json(m.graph);
  detail::write_atomic(path, doc.dump(2) + "\n");
}

struct SweepCell {
  int sum_children = 0;
  int observations_per_expert = 0;
  Scores scores;
  bool failed = false;
};

/// (K_S, M) grid of dsmgp runs; cells run in a worker pool of `workers`.
inline std::vector<SweepCell> run_sweep(const ExperimentConfig& base,
                                        const std::vector<int>& sum_children_grid,
                                        const std::vector<int>& per_expert_grid,
                                        int workers = 1) {
  std::vector<ExperimentConfig> cells;
  for (int ks : sum_children_grid) {
    for (int m : per_expert_grid) {
      ExperimentConfig c = base;
      c.method = "dsmgp";
      c.sum_children = ks;
      c.observations_per_expert = m;
      c.output_dir = (std::filesystem::path(base.output_dir) /
                      ("Ks" + std::to_string(ks) + "-M" + std::to_string(m)))
                         .string();
      cells.push_back(std::move(c));
    }
  }
  std::vector<SweepCell> out(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const ExperimentResult r = run(cells[i]);
      out[i] = {cells[i].sum_children, cells[i].observations_per_expert, r.scores, r.failed};
    }
  };
  std::vector<std::future<void>> pool;
  for (int w = 1; w < workers; ++w) pool.push_back(std::async(std::launch::async, worker));
  worker();
  for (auto& f : pool) f.get();
  return out;
}

struct CholBenchRow {
  int partitions = 0;
  double naive_seconds = 0.0;
  double shared_seconds = 0.0;
};

/// Factorization timing on 1-D synthetic data: each partition count p is a
/// depth-1 structure holding p partition hypotheses (K_S = p sum children,
/// each product splitting the data once), fitted naively (every leaf a
/// direct factorization) and through the sharing plan; both paths produce
/// identical posteriors. The fastest of `repeats` runs is reported for each
/// path, after one warm-up.
inline std::vector<CholBenchRow> chol_benchmark(int n, const std::vector<int>& partitions,
                                                int repeats, std::uint64_t seed) {
  if (n < 10 || repeats < 1) throw UsageError("chol_benchmark: bad arguments");
  Dataset data = synth_sine(n, seed);
  std::vector<CholBenchRow> rows;
  for (int p : partitions) {
    BuildConfig bc;
    bc.sum_children = std::max(1, p);
    bc.product_children = 2;
    bc.repetitions = 1;
    bc.min_observations = 2;
    bc.seed = seed;
    bc.leaf_hp = Hyperparameters::isotropic(1, 0.2, 1.0, 0.05);
    DsmgpGraph g = build(data.X, bc);

    using clock = std::chrono::steady_clock;
    CholBenchRow row;
    row.partitions = p;
    row.naive_seconds = std::numeric_limits<double>::infinity();
    row.shared_seconds = std::numeric_limits<double>::infinity();
    for (int rep = -1; rep < repeats; ++rep) {
      const auto t0 = clock::now();
      fit_leaves(g, data.X, data.y, {false, 0});
      const double naive = std::chrono::duration<double>(clock::now() - t0).count();
      const auto t1 = clock::now();
      fit_leaves(g, data.X, data.y, {true, 0});
      const double shared = std::chrono::duration<double>(clock::now() - t1).count();
      if (rep >= 0) {
        row.naive_seconds = std::min(row.naive_seconds, naive);
        row.shared_seconds = std::min(row.shared_seconds, shared);
      }
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace dsmgp
