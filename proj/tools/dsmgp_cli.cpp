// Command-line harness: train/predict/benchmark/sweep/chol-bench over the
// dsmgp library. Configuration comes from flags or a flat key=value file
// (--config).

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dsmgp/dsmgp.hpp"

namespace {

void add_experiment_options(CLI::App* cmd, dsmgp::ExperimentConfig& cfg) {
  cmd->add_option("--dataset", cfg.dataset,
                  "dataset CSV (header row, target last) or synth:{sine,hetero,linear}")
      ->required();
  cmd->add_option("--method", cfg.method, "dsmgp | gp | nle | gpoe | rbcm");
  cmd->add_option("--sum-children", cfg.sum_children, "children per sum node (K_S)");
  cmd->add_option("--per-expert", cfg.observations_per_expert,
                  "target observations per expert (M)");
  cmd->add_option("--product-children", cfg.product_children,
                  "children per product node (0 = derive from M)");
  cmd->add_option("--repetitions", cfg.repetitions, "sum/product layers (R)");
  cmd->add_option("--min-observations", cfg.min_observations,
                  "leaf threshold (0 = use per-expert M)");
  cmd->add_option("--seed", cfg.seed, "RNG seed");
  cmd->add_option("--iterations", cfg.optimizer.iterations, "optimizer iterations");
  cmd->add_option("--step", cfg.optimizer.step, "RMSprop step size");
  cmd->add_option("--decay", cfg.optimizer.decay, "RMSprop decay");
  cmd->add_option("--epsilon", cfg.optimizer.epsilon, "RMSprop epsilon");
  cmd->add_option("--mode", cfg.mode, "global | finetune");
  cmd->add_flag("!--no-surrogate", cfg.surrogate,
                "optimize on the full graph instead of the K_S=1 surrogate");
  cmd->add_flag("--sharing", cfg.use_sharing, "reuse Cholesky factors across nested leaves");
  cmd->add_option("--nlpd", cfg.nlpd, "mixture | moment predictive density");
  cmd->add_option("--component-cap", cfg.component_cap, "mixture enumeration cap");
  cmd->add_option("--train-fraction", cfg.train_fraction, "train split fraction");
  cmd->add_option("--target-column", cfg.target_column, "0-based target column (-1 = last)");
  cmd->add_option("--beta-rule", cfg.beta_rule, "gpoe/rbcm beta rule: uniform | entropy");
  cmd->add_option("--output-dir", cfg.output_dir, "output directory");
  cmd->add_option("--synth-n", cfg.synth_n, "rows for synth: datasets");
  cmd->set_config("--config", "", "flat key=value configuration file");
}

int cmd_train(const dsmgp::ExperimentConfig& cfg) {
  using namespace dsmgp;
  const TrainedModel m = train_dsmgp(cfg);
  const std::filesystem::path dir(cfg.output_dir);
  save_model(m, cfg, (dir / "model.json").string());

  std::ostringstream trace;
  trace.precision(12);
  trace << "iteration,log_marginal,seconds\n";
  for (const TracePoint& t : m.opt.trace) {
    trace << t.iteration << "," << t.log_marginal << "," << t.seconds << "\n";
  }
  detail::write_atomic((dir / "trace.csv").string(), trace.str());

  // Per-leaf summary; with fine-tuned noise this is the plot-ready view of
  // heteroscedasticity across regions.
  std::ostringstream leaves;
  leaves.precision(10);
  leaves << "leaf,lower,upper,count,log_noise_var,noise_var\n";
  for (int id : m.graph.leaves()) {
    const auto& nd = m.graph.nodes[static_cast<std::size_t>(id)];
    const auto& r = m.graph.scope[static_cast<std::size_t>(id)];
    leaves << id << "," << r.lower(0) << "," << r.upper(0) << ","
           << m.graph.data_idx[static_cast<std::size_t>(id)].size() << ","
           << nd.hp.log_noise_var << "," << nd.hp.noise_var() << "\n";
  }
  detail::write_atomic((dir / "leaves.csv").string(), leaves.str());

  std::cout << "trained: " << m.graph.leaves().size() << " leaves, "
            << count_induced_trees(m.graph).str() << " induced trees, log Z best "
            << m.opt.best_log_marginal << "\n"
            << "model written to " << (dir / "model.json").string() << "\n";
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& query_path,
                const std::string& out_path) {
  using namespace dsmgp;
  std::ifstream in(model_path);
  if (!in) throw UsageError("predict: cannot open " + model_path);
  nlohmann::json doc;
  in >> doc;
  if (doc.value("format", "") != "dsmgp-model") throw UsageError("predict: not a model file");
  ExperimentConfig cfg;
  const auto& jc = doc.at("config");
  cfg.dataset = jc.at("dataset").get<std::string>();
  cfg.seed = jc.at("seed").get<std::uint64_t>();
  cfg.train_fraction = jc.at("train_fraction").get<double>();
  cfg.target_column = jc.at("target_column").get<int>();
  cfg.synth_n = jc.at("synth_n").get<int>();
  const Standardizer stdz = standardizer_from_json(doc.at("standardizer"));
  DsmgpGraph graph = graph_from_json(doc.at("graph"));

  Dataset all = load_dataset(cfg);
  auto [train, test] = split(all, cfg.train_fraction, cfg.seed);
  standardize(train, stdz);
  fit_leaves(graph, train.X, train.y);

  // Queries: covariate columns only, or covariates plus a trailing target
  // column that enables per-row log densities.
  const int input_columns = doc.at("input_columns").get<int>();
  const Eigen::MatrixXd raw = load_csv_matrix(query_path);
  const bool has_target = static_cast<int>(raw.cols()) == input_columns + 1;
  if (!has_target && static_cast<int>(raw.cols()) != input_columns) {
    throw UsageError("predict: query CSV must have " + std::to_string(input_columns) +
                     " covariate columns (optionally plus a target)");
  }
  Dataset query;
  query.X = raw.leftCols(input_columns);
  query.y = has_target ? Eigen::VectorXd(raw.col(input_columns))
                       : Eigen::VectorXd(Eigen::VectorXd::Zero(raw.rows()));
  Dataset qstd = query;
  standardize(qstd, stdz);

  std::ostringstream out;
  out.precision(10);
  for (int c = 0; c < input_columns; ++c) out << "x" << (c + 1) << ",";
  out << "mean,variance,logdensity\n";
  for (Eigen::Index i = 0; i < qstd.size(); ++i) {
    const Eigen::VectorXd x = qstd.X.row(i).transpose();
    const PredictiveMixture m = predict_moments(graph, x, 0);
    // Back to original output units.
    const double mean = m.mm_mean * stdz.y_std + stdz.y_mean;
    const double var = m.mm_var * stdz.y_std * stdz.y_std;
    for (int c = 0; c < input_columns; ++c) out << query.X(i, c) << ",";
    out << mean << "," << var << ",";
    if (has_target) {
      const double ld = predictive_logdensity(graph, x, qstd.y(i)) - std::log(stdz.y_std);
      out << ld;
    } else {
      out << "nan";
    }
    out << "\n";
  }
  detail::write_atomic(out_path, out.str());
  std::cout << "predictions written to " << out_path << "\n";
  return 0;
}

std::vector<int> parse_grid(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep structured mixtures of Gaussian process experts"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dsmgp::library_version);

  dsmgp::ExperimentConfig train_cfg;
  CLI::App* train = app.add_subcommand("train", "fit a dsmgp model and save it as JSON");
  add_experiment_options(train, train_cfg);

  std::string model_path, query_path, pred_out = "predictions.csv";
  CLI::App* predict = app.add_subcommand("predict", "batch predictions from a saved model");
  predict->add_option("--model", model_path, "model.json from train")->required();
  predict->add_option("--queries", query_path, "query CSV (covariates, optional target)")
      ->required();
  predict->add_option("--output", pred_out, "output CSV path");

  dsmgp::ExperimentConfig bench_cfg;
  CLI::App* bench = app.add_subcommand("benchmark", "end-to-end run with metrics");
  add_experiment_options(bench, bench_cfg);

  dsmgp::ExperimentConfig sweep_cfg;
  std::string ks_grid = "1,2,4,8", m_grid = "50,100,200";
  int workers = 1;
  CLI::App* sweep = app.add_subcommand("sweep", "grid of (K_S, M) dsmgp runs");
  add_experiment_options(sweep, sweep_cfg);
  sweep->add_option("--sum-children-grid", ks_grid, "comma-separated K_S grid");
  sweep->add_option("--per-expert-grid", m_grid, "comma-separated M grid");
  sweep->add_option("--workers", workers, "parallel runs");

  int bench_n = 1000, bench_repeats = 5;
  std::uint64_t bench_seed = 1;
  std::string bench_partitions = "4,9,16,25,36,49,64";
  std::string bench_out = "chol_bench.csv";
  CLI::App* chol = app.add_subcommand("chol-bench", "naive vs shared factorization timing");
  chol->add_option("--n", bench_n, "synthetic observations");
  chol->add_option("--partitions", bench_partitions, "comma-separated partition counts");
  chol->add_option("--repeats", bench_repeats, "timed repetitions per setting");
  chol->add_option("--seed", bench_seed, "RNG seed");
  chol->add_option("--output", bench_out, "output CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_cfg);
    if (predict->parsed()) return cmd_predict(model_path, query_path, pred_out);
    if (bench->parsed()) {
      const dsmgp::ExperimentResult r = dsmgp::run(bench_cfg);
      if (r.failed) {
        std::cerr << "failed at stage " << r.failed_stage << ": "
                  << r.record.at("error").at("message").get<std::string>() << "\n";
        return 1;
      }
      std::cout << r.record.dump(2) << "\n";
      return 0;
    }
    if (sweep->parsed()) {
      const auto cells =
          dsmgp::run_sweep(sweep_cfg, parse_grid(ks_grid), parse_grid(m_grid), workers);
      std::ostringstream csv;
      csv << "sum_children,per_expert,rmse,mae,nlpd,failed\n";
      for (const auto& c : cells) {
        csv << c.sum_children << "," << c.observations_per_expert << "," << c.scores.rmse << ","
            << c.scores.mae << "," << c.scores.nlpd << "," << (c.failed ? 1 : 0) << "\n";
      }
      const std::string path =
          (std::filesystem::path(sweep_cfg.output_dir) / "sweep.csv").string();
      dsmgp::detail::write_atomic(path, csv.str());
      std::cout << csv.str() << "written to " << path << "\n";
      return 0;
    }
    if (chol->parsed()) {
      const auto rows =
          dsmgp::chol_benchmark(bench_n, parse_grid(bench_partitions), bench_repeats, bench_seed);
      std::ostringstream csv;
      csv << "partitions,naive_seconds,shared_seconds\n";
      for (const auto& r : rows) {
        csv << r.partitions << "," << r.naive_seconds << "," << r.shared_seconds << "\n";
      }
      dsmgp::detail::write_atomic(bench_out, csv.str());
      std::cout << csv.str() << "written to " << bench_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
