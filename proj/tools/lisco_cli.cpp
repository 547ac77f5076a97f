// Command-line front end: instance generation, oracle caching, training,
// single-point solves and the full benchmark.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lisco/bench.hpp"

namespace fs = std::filesystem;
using namespace lisco;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string instance;
  std::string weights;
  bool desk = false;
  bool paper = false;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--seed", c.seed, "seed (u64)");
  cmd->add_option("--out", c.out, out_help);
  cmd->add_option("--instance", c.instance, "instance JSON file");
  cmd->add_option("--weights", c.weights, "network weights JSON file");
  auto* d = cmd->add_flag("--desk", c.desk, "desk-scale preset (default)");
  auto* p = cmd->add_flag("--paper", c.paper, "paper-scale preset");
  d->excludes(p);
}

ExperimentConfig base_config(const Common& c) {
  ExperimentConfig cfg = c.paper ? ExperimentConfig::paper() : ExperimentConfig::desk();
  if (!c.config.empty()) cfg = experiment_config_from_json(detail::read_json_file(c.config), cfg);
  return cfg;
}

// A config file may hold an experiment config or just the section itself.
nlohmann::json config_section(const Common& c, const char* key) {
  if (c.config.empty()) return nlohmann::json::object();
  auto j = detail::read_json_file(c.config);
  return j.contains(key) ? j[key] : j;
}

ProblemInstance<double> require_instance(const Common& c) {
  if (c.instance.empty()) throw ValidationError("--instance is required");
  return load_instance(c.instance);
}

Vector<double> parse_vector(const std::string& text) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      vals.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ValidationError("cannot parse number '" + tok + "'");
    }
  }
  return Eigen::Map<Vector<double>>(vals.data(), Index(vals.size()));
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    detail::write_text_file(out, text);
  }
}

TrainObserver stderr_progress(const char* what) {
  return [what](const TrainHistoryRow& r) {
    if (r.step % 1000 == 0)
      std::cerr << what << " step " << r.step << " loss " << r.loss << " lr " << r.lr << '\n';
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LISCO: learned iterative solver for parametric constrained optimization"};
  app.require_subcommand(1);

  // gen
  Common gen_c;
  std::string gen_kind = "convex_qp";
  Index gen_ny = 20, gen_nh = 10, gen_ng = 10;
  auto* gen = app.add_subcommand("gen", "generate a problem instance");
  add_common(gen, gen_c, "instance output file (stdout if omitted)");
  gen->add_option("--kind", gen_kind, "convex_qp | nonconvex_qp | rosenbrock");
  gen->add_option("--n-y", gen_ny, "decision variables");
  gen->add_option("--n-h", gen_nh, "equality constraints (parameters)");
  gen->add_option("--n-g", gen_ng, "inequality constraints");

  // oracle
  Common or_c;
  Index or_n = 200;
  std::string or_x;
  auto* orc = app.add_subcommand("oracle", "solve sampled x with the Newton oracle and cache");
  add_common(orc, or_c, "JSON-lines cache file (stdout if omitted)");
  orc->add_option("--n", or_n, "number of sampled parameter vectors");
  orc->add_option("--x", or_x, "single comma-separated parameter vector");

  // train-predictor
  Common tp_c;
  auto* tp = app.add_subcommand("train-predictor", "train the predictor network");
  add_common(tp, tp_c, "output directory");

  // train-solver
  Common ts_c;
  auto* ts = app.add_subcommand("train-solver", "train the solver network");
  add_common(ts, ts_c, "output directory");
  std::string ts_predictor;
  ts->add_option("--predictor", ts_predictor, "predictor weights (same as --weights)");

  // solve
  Common sv_c;
  std::string sv_x, sv_x_file, sv_predictor;
  bool sv_trace = false;
  auto* sv = app.add_subcommand("solve", "solve one parameter vector with trained networks");
  add_common(sv, sv_c, "report output file (stdout if omitted)");
  sv->add_option("--x", sv_x, "comma-separated parameter vector");
  sv->add_option("--x-file", sv_x_file, "JSON file holding an array for x");
  sv->add_option("--predictor", sv_predictor, "predictor weights");
  sv->add_flag("--trace", sv_trace, "record the per-iteration trace");

  // bench
  Common bn_c;
  auto* bn = app.add_subcommand("bench", "run the full experiment");
  add_common(bn, bn_c, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg = base_config(gen_c);
      auto spec = cfg.instance;
      if (!gen_c.config.empty() && detail::read_json_file(gen_c.config).contains("instance")) {
        // config wins unless flags are given explicitly
      } else {
        spec.kind = parse_problem_kind(gen_kind);
        spec.n_y = gen_ny;
        spec.n_h = gen_nh;
        spec.n_g = gen_ng;
      }
      if (gen->count("--kind")) spec.kind = parse_problem_kind(gen_kind);
      if (gen->count("--n-y")) spec.n_y = gen_ny;
      if (gen->count("--n-h")) spec.n_h = gen_nh;
      if (gen->count("--n-g")) spec.n_g = gen_ng;
      if (gen_c.seed) spec.seed = *gen_c.seed;
      const auto inst = gen_instance<double>(spec.kind, spec.n_y, spec.n_h, spec.n_g, spec.seed);
      emit(gen_c.out, instance_to_json(inst).dump() + "\n");
    } else if (orc->parsed()) {
      const auto inst = require_instance(or_c);
      NewtonOptions nopt = newton_options_from_json(config_section(or_c, "newton"));
      const std::uint64_t seed = or_c.seed.value_or(1000);
      Matrix<double> xs;
      if (!or_x.empty()) {
        xs = parse_vector(or_x).transpose();
      } else {
        xs = sample_params(inst, or_n, seed).x;
      }
      require_dims(xs.cols() == inst.n_h, "--x length must equal n_h");
      std::vector<OracleRecord> records;
      for (Index i = 0; i < xs.rows(); ++i) {
        const Vector<double> x = xs.row(i).transpose();
        auto sol = oracle_solve(inst, x, nopt, derive_seed(seed, std::uint64_t(i) + 1));
        records.push_back(make_oracle_record(inst, i, x, sol));
      }
      emit(or_c.out, oracle_cache_to_jsonl(inst, records));
    } else if (tp->parsed()) {
      const auto inst = require_instance(tp_c);
      auto cfg = predictor_config_from_json(config_section(tp_c, "predictor"),
                                            tp_c.paper ? PredictorTrainConfig::paper()
                                                       : PredictorTrainConfig{});
      if (tp_c.seed) cfg.seed = *tp_c.seed;
      auto res = train_predictor(inst, cfg, stderr_progress("predictor"));
      const fs::path out = tp_c.out.empty() ? fs::path("predictor") : fs::path(tp_c.out);
      fs::create_directories(out);
      save_weights(res.params, (out / "weights.json").string(),
                   {{"instance_hash", hash_hex(instance_hash(inst))},
                    {"config", to_json(cfg)}});
      detail::write_text_file((out / "history.csv").string(), history_to_csv(res.history));
    } else if (ts->parsed()) {
      const auto inst = require_instance(ts_c);
      auto cfg = solver_config_from_json(config_section(ts_c, "solver"),
                                         ts_c.paper ? SolverTrainConfig::paper()
                                                    : SolverTrainConfig{});
      if (ts_c.seed) cfg.seed = *ts_c.seed;
      if (!ts_predictor.empty()) ts_c.weights = ts_predictor;
      std::optional<MlpParams<double>> pred;
      if (!ts_c.weights.empty()) pred = load_weights<double>(ts_c.weights, NetworkRole::Predictor);
      cfg.use_predictor = pred.has_value();
      auto res = train_solver(inst, cfg, pred ? &*pred : nullptr, stderr_progress("solver"));
      const fs::path out = ts_c.out.empty() ? fs::path("solver") : fs::path(ts_c.out);
      fs::create_directories(out);
      save_weights(res.params, (out / "weights.json").string(),
                   {{"instance_hash", hash_hex(instance_hash(inst))},
                    {"config", to_json(cfg)}});
      detail::write_text_file((out / "history.csv").string(), history_to_csv(res.history));
    } else if (sv->parsed()) {
      const auto inst = require_instance(sv_c);
      if (sv_c.weights.empty()) throw ValidationError("--weights (solver) is required");
      const auto solver = load_weights<double>(sv_c.weights, NetworkRole::Solver);
      std::optional<MlpParams<double>> pred;
      if (!sv_predictor.empty()) pred = load_weights<double>(sv_predictor, NetworkRole::Predictor);
      Vector<double> x;
      if (!sv_x.empty()) {
        x = parse_vector(sv_x);
      } else if (!sv_x_file.empty()) {
        x = detail::vector_from_json<double>(detail::read_json_file(sv_x_file), inst.n_h, "x file");
      } else {
        throw ValidationError("one of --x or --x-file is required");
      }
      require_dims(x.size() == inst.n_h, "x length must equal n_h");
      SolveOptions opts = solve_options_from_json(config_section(sv_c, "solve"));
      if (sv_c.seed) opts.seed = *sv_c.seed;
      opts.record_trace = sv_trace;
      opts.use_predictor = pred.has_value();
      auto rep = lisco_solve(inst, x, pred ? &*pred : nullptr, solver, opts);
      emit(sv_c.out, report_to_json(rep).dump() + "\n");
      return rep.converged ? 0 : 3;
    } else if (bn->parsed()) {
      ExperimentConfig cfg = base_config(bn_c);
      if (bn_c.seed) {
        cfg.instance.seed = *bn_c.seed;
        cfg.test_seed = derive_seed(*bn_c.seed, 1);
        cfg.predictor.seed = derive_seed(*bn_c.seed, 2);
        cfg.solver.seed = derive_seed(*bn_c.seed, 3);
      }
      if (!bn_c.instance.empty()) cfg.instance.path = bn_c.instance;
      if (!bn_c.out.empty()) cfg.out_dir = bn_c.out;
      const auto res = run_experiment(cfg, &std::cerr);
      for (const auto& m : res.metrics)
        std::cout << m.method << ": success " << m.success_rate << " median T " << m.t_median
                  << " max eq " << m.max_eq_violation << " max ineq " << m.max_ineq_violation
                  << '\n';
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
