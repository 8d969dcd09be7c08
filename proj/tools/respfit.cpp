// respfit: simulate | stats | estimate | sensitivity | report
//
// Exit codes: 0 success, 1 usage, otherwise the error category
// (2 validation, 3 numerical, 4 unsupported, 5 I/O, 6 estimation).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>

#include "respfit/config.hpp"
#include "respfit/error.hpp"
#include "respfit/pipelines.hpp"
#include "respfit/sensitivity.hpp"

namespace fs = std::filesystem;
using namespace respfit;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<unsigned> threads;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  bool resume = false;
};

unsigned parse_threads(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const long v = std::stol(text, &used);
    if (used == text.size() && v >= 1 && v <= 4096) return static_cast<unsigned>(v);
  } catch (const std::exception&) {
  }
  throw ValidationError("cli", what + " must be a positive integer, got '" + text + "'");
}

ExperimentConfig resolve(const Options& opt) {
  ExperimentConfig c = load_config(opt.config);
  if (opt.seed) reseed(c, *opt.seed);
  if (opt.threads) {
    c.threads = *opt.threads;
  } else if (const char* env = std::getenv("RESPFIT_THREADS"); env && *env) {
    c.threads = parse_threads(env, "RESPFIT_THREADS");
  }
  if (!opt.out.empty()) {
    c.output = opt.out;
  } else if (const char* env = std::getenv("RESPFIT_OUT"); env && *env) {
    c.output = env;
  }
  c.run.threads = c.threads;
  c.run.solver.threads = c.threads;
  c.sensitivity.pathwise.threads = c.threads;
  validate(c);
  return c;
}

ArtifactStore prepare_store(const ExperimentConfig& c, const Options& opt) {
  std::error_code ec;
  fs::create_directories(c.output, ec);
  if (ec) throw IoError("cli", "cannot create output directory '" + c.output + "': " + ec.message());
  return {c.output, opt.resume};
}

void finish(const std::string& command, const ExperimentConfig& c, std::vector<std::string> artifacts) {
  const std::string path = c.output + "/manifest-" + command + ".json";
  artifacts.push_back(path);
  write_manifest(path, {command, c, artifacts});
  for (const auto& a : artifacts) std::cout << "  wrote " << a << '\n';
}

void print_plan(const std::string& command, const ExperimentConfig& c) {
  std::cout << "plan: " << command << " (pipeline " << c.pipeline << ", " << c.threads
            << " thread(s), output " << c.output << ")\n";
  const auto& r = c.run;
  std::cout << "  data: " << r.data.samples << " samples of " << r.model << ", h = " << r.data.h
            << ", scheme " << scheme_name(r.data.scheme) << ", seed " << r.data.seed << '\n';
  if (command == "estimate" || command == "sensitivity") {
    std::cout << "  training: " << r.nodes_per_axis << "^" << r.box.size() << " nodes x "
              << r.training.samples << " samples, seed " << r.training.seed
              << (r.common_random_numbers ? " (common random numbers)" : "") << '\n';
  }
  if (command == "estimate") {
    std::cout << "  surrogate order " << r.order << ", " << r.lags.count << " lags, "
              << r.solver.starts << " Gauss-Newton starts (seed " << r.solver.seed << ")\n";
  }
  std::cout << "resolved config:\n" << to_json(c).dump(2) << '\n';
}

ParameterVector truth_of(const ExperimentConfig& c) {
  return make_model(c.run.model)->make_parameters(c.run.truth);
}

std::vector<Observable> observables(const ExperimentConfig& c, const std::vector<std::string>& ids) {
  const auto model = make_model(c.run.model);
  const std::vector<double> ones(model->state_dim(), 1.0);
  std::vector<Observable> out;
  for (const auto& id : ids) {
    const std::size_t i = std::stoul(id.substr(1)) - 1;
    out.push_back(id[0] == 'x' ? coordinate(i) : conjugate_observable(model, truth_of(c), ones, i));
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const ExperimentConfig& c, const Options& opt) {
  if (opt.dry_run) {
    print_plan("simulate", c);
    return 0;
  }
  const auto store = prepare_store(c, opt);
  const auto traj = pipeline_data(c.run, store);
  std::cout << "simulated " << traj.samples() << " samples (" << traj.dim << "-D, h = " << traj.h
            << ", burn-in " << traj.burn_in << ")\n";
  finish("simulate", c, {c.output + "/data.traj", c.output + "/data.traj.json"});
  return 0;
}

int cmd_stats(const ExperimentConfig& c, const Options& opt) {
  const std::string path = c.stats.trajectory.empty() ? c.output + "/data.traj" : c.stats.trajectory;
  if (opt.dry_run) {
    print_plan("stats", c);
    std::cout << "  statistics from " << path << '\n';
    return 0;
  }
  prepare_store(c, opt);
  const auto traj = read_trajectory(path);
  const auto a = observables(c, c.stats.a);
  const auto b = observables(c, c.stats.b);
  const auto grid = LagGrid::uniform(c.run.lags.count, c.run.lags.spacing, c.run.lags.offset, traj.h);
  const auto es = two_point_correlation(traj, a, b, grid, c.stats.pairing);
  const std::string out = c.output + "/statistics.csv";
  if (c.stats.pairing == Pairing::kForward) {
    const auto slope = derivative_at_zero_plus(traj, a, b, c.run.stencil);
    write_statistics_csv(out, es, &slope);
  } else {
    write_statistics_csv(out, es);
  }
  std::cout << "statistics over " << grid.size() << " lags from " << traj.samples() << " samples\n";
  finish("stats", c, {out, out + ".json"});
  return 0;
}

int cmd_estimate(const ExperimentConfig& c, const Options& opt) {
  if (opt.dry_run) {
    print_plan("estimate", c);
    return 0;
  }
  const auto store = prepare_store(c, opt);
  std::ostringstream summary;
  summary << std::setprecision(6);
  const std::vector<std::string> common = {
      c.output + "/data.traj", c.output + "/training.json", c.output + "/data_statistics.csv",
      c.output + "/surrogate.json", c.output + "/estimation.json", c.output + "/starts.csv",
      c.output + "/estimates.csv", c.output + "/estimate.json"};
  if (c.pipeline == "langevin") {
    const auto r = langevin_response_pipeline(c.run, store);
    summary << "method                kBT        gamma      eps        a          x0\n";
    summary << "essential statistics  " << std::setw(10) << r.reduction.kbt << ' ' << std::setw(10)
            << r.reduction.gamma << ' ' << std::setw(10) << r.eps << ' ' << std::setw(10) << r.a << ' '
            << std::setw(10) << r.x0 << '\n';
    if (r.conventional) {
      summary << "conventional          " << std::setw(10) << r.reduction.kbt << ' ' << std::setw(10)
              << r.reduction.gamma << ' ' << std::setw(10) << r.conventional->eps << ' '
              << std::setw(10) << r.conventional->a << ' ' << std::setw(10) << r.conventional->x0 << '\n';
      if (r.conventional->roots.size() > 1) {
        summary << "(conventional: " << r.conventional->roots.size() << " roots in eps, largest taken:";
        for (double root : r.conventional->roots) summary << ' ' << root;
        summary << ")\n";
      }
    } else {
      summary << "conventional          no solution: " << r.conventional_error << '\n';
    }
    summary << "(kBT std err " << r.reduction.kbt_stderr << ", gamma std err " << r.reduction.gamma_stderr
            << "; surrogate a " << r.a_surrogate << "; " << r.estimation.inliers << " inliers of "
            << r.estimation.converged << " converged starts)\n";
  } else {
    const auto r = triplewell_response_pipeline(c.run, store);
    summary << "a          gamma      kBT        d\n";
    summary << std::setw(10) << r.a << ' ' << std::setw(10) << r.gamma << ' ' << std::setw(10)
            << r.reduction.kbt << ' ' << std::setw(10) << r.reduction.d << '\n';
    summary << "(kBT std err " << r.reduction.kbt_stderr << ", d std err " << r.reduction.d_stderr << "; "
            << r.estimation.inliers << " inliers of " << r.estimation.converged << " converged starts)\n";
  }
  std::cout << summary.str();
  const std::string path = c.output + "/summary.txt";
  std::ofstream(path) << summary.str();
  auto artifacts = common;
  artifacts.push_back(path);
  finish("estimate", c, artifacts);
  return 0;
}

int cmd_sensitivity(const ExperimentConfig& c, const Options& opt) {
  if (c.sensitivity.parameters.empty()) {
    throw ValidationError("cli", "field 'sensitivity.parameters' must list at least one parameter");
  }
  const auto truth = truth_of(c);
  const auto model = make_model(c.run.model);
  for (const auto& p : c.sensitivity.parameters) {
    std::vector<double> sig(model->state_dim() * model->noise_dim());
    const auto x0 = c.sensitivity.pathwise.initial_state.value_or(model->default_initial_state(truth));
    model->diffusion_parameter_derivative(x0, truth, truth.index_of(p), sig);
    for (double v : sig) {
      if (v != 0.0) {
        throw UnsupportedCapability("cli", "parameter '" + p +
                                               "' enters the noise; pathwise sensitivity is not available");
      }
    }
  }
  if (opt.dry_run) {
    print_plan("sensitivity", c);
    return 0;
  }
  const auto store = prepare_store(c, opt);
  std::vector<std::string> artifacts;

  const auto data = pipeline_data(c.run, store);
  const TrainingSet training = [&] {
    if (c.pipeline == "langevin") {
      const auto red = langevin_reduce(data, c.run.stencil);
      return langevin_training(c.run, red.kbt, red.gamma, store);
    }
    const auto red = triplewell_reduce(data, c.run.stencil);
    return triplewell_training(c.run, red.d, red.kbt, store);
  }();
  const auto grid = LagGrid::uniform(c.run.lags.count, c.run.lags.spacing, c.run.lags.offset, c.run.training.h);
  const auto spread = apriori_spread(training.design, training.values, training.stderrs, grid.lags());
  write_spread_csv(c.output + "/spread.csv", spread);
  artifacts.push_back(c.output + "/spread.csv");
  for (std::size_t axis = 0; axis < spread.names.size(); ++axis) {
    std::cout << "a priori: " << spread.names[axis] << " noise " << spread.noise[axis]
              << (spread.non_identifiable[axis] ? "  NOT identifiable" : "") << '\n';
  }

  std::vector<SensitivityReport> reports;
  for (const auto& p : c.sensitivity.parameters) {
    reports.push_back(pathwise_derivative(*model, truth, truth.index_of(p), c.sensitivity.pathwise));
  }
  for (std::size_t comp = 0; comp < model->state_dim(); ++comp) {
    const std::string path = c.output + "/sensitivity_x" + std::to_string(comp + 1) + ".csv";
    write_sensitivity_csv(path, reports, comp);
    artifacts.push_back(path);
  }
  artifacts.push_back(c.output + "/data.traj");
  artifacts.push_back(c.output + "/training.json");
  finish("sensitivity", c, artifacts);
  return 0;
}

// Diagnostics: third-moment derivatives of the conventional method at the
// truth (Langevin) and normalized recovery curves at the last estimate.
int cmd_report(const ExperimentConfig& c, const Options& opt) {
  const std::string estimate_path = c.output + "/estimate.json";
  if (opt.dry_run) {
    print_plan("report", c);
    std::cout << "  recovery curves from " << estimate_path << " if present\n";
    return 0;
  }
  prepare_store(c, opt);
  std::vector<std::string> artifacts;
  const auto model = make_model(c.run.model);
  const auto truth = truth_of(c);
  std::cout << std::setprecision(6);

  if (c.pipeline == "langevin") {
    const auto d = conventional_derivatives(truth.at("kBT"), truth.at("eps"), truth.at("a"), truth.at("x0"));
    const std::string path = c.output + "/conventional_derivatives.csv";
    std::ofstream os(path);
    os << std::setprecision(17) << "quantity,value\n"
       << "dE[x^3]/dkBT," << d.third_by_kbt << "\ndE[x^3]/deps," << d.third_by_eps << '\n';
    artifacts.push_back(path);
    std::cout << "dE[x^3]/dkBT = " << d.third_by_kbt << ", dE[x^3]/deps = " << d.third_by_eps << '\n';
  }

  if (fs::exists(estimate_path)) {
    std::ifstream is(estimate_path);
    const auto j = nlohmann::json::parse(is);
    ParameterVector est = truth;
    for (const auto& name : truth.names()) est.set(name, j.at(name).get<double>());
    std::vector<double> lags = {0.0};
    const auto positive = LagGrid::uniform(c.run.lags.count, c.run.lags.spacing, c.run.lags.offset, c.run.data.h);
    for (double t : positive.lags()) {
      if (t > 0.0) lags.push_back(t);
    }
    const LagGrid grid(lags, c.run.data.h);
    const std::vector<double> ones(model->state_dim(), 1.0);
    const std::size_t coord = c.pipeline == "langevin" ? 1 : 0;
    const Observable a = coordinate(coord);
    struct Curve {
      const char* name;
      Observable b_ref, b_est;
    };
    const std::vector<Curve> curves = {
        {"two_point", coordinate(coord), coordinate(coord)},
        {"response", conjugate_observable(model, truth, ones, coord), conjugate_observable(model, est, ones, coord)}};
    for (const auto& curve : curves) {
      const auto rc = compare_normalized(*model, truth, est, c.run.data, a, curve.b_ref, curve.b_est, grid);
      const std::string path = c.output + "/recovery_" + curve.name + ".csv";
      std::ofstream os(path);
      os << std::setprecision(17) << "lag,truth,estimate\n";
      for (std::size_t i = 0; i < rc.lags.size(); ++i) {
        os << rc.lags[i] << ',' << rc.reference[i] << ',' << rc.estimate[i] << '\n';
      }
      artifacts.push_back(path);
      std::cout << "recovery (" << curve.name << "): sup-norm difference of normalized curves "
                << rc.sup_difference << '\n';
    }
  } else {
    std::cout << "no " << estimate_path << "; run 'estimate' first for recovery curves\n";
  }
  finish("report", c, artifacts);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter estimation for ergodic diffusions from essential response statistics"};
  app.require_subcommand(1);
  Options opt;
  std::string threads_text;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Experiment config (JSON with comments) or run manifest")
        ->required();
    sub->add_option("--out", opt.out, "Output directory (overrides config and RESPFIT_OUT)");
    sub->add_option("--threads", threads_text, "Worker threads (overrides config and RESPFIT_THREADS)");
    sub->add_option("--seed", opt.seed, "Global seed; unpinned component seeds derive from it");
    sub->add_flag("--dry-run", opt.dry_run, "Validate and print the plan without computing");
    sub->add_flag("--resume", opt.resume, "Reuse cached trajectories and training statistics");
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "Simulate the data trajectory"},
      {"stats", "Two-point statistics of a stored trajectory"},
      {"estimate", "Run the full estimation pipeline"},
      {"sensitivity", "A priori spread and pathwise sensitivities"},
      {"report", "Diagnostics and recovery curves"}};
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (!threads_text.empty()) opt.threads = parse_threads(threads_text, "--threads");
    const std::string command = app.get_subcommands().front()->get_name();
    const ExperimentConfig c = resolve(opt);
    if (command == "simulate") return cmd_simulate(c, opt);
    if (command == "stats") return cmd_stats(c, opt);
    if (command == "estimate") return cmd_estimate(c, opt);
    if (command == "sensitivity") return cmd_sensitivity(c, opt);
    return cmd_report(c, opt);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
