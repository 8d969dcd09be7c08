// Acceptance run: one PASS/FAIL line per criterion, then supplementary
// consistency lines (prefixed INFO) that do not affect the exit status.

#include <sys/wait.h>

#include <array>
#include <boost/math/quadrature/gauss.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "respfit/config.hpp"
#include "respfit/error.hpp"
#include "respfit/pipelines.hpp"
#include "respfit/solver.hpp"
#include "respfit/stats.hpp"
#include "respfit/surrogate.hpp"
#include "support/derived_checks.hpp"

using namespace respfit;
namespace fs = std::filesystem;

namespace {

const std::uint64_t kDataSeed = 20261016;
const std::string kConfigDir = RESPFIT_CONFIG_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Detail {
 public:
  template <typename T>
  Detail& operator()(const std::string& key, const T& value) {
    if (!first_) os_ << ", ";
    os_ << key << "=" << value;
    first_ = false;
    return *this;
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_ = [] {
    std::ostringstream os;
    os << std::setprecision(6);
    return os;
  }();
  bool first_ = true;
};

int failures = 0;

void report(int criterion, const std::function<Outcome()>& body, double budget_seconds) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_time = secs < budget_seconds;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::ostringstream line;
  line << (pass ? "PASS" : "FAIL") << " criterion " << criterion << ": " << o.detail << " [" << std::fixed
       << std::setprecision(1) << secs << " s, budget " << budget_seconds << " s"
       << (in_time ? "" : ", over budget") << "]";
  std::cout << line.str() << std::endl;
}

void info(const std::string& name, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  std::cout << "INFO " << name << ": " << (o.pass ? "consistent" : "inconsistent") << ", " << o.detail
            << std::endl;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "respfit-acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------

Outcome langevin_reduction() {
  LangevinMorseModel model;
  IntegratorConfig cfg;
  cfg.scheme = Scheme::kLangevinSplitting;
  cfg.h = 2e-3;
  cfg.samples = 1000000;
  cfg.seed = kDataSeed;
  const auto traj = simulate(model, model.make_parameters({0.5, 1.0, 0.2, 10.0, 0.0}), cfg);
  const auto r = langevin_reduce(traj);
  return {std::abs(r.kbt - 1.0) < 0.02 && std::abs(r.gamma - 0.5) < 0.05,
          Detail()("kBT", r.kbt)("gamma", r.gamma)("kBT_stderr", r.kbt_stderr)("gamma_stderr", r.gamma_stderr).str()};
}

Trajectory triplewell_data(std::size_t samples) {
  TripleWellModel model;
  IntegratorConfig cfg;
  cfg.scheme = Scheme::kWeakTrapezoidal;
  cfg.h = 1e-3;
  cfg.samples = samples;
  cfg.seed = kDataSeed;
  return simulate(model, model.make_parameters({0.5, 1.0, 1.5, 0.25}), cfg);
}

Outcome triplewell_reduction() {
  const auto r = triplewell_reduce(triplewell_data(400000));
  return {std::abs(r.kbt - 1.5) < 0.08 && std::abs(r.d - 0.5) < 0.05,
          Detail()("kBT", r.kbt)("d", r.d)("kBT_stderr", r.kbt_stderr)("d_stderr", r.d_stderr).str()};
}

Outcome equipartition() {
  auto model = std::make_shared<const TripleWellModel>();
  const auto theta = model->make_parameters({0.5, 1.0, 1.5, 0.25});
  const auto traj = triplewell_data(400000);
  const LagGrid zero({0.0}, traj.h);
  std::vector<Observable> b;
  for (std::size_t j = 0; j < 2; ++j) b.push_back(conjugate_observable(model, theta, {1.0, 1.0}, j));
  const auto k = two_point_correlation(traj, {coordinate(0), coordinate(1)}, b, zero);
  double worst = 0.0;
  Detail d;
  for (Eigen::Index i = 0; i < 2; ++i) {
    for (Eigen::Index j = 0; j < 2; ++j) {
      const double z = std::abs(k.values[0](i, j) - (i == j ? 1.0 : 0.0)) / k.stderrs[0](i, j);
      worst = std::max(worst, z);
      d("k" + std::to_string(i + 1) + std::to_string(j + 1), k.values[0](i, j));
    }
  }
  d("max_stderrs", worst);
  return {worst < 4.0, d.str()};
}

PipelineConfig config_from(const std::string& file) {
  auto c = load_config(kConfigDir + "/" + file);
  validate(c);
  return c.run;
}

Outcome langevin_pipeline(LangevinPipelineResult& out) {
  const auto cfg = config_from("langevin_low_damping.json");
  out = langevin_response_pipeline(cfg, {scratch("langevin").string(), false});
  Detail d;
  d("eps", out.eps)("a", out.a)("a_surrogate", out.a_surrogate)("x0", out.x0)("kBT", out.reduction.kbt)(
      "gamma", out.reduction.gamma)("inliers", out.estimation.inliers)("converged", out.estimation.converged);
  return {std::abs(out.eps - 0.2) < 0.015 && std::abs(out.a - 10.0) < 0.5, d.str()};
}

Outcome triplewell_pipeline(TripleWellPipelineResult& out, const fs::path& dir) {
  const auto cfg = config_from("triplewell.json");
  out = triplewell_response_pipeline(cfg, {dir.string(), false});
  Detail d;
  d("a", out.a)("gamma", out.gamma)("kBT", out.reduction.kbt)("d", out.reduction.d)("inliers", out.estimation.inliers)(
      "converged", out.estimation.converged);
  return {std::abs(out.a - 1.0) < 0.1 && std::abs(out.gamma - 0.25) < 0.08, d.str()};
}

Outcome conventional() {
  const auto d = conventional_derivatives(1.0, 0.2, 10.0, 0.0);
  const double rk = d.third_by_kbt / 9.034 - 1.0;
  const double re = d.third_by_eps / 0.06396 - 1.0;
  return {std::abs(rk) < 0.02 && std::abs(re) < 0.02,
          Detail()("dm3_dkBT", d.third_by_kbt)("dm3_deps", d.third_by_eps)("rel_kBT", rk)("rel_eps", re).str()};
}

Outcome shift_invariance() {
  LangevinMorseModel model;
  IntegratorConfig cfg;
  cfg.scheme = Scheme::kLangevinSplitting;
  cfg.h = 2e-3;
  cfg.burn_in = 0.0;
  cfg.samples = 10001;  // horizon 20
  cfg.seed = kDataSeed;
  const double shift = 0.7, c = -0.4;
  const auto [first, second] =
      simulate_pair_common_noise(model, model.make_parameters({0.5, 1.0, 0.2, 10.0, 0.0}),
                                 model.make_parameters({0.5, 1.0, 0.2, 10.0, shift}), cfg, {0.0, c}, {shift, c});
  double sup_v = 0.0, sup_x = 0.0;
  for (std::size_t k = 0; k < first.samples(); ++k) {
    sup_v = std::max(sup_v, std::abs(first.at(k, 1) - second.at(k, 1)));
    sup_x = std::max(sup_x, std::abs(first.at(k, 0) + shift - second.at(k, 0)));
  }
  const double horizon = (first.samples() - 1) * first.h;
  return {sup_v <= 1e-10 && horizon >= 20.0 - 1e-12,
          Detail()("horizon", horizon)("sup_dv", sup_v)("sup_dx_minus_shift", sup_x).str()};
}

Surrogate fit_1d(const std::function<double(double)>& f, int order) {
  const ParameterBox box({-1.0}, {1.0}, {"t"});
  const auto design = CollocationDesign::make(box, static_cast<std::size_t>(order + 1));
  Eigen::MatrixXd v(static_cast<Eigen::Index>(design.size()), 1);
  for (std::size_t i = 0; i < design.size(); ++i) v(static_cast<Eigen::Index>(i), 0) = f(design.physical_nodes[i][0]);
  return Surrogate::fit(design, order, v);
}

// The minimizer error alternates with the parity of M, so monotone decrease
// is checked against M - 2. The surrogate residual at its own minimizer is
// checked for monotone decrease down to a roundoff floor.
Outcome surrogate_convergence() {
  const auto f = [](double t) { return std::exp(t) - 1.3; };
  const double root = std::log(1.3);
  const double floor = 1e-14;
  std::vector<double> err, res;
  bool decreasing = true, residual_monotone = true;
  for (int m = 1; m <= 14; ++m) {
    const auto s = fit_1d(f, m);
    GaussNewtonConfig cfg;
    cfg.step_tolerance = 1e-14;
    const auto rec = gauss_newton(s, std::vector<double>{0.0}, cfg);
    err.push_back(std::abs(rec.final_theta[0] - root));
    res.push_back(std::abs(s.eval(rec.final_theta).f(0)));
    if (m >= 3) decreasing = decreasing && err.back() <= std::max(err[err.size() - 3], floor);
    if (m > 4) residual_monotone = residual_monotone && res.back() <= std::max(res[res.size() - 2], floor);
  }
  bool small = true;
  for (std::size_t m = 10; m <= 14; ++m) small = small && err[m - 1] < 1e-8;
  return {decreasing && small && residual_monotone,
          Detail()("err_M4", err[3])("err_M6", err[5])("err_M8", err[7])("err_M10", err[9])("err_M14", err[13])(
              "max_residual_M5_14", *std::max_element(res.begin() + 4, res.end()))
              .str()};
}

Outcome legendre_suite() {
  double worst = 0.0;
  for (int m = 0; m <= 10; ++m) {
    for (int n = 0; n <= 10; ++n) {
      const double ip = boost::math::quadrature::gauss<double, 64>::integrate(
          [&](double x) { return legendre_eval(m, x).value * legendre_eval(n, x).value; }, -1.0, 1.0);
      worst = std::max(worst, std::abs(ip - (m == n ? 1.0 : 0.0)));
    }
  }
  const auto bound = oracle::run_check("surrogate.legendre_p5");
  const auto decay = oracle::run_check("surrogate.coefficient_decay");
  return {worst < 1e-12 && bound.passed && decay.passed,
          "orthonormality=" + Detail()("", worst).str().substr(1) + "; " + bound.detail + "; " + decay.detail};
}

Outcome rank_diagnostics() {
  const ParameterBox box({-1.0, -1.0}, {1.0, 1.0}, {"t1", "t2"});
  constexpr int kOrder = 3;
  constexpr Eigen::Index kResiduals = 5;  // > max(N, (M + 1)^(N - 1)) = 4
  const auto terms = static_cast<Eigen::Index>(MultiIndexSet(2, kOrder).size());
  std::mt19937_64 rng(kDataSeed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto random_matrix = [&](Eigen::Index rows) {
    Eigen::MatrixXd c(rows, terms);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = normal(rng);
    return c;
  };
  int independent_sets = 0, full_rank = 0, evaluations = 0;
  for (int set = 0; set < 100; ++set) {
    const auto s = Surrogate::from_coefficients(box, kOrder, random_matrix(kResiduals));
    if (!rank_diagnostic(s).dependent) ++independent_sets;
    for (int k = 0; k < 100; ++k) {
      ++evaluations;
      if (rank_diagnostic(s, std::vector<double>{unit(rng), unit(rng)}).jacobian_full_rank) ++full_rank;
    }
  }
  Eigen::MatrixXd dependent = random_matrix(kResiduals);
  dependent.row(4) = 2.0 * dependent.row(0) - 0.5 * dependent.row(3);
  const auto flagged = rank_diagnostic(Surrogate::from_coefficients(box, kOrder, dependent));
  return {independent_sets == 100 && full_rank == evaluations && flagged.dependent,
          Detail()("independent_sets", independent_sets)("full_rank", full_rank)("evaluations", evaluations)(
              "dependent_rank", flagged.coefficient_rank)("dependent_flagged", flagged.dependent ? "yes" : "no")
              .str()};
}

Outcome oracle_equivalence() {
  std::size_t passed = 0;
  std::string failed;
  const auto checks = oracle::derived_checks();
  for (const auto& c : checks) {
    const auto r = c.run();
    if (r.passed) {
      ++passed;
    } else {
      failed += " " + c.name + " (" + r.detail + ")";
    }
  }
  return {passed == checks.size(),
          std::to_string(passed) + "/" + std::to_string(checks.size()) + " oracle checks" +
              (failed.empty() ? "" : "; failed:" + failed)};
}

// ---------------------------------------------------------------------------
// Supplementary consistency

// Largest |difference| / combined standard error between the data statistic
// and the same statistic re-simulated at the estimate with a fresh seed.
Outcome round_trip(const ModelSpec& model, const ParameterVector& estimate, const PipelineConfig& cfg,
                   const EssentialStatistics& data, const Observable& a, const Observable& b) {
  auto ic = cfg.data.integrator(cfg.data.seed + 1000);
  ic.samples = cfg.training.samples;
  const auto traj = simulate(model, estimate, ic);
  const LagGrid grid = LagGrid::uniform(cfg.lags.count, cfg.lags.spacing, cfg.lags.offset, cfg.data.h);
  const auto again = two_point_correlation(traj, {a}, {b}, grid);
  double worst = 0.0;
  for (std::size_t l = 0; l < grid.size(); ++l) {
    const double se = std::hypot(data.stderrs[l](0, 0), again.stderrs[l](0, 0));
    worst = std::max(worst, std::abs(data.values[l](0, 0) - again.values[l](0, 0)) / se);
  }
  return {worst <= 3.5, Detail()("max_abs_z", worst)("lags", grid.size())("threshold", 3.5).str()};
}

// Sandwich covariance of the fitted parameters with a diagonal residual
// variance: data error, node-averaged training error and the RMS fit residual
// of the surrogate, added in quadrature.
Outcome truth_consistency(const TripleWellPipelineResult& r) {
  const auto& s = r.surrogate;
  const auto value = s.eval(r.estimation.estimate);
  const Eigen::MatrixXd& jac = value.jac;
  const auto nodes = static_cast<double>(s.training_values().rows());
  Eigen::VectorXd var(jac.rows());
  for (Eigen::Index i = 0; i < jac.rows(); ++i) {
    const double data_se = r.data_statistics.stderrs[static_cast<std::size_t>(i)](0, 0);
    const double training_var = s.training_stderrs().col(i).squaredNorm() / nodes;
    const double fit_var = s.fit_residual_norms()(i) * s.fit_residual_norms()(i) / nodes;
    var(i) = data_se * data_se + training_var + fit_var;
  }
  const Eigen::MatrixXd bread = (jac.transpose() * jac).inverse();
  const Eigen::MatrixXd cov = bread * jac.transpose() * var.asDiagonal() * jac * bread;
  const double za = std::abs(r.a - 1.0) / std::sqrt(cov(0, 0));
  const double zg = std::abs(r.gamma - 0.25) / std::sqrt(cov(1, 1));
  return {za <= 3.0 && zg <= 3.0,
          Detail()("a_se", std::sqrt(cov(0, 0)))("gamma_se", std::sqrt(cov(1, 1)))("a_z", za)("gamma_z", zg).str()};
}

Outcome cli_resume(const fs::path& dir) {
  const std::string cmd = std::string(RESPFIT_CLI_PATH) + " estimate --config " + kConfigDir +
                          "/triplewell.json --out " + dir.string() + " --resume 2>&1";
  std::string output;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {false, "cannot start the CLI"};
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) output += buf.data();
  const int status = pclose(pipe);
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(dir / "summary.txt");
  std::stringstream summary;
  summary << is.rdbuf();
  bool named = true;
  for (const char* p : {"a", "gamma", "kBT", "d"}) named = named && summary.str().find(p) != std::string::npos;
  return {code == 0 && named, Detail()("exit", code)("summary_names_parameters", named ? "yes" : "no").str()};
}

}  // namespace

int main() {
  report(1, langevin_reduction, 120);
  report(2, triplewell_reduction, 120);
  report(3, equipartition, 120);

  LangevinPipelineResult langevin;
  report(4, [&] { return langevin_pipeline(langevin); }, 30 * 60 * 8);
  TripleWellPipelineResult triplewell;
  const auto triplewell_dir = scratch("triplewell");
  report(5, [&] { return triplewell_pipeline(triplewell, triplewell_dir); }, 30 * 60 * 8);

  report(6, conventional, 60);
  report(7, shift_invariance, 10);
  report(8, surrogate_convergence, 1);
  report(9, legendre_suite, 1);
  report(10, rank_diagnostics, 5);
  report(11, oracle_equivalence, 600);

  if (!langevin.estimation.estimate.empty()) {
    info("langevin round trip", [&] {
      LangevinMorseModel model;
      const auto cfg = config_from("langevin_low_damping.json");
      const auto est = model.make_parameters(
          {langevin.reduction.gamma, langevin.reduction.kbt, langevin.eps, langevin.a, langevin.x0});
      auto shared = std::make_shared<const LangevinMorseModel>();
      return round_trip(model, est, cfg, langevin.data_statistics, coordinate(1),
                        conjugate_observable(shared, est, {0.0, 1.0}, 1));
    });
  }
  if (!triplewell.estimation.estimate.empty()) {
    info("triple-well round trip", [&] {
      TripleWellModel model;
      const auto cfg = config_from("triplewell.json");
      const auto est = model.make_parameters({triplewell.reduction.d, triplewell.a, triplewell.reduction.kbt,
                                              triplewell.gamma});
      return round_trip(model, est, cfg, triplewell.data_statistics, coordinate(0), coordinate(0));
    });
    info("triple-well estimate vs truth", [&] { return truth_consistency(triplewell); });
    info("cli estimate --resume", [&] { return cli_resume(triplewell_dir); });
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
