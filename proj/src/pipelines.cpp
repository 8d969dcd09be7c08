#include "respfit/pipelines.hpp"

#include <boost/math/tools/toms748_solve.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "respfit/error.hpp"
#include "respfit/parallel.hpp"

namespace respfit {

namespace {

const char* kModule = "pipelines";

Observable velocity_conjugate(double kbt) {
  return {"B2", [kbt](std::span<const double> x) { return x[1] / kbt; }};
}

}  // namespace

// ---------------------------------------------------------------------------
// Reductions

LangevinReduction langevin_reduce(const Trajectory& data, int stencil) {
  if (data.dim != 2) throw ValidationError(kModule, "Langevin reduction needs (x, v) samples");
  const auto v = data.column(1);
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  std::vector<double> sq(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) sq[k] = (v[k] - mean) * (v[k] - mean);
  const auto var = batch_mean(sq);

  const Observable vel = coordinate(1);
  const auto slope = derivative_at_zero_plus(data, {vel}, {vel}, stencil);

  LangevinReduction r;
  r.stencil = stencil;
  r.kbt = var.value;
  r.kbt_stderr = var.std_error;
  r.slope = slope.value(0, 0);
  r.slope_stderr = slope.std_error(0, 0);
  r.low_confidence = slope.any_low_confidence();
  r.gamma = -r.slope / r.kbt;
  r.gamma_stderr = std::hypot(r.slope_stderr / r.kbt, r.slope * r.kbt_stderr / (r.kbt * r.kbt));
  return r;
}

TripleWellReduction triplewell_reduce(const Trajectory& data, int stencil) {
  if (data.dim != 2) throw ValidationError(kModule, "triple-well reduction needs 2-D samples");
  const auto slope = derivative_at_zero_plus(data, {coordinate(0), coordinate(1)},
                                             {coordinate(0), coordinate(1)}, stencil);
  TripleWellReduction r;
  r.stencil = stencil;
  r.slope = slope.value;
  r.slope_stderr = slope.std_error;
  r.low_confidence = slope.low_confidence(0, 0) != 0 || slope.low_confidence(1, 0) != 0;
  r.kbt = -slope.value(0, 0);
  r.kbt_stderr = slope.std_error(0, 0);
  r.d = -slope.value(1, 0) / r.kbt;
  r.d_stderr = std::hypot(slope.std_error(1, 0) / r.kbt, r.d * r.kbt_stderr / r.kbt);
  return r;
}

// ---------------------------------------------------------------------------
// Conventional method

namespace {

struct ReferenceMoments {
  double m1, m2, m3;
};

// Raw moments of y under exp(-U0(y)/kBT).
ReferenceMoments reference_moments(double kbt, double eps) {
  MarginalDensity d;
  d.dim = 1;
  d.log_density = [kbt, eps](std::span<const double> y) {
    return -LangevinMorseModel::u0(y[0], eps) / kbt;
  };
  d.center = {0.0};
  d.scale = {std::sqrt(kbt / (2.0 * LangevinMorseModel::kRetaining * eps))};
  const auto m = quadrature_moments(d, {1, 2, 3});
  return {m[0], m[1], m[2]};
}

}  // namespace

PositionMoments sample_position_moments(const Trajectory& data) {
  const auto m = equilibrium_moments(data, 0, {1, 2, 3});
  return {m[0].value, m[1].value - m[0].value * m[0].value, m[2].value};
}

PositionMoments model_position_moments(double kbt, double eps, double a, double x0) {
  if (!(kbt > 0.0 && eps > 0.0 && a > 0.0)) {
    throw ValidationError(kModule, "kBT, eps and a must be positive");
  }
  const auto r = reference_moments(kbt, eps);
  PositionMoments p;
  p.mean = r.m1 / a + x0;
  p.variance = (r.m2 - r.m1 * r.m1) / (a * a);
  p.third = r.m3 / (a * a * a) + 3.0 * r.m2 * x0 / (a * a) + 3.0 * r.m1 * x0 * x0 / a +
            x0 * x0 * x0;
  return p;
}

ScaleShift match_scale_shift(double kbt, double eps, double mean, double variance) {
  if (!(variance > 0.0)) throw ValidationError(kModule, "position variance must be positive");
  const auto r = reference_moments(kbt, eps);
  const double ref_var = r.m2 - r.m1 * r.m1;
  ScaleShift s;
  s.a = std::sqrt(ref_var / variance);
  s.x0 = mean - r.m1 / s.a;
  return s;
}

ConventionalEstimate langevin_conventional(const PositionMoments& data, double kbt,
                                           double eps_lo, double eps_hi) {
  if (!(eps_lo > 0.0 && eps_hi > eps_lo)) {
    throw ValidationError(kModule, "conventional scan needs 0 < eps_lo < eps_hi");
  }
  auto mismatch = [&](double eps) {
    const auto s = match_scale_shift(kbt, eps, data.mean, data.variance);
    return model_position_moments(kbt, eps, s.a, s.x0).third - data.third;
  };
  constexpr int kScan = 60;
  std::vector<double> roots;
  double prev_eps = eps_lo;
  double prev = mismatch(prev_eps);
  if (prev == 0.0) roots.push_back(prev_eps);
  for (int i = 1; i <= kScan; ++i) {
    const double eps = eps_lo * std::pow(eps_hi / eps_lo, static_cast<double>(i) / kScan);
    const double cur = mismatch(eps);
    if (cur == 0.0) {
      roots.push_back(eps);
    } else if (prev != 0.0 && (prev < 0.0) != (cur < 0.0)) {
      boost::uintmax_t iters = 200;
      const auto bracket = boost::math::tools::toms748_solve(
          mismatch, prev_eps, eps, prev, cur, boost::math::tools::eps_tolerance<double>(50), iters);
      roots.push_back(0.5 * (bracket.first + bracket.second));
    }
    prev_eps = eps;
    prev = cur;
  }
  if (roots.empty()) {
    std::ostringstream msg;
    msg << "third-moment equation has no sign change for eps in [" << eps_lo << ", " << eps_hi
        << "]";
    throw EstimationError(kModule, msg.str());
  }
  // The equation can have a second, spurious root at small eps; take the largest.
  const double root = roots.back();
  const auto s = match_scale_shift(kbt, root, data.mean, data.variance);
  ConventionalEstimate est{root, s.a, s.x0, eps_lo, eps_hi, roots};
  return est;
}

ConventionalEstimate langevin_conventional(const Trajectory& data, double kbt, double eps_lo,
                                           double eps_hi) {
  return langevin_conventional(sample_position_moments(data), kbt, eps_lo, eps_hi);
}

ConventionalDerivatives conventional_derivatives(double kbt, double eps, double a, double x0,
                                                 double rel_step) {
  ConventionalDerivatives d;
  const double hk = rel_step * kbt;
  d.third_by_kbt = (model_position_moments(kbt + hk, eps, a, x0).third -
                    model_position_moments(kbt - hk, eps, a, x0).third) /
                   (2.0 * hk);
  const auto base = model_position_moments(kbt, eps, a, x0);
  auto along = [&](double e) {
    const auto s = match_scale_shift(kbt, e, base.mean, base.variance);
    return model_position_moments(kbt, e, s.a, s.x0).third;
  };
  const double he = rel_step * eps;
  d.third_by_eps = (along(eps + he) - along(eps - he)) / (2.0 * he);
  return d;
}

// ---------------------------------------------------------------------------
// Shared pipeline plumbing

IntegratorConfig SimulationSpec::integrator(std::uint64_t seed_override) const {
  IntegratorConfig c;
  c.scheme = scheme;
  c.h = h;
  c.dt = dt;
  c.burn_in = burn_in;
  c.samples = samples;
  c.seed = seed_override;
  return c;
}

void validate_pipeline_config(const PipelineConfig& cfg) {
  const auto model = make_model(cfg.model);
  model->make_parameters(cfg.truth);
  for (const auto& [block, sim] : {std::pair{"data", &cfg.data}, std::pair{"training", &cfg.training}}) {
    try {
      validate_config(sim->integrator(sim->seed));
    } catch (const ValidationError& e) {
      // Qualify "field 'h'" as "field 'data.h'".
      std::string msg = e.what();
      msg = msg.substr(msg.find("] ") + 2);
      for (auto pos = msg.find("field '"); pos != std::string::npos; pos = msg.find("field '", pos + 1)) {
        msg.insert(pos + 7, std::string(block) + ".");
      }
      throw ValidationError(kModule, msg);
    }
  }
  validate_config(cfg.solver);
  if (cfg.box.size() != 2) throw ValidationError(kModule, "field 'surrogate.box' needs two parameters");
  if (cfg.order < 0) throw ValidationError(kModule, "field 'surrogate.order' must be non-negative");
  if (cfg.nodes_per_axis < static_cast<std::size_t>(cfg.order) + 1) {
    throw ValidationError(kModule, "field 'surrogate.nodes_per_axis' must be at least order + 1");
  }
  if (cfg.lags.count == 0 || !(cfg.lags.spacing > 0.0)) {
    throw ValidationError(kModule, "field 'lags' needs a positive count and spacing");
  }
  if (cfg.stencil != 2 && cfg.stencil != 3) {
    throw ValidationError(kModule, "field 'reduction.stencil' must be 2 or 3");
  }
  const double span = cfg.lags.offset + cfg.lags.spacing * static_cast<double>(cfg.lags.count);
  for (const auto* sim : {&cfg.data, &cfg.training}) {
    LagGrid::uniform(cfg.lags.count, cfg.lags.spacing, cfg.lags.offset, sim->h);
    if (span >= sim->h * static_cast<double>(sim->samples)) {
      throw ValidationError(kModule, "lag grid extends beyond the simulated span");
    }
  }
}

namespace {

bool same_trajectory_request(const Trajectory& t, const ModelSpec& model,
                             const ParameterVector& theta, const IntegratorConfig& ic) {
  return t.model_id == model.id() && t.samples() == ic.samples && t.h == ic.h &&
         t.seed == ic.seed && t.theta == theta && t.scheme == ic.scheme &&
         t.dt == effective_dt(ic) && t.burn_in == effective_burn_in(model, theta, ic);
}

Trajectory data_trajectory(const ModelSpec& model, const ParameterVector& theta,
                           const SimulationSpec& spec, const ArtifactStore& store) {
  const auto ic = spec.integrator(spec.seed);
  const std::string path = store.enabled() ? store.dir + "/data.traj" : "";
  if (store.enabled() && store.resume && std::filesystem::exists(path)) {
    auto cached = read_trajectory(path);
    if (same_trajectory_request(cached, model, theta, ic)) return cached;
  }
  auto traj = simulate(model, theta, ic);
  if (store.enabled()) write_trajectory(path, traj);
  return traj;
}

std::uint64_t node_seed(const PipelineConfig& cfg, std::size_t node) {
  return cfg.common_random_numbers ? cfg.training.seed : cfg.training.seed + node;
}

void write_training(const std::string& path, const TrainingSet& t, const std::vector<double>& key) {
  nlohmann::ordered_json j;
  j["key"] = key;
  j["nodes"] = t.design.physical_nodes;
  auto rows = [](const Eigen::MatrixXd& m) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index k = 0; k < m.cols(); ++k) out[static_cast<std::size_t>(i)].push_back(m(i, k));
    }
    return out;
  };
  j["values"] = rows(t.values);
  j["stderrs"] = rows(t.stderrs);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot write '" + path + "'");
  os << j.dump(1) << '\n';
}

bool read_training(const std::string& path, TrainingSet& t, const std::vector<double>& key) {
  std::ifstream is(path);
  if (!is) return false;
  try {
    const auto j = nlohmann::json::parse(is);
    if (j.at("key").get<std::vector<double>>() != key) return false;
    if (j.at("nodes").get<std::vector<std::vector<double>>>() != t.design.physical_nodes) return false;
    const auto v = j.at("values").get<std::vector<std::vector<double>>>();
    const auto e = j.at("stderrs").get<std::vector<std::vector<double>>>();
    if (v.size() != t.design.size() || e.size() != v.size() || v.empty()) return false;
    t.values.resize(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(v[0].size()));
    t.stderrs.resizeLike(t.values);
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t k = 0; k < v[0].size(); ++k) {
        t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v[i].at(k);
        t.stderrs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = e[i].at(k);
      }
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

// Simulates every collocation node and records the statistic per lag.
// `fixed` holds the directly reduced parameters; with the training settings
// it keys the cached result.
template <class ThetaAt, class Statistic>
TrainingSet train(const PipelineConfig& cfg, const ModelSpec& model, std::vector<double> fixed,
                  ThetaAt theta_at, Statistic statistic, const ArtifactStore& store) {
  TrainingSet t;
  t.design = CollocationDesign::make(cfg.box, cfg.nodes_per_axis);
  std::vector<double> key = std::move(fixed);
  key.insert(key.end(), {static_cast<double>(cfg.training.seed), static_cast<double>(cfg.training.samples),
                         cfg.training.h, cfg.training.dt, cfg.training.burn_in,
                         static_cast<double>(cfg.training.scheme), cfg.common_random_numbers ? 1.0 : 0.0,
                         static_cast<double>(cfg.lags.count), cfg.lags.spacing, cfg.lags.offset, cfg.x0_fixed});
  const std::string path = store.enabled() ? store.dir + "/training.json" : "";
  if (store.enabled() && store.resume && read_training(path, t, key)) return t;
  const auto k = static_cast<Eigen::Index>(cfg.lags.count);
  t.values.resize(static_cast<Eigen::Index>(t.design.size()), k);
  t.stderrs.resizeLike(t.values);
  parallel_for(t.design.size(), cfg.threads, [&](std::size_t node) {
    const ParameterVector theta = theta_at(t.design.physical_nodes[node]);
    const auto traj = simulate(model, theta, cfg.training.integrator(node_seed(cfg, node)));
    const EssentialStatistics es = statistic(traj, theta);
    for (Eigen::Index i = 0; i < k; ++i) {
      t.values(static_cast<Eigen::Index>(node), i) = es.values[static_cast<std::size_t>(i)](0, 0);
      t.stderrs(static_cast<Eigen::Index>(node), i) = es.stderrs[static_cast<std::size_t>(i)](0, 0);
    }
  });
  if (store.enabled()) write_training(path, t, key);
  return t;
}

Surrogate fit_residuals(const TrainingSet& t, const EssentialStatistics& data, int order) {
  Eigen::MatrixXd residuals(t.values.rows(), t.values.cols());
  for (Eigen::Index node = 0; node < t.values.rows(); ++node) {
    for (Eigen::Index i = 0; i < t.values.cols(); ++i) {
      residuals(node, i) = data.values[static_cast<std::size_t>(i)](0, 0) - t.values(node, i);
    }
  }
  return Surrogate::fit(t.design, order, residuals, t.stderrs);
}

void write_pipeline_artifacts(const ArtifactStore& store, const EssentialStatistics& data,
                              const DerivativeEstimate* slope, const Surrogate& s,
                              const EstimationResult& est, const ParameterVector& estimate) {
  if (!store.enabled()) return;
  nlohmann::ordered_json j;
  for (std::size_t i = 0; i < estimate.size(); ++i) j[estimate.names()[i]] = estimate[i];
  std::ofstream os(store.dir + "/estimate.json", std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot write '" + store.dir + "/estimate.json'");
  os << std::setprecision(17) << j.dump(2) << '\n';
  write_statistics_csv(store.dir + "/data_statistics.csv", data, slope);
  s.save(store.dir + "/surrogate.json");
  write_estimation_json(store.dir + "/estimation.json", est);
  write_starts_csv(store.dir + "/starts.csv", est);
}

}  // namespace

// ---------------------------------------------------------------------------

Trajectory pipeline_data(const PipelineConfig& cfg, const ArtifactStore& store) {
  validate_pipeline_config(cfg);
  const auto model = make_model(cfg.model);
  return data_trajectory(*model, model->make_parameters(cfg.truth), cfg.data, store);
}

TrainingSet langevin_training(const PipelineConfig& cfg, double kbt, double gamma,
                              const ArtifactStore& store) {
  const LangevinMorseModel model;
  const Observable vel = coordinate(1);
  const Observable conj = velocity_conjugate(kbt);
  const LagGrid grid =
      LagGrid::uniform(cfg.lags.count, cfg.lags.spacing, cfg.lags.offset, cfg.training.h);
  return train(
      cfg, model, {kbt, gamma},
      [&](const std::vector<double>& node) {
        return model.make_parameters({gamma, kbt, node[0], node[1], cfg.x0_fixed});
      },
      [&](const Trajectory& traj, const ParameterVector&) {
        return two_point_correlation(traj, {vel}, {conj}, grid);
      },
      store);
}

TrainingSet triplewell_training(const PipelineConfig& cfg, double d, double kbt,
                                const ArtifactStore& store) {
  const TripleWellModel model;
  const Observable x1 = coordinate(0);
  const LagGrid grid =
      LagGrid::uniform(cfg.lags.count, cfg.lags.spacing, cfg.lags.offset, cfg.training.h);
  return train(
      cfg, model, {d, kbt},
      [&](const std::vector<double>& node) { return model.make_parameters({d, node[0], kbt, node[1]}); },
      [&](const Trajectory& traj, const ParameterVector&) {
        return two_point_correlation(traj, {x1}, {x1}, grid);
      },
      store);
}

LangevinPipelineResult langevin_response_pipeline(const PipelineConfig& cfg,
                                                  const ArtifactStore& store) {
  validate_pipeline_config(cfg);
  if (cfg.model != "langevin_morse") {
    throw ValidationError(kModule, "Langevin pipeline needs model 'langevin_morse'");
  }
  if (cfg.box.names() != std::vector<std::string>{"eps", "a"}) {
    throw ValidationError(kModule, "Langevin surrogate box must be over (eps, a)");
  }
  const auto data = pipeline_data(cfg, store);

  LangevinPipelineResult r;
  r.reduction = langevin_reduce(data, cfg.stencil);
  r.moments = sample_position_moments(data);
  const double kbt = r.reduction.kbt;
  const double gamma = r.reduction.gamma;
  if (!(kbt > 0.0 && gamma > 0.0)) {
    throw EstimationError(kModule, "direct reduction gave non-positive kBT or gamma");
  }

  const Observable vel = coordinate(1);
  const Observable conj = velocity_conjugate(kbt);
  const LagGrid data_grid = LagGrid::uniform(cfg.lags.count, cfg.lags.spacing, cfg.lags.offset, cfg.data.h);
  r.data_statistics = two_point_correlation(data, {vel}, {conj}, data_grid);

  r.training = langevin_training(cfg, kbt, gamma, store);

  r.surrogate = fit_residuals(r.training, r.data_statistics, cfg.order);
  r.estimation = multistart(r.surrogate, cfg.solver);
  r.eps = r.estimation.estimate[0];
  r.a_surrogate = r.estimation.estimate[1];
  const auto s = match_scale_shift(kbt, r.eps, r.moments.mean, r.moments.variance);
  r.a = s.a;
  r.x0 = s.x0;
  try {
    r.conventional = langevin_conventional(r.moments, kbt);
  } catch (const EstimationError& e) {
    r.conventional_error = e.what();
  }

  if (store.enabled()) {
    const auto slope = derivative_at_zero_plus(data, {vel}, {vel}, cfg.stencil);
    const LangevinMorseModel model;
    write_pipeline_artifacts(store, r.data_statistics, &slope, r.surrogate, r.estimation,
                             model.make_parameters({gamma, kbt, r.eps, r.a, r.x0}));
    std::ofstream os(store.dir + "/estimates.csv", std::ios::trunc);
    os << std::setprecision(17);
    os << "method,kBT,gamma,eps,a,x0\n";
    os << "essential_statistics," << kbt << ',' << gamma << ',' << r.eps << ',' << r.a << ','
       << r.x0 << '\n';
    if (r.conventional) {
      os << "conventional," << kbt << ',' << gamma << ',' << r.conventional->eps << ','
         << r.conventional->a << ',' << r.conventional->x0 << '\n';
    }
  }
  return r;
}

EstimationResult langevin_surrogate_fit(const PipelineConfig& cfg, const Trajectory& data,
                                        double kbt, double gamma) {
  validate_pipeline_config(cfg);
  const LagGrid grid = LagGrid::uniform(cfg.lags.count, cfg.lags.spacing, cfg.lags.offset, data.h);
  const auto stats = two_point_correlation(data, {coordinate(1)}, {velocity_conjugate(kbt)}, grid);
  const auto training = langevin_training(cfg, kbt, gamma);
  return multistart(fit_residuals(training, stats, cfg.order), cfg.solver);
}

TripleWellPipelineResult triplewell_response_pipeline(const PipelineConfig& cfg,
                                                      const ArtifactStore& store) {
  validate_pipeline_config(cfg);
  if (cfg.model != "triple_well") {
    throw ValidationError(kModule, "triple-well pipeline needs model 'triple_well'");
  }
  if (cfg.box.names() != std::vector<std::string>{"a", "gamma"}) {
    throw ValidationError(kModule, "triple-well surrogate box must be over (a, gamma)");
  }
  const auto data = pipeline_data(cfg, store);

  TripleWellPipelineResult r;
  r.reduction = triplewell_reduce(data, cfg.stencil);
  const double kbt = r.reduction.kbt;
  const double d = r.reduction.d;
  if (!(kbt > 0.0) || !(std::abs(d) < 1.0)) {
    throw EstimationError(kModule, "direct reduction gave kBT <= 0 or |d| >= 1");
  }

  const Observable x1 = coordinate(0);
  const LagGrid data_grid = LagGrid::uniform(cfg.lags.count, cfg.lags.spacing, cfg.lags.offset, cfg.data.h);
  r.data_statistics = two_point_correlation(data, {x1}, {x1}, data_grid);

  r.training = triplewell_training(cfg, d, kbt, store);

  r.surrogate = fit_residuals(r.training, r.data_statistics, cfg.order);
  r.estimation = multistart(r.surrogate, cfg.solver);
  r.a = r.estimation.estimate[0];
  r.gamma = r.estimation.estimate[1];

  if (store.enabled()) {
    const auto slope = derivative_at_zero_plus(data, {coordinate(0), coordinate(1)},
                                               {coordinate(0), coordinate(1)}, cfg.stencil);
    const TripleWellModel model;
    write_pipeline_artifacts(store, r.data_statistics, &slope, r.surrogate, r.estimation,
                             model.make_parameters({d, r.a, kbt, r.gamma}));
    std::ofstream os(store.dir + "/estimates.csv", std::ios::trunc);
    os << std::setprecision(17);
    os << "method,d,a,kBT,gamma\n";
    os << "essential_statistics," << d << ',' << r.a << ',' << kbt << ',' << r.gamma << '\n';
  }
  return r;
}

RecoveryCheck compare_normalized(const ModelSpec& model, const ParameterVector& reference,
                                 const ParameterVector& estimate, const SimulationSpec& sim,
                                 const Observable& a, const Observable& b_reference,
                                 const Observable& b_estimate, const LagGrid& grid) {
  if (grid.lags().front() != 0.0) {
    throw ValidationError(kModule, "normalized comparison needs t = 0 as the first lag");
  }
  const auto ic = sim.integrator(sim.seed);
  const auto ref = two_point_correlation(simulate(model, reference, ic), {a}, {b_reference}, grid);
  const auto est = two_point_correlation(simulate(model, estimate, ic), {a}, {b_estimate}, grid);
  RecoveryCheck c;
  c.lags = grid.lags();
  const double r0 = ref.values[0](0, 0);
  const double e0 = est.values[0](0, 0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    c.reference.push_back(ref.values[i](0, 0) / r0);
    c.estimate.push_back(est.values[i](0, 0) / e0);
    c.sup_difference = std::max(c.sup_difference, std::abs(c.reference.back() - c.estimate.back()));
  }
  return c;
}

}  // namespace respfit
