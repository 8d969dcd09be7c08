#include "respfit/solver.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <random>

#include "respfit/error.hpp"
#include "respfit/parallel.hpp"

namespace respfit {

namespace {

const char* kModule = "solver";
constexpr double kInlierFloor = 1e-6;
constexpr int kMaxRejections = 5;
constexpr int kMaxHalvings = 40;
constexpr double kArmijo = 1e-4;
constexpr double kMarquardtFloor = 1e-3;

// True when the accepted step is shorter than an eighth of the full one.
bool step_cuts(const Eigen::VectorXd& trial, const Eigen::VectorXd& u, double full_length) {
  return (trial - u).norm() < full_length / 8.0;
}

double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void validate_config(const GaussNewtonConfig& cfg) {
  if (!(cfg.step_tolerance > 0.0)) throw ValidationError(kModule, "field 'step_tolerance' must be positive");
  if (cfg.max_iterations < 1) throw ValidationError(kModule, "field 'max_iterations' must be at least 1");
  if (cfg.starts < 1) throw ValidationError(kModule, "field 'starts' must be at least 1");
  if (!(cfg.damping_floor > 0.0)) throw ValidationError(kModule, "field 'damping_floor' must be positive");
}

StartRecord gauss_newton(const Surrogate& s, std::span<const double> theta0,
                         const GaussNewtonConfig& cfg) {
  const ParameterBox& box = s.box();
  if (!box.contains(theta0, 1e-12)) throw ValidationError(kModule, "start point outside the box");
  const auto n = static_cast<Eigen::Index>(s.dim());

  StartRecord rec;
  rec.start.assign(theta0.begin(), theta0.end());
  auto u0 = box.to_cube(theta0);
  Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(u0.data(), n).cwiseMax(-1.0).cwiseMin(1.0);
  auto value = s.eval_cube(std::span<const double>(u.data(), static_cast<std::size_t>(n)));
  double residual = value.f.norm();
  double lambda = 0.0;
  int rejections = 0;
  // Set once a line search has to cut the Gauss-Newton step hard: the
  // quadratic model is poor there and Levenberg damping takes over.
  bool marquardt = false;

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    rec.iterations = iter + 1;
    const Eigen::MatrixXd& jac = value.jac;
    const Eigen::VectorXd grad = jac.transpose() * value.f;
    // Coordinates on a face whose descent direction points out of the box are
    // frozen; the Gauss-Newton system is solved in the remaining ones.
    std::vector<Eigen::Index> free;
    for (Eigen::Index d = 0; d < n; ++d) {
      const bool pinned = (u(d) >= 1.0 && grad(d) < 0.0) || (u(d) <= -1.0 && grad(d) > 0.0);
      if (!pinned) free.push_back(d);
    }
    if (free.empty()) {
      rec.converged = true;
      break;
    }
    const auto m = static_cast<Eigen::Index>(free.size());
    Eigen::MatrixXd jf(jac.rows(), m);
    for (Eigen::Index k = 0; k < m; ++k) jf.col(k) = jac.col(free[static_cast<std::size_t>(k)]);
    const Eigen::MatrixXd jtj = jf.transpose() * jf;
    const Eigen::VectorXd jtf = jf.transpose() * value.f;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(jtj);
    const auto& sv = svd.singularValues();
    const double cond = sv(m - 1) > 0.0 ? sv(0) / sv(m - 1) : std::numeric_limits<double>::infinity();
    const bool damp = marquardt || !(cond <= cfg.damping_condition);

    Eigen::VectorXd reduced;
    if (!damp) {
      reduced = -jtj.ldlt().solve(jtf);
    } else {
      rec.damped = true;
      const double scale = std::max(jtj.trace() / static_cast<double>(m), 1e-300);
      lambda = std::max(lambda, (marquardt ? kMarquardtFloor : cfg.damping_floor) * scale);
      Eigen::MatrixXd lhs = jtj;
      lhs.diagonal().array() += lambda;
      reduced = -lhs.ldlt().solve(jtf);
    }
    Eigen::VectorXd step = Eigen::VectorXd::Zero(n);
    for (Eigen::Index k = 0; k < m; ++k) step(free[static_cast<std::size_t>(k)]) = reduced(k);
    if (!step.allFinite()) break;

    Eigen::VectorXd trial;
    bool clipped = false;
    SurrogateValue trial_value;
    double trial_residual = 0.0;
    double full_length = 0.0;
    bool stalled = false;
    // Undamped steps backtrack until the squared residual drops by a fixed
    // fraction of the predicted decrease; a full Gauss-Newton step can cycle
    // around a minimum with a large residual.
    for (int halving = 0;; ++halving) {
      trial = u + step;
      clipped = false;
      for (Eigen::Index d = 0; d < n; ++d) {
        if (trial(d) > 1.0 || trial(d) < -1.0) {
          trial(d) = std::clamp(trial(d), -1.0, 1.0);
          clipped = true;
        }
      }
      if (halving == 0) full_length = (trial - u).norm();
      trial_value = s.eval_cube(std::span<const double>(trial.data(), static_cast<std::size_t>(n)));
      trial_residual = trial_value.f.norm();
      const double slope = std::min(2.0 * grad.dot(trial - u), 0.0);
      if (damp || trial_residual * trial_residual <= residual * residual + kArmijo * slope) break;
      if (halving == kMaxHalvings) {
        stalled = true;
        break;
      }
      step *= 0.5;
    }
    if (!damp && !stalled && step_cuts(trial, u, full_length)) marquardt = true;
    if (stalled) {
      rec.converged = full_length < cfg.step_tolerance;
      break;
    }

    if (damp && trial_residual > residual) {
      lambda *= 10.0;
      if (++rejections >= kMaxRejections) break;
      continue;
    }
    rejections = 0;
    if (damp) lambda /= 10.0;
    rec.boundary_hit = rec.boundary_hit || clipped;
    const double length = (trial - u).norm();
    rec.path_length += length;
    u = trial;
    value = std::move(trial_value);
    residual = trial_residual;
    if (full_length < cfg.step_tolerance) {
      rec.converged = true;
      break;
    }
  }

  rec.residual_norm = residual;
  rec.ended_on_boundary = (u.array().abs() >= 1.0).any();
  rec.final_theta = box.from_cube(std::span<const double>(u.data(), static_cast<std::size_t>(n)));
  return rec;
}

std::vector<bool> classify_inliers(const Surrogate& s, const std::vector<StartRecord>& records,
                                   bool* boundary_fallback) {
  const std::size_t n = s.dim();
  const ParameterBox& box = s.box();
  std::vector<std::size_t> candidates;
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (records[r].converged && !records[r].ended_on_boundary) candidates.push_back(r);
  }
  if (boundary_fallback) *boundary_fallback = false;
  if (candidates.empty()) {
    for (std::size_t r = 0; r < records.size(); ++r) {
      if (records[r].converged) candidates.push_back(r);
    }
    if (boundary_fallback) *boundary_fallback = !candidates.empty();
  }
  std::vector<bool> inlier(records.size(), false);
  if (candidates.empty()) return inlier;

  std::vector<std::vector<double>> cube(records.size());
  for (std::size_t r : candidates) cube[r] = box.to_cube(records[r].final_theta);
  std::vector<double> med(n), radius(n);
  for (std::size_t d = 0; d < n; ++d) {
    std::vector<double> col;
    for (std::size_t r : candidates) col.push_back(cube[r][d]);
    med[d] = median_of(col);
    for (auto& c : col) c = std::abs(c - med[d]);
    radius[d] = std::max(3.0 * 1.4826 * median_of(col), kInlierFloor);
  }
  std::size_t count = 0;
  for (std::size_t r : candidates) {
    bool ok = true;
    for (std::size_t d = 0; d < n && ok; ++d) ok = std::abs(cube[r][d] - med[d]) <= radius[d];
    inlier[r] = ok;
    count += ok ? 1 : 0;
  }
  if (count == 0) {
    // Degenerate spread: keep the candidate nearest the median.
    std::size_t best = candidates.front();
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t r : candidates) {
      double dist = 0.0;
      for (std::size_t d = 0; d < n; ++d) dist = std::max(dist, std::abs(cube[r][d] - med[d]));
      if (dist < best_dist) {
        best_dist = dist;
        best = r;
      }
    }
    inlier[best] = true;
  }
  return inlier;
}

EstimationResult multistart(const Surrogate& s, const std::vector<std::vector<double>>& starts,
                            const GaussNewtonConfig& cfg) {
  validate_config(cfg);
  if (starts.empty()) throw ValidationError(kModule, "no start points");
  EstimationResult res;
  res.names = s.box().names();
  res.records.resize(starts.size());
  parallel_for(starts.size(), cfg.threads,
               [&](std::size_t i) { res.records[i] = gauss_newton(s, starts[i], cfg); });

  for (const auto& r : res.records) res.converged += r.converged ? 1 : 0;
  if (res.converged == 0) {
    throw EstimationError(kModule, "none of " + std::to_string(starts.size()) +
                                       " Gauss-Newton starts converged; check the surrogate "
                                       "order, collocation grid and lag grid");
  }
  res.inlier = classify_inliers(s, res.records, &res.boundary_fallback);
  const std::size_t n = s.dim();
  res.estimate.assign(n, 0.0);
  res.median.assign(n, 0.0);
  for (std::size_t d = 0; d < n; ++d) {
    std::vector<double> col;
    for (std::size_t r = 0; r < res.records.size(); ++r) {
      if (res.inlier[r]) col.push_back(res.records[r].final_theta[d]);
    }
    res.estimate[d] = sorted_sum(col) / static_cast<double>(col.size());
    res.median[d] = median_of(col);
    res.inliers = col.size();
  }
  res.rank = rank_diagnostic(s, res.estimate);
  return res;
}

EstimationResult multistart(const Surrogate& s, const GaussNewtonConfig& cfg) {
  validate_config(cfg);
  const ParameterBox& box = s.box();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  std::vector<std::vector<double>> starts(cfg.starts);
  for (auto& st : starts) {
    std::vector<double> u(s.dim());
    for (auto& x : u) x = uniform(rng);
    st = box.from_cube(u);
  }
  return multistart(s, starts, cfg);
}

void write_estimation_json(const std::string& path, const EstimationResult& r) {
  nlohmann::ordered_json j;
  j["names"] = r.names;
  j["estimate"] = r.estimate;
  j["median"] = r.median;
  j["starts"] = r.records.size();
  j["converged"] = r.converged;
  j["inliers"] = r.inliers;
  j["boundary_fallback"] = r.boundary_fallback;
  j["rank"] = {{"coefficient_rank", r.rank.coefficient_rank},
               {"residuals", r.rank.residuals},
               {"dependent", r.rank.dependent},
               {"underdetermined", r.rank.underdetermined},
               {"jacobian_rank", r.rank.jacobian_rank ? static_cast<long>(*r.rank.jacobian_rank) : -1},
               {"jacobian_full_rank", r.rank.jacobian_full_rank}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
  os << j.dump(2) << '\n';
}

void write_starts_csv(const std::string& path, const EstimationResult& r) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
  os << std::setprecision(17);
  for (const auto& name : r.names) os << "start_" << name << ',';
  for (const auto& name : r.names) os << "final_" << name << ',';
  os << "residual,iterations,path_length,converged,boundary_hit,ended_on_boundary,inlier\n";
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const auto& rec = r.records[i];
    for (double v : rec.start) os << v << ',';
    for (double v : rec.final_theta) os << v << ',';
    os << rec.residual_norm << ',' << rec.iterations << ',' << rec.path_length << ','
       << rec.converged << ',' << rec.boundary_hit << ',' << rec.ended_on_boundary << ','
       << r.inlier[i] << '\n';
  }
}

}  // namespace respfit
