#include "respfit/stats.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <unsupported/Eigen/MatrixFunctions>
#include <unsupported/Eigen/Polynomials>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "respfit/error.hpp"

namespace respfit {

namespace {

const char* kModule = "stats";
constexpr std::size_t kMinPairs = 100;
constexpr double kLogDrop = 40.0;

// Streams values into ceil(sqrt(P)) contiguous batches of near-equal length.
class BatchAccumulator {
 public:
  explicit BatchAccumulator(std::size_t count)
      : count_(count),
        batches_(static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(count))))),
        sums_(batches_, 0.0),
        sizes_(batches_, 0) {
    next_boundary_ = boundary(1);
  }

  void add(double v) {
    while (seen_ >= next_boundary_) {
      ++batch_;
      next_boundary_ = boundary(batch_ + 1);
    }
    sums_[batch_] += v;
    ++sizes_[batch_];
    ++seen_;
  }

  MomentEstimate result() const {
    MomentEstimate r;
    double total = 0.0;
    for (double s : sums_) total += s;
    r.value = total / static_cast<double>(count_);
    double mean_of_means = 0.0;
    std::vector<double> means(batches_);
    for (std::size_t b = 0; b < batches_; ++b) {
      means[b] = sums_[b] / static_cast<double>(sizes_[b]);
      mean_of_means += means[b];
    }
    mean_of_means /= static_cast<double>(batches_);
    double ss = 0.0;
    for (double m : means) ss += (m - mean_of_means) * (m - mean_of_means);
    const auto nb = static_cast<double>(batches_);
    r.std_error = std::sqrt(ss / (nb * (nb - 1.0)));
    return r;
  }

 private:
  std::size_t boundary(std::size_t b) const { return b * count_ / batches_; }

  std::size_t count_;
  std::size_t batches_;
  std::vector<double> sums_;
  std::vector<std::size_t> sizes_;
  std::size_t batch_ = 0;
  std::size_t seen_ = 0;
  std::size_t next_boundary_ = 0;
};

std::vector<std::vector<double>> evaluate(const Trajectory& traj,
                                          const std::vector<Observable>& obs) {
  std::vector<std::vector<double>> out(obs.size(), std::vector<double>(traj.samples()));
  for (std::size_t k = 0; k < traj.samples(); ++k) {
    const auto x = traj.row(k);
    for (std::size_t o = 0; o < obs.size(); ++o) out[o][k] = obs[o].eval(x);
  }
  return out;
}

void require_pairs(std::size_t samples, std::size_t max_steps, double h) {
  if (max_steps >= samples) {
    throw ValidationError(kModule, "largest lag " + std::to_string(static_cast<double>(max_steps) * h) +
                                       " exceeds the trajectory span " +
                                       std::to_string(static_cast<double>(samples) * h));
  }
  if (samples - max_steps < kMinPairs) {
    throw EstimationError(kModule, "only " + std::to_string(samples - max_steps) +
                                       " usable pairs at the largest lag; need at least 100");
  }
}

std::vector<std::string> ids(const std::vector<Observable>& obs) {
  std::vector<std::string> out;
  for (const auto& o : obs) out.push_back(o.id);
  return out;
}

}  // namespace

Observable coordinate(std::size_t i) {
  return {"x" + std::to_string(i + 1), [i](std::span<const double> x) { return x[i]; }};
}

Observable conjugate_observable(std::shared_ptr<const ModelSpec> model, ParameterVector theta,
                                std::vector<double> c, std::size_t i) {
  if (!model->has_equilibrium()) {
    throw UnsupportedCapability(kModule, "conjugate variable needs an equilibrium density");
  }
  if (c.size() != model->state_dim() || i >= c.size()) {
    throw ValidationError(kModule, "forcing direction must have the state dimension");
  }
  const double ci = c[i];
  return {"B" + std::to_string(i + 1),
          [model, theta = std::move(theta), ci, i](std::span<const double> x) {
            double score[8];
            model->score(x, theta, std::span<double>(score, model->state_dim()));
            return ci * score[i];
          }};
}

// ---------------------------------------------------------------------------

LagGrid::LagGrid(std::vector<double> lags, double h) : lags_(std::move(lags)), h_(h) {
  if (!(h > 0.0)) throw ValidationError(kModule, "lag grid needs a positive trajectory lag h");
  if (lags_.empty()) throw ValidationError(kModule, "lag grid is empty");
  for (std::size_t i = 0; i < lags_.size(); ++i) {
    const double t = lags_[i];
    if (!(t >= 0.0) || (i > 0 && !(t > lags_[i - 1]))) {
      throw ValidationError(kModule, "lags must be non-negative and strictly increasing");
    }
    const double r = t / h;
    const double n = std::round(r);
    if (std::abs(r - n) > 1e-9 * std::max(1.0, n)) {
      throw ValidationError(kModule, "lag " + std::to_string(t) + " is not a multiple of h = " +
                                         std::to_string(h));
    }
    steps_.push_back(static_cast<std::size_t>(n));
  }
}

LagGrid LagGrid::uniform(std::size_t count, double spacing, double offset, double h) {
  std::vector<double> lags(count);
  for (std::size_t i = 0; i < count; ++i) lags[i] = offset + spacing * static_cast<double>(i + 1);
  return LagGrid(std::move(lags), h);
}

std::vector<double> EssentialStatistics::series(std::size_t a, std::size_t b) const {
  std::vector<double> out;
  for (const auto& m : values) out.push_back(m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
  return out;
}

std::vector<double> EssentialStatistics::series_stderr(std::size_t a, std::size_t b) const {
  std::vector<double> out;
  for (const auto& m : stderrs) out.push_back(m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
  return out;
}

EssentialStatistics two_point_correlation(const Trajectory& traj,
                                          const std::vector<Observable>& a,
                                          const std::vector<Observable>& b, const LagGrid& grid,
                                          Pairing pairing) {
  if (a.empty() || b.empty()) throw ValidationError(kModule, "need at least one observable");
  if (std::abs(grid.h() - traj.h) > 1e-12 * traj.h) {
    throw ValidationError(kModule, "lag grid spacing does not match the trajectory lag");
  }
  const std::size_t samples = traj.samples();
  require_pairs(samples, grid.steps().back(), traj.h);
  const auto av = evaluate(traj, a);
  const auto bv = evaluate(traj, b);

  EssentialStatistics es;
  es.a_ids = ids(a);
  es.b_ids = ids(b);
  es.lags = grid.lags();
  es.samples = samples;
  const auto na = static_cast<Eigen::Index>(a.size());
  const auto nb = static_cast<Eigen::Index>(b.size());
  for (std::size_t l = 0; l < grid.size(); ++l) {
    const std::size_t lag = grid.steps()[l];
    const std::size_t pairs = samples - lag;
    Eigen::MatrixXd val(na, nb), err(na, nb);
    for (Eigen::Index i = 0; i < na; ++i) {
      for (Eigen::Index j = 0; j < nb; ++j) {
        const auto& x = av[static_cast<std::size_t>(i)];
        const auto& y = bv[static_cast<std::size_t>(j)];
        BatchAccumulator acc(pairs);
        if (pairing == Pairing::kForward) {
          for (std::size_t s = 0; s < pairs; ++s) acc.add(x[s + lag] * y[s]);
        } else {
          for (std::size_t s = 0; s < pairs; ++s) acc.add(x[s] * y[s + lag]);
        }
        const auto r = acc.result();
        val(i, j) = r.value;
        err(i, j) = r.std_error;
      }
    }
    es.values.push_back(std::move(val));
    es.stderrs.push_back(std::move(err));
  }
  return es;
}

DerivativeEstimate derivative_at_zero_plus(const Trajectory& traj,
                                           const std::vector<Observable>& a,
                                           const std::vector<Observable>& b, int stencil) {
  if (stencil != 2 && stencil != 3) {
    throw ValidationError(kModule, "derivative stencil must be 2 or 3 lags");
  }
  const std::size_t samples = traj.samples();
  const auto reach = static_cast<std::size_t>(stencil - 1);
  require_pairs(samples, reach, traj.h);
  const auto av = evaluate(traj, a);
  const auto bv = evaluate(traj, b);
  const double h = traj.h;
  const std::size_t pairs = samples - reach;

  DerivativeEstimate d;
  d.stencil = stencil;
  const auto na = static_cast<Eigen::Index>(a.size());
  const auto nb = static_cast<Eigen::Index>(b.size());
  d.value.resize(na, nb);
  d.std_error.resize(na, nb);
  d.low_confidence.resize(na, nb);
  for (Eigen::Index i = 0; i < na; ++i) {
    for (Eigen::Index j = 0; j < nb; ++j) {
      const auto& x = av[static_cast<std::size_t>(i)];
      const auto& y = bv[static_cast<std::size_t>(j)];
      BatchAccumulator acc(pairs);
      if (stencil == 2) {
        for (std::size_t s = 0; s < pairs; ++s) acc.add((x[s + 1] - x[s]) * y[s] / h);
      } else {
        for (std::size_t s = 0; s < pairs; ++s) {
          acc.add((-3.0 * x[s] + 4.0 * x[s + 1] - x[s + 2]) * y[s] / (2.0 * h));
        }
      }
      const auto r = acc.result();
      d.value(i, j) = r.value;
      d.std_error(i, j) = r.std_error;
      d.low_confidence(i, j) = r.std_error > std::abs(r.value) ? 1 : 0;
    }
  }
  return d;
}

EssentialStatistics derivative_at_lags(const Trajectory& traj, const std::vector<Observable>& a,
                                       const std::vector<Observable>& b, const LagGrid& grid) {
  if (grid.steps().front() < 1) {
    throw ValidationError(kModule, "central differences need lags of at least one step");
  }
  const std::size_t samples = traj.samples();
  require_pairs(samples, grid.steps().back() + 1, traj.h);
  const auto av = evaluate(traj, a);
  const auto bv = evaluate(traj, b);
  const double h = traj.h;

  EssentialStatistics es;
  es.a_ids = ids(a);
  es.b_ids = ids(b);
  es.lags = grid.lags();
  es.samples = samples;
  const auto na = static_cast<Eigen::Index>(a.size());
  const auto nb = static_cast<Eigen::Index>(b.size());
  for (std::size_t l = 0; l < grid.size(); ++l) {
    const std::size_t lag = grid.steps()[l];
    const std::size_t pairs = samples - lag - 1;
    Eigen::MatrixXd val(na, nb), err(na, nb);
    for (Eigen::Index i = 0; i < na; ++i) {
      for (Eigen::Index j = 0; j < nb; ++j) {
        const auto& x = av[static_cast<std::size_t>(i)];
        const auto& y = bv[static_cast<std::size_t>(j)];
        BatchAccumulator acc(pairs);
        for (std::size_t s = 0; s < pairs; ++s) {
          acc.add((x[s + lag + 1] - x[s + lag - 1]) * y[s] / (2.0 * h));
        }
        const auto r = acc.result();
        val(i, j) = r.value;
        err(i, j) = r.std_error;
      }
    }
    es.values.push_back(std::move(val));
    es.stderrs.push_back(std::move(err));
  }
  return es;
}

MomentEstimate batch_mean(std::span<const double> series) {
  if (series.size() < kMinPairs) {
    throw EstimationError(kModule, "need at least 100 samples for a batch-mean estimate");
  }
  BatchAccumulator acc(series.size());
  for (double v : series) acc.add(v);
  return acc.result();
}

std::vector<MomentEstimate> equilibrium_moments(const Trajectory& traj, std::size_t coord,
                                                const std::vector<int>& powers) {
  if (coord >= traj.dim) throw ValidationError(kModule, "coordinate out of range");
  if (traj.samples() < kMinPairs) {
    throw EstimationError(kModule, "need at least 100 samples for moments");
  }
  std::vector<MomentEstimate> out;
  for (int p : powers) {
    if (p < 0) throw ValidationError(kModule, "moment powers must be non-negative");
    BatchAccumulator acc(traj.samples());
    for (std::size_t k = 0; k < traj.samples(); ++k) acc.add(std::pow(traj.at(k, coord), p));
    auto r = acc.result();
    r.power = p;
    out.push_back(r);
  }
  return out;
}

MomentEstimate time_average(const Trajectory& traj, const Observable& obs) {
  if (traj.samples() < kMinPairs) {
    throw EstimationError(kModule, "need at least 100 samples for a time average");
  }
  BatchAccumulator acc(traj.samples());
  for (std::size_t k = 0; k < traj.samples(); ++k) acc.add(obs.eval(traj.row(k)));
  return acc.result();
}

// ---------------------------------------------------------------------------
// Quadrature

namespace {

struct Region {
  std::vector<double> lo, hi;
  double log_max = 0.0;
};

// Grid scan for the peak and the box where log p >= peak - 40, widening the
// scan window until its edges are below the threshold.
Region locate_mass(const MarginalDensity& d) {
  if (d.dim != 1 && d.dim != 2) {
    throw UnsupportedCapability(kModule, "quadrature supports 1-D and 2-D densities only");
  }
  const int points = d.dim == 1 ? 4001 : 301;
  double half_width = 8.0;
  for (int attempt = 0; attempt < 12; ++attempt, half_width *= 2.0) {
    std::vector<std::vector<double>> axis(d.dim);
    for (std::size_t k = 0; k < d.dim; ++k) {
      axis[k].resize(static_cast<std::size_t>(points));
      for (int i = 0; i < points; ++i) {
        axis[k][static_cast<std::size_t>(i)] =
            d.center[k] + d.scale[k] * half_width * (2.0 * i / (points - 1) - 1.0);
      }
    }
    const int n2 = d.dim == 2 ? points : 1;
    std::vector<double> logp(static_cast<std::size_t>(points * n2));
    double best = -std::numeric_limits<double>::infinity();
    double q[2] = {0.0, 0.0};
    for (int i = 0; i < points; ++i) {
      for (int j = 0; j < n2; ++j) {
        q[0] = axis[0][static_cast<std::size_t>(i)];
        if (d.dim == 2) q[1] = axis[1][static_cast<std::size_t>(j)];
        double v = d.log_density(std::span<const double>(q, d.dim));
        if (std::isnan(v)) v = -std::numeric_limits<double>::infinity();
        logp[static_cast<std::size_t>(i * n2 + j)] = v;
        best = std::max(best, v);
      }
    }
    if (!std::isfinite(best)) {
      throw NumericalError(kModule, "log density is not finite anywhere on the scan window");
    }
    const double cut = best - kLogDrop;
    int ilo = points, ihi = -1, jlo = n2, jhi = -1;
    for (int i = 0; i < points; ++i) {
      for (int j = 0; j < n2; ++j) {
        if (logp[static_cast<std::size_t>(i * n2 + j)] >= cut) {
          ilo = std::min(ilo, i);
          ihi = std::max(ihi, i);
          jlo = std::min(jlo, j);
          jhi = std::max(jhi, j);
        }
      }
    }
    const bool touches = ilo == 0 || ihi == points - 1 || (d.dim == 2 && (jlo == 0 || jhi == n2 - 1));
    if (touches) continue;
    Region r;
    r.log_max = best;
    r.lo.push_back(axis[0][static_cast<std::size_t>(ilo - 1)]);
    r.hi.push_back(axis[0][static_cast<std::size_t>(ihi + 1)]);
    if (d.dim == 2) {
      r.lo.push_back(axis[1][static_cast<std::size_t>(jlo - 1)]);
      r.hi.push_back(axis[1][static_cast<std::size_t>(jhi + 1)]);
    }
    return r;
  }
  throw NumericalError(kModule, "density mass does not decay within 16000 scale widths; "
                                "the density looks non-normalizable");
}

double integrate1(const std::function<double(double)>& f, double lo, double hi, double tol) {
  using boost::math::quadrature::gauss_kronrod;
  return gauss_kronrod<double, 61>::integrate(f, lo, hi, 25, tol);
}

}  // namespace

double quadrature_expectation(const MarginalDensity& density,
                              const std::function<double(std::span<const double>)>& f) {
  const Region r = locate_mass(density);
  constexpr double kTol = 1e-12;
  if (density.dim == 1) {
    auto weight = [&](double x) {
      const double lp = density.log_density(std::span<const double>(&x, 1)) - r.log_max;
      return lp < -700.0 ? 0.0 : std::exp(lp);
    };
    const double z = integrate1(weight, r.lo[0], r.hi[0], kTol);
    const double m = integrate1([&](double x) { return weight(x) * f(std::span<const double>(&x, 1)); },
                                r.lo[0], r.hi[0], kTol);
    if (!(z > 0.0) || !std::isfinite(m)) throw NumericalError(kModule, "quadrature failed");
    return m / z;
  }
  auto inner = [&](double x1, bool with_f) {
    return integrate1(
        [&](double x2) {
          double q[2] = {x1, x2};
          const double lp = density.log_density(std::span<const double>(q, 2)) - r.log_max;
          if (lp < -700.0) return 0.0;
          const double w = std::exp(lp);
          return with_f ? w * f(std::span<const double>(q, 2)) : w;
        },
        r.lo[1], r.hi[1], kTol);
  };
  const double z = integrate1([&](double x1) { return inner(x1, false); }, r.lo[0], r.hi[0], kTol);
  const double m = integrate1([&](double x1) { return inner(x1, true); }, r.lo[0], r.hi[0], kTol);
  if (!(z > 0.0) || !std::isfinite(m)) throw NumericalError(kModule, "quadrature failed");
  return m / z;
}

std::vector<double> quadrature_moments(const MarginalDensity& density,
                                       const std::vector<int>& powers, std::size_t coord) {
  if (coord >= density.dim) throw ValidationError(kModule, "coordinate out of range");
  const Region r = locate_mass(density);
  constexpr double kTol = 1e-12;
  std::vector<double> out;
  if (density.dim == 1) {
    auto weight = [&](double x) {
      const double lp = density.log_density(std::span<const double>(&x, 1)) - r.log_max;
      return lp < -700.0 ? 0.0 : std::exp(lp);
    };
    const double z = integrate1(weight, r.lo[0], r.hi[0], kTol);
    if (!(z > 0.0)) throw NumericalError(kModule, "density integrates to zero");
    for (int p : powers) {
      const double m =
          integrate1([&](double x) { return weight(x) * std::pow(x, p); }, r.lo[0], r.hi[0], kTol);
      out.push_back(m / z);
    }
    return out;
  }
  for (int p : powers) {
    out.push_back(quadrature_expectation(
        density, [p, coord](std::span<const double> q) { return std::pow(q[coord], p); }));
  }
  return out;
}

std::vector<double> quadrature_moments(const ModelSpec& model, const ParameterVector& theta,
                                       const std::vector<int>& powers, std::size_t coord) {
  model.validate_parameters(theta);
  return quadrature_moments(model.quadrature_density(theta), powers, coord);
}

// ---------------------------------------------------------------------------
// Response ansatz

Eigen::MatrixXd ResponseAnsatz::companion() const {
  const auto m = static_cast<Eigen::Index>(order);
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(m, m);
  g.col(0) = beta;
  for (Eigen::Index i = 0; i + 1 < m; ++i) g(i, i + 1) = 1.0;
  return g;
}

double ResponseAnsatz::eval(double t) const {
  const Eigen::MatrixXd e = (companion() * t).exp();
  return e.row(0).dot(alpha);
}

namespace {

struct ProjectedFit {
  Eigen::VectorXd alpha;
  Eigen::VectorXd residual;
  double condition = 0.0;
};

Eigen::MatrixXd design(const Eigen::VectorXd& beta, const std::vector<double>& lags) {
  const auto m = beta.size();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(m, m);
  g.col(0) = beta;
  for (Eigen::Index i = 0; i + 1 < m; ++i) g(i, i + 1) = 1.0;
  Eigen::MatrixXd phi(static_cast<Eigen::Index>(lags.size()), m);
  for (std::size_t i = 0; i < lags.size(); ++i) {
    const Eigen::MatrixXd e = (g * lags[i]).exp();
    phi.row(static_cast<Eigen::Index>(i)) = e.row(0);
  }
  return phi;
}

// For fixed beta the ansatz is linear in alpha.
ProjectedFit project(const Eigen::VectorXd& beta, const std::vector<double>& lags,
                     const Eigen::VectorXd& y) {
  ProjectedFit fit;
  const Eigen::MatrixXd phi = design(beta, lags);
  if (!phi.allFinite()) {
    fit.residual = Eigen::VectorXd::Constant(y.size(), std::numeric_limits<double>::infinity());
    fit.alpha = Eigen::VectorXd::Zero(beta.size());
    fit.condition = std::numeric_limits<double>::infinity();
    return fit;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(phi, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  fit.condition = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1)
                                          : std::numeric_limits<double>::infinity();
  fit.alpha = svd.solve(y);
  fit.residual = y - phi * fit.alpha;
  return fit;
}

// Prony step on a uniform grid: linear prediction gives the poles, which give
// the characteristic polynomial and hence beta.
Eigen::VectorXd initial_beta(const std::vector<double>& lags, const Eigen::VectorXd& y, int order) {
  const auto m = static_cast<Eigen::Index>(order);
  const auto k = static_cast<Eigen::Index>(lags.size());
  const double step = lags.size() > 1 ? lags[1] - lags[0] : 1.0;
  bool uniform = lags.size() > 1;
  for (std::size_t i = 2; i < lags.size() && uniform; ++i) {
    uniform = std::abs((lags[i] - lags[i - 1]) - step) <= 1e-9 * step;
  }
  std::vector<std::complex<double>> poles;
  if (uniform && k - m >= m) {
    Eigen::MatrixXd a(k - m, m);
    Eigen::VectorXd rhs(k - m);
    for (Eigen::Index r = 0; r < k - m; ++r) {
      for (Eigen::Index j = 0; j < m; ++j) a(r, j) = y(r + m - 1 - j);
      rhs(r) = y(r + m);
    }
    const Eigen::VectorXd c = a.colPivHouseholderQr().solve(rhs);
    if (c.allFinite()) {
      // z^m - c_1 z^{m-1} - ... - c_m, coefficients in increasing degree.
      Eigen::VectorXd poly(m + 1);
      for (Eigen::Index j = 0; j < m; ++j) poly(j) = -c(m - 1 - j);
      poly(m) = 1.0;
      Eigen::PolynomialSolver<double, Eigen::Dynamic> solver;
      solver.compute(poly);
      for (Eigen::Index j = 0; j < m; ++j) {
        std::complex<double> z = solver.roots()(j);
        if (std::abs(z) < 1e-12) z = 1e-12;
        poles.push_back(std::log(z) / step);
      }
    }
  }
  if (poles.empty()) {
    const double span = std::max(lags.back(), 1e-12);
    for (Eigen::Index j = 0; j < m; ++j) poles.emplace_back(-(static_cast<double>(j) + 1.0) / span, 0.0);
  }
  // prod (s - lambda_j) = s^m + p_1 s^{m-1} + ... + p_m, beta_i = -p_i.
  std::vector<std::complex<double>> coeff{1.0};
  for (const auto& lam : poles) {
    std::vector<std::complex<double>> next(coeff.size() + 1, 0.0);
    for (std::size_t i = 0; i < coeff.size(); ++i) {
      next[i] += coeff[i];
      next[i + 1] -= lam * coeff[i];
    }
    coeff = std::move(next);
  }
  Eigen::VectorXd beta(m);
  for (Eigen::Index i = 0; i < m; ++i) beta(i) = -coeff[static_cast<std::size_t>(i + 1)].real();
  return beta;
}

}  // namespace

ResponseAnsatz fit_response_ansatz(const std::vector<double>& lags,
                                   const std::vector<double>& values, int order) {
  if (order < 1) throw ValidationError(kModule, "ansatz order must be at least 1");
  if (lags.size() != values.size()) throw ValidationError(kModule, "lags and values differ in length");
  if (lags.size() < 2 * static_cast<std::size_t>(order)) {
    throw ValidationError(kModule, "order-" + std::to_string(order) + " ansatz needs at least " +
                                       std::to_string(2 * order) + " lags");
  }
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(values.data(),
                                                              static_cast<Eigen::Index>(values.size()));
  const double ynorm = std::max(y.norm(), std::numeric_limits<double>::min());

  Eigen::VectorXd beta = initial_beta(lags, y, order);
  ProjectedFit fit = project(beta, lags, y);
  double cost = fit.residual.squaredNorm();

  // Levenberg-Marquardt over beta with alpha eliminated.
  double damping = 1e-3;
  for (int iter = 0; iter < 300 && cost > 1e-30 * ynorm * ynorm; ++iter) {
    const auto m = beta.size();
    Eigen::MatrixXd jac(y.size(), m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const double step = 1e-6 * std::max(1.0, std::abs(beta(j)));
      Eigen::VectorXd bp = beta, bm = beta;
      bp(j) += step;
      bm(j) -= step;
      jac.col(j) = (project(bp, lags, y).residual - project(bm, lags, y).residual) / (2.0 * step);
    }
    if (!jac.allFinite()) break;
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd jtr = jac.transpose() * fit.residual;
    bool improved = false;
    for (int tries = 0; tries < 20; ++tries) {
      Eigen::MatrixXd lhs = jtj;
      lhs.diagonal() += damping * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::VectorXd delta = lhs.ldlt().solve(-jtr);
      if (!delta.allFinite()) {
        damping *= 10.0;
        continue;
      }
      const Eigen::VectorXd trial = beta + delta;
      ProjectedFit trial_fit = project(trial, lags, y);
      const double trial_cost = trial_fit.residual.squaredNorm();
      if (trial_cost < cost) {
        const double gain = cost - trial_cost;
        beta = trial;
        fit = std::move(trial_fit);
        cost = trial_cost;
        damping = std::max(damping / 3.0, 1e-12);
        improved = gain > 1e-14 * cost;
        break;
      }
      damping *= 10.0;
    }
    if (!improved) break;
  }

  ResponseAnsatz out;
  out.order = order;
  out.beta = beta;
  out.alpha = fit.alpha;
  out.relative_residual = std::sqrt(cost) / ynorm;
  out.condition = fit.condition;
  if (!(fit.condition < 1e8)) {
    std::ostringstream msg;
    msg << "ill-conditioned ansatz fit (condition number " << fit.condition << ")";
    out.warning = msg.str();
  }
  return out;
}

ResponseAnsatz fit_response_ansatz(const EssentialStatistics& es, int order, std::size_t a,
                                   std::size_t b) {
  return fit_response_ansatz(es.lags, es.series(a, b), order);
}

// ---------------------------------------------------------------------------
// CSV

void write_statistics_csv(const std::string& path, const EssentialStatistics& es,
                          const DerivativeEstimate* derivative) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
  os << std::setprecision(17);
  os << "kind,lag,row,col,value,stderr\n";
  for (std::size_t l = 0; l < es.lags.size(); ++l) {
    const auto& v = es.values[l];
    const auto& e = es.stderrs[l];
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < v.cols(); ++j) {
        os << "value," << es.lags[l] << ',' << i << ',' << j << ',' << v(i, j) << ',' << e(i, j) << '\n';
      }
    }
  }
  if (derivative != nullptr) {
    for (Eigen::Index i = 0; i < derivative->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < derivative->value.cols(); ++j) {
        os << "derivative,0," << i << ',' << j << ',' << derivative->value(i, j) << ','
           << derivative->std_error(i, j) << '\n';
      }
    }
  }
  nlohmann::ordered_json meta;
  meta["a"] = es.a_ids;
  meta["b"] = es.b_ids;
  meta["samples"] = es.samples;
  meta["lags"] = es.lags;
  if (derivative != nullptr) meta["derivative_stencil"] = derivative->stencil;
  std::ofstream ms(path + ".json", std::ios::trunc);
  ms << meta.dump(2) << '\n';
  if (!os || !ms) throw IoError(kModule, "write failed for '" + path + "'");
}

EssentialStatistics read_statistics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(kModule, "cannot open statistics '" + path + "'");
  std::string line;
  std::getline(is, line);
  if (line != "kind,lag,row,col,value,stderr") {
    throw IoError(kModule, "'" + path + "' has an unexpected header");
  }
  struct Row {
    double lag;
    long i, j;
    double v, e;
  };
  std::vector<Row> rows;
  long max_i = -1, max_j = -1;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string kind, f;
    std::getline(ss, kind, ',');
    if (kind != "value") continue;
    Row r{};
    try {
      std::getline(ss, f, ',');
      r.lag = std::stod(f);
      std::getline(ss, f, ',');
      r.i = std::stol(f);
      std::getline(ss, f, ',');
      r.j = std::stol(f);
      std::getline(ss, f, ',');
      r.v = std::stod(f);
      std::getline(ss, f, ',');
      r.e = std::stod(f);
    } catch (const std::exception&) {
      throw IoError(kModule, "'" + path + "' line " + std::to_string(lineno) + " is malformed");
    }
    max_i = std::max(max_i, r.i);
    max_j = std::max(max_j, r.j);
    rows.push_back(r);
  }
  EssentialStatistics es;
  for (const auto& r : rows) {
    if (es.lags.empty() || r.lag != es.lags.back()) {
      es.lags.push_back(r.lag);
      es.values.emplace_back(Eigen::MatrixXd::Zero(max_i + 1, max_j + 1));
      es.stderrs.emplace_back(Eigen::MatrixXd::Zero(max_i + 1, max_j + 1));
    }
    es.values.back()(r.i, r.j) = r.v;
    es.stderrs.back()(r.i, r.j) = r.e;
  }
  std::ifstream ms(path + ".json");
  if (ms) {
    try {
      const auto meta = nlohmann::json::parse(ms);
      es.a_ids = meta.at("a").get<std::vector<std::string>>();
      es.b_ids = meta.at("b").get<std::vector<std::string>>();
      es.samples = meta.at("samples").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(kModule, "bad metadata '" + path + ".json': " + e.what());
    }
  }
  return es;
}

}  // namespace respfit
