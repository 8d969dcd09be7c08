#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "respfit/models.hpp"
#include "respfit/sde.hpp"

namespace respfit {

/// Scalar function of the state.
struct Observable {
  std::string id;
  std::function<double(std::span<const double>)> eval;
};

Observable coordinate(std::size_t i);
/// Component i of the conjugate variable B for forcing direction c.
Observable conjugate_observable(std::shared_ptr<const ModelSpec> model, ParameterVector theta,
                                std::vector<double> c, std::size_t i);

/// Increasing non-negative lags, each an integer number of trajectory steps.
class LagGrid {
 public:
  LagGrid() = default;
  LagGrid(std::vector<double> lags, double h);
  /// t_i = offset + spacing * i, i = 1..count.
  static LagGrid uniform(std::size_t count, double spacing, double offset, double h);

  std::size_t size() const { return lags_.size(); }
  const std::vector<double>& lags() const { return lags_; }
  const std::vector<std::size_t>& steps() const { return steps_; }
  double h() const { return h_; }

 private:
  std::vector<double> lags_;
  std::vector<std::size_t> steps_;
  double h_ = 0.0;
};

/// kForward estimates E[A(X(s+t)) B(X(s))]; kReversed pairs the other way,
/// E[A(X(s)) B(X(s+t))], which is the same statistic at lag -t.
enum class Pairing { kForward, kReversed };

/// Two-point statistics on a lag grid: values[l](a, b) for observable A_a and B_b.
struct EssentialStatistics {
  std::vector<std::string> a_ids;
  std::vector<std::string> b_ids;
  std::vector<double> lags;
  std::vector<Eigen::MatrixXd> values;
  std::vector<Eigen::MatrixXd> stderrs;
  std::size_t samples = 0;

  /// Flattened residual-order vector of entry (a, b) over the lags.
  std::vector<double> series(std::size_t a, std::size_t b) const;
  std::vector<double> series_stderr(std::size_t a, std::size_t b) const;
};

/// Time-average estimator with non-overlapping batch-mean standard errors
/// (ceil(sqrt(P)) batches for P pairs).
EssentialStatistics two_point_correlation(const Trajectory& traj,
                                          const std::vector<Observable>& a,
                                          const std::vector<Observable>& b, const LagGrid& grid,
                                          Pairing pairing = Pairing::kForward);

struct DerivativeEstimate {
  Eigen::MatrixXd value;
  Eigen::MatrixXd std_error;
  /// Entry flagged when its standard error exceeds its magnitude.
  Eigen::MatrixXi low_confidence;
  int stencil = 2;
  bool any_low_confidence() const { return low_confidence.any(); }
};

/// One-sided right derivative at 0 on the trajectory lag h.
/// stencil 2: (C(h) - C(0)) / h.  stencil 3: (-3 C(0) + 4 C(h) - C(2h)) / (2h),
/// which equals Richardson extrapolation of the 2-point rule over h and 2h.
/// All lags share one range of start times.
DerivativeEstimate derivative_at_zero_plus(const Trajectory& traj,
                                           const std::vector<Observable>& a,
                                           const std::vector<Observable>& b, int stencil = 2);

/// Central-difference derivative of the statistic at the grid lags (interior
/// of the trajectory's own lag spacing).
EssentialStatistics derivative_at_lags(const Trajectory& traj, const std::vector<Observable>& a,
                                       const std::vector<Observable>& b, const LagGrid& grid);

struct MomentEstimate {
  int power = 0;
  double value = 0.0;
  double std_error = 0.0;
};

/// Time averages of x_coord^p with batch-mean errors.
std::vector<MomentEstimate> equilibrium_moments(const Trajectory& traj, std::size_t coord,
                                                const std::vector<int>& powers);
/// Time average of an arbitrary observable.
MomentEstimate time_average(const Trajectory& traj, const Observable& obs);

/// Mean and batch-mean standard error of a series.
MomentEstimate batch_mean(std::span<const double> series);

/// E[x_coord^p] under the density by adaptive quadrature on the region where
/// log p >= max log p - 40.
std::vector<double> quadrature_moments(const MarginalDensity& density,
                                       const std::vector<int>& powers, std::size_t coord = 0);
std::vector<double> quadrature_moments(const ModelSpec& model, const ParameterVector& theta,
                                       const std::vector<int>& powers, std::size_t coord = 0);
/// E[f] under a 1-D or 2-D density.
double quadrature_expectation(const MarginalDensity& density,
                              const std::function<double(std::span<const double>)>& f);

/// Scalar order-m ansatz g(t) = e_1^T exp(t G) alpha with companion G whose
/// first column is beta. Its Laplace transform is
/// (alpha_1 s^{m-1} + ... + alpha_m) / (s^m - beta_1 s^{m-1} - ... - beta_m).
struct ResponseAnsatz {
  int order = 0;
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  double relative_residual = 0.0;
  double condition = 0.0;
  std::string warning;

  Eigen::MatrixXd companion() const;
  double eval(double t) const;
};

/// Least-squares fit of the ansatz to entry (a, b) of the statistics.
/// Diagnostic only; the estimation pipelines do not use it.
ResponseAnsatz fit_response_ansatz(const EssentialStatistics& es, int order, std::size_t a = 0,
                                   std::size_t b = 0);
ResponseAnsatz fit_response_ansatz(const std::vector<double>& lags,
                                   const std::vector<double>& values, int order);

// CSV contract between stats and the estimation stages:
//   kind,lag,row,col,value,stderr   (kind = "value" or "derivative")
void write_statistics_csv(const std::string& path, const EssentialStatistics& es,
                          const DerivativeEstimate* derivative = nullptr);
EssentialStatistics read_statistics_csv(const std::string& path);

}  // namespace respfit
