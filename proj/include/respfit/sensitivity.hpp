#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "respfit/models.hpp"
#include "respfit/sde.hpp"
#include "respfit/surrogate.hpp"

namespace respfit {

/// Spread of the training statistics along each parameter axis.
struct SpreadReport {
  std::vector<std::string> names;
  std::vector<double> lags;
  /// spread[axis][i]: max - min of statistic i over the nodes that vary
  /// `axis` with every other axis at its middle node.
  std::vector<std::vector<double>> spread;
  /// Largest training standard error among those nodes, per axis.
  std::vector<double> noise;
  /// Axis whose largest spread is below twice the noise level.
  std::vector<bool> non_identifiable;
};

/// values: one row per design node, one column per statistic.
SpreadReport apriori_spread(const CollocationDesign& design, const Eigen::MatrixXd& values,
                            const Eigen::MatrixXd& stderrs = {},
                            const std::vector<double>& lags = {});

struct PathwiseConfig {
  std::size_t ensemble = 3000;
  double horizon = 20.0;
  double dt = 2e-3;
  std::size_t record_every = 10;
  Scheme scheme = Scheme::kLangevinSplitting;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::optional<std::vector<double>> initial_state;
};

/// Ensemble statistics of Y(t) = dX(t)/d theta_k, per state component.
struct SensitivityReport {
  std::string parameter;
  std::vector<double> times;
  std::size_t ensemble = 0;
  std::vector<std::vector<double>> mean;       // [component][time], E[Y]
  std::vector<std::vector<double>> abs_mean;   // |E[Y]|
  std::vector<std::vector<double>> mean_abs;   // E[|Y|]
  /// Largest |Y - Y(0)| seen on any path, per component.
  std::vector<double> max_deviation;
};

/// Integrates dY/dt = b_X(X) Y + b_theta(X) along each simulated path by RK4,
/// with X linearly interpolated inside a step; Y(0) = dX(0)/d theta_k.
/// Requires the model's derivatives and a parameter that does not enter the
/// noise (sigma_theta = 0) on an additive-noise model.
SensitivityReport pathwise_derivative(const ModelSpec& model, const ParameterVector& theta,
                                      std::size_t parameter, const PathwiseConfig& cfg);

void write_spread_csv(const std::string& path, const SpreadReport& r);
void write_sensitivity_csv(const std::string& path, const std::vector<SensitivityReport>& reports,
                           std::size_t component);

}  // namespace respfit
