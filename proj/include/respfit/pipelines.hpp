#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "respfit/models.hpp"
#include "respfit/sde.hpp"
#include "respfit/solver.hpp"
#include "respfit/stats.hpp"
#include "respfit/surrogate.hpp"

namespace respfit {

// ---------------------------------------------------------------------------
// Direct reductions

struct LangevinReduction {
  double kbt = 0.0;
  double kbt_stderr = 0.0;
  double gamma = 0.0;
  double gamma_stderr = 0.0;
  double slope = 0.0;          // d/dt E[v(t) v(0)] at 0+
  double slope_stderr = 0.0;
  bool low_confidence = false;
  int stencil = 3;
};

/// kBT = Var(v), gamma = -slope / kBT.
LangevinReduction langevin_reduce(const Trajectory& data, int stencil = 3);

struct TripleWellReduction {
  double kbt = 0.0;
  double kbt_stderr = 0.0;
  double d = 0.0;
  double d_stderr = 0.0;
  Eigen::MatrixXd slope;      // m'_{i,j}(0+), entry (i, j) for E[x_i(t) x_j(0)]
  Eigen::MatrixXd slope_stderr;
  bool low_confidence = false;
  int stencil = 3;
};

/// kBT = -m'_{1,1}(0+), d = -m'_{2,1}(0+) / kBT.
TripleWellReduction triplewell_reduce(const Trajectory& data, int stencil = 3);

// ---------------------------------------------------------------------------
// Conventional moment matching for the Langevin model

struct PositionMoments {
  double mean = 0.0;
  double variance = 0.0;
  double third = 0.0;  // raw E[x^3]
};

PositionMoments sample_position_moments(const Trajectory& data);
/// Moments of x under exp(-U(x)/kBT) for the Morse potential with (eps, a, x0).
PositionMoments model_position_moments(double kbt, double eps, double a, double x0);

/// Scale and shift that match the mean and variance for a given eps.
struct ScaleShift {
  double a = 0.0;
  double x0 = 0.0;
};
ScaleShift match_scale_shift(double kbt, double eps, double mean, double variance);

struct ConventionalEstimate {
  double eps = 0.0;
  double a = 0.0;
  double x0 = 0.0;
  double scan_lo = 0.0;
  double scan_hi = 0.0;
  std::vector<double> roots;  // every root found in the scan, ascending
};

/// Solves E[x^3](eps, a(eps), x0(eps)) = third by a bracket scan on
/// [eps_lo, eps_hi] followed by TOMS 748. When several roots are bracketed
/// the largest is returned.
ConventionalEstimate langevin_conventional(const PositionMoments& data, double kbt,
                                           double eps_lo = 0.02, double eps_hi = 2.0);
ConventionalEstimate langevin_conventional(const Trajectory& data, double kbt,
                                           double eps_lo = 0.02, double eps_hi = 2.0);

/// Sensitivities of the third moment at (kbt, eps, a, x0) by central differences:
/// d/dkBT with (eps, a, x0) fixed, and d/deps along a(eps), x0(eps) when the
/// data mean and variance are the exact ones at the base point.
struct ConventionalDerivatives {
  double third_by_kbt = 0.0;
  double third_by_eps = 0.0;
};
ConventionalDerivatives conventional_derivatives(double kbt, double eps, double a, double x0,
                                                 double rel_step = 1e-4);

// ---------------------------------------------------------------------------
// Surrogate pipelines

struct SimulationSpec {
  Scheme scheme = Scheme::kEulerMaruyama;
  double h = 1e-3;
  double dt = 0.0;
  double burn_in = -1.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  IntegratorConfig integrator(std::uint64_t seed_override) const;
};

struct LagSpec {
  std::size_t count = 20;
  double spacing = 0.1;
  double offset = 0.0;
};

/// Where pipelines write artifacts; with resume, cached trajectories and
/// training values are reused when present.
struct ArtifactStore {
  std::string dir;
  bool resume = false;
  bool enabled() const { return !dir.empty(); }
};

struct PipelineConfig {
  std::string model;                    // "langevin_morse" or "triple_well"
  std::vector<double> truth;            // full parameter vector used for the data
  SimulationSpec data;
  SimulationSpec training;
  bool common_random_numbers = true;    // same seed at every node
  LagSpec lags;
  int order = 4;
  std::size_t nodes_per_axis = 5;
  ParameterBox box;                     // over the surrogate parameters
  double x0_fixed = 0.0;                // Langevin only
  GaussNewtonConfig solver;
  int stencil = 3;
  unsigned threads = 1;
};

void validate_pipeline_config(const PipelineConfig& cfg);

struct TrainingSet {
  CollocationDesign design;
  Eigen::MatrixXd values;    // nodes x K
  Eigen::MatrixXd stderrs;
};

/// The data trajectory at cfg.truth (reused from the store on resume).
Trajectory pipeline_data(const PipelineConfig& cfg, const ArtifactStore& store = {});

/// Training statistics at the collocation nodes, with the directly reduced
/// parameters held at the given values.
TrainingSet langevin_training(const PipelineConfig& cfg, double kbt, double gamma,
                              const ArtifactStore& store = {});
TrainingSet triplewell_training(const PipelineConfig& cfg, double d, double kbt,
                                const ArtifactStore& store = {});

struct LangevinPipelineResult {
  LangevinReduction reduction;
  PositionMoments moments;
  EssentialStatistics data_statistics;
  TrainingSet training;
  Surrogate surrogate;
  EstimationResult estimation;
  double eps = 0.0;
  double a_surrogate = 0.0;   // the solver's own a
  double a = 0.0;             // a(eps) from the moment relations
  double x0 = 0.0;
  std::optional<ConventionalEstimate> conventional;
  std::string conventional_error;  // set when the moment equation has no root
};

LangevinPipelineResult langevin_response_pipeline(const PipelineConfig& cfg,
                                                  const ArtifactStore& store = {});

/// The surrogate stage alone with kBT and gamma supplied, for probing how the
/// (eps, a) estimate reacts to errors in the reduced parameters.
EstimationResult langevin_surrogate_fit(const PipelineConfig& cfg, const Trajectory& data,
                                        double kbt, double gamma);

struct TripleWellPipelineResult {
  TripleWellReduction reduction;
  EssentialStatistics data_statistics;
  TrainingSet training;
  Surrogate surrogate;
  EstimationResult estimation;
  double a = 0.0;
  double gamma = 0.0;
};

TripleWellPipelineResult triplewell_response_pipeline(const PipelineConfig& cfg,
                                                      const ArtifactStore& store = {});

/// Normalized-curve comparison at two parameter values: both curves are
/// divided by their t = 0 value and the sup-norm difference is reported.
struct RecoveryCheck {
  std::vector<double> lags;
  std::vector<double> reference;
  std::vector<double> estimate;
  double sup_difference = 0.0;
};
RecoveryCheck compare_normalized(const ModelSpec& model, const ParameterVector& reference,
                                 const ParameterVector& estimate, const SimulationSpec& sim,
                                 const Observable& a, const Observable& b_reference,
                                 const Observable& b_estimate, const LagGrid& grid);

}  // namespace respfit
