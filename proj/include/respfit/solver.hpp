#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "respfit/surrogate.hpp"

namespace respfit {

struct GaussNewtonConfig {
  double step_tolerance = 1e-8;   // cube units
  int max_iterations = 100;
  double damping_floor = 1e-10;   // smallest Levenberg parameter, relative to trace(J^T J)/N
  double damping_condition = 1e12;
  std::size_t starts = 300;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

void validate_config(const GaussNewtonConfig& cfg);

struct StartRecord {
  std::vector<double> start;   // physical
  std::vector<double> final_theta;
  double path_length = 0.0;    // cube units
  double residual_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool boundary_hit = false;        // some iterate was projected onto the box
  bool ended_on_boundary = false;   // the final iterate lies on a face
  bool damped = false;
};

/// Gauss-Newton from a physical start with a backtracking (Armijo) line
/// search. Levenberg damping is used when the normal matrix has condition
/// number above cfg.damping_condition, and for the rest of the run once a line
/// search has cut a step below an eighth of its length. Damped steps are
/// accepted only if they do not increase the residual; five rejections in a
/// row end the run unconverged. Converged means the full step is shorter
/// than cfg.step_tolerance.
StartRecord gauss_newton(const Surrogate& s, std::span<const double> theta0,
                         const GaussNewtonConfig& cfg);

struct EstimationResult {
  std::vector<std::string> names;
  std::vector<StartRecord> records;
  std::vector<bool> inlier;
  std::vector<double> estimate;   // inlier mean
  std::vector<double> median;     // componentwise median of inliers
  std::size_t converged = 0;
  std::size_t inliers = 0;
  /// Every converged start ended on the boundary, so the boundary finals
  /// were used as candidates.
  bool boundary_fallback = false;
  RankReport rank;
};

/// Inlier rule: converged, final iterate not on the boundary, and every
/// component within max(3 * 1.4826 * MAD, 1e-6) cube units of the
/// componentwise median of such finals. When no converged start ends off the
/// boundary, the converged boundary finals are the candidates instead.
std::vector<bool> classify_inliers(const Surrogate& s, const std::vector<StartRecord>& records,
                                   bool* boundary_fallback = nullptr);

/// Gauss-Newton from cfg.starts uniform random starts in the box.
EstimationResult multistart(const Surrogate& s, const GaussNewtonConfig& cfg);
/// Same, from given physical starts.
EstimationResult multistart(const Surrogate& s, const std::vector<std::vector<double>>& starts,
                            const GaussNewtonConfig& cfg);

void write_estimation_json(const std::string& path, const EstimationResult& r);
void write_starts_csv(const std::string& path, const EstimationResult& r);

}  // namespace respfit
