#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "respfit/models.hpp"

namespace respfit {

enum class Scheme { kEulerMaruyama, kLangevinSplitting, kWeakTrapezoidal };

std::string scheme_name(Scheme s);
Scheme parse_scheme(const std::string& name);

struct IntegratorConfig {
  Scheme scheme = Scheme::kEulerMaruyama;
  double h = 1e-3;         // output lag
  double dt = 0.0;         // internal step; 0 means dt = h
  double burn_in = -1.0;   // negative selects the default
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  std::optional<std::vector<double>> initial_state;  // model default when empty
  /// Selects an independent substream of `seed`; ensembles use one per member.
  std::optional<std::uint64_t> stream;
};

/// Throws ValidationError naming the offending field.
void validate_config(const IntegratorConfig& cfg);
double effective_dt(const IntegratorConfig& cfg);
/// Internal steps per output lag.
std::size_t steps_per_sample(const IntegratorConfig& cfg);
/// max(10% of the sampled span, 100 relaxation times) unless set explicitly.
double effective_burn_in(const ModelSpec& model, const ParameterVector& theta,
                         const IntegratorConfig& cfg);

/// Uniformly sampled path, row-major samples x dim.
struct Trajectory {
  std::size_t dim = 0;
  std::vector<double> data;
  double h = 0.0;
  double dt = 0.0;
  double burn_in = 0.0;
  ParameterVector theta;
  std::string model_id;
  std::uint64_t seed = 0;
  Scheme scheme = Scheme::kEulerMaruyama;

  std::size_t samples() const { return dim == 0 ? 0 : data.size() / dim; }
  double at(std::size_t k, std::size_t i) const { return data[k * dim + i]; }
  std::span<const double> row(std::size_t k) const { return {data.data() + k * dim, dim}; }
  std::vector<double> column(std::size_t i) const;
};

using Rng = std::mt19937_64;

/// Generator for (seed) or for substream (seed, stream).
Rng make_rng(std::uint64_t seed, std::optional<std::uint64_t> stream = std::nullopt);

/// One-step map for a fixed (model, theta, scheme, dt). Stateless apart from
/// scratch space; not thread-safe, create one per thread.
class Stepper {
 public:
  Stepper(const ModelSpec& model, const ParameterVector& theta, Scheme scheme, double dt);

  /// Advances x by one internal step, drawing normals from rng in a fixed order.
  void step(std::span<double> x, Rng& rng);
  /// Same step, with the standard normals supplied (noise_count() of them).
  void step_with(std::span<double> x, std::span<const double> normals);
  std::size_t noise_count() const { return noise_count_; }

 private:
  void euler(std::span<double> x, std::span<const double> xi);
  void splitting(std::span<double> x, std::span<const double> xi);
  void trapezoidal(std::span<double> x, std::span<const double> xi);

  const ModelSpec& model_;
  const LangevinModel* langevin_ = nullptr;
  ParameterVector theta_;
  Scheme scheme_;
  double dt_;
  std::size_t n_, w_, noise_count_;
  std::vector<double> b0_, b1_, sig0_, sig1_, tmp_, normals_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Burn-in from the initial state, then `samples` states every h.
Trajectory simulate(const ModelSpec& model, const ParameterVector& theta,
                    const IntegratorConfig& cfg);

/// Two runs sharing one noise realization (same seed, same increments).
std::pair<Trajectory, Trajectory> simulate_pair_common_noise(
    const ModelSpec& model, const ParameterVector& theta_first,
    const ParameterVector& theta_second, const IntegratorConfig& cfg,
    const std::vector<double>& initial_first, const std::vector<double>& initial_second);

std::pair<Trajectory, Trajectory> simulate_pair_common_noise(
    const ModelSpec& model, const ParameterVector& theta, const IntegratorConfig& cfg,
    const std::vector<double>& initial_first, const std::vector<double>& initial_second);

// Persistence: <path> holds a 64-byte header and little-endian f64 rows,
// <path>.json holds the metadata.
void write_trajectory(const std::string& path, const Trajectory& traj);
Trajectory read_trajectory(const std::string& path);
void write_trajectory_csv(const std::string& path, const Trajectory& traj);

}  // namespace respfit
