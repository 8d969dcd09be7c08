#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace respfit {

/// Named parameter values in physical units.
class ParameterVector {
 public:
  ParameterVector() = default;
  ParameterVector(std::vector<std::string> names, std::vector<double> values);

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  /// Value by name; throws ValidationError for an unknown name.
  double at(const std::string& name) const;
  void set(const std::string& name, double value);
  std::size_t index_of(const std::string& name) const;
  bool has(const std::string& name) const;

  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<double> values_;
};

/// Axis-aligned box with the affine map to and from the canonical cube [-1,1]^N.
class ParameterBox {
 public:
  ParameterBox() = default;
  ParameterBox(std::vector<double> lower, std::vector<double> upper,
               std::vector<std::string> names = {});

  std::size_t size() const noexcept { return lower_.size(); }
  const std::vector<double>& lower() const noexcept { return lower_; }
  const std::vector<double>& upper() const noexcept { return upper_; }
  const std::vector<std::string>& names() const noexcept { return names_; }

  bool contains(std::span<const double> physical, double rel_tol = 0.0) const;

  std::vector<double> to_cube(std::span<const double> physical) const;
  std::vector<double> from_cube(std::span<const double> cube) const;

  /// d(physical_i)/d(cube_i); the map is diagonal.
  double scale(std::size_t i) const { return 0.5 * (upper_[i] - lower_[i]); }
  double center(std::size_t i) const { return 0.5 * (upper_[i] + lower_[i]); }

  friend bool operator==(const ParameterBox&, const ParameterBox&) = default;

 private:
  std::vector<double> lower_;
  std::vector<double> upper_;
  std::vector<std::string> names_;
};

/// A log density (up to a constant) in d <= 2 variables, with a hint for where
/// its mass sits. Used by quadrature.
struct MarginalDensity {
  std::size_t dim = 1;
  std::function<double(std::span<const double>)> log_density;
  std::vector<double> center;
  std::vector<double> scale;
};

/// A parametrized Ito diffusion dX = b(X;theta) dt + sigma(X;theta) dW.
///
/// Matrices are passed row-major through spans. Implementations are immutable
/// and all evaluation methods are pure, so one instance can be shared across
/// threads. Optional capabilities (equilibrium density, analytic derivatives)
/// throw UnsupportedCapability unless the corresponding has_*() is true.
class ModelSpec {
 public:
  virtual ~ModelSpec() = default;

  virtual std::string id() const = 0;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t noise_dim() const = 0;
  virtual std::vector<std::string> parameter_names() const = 0;
  /// Admissible physical parameter values.
  virtual ParameterBox parameter_domain() const = 0;

  virtual void drift(std::span<const double> x, const ParameterVector& theta,
                     std::span<double> out) const = 0;
  /// n x w matrix, row-major.
  virtual void diffusion(std::span<const double> x, const ParameterVector& theta,
                         std::span<double> out) const = 0;
  /// True when sigma does not depend on the state.
  virtual bool additive_noise() const { return false; }

  virtual std::vector<double> default_initial_state(const ParameterVector& theta) const;
  /// d X(0) / d theta_k for the default initial state.
  virtual std::vector<double> initial_state_derivative(const ParameterVector& theta,
                                                       std::size_t k) const;
  /// Rough slowest relaxation time, used to size the default burn-in.
  virtual double relaxation_time_hint(const ParameterVector& theta) const;

  // Equilibrium knowledge.
  virtual bool has_equilibrium() const { return false; }
  virtual double log_peq(std::span<const double> x, const ParameterVector& theta) const;
  /// -grad_x log p_eq.
  virtual void score(std::span<const double> x, const ParameterVector& theta,
                     std::span<double> out) const;
  /// Density used for quadrature moments (the configuration-space marginal).
  virtual MarginalDensity quadrature_density(const ParameterVector& theta) const;

  // Analytic derivatives for pathwise sensitivities.
  virtual bool has_derivatives() const { return false; }
  /// b_X, n x n row-major.
  virtual void drift_state_jacobian(std::span<const double> x, const ParameterVector& theta,
                                    std::span<double> out) const;
  /// b_theta for parameter k, length n.
  virtual void drift_parameter_derivative(std::span<const double> x,
                                          const ParameterVector& theta, std::size_t k,
                                          std::span<double> out) const;
  /// sigma_theta for parameter k, n x w row-major.
  virtual void diffusion_parameter_derivative(std::span<const double> x,
                                              const ParameterVector& theta, std::size_t k,
                                              std::span<double> out) const;

  /// Builds a ParameterVector with this model's names; throws on length mismatch.
  ParameterVector make_parameters(std::vector<double> values) const;
  /// Throws ValidationError unless theta has this model's names and lies in the domain.
  void validate_parameters(const ParameterVector& theta) const;
};

/// Underdamped Langevin dynamics with unit mass, state (x, v):
///   dx = v dt,  dv = (-U'(x) - gamma v) dt + sqrt(2 gamma kBT) dW.
class LangevinModel : public ModelSpec {
 public:
  std::size_t state_dim() const override { return 2; }
  std::size_t noise_dim() const override { return 1; }
  bool additive_noise() const override { return true; }

  virtual std::size_t gamma_index() const = 0;
  virtual std::size_t kbt_index() const = 0;
  double gamma(const ParameterVector& theta) const { return theta[gamma_index()]; }
  double kbt(const ParameterVector& theta) const { return theta[kbt_index()]; }

  virtual double potential(double x, const ParameterVector& theta) const = 0;
  virtual double potential_derivative(double x, const ParameterVector& theta) const = 0;
  virtual double potential_second_derivative(double x, const ParameterVector& theta) const = 0;
  /// d U'(x) / d theta_k for a potential parameter k.
  virtual double potential_derivative_parameter(double x, const ParameterVector& theta,
                                                std::size_t k) const = 0;

  void drift(std::span<const double> x, const ParameterVector& theta,
             std::span<double> out) const override;
  void diffusion(std::span<const double> x, const ParameterVector& theta,
                 std::span<double> out) const override;
  double relaxation_time_hint(const ParameterVector& theta) const override;

  bool has_equilibrium() const override { return true; }
  double log_peq(std::span<const double> x, const ParameterVector& theta) const override;
  void score(std::span<const double> x, const ParameterVector& theta,
             std::span<double> out) const override;
  MarginalDensity quadrature_density(const ParameterVector& theta) const override;

  bool has_derivatives() const override { return true; }
  void drift_state_jacobian(std::span<const double> x, const ParameterVector& theta,
                            std::span<double> out) const override;
  void drift_parameter_derivative(std::span<const double> x, const ParameterVector& theta,
                                  std::size_t k, std::span<double> out) const override;
  void diffusion_parameter_derivative(std::span<const double> x, const ParameterVector& theta,
                                      std::size_t k, std::span<double> out) const override;

 protected:
  /// Location and width of the position marginal, for quadrature.
  virtual double position_center(const ParameterVector& theta) const = 0;
  virtual double position_scale(const ParameterVector& theta) const = 0;
};

/// Morse potential with a quadratic retaining term:
///   U(x) = U0(a (x - x0)),  U0(y) = eps (exp(-2y) - 2 exp(-y) + 0.01 y^2).
/// Parameters, in order: gamma, kBT, eps, a, x0.
class LangevinMorseModel final : public LangevinModel {
 public:
  static constexpr double kRetaining = 0.01;

  std::string id() const override { return "langevin_morse"; }
  std::vector<std::string> parameter_names() const override;
  ParameterBox parameter_domain() const override;
  std::size_t gamma_index() const override { return 0; }
  std::size_t kbt_index() const override { return 1; }

  double potential(double x, const ParameterVector& theta) const override;
  double potential_derivative(double x, const ParameterVector& theta) const override;
  double potential_second_derivative(double x, const ParameterVector& theta) const override;
  double potential_derivative_parameter(double x, const ParameterVector& theta,
                                        std::size_t k) const override;

  std::vector<double> default_initial_state(const ParameterVector& theta) const override;
  std::vector<double> initial_state_derivative(const ParameterVector& theta,
                                               std::size_t k) const override;

  // Reference potential U0 and its derivatives in the scaled coordinate y.
  static double u0(double y, double eps);
  static double u0_prime(double y, double eps);
  static double u0_second(double y, double eps);

 protected:
  double position_center(const ParameterVector& theta) const override;
  double position_scale(const ParameterVector& theta) const override;
};

/// Non-reversible gradient flow dX = -C grad V(X) dt + sqrt(2 kBT) dW, with
/// p_eq proportional to exp(-V / kBT) whenever C + C^T is positive definite
/// and C - C^T is constant.
class GradientModel : public ModelSpec {
 public:
  std::size_t noise_dim() const override { return state_dim(); }
  bool additive_noise() const override { return true; }

  virtual std::size_t kbt_index() const = 0;
  double kbt(const ParameterVector& theta) const { return theta[kbt_index()]; }

  virtual double potential(std::span<const double> x, const ParameterVector& theta) const = 0;
  virtual void potential_gradient(std::span<const double> x, const ParameterVector& theta,
                                  std::span<double> out) const = 0;
  virtual void potential_hessian(std::span<const double> x, const ParameterVector& theta,
                                 std::span<double> out) const = 0;
  /// d grad V / d theta_k.
  virtual void potential_gradient_parameter(std::span<const double> x,
                                            const ParameterVector& theta, std::size_t k,
                                            std::span<double> out) const = 0;
  /// C, n x n row-major.
  virtual void mobility(const ParameterVector& theta, std::span<double> out) const = 0;
  virtual void mobility_parameter(const ParameterVector& theta, std::size_t k,
                                  std::span<double> out) const = 0;

  void drift(std::span<const double> x, const ParameterVector& theta,
             std::span<double> out) const override;
  void diffusion(std::span<const double> x, const ParameterVector& theta,
                 std::span<double> out) const override;

  bool has_equilibrium() const override { return true; }
  double log_peq(std::span<const double> x, const ParameterVector& theta) const override;
  void score(std::span<const double> x, const ParameterVector& theta,
             std::span<double> out) const override;

  bool has_derivatives() const override { return true; }
  void drift_state_jacobian(std::span<const double> x, const ParameterVector& theta,
                            std::span<double> out) const override;
  void drift_parameter_derivative(std::span<const double> x, const ParameterVector& theta,
                                  std::size_t k, std::span<double> out) const override;
  void diffusion_parameter_derivative(std::span<const double> x, const ParameterVector& theta,
                                      std::size_t k, std::span<double> out) const override;
};

/// Smooth compactly supported bump v(z) = 10 exp(1/(z^2 - a^2)) on (-a, a).
struct BumpValue {
  double value = 0.0;
  double dz = 0.0;    // dv/dz
  double dzz = 0.0;   // d2v/dz2
  double da = 0.0;    // dv/da at fixed z
  double dza = 0.0;   // d2v/dz da
};
BumpValue bump(double z, double a);

/// Two-dimensional triple-well gradient system with C = [[1, -d], [d, 1]].
/// Parameters, in order: d, a, kBT, gamma.
class TripleWellModel final : public GradientModel {
 public:
  static constexpr double kRetaining = 0.2;

  std::string id() const override { return "triple_well"; }
  std::size_t state_dim() const override { return 2; }
  std::vector<std::string> parameter_names() const override;
  ParameterBox parameter_domain() const override;
  std::size_t kbt_index() const override { return 2; }

  double potential(std::span<const double> x, const ParameterVector& theta) const override;
  void potential_gradient(std::span<const double> x, const ParameterVector& theta,
                          std::span<double> out) const override;
  void potential_hessian(std::span<const double> x, const ParameterVector& theta,
                         std::span<double> out) const override;
  void potential_gradient_parameter(std::span<const double> x, const ParameterVector& theta,
                                    std::size_t k, std::span<double> out) const override;
  void mobility(const ParameterVector& theta, std::span<double> out) const override;
  void mobility_parameter(const ParameterVector& theta, std::size_t k,
                          std::span<double> out) const override;

  MarginalDensity quadrature_density(const ParameterVector& theta) const override;
  std::vector<double> default_initial_state(const ParameterVector& theta) const override;
};

/// Model registry keyed by id ("langevin_morse", "triple_well").
std::shared_ptr<const ModelSpec> make_model(const std::string& id);

/// b(x; theta) with validation: theta in the domain, x finite, result finite.
std::vector<double> eval_drift(const ModelSpec& model, std::span<const double> x,
                               const ParameterVector& theta);

/// log p_eq(x; theta) up to an additive constant.
double eval_log_peq(const ModelSpec& model, std::span<const double> x,
                    const ParameterVector& theta);

/// FDT conjugate variable for a constant forcing direction c:
///   B_i(x) = -d_i(c_i p_eq) / p_eq = c_i * (-d_i log p_eq).
std::vector<double> conjugate_B(const ModelSpec& model, std::span<const double> x,
                                const ParameterVector& theta, std::span<const double> c);

/// max |b(x) + kBT * C * grad(-log p_eq)(x)| over the given points; zero for a
/// self-consistent gradient model.
double gradient_consistency_error(const GradientModel& model, const ParameterVector& theta,
                                  const std::vector<std::vector<double>>& points);

}  // namespace respfit
