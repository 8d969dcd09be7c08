#pragma once

// Independent reference models and formulas for the test suites.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "respfit/models.hpp"

namespace oracle {

using respfit::ParameterBox;
using respfit::ParameterVector;

/// Langevin dynamics in U(x) = stiffness * x^2 / 2. Parameters: gamma, kBT, stiffness.
class HarmonicLangevin final : public respfit::LangevinModel {
 public:
  std::string id() const override { return "harmonic_langevin"; }
  std::vector<std::string> parameter_names() const override { return {"gamma", "kBT", "stiffness"}; }
  ParameterBox parameter_domain() const override {
    return ParameterBox({1e-9, 1e-9, 1e-9}, {1e6, 1e6, 1e6}, parameter_names());
  }
  std::size_t gamma_index() const override { return 0; }
  std::size_t kbt_index() const override { return 1; }
  double potential(double x, const ParameterVector& th) const override { return 0.5 * th[2] * x * x; }
  double potential_derivative(double x, const ParameterVector& th) const override { return th[2] * x; }
  double potential_second_derivative(double, const ParameterVector& th) const override { return th[2]; }
  double potential_derivative_parameter(double x, const ParameterVector&, std::size_t k) const override {
    return k == 2 ? x : 0.0;
  }

 protected:
  double position_center(const ParameterVector&) const override { return 0.0; }
  double position_scale(const ParameterVector& th) const override { return std::sqrt(th[1] / th[2]); }
};

/// Gradient system in the quadratic V(x) = x^T A x / 2 with
/// A = [[2, 0.5], [0.5, 1]]. Parameters: d, kBT.
class QuadraticGradient final : public respfit::GradientModel {
 public:
  static Eigen::Matrix2d hessian() {
    Eigen::Matrix2d a;
    a << 2.0, 0.5, 0.5, 1.0;
    return a;
  }
  static Eigen::Matrix2d mobility_matrix(double d) {
    Eigen::Matrix2d c;
    c << 1.0, -d, d, 1.0;
    return c;
  }

  std::string id() const override { return "quadratic_gradient"; }
  std::size_t state_dim() const override { return 2; }
  std::vector<std::string> parameter_names() const override { return {"d", "kBT"}; }
  ParameterBox parameter_domain() const override {
    return ParameterBox({-0.999, 1e-9}, {0.999, 1e6}, parameter_names());
  }
  std::size_t kbt_index() const override { return 1; }
  double potential(std::span<const double> x, const ParameterVector&) const override {
    const Eigen::Vector2d v(x[0], x[1]);
    return 0.5 * v.dot(hessian() * v);
  }
  void potential_gradient(std::span<const double> x, const ParameterVector&,
                          std::span<double> out) const override {
    const Eigen::Vector2d g = hessian() * Eigen::Vector2d(x[0], x[1]);
    out[0] = g(0);
    out[1] = g(1);
  }
  void potential_hessian(std::span<const double>, const ParameterVector&,
                         std::span<double> out) const override {
    const auto a = hessian();
    out[0] = a(0, 0);
    out[1] = a(0, 1);
    out[2] = a(1, 0);
    out[3] = a(1, 1);
  }
  void potential_gradient_parameter(std::span<const double>, const ParameterVector&, std::size_t,
                                    std::span<double> out) const override {
    out[0] = out[1] = 0.0;
  }
  void mobility(const ParameterVector& th, std::span<double> out) const override {
    out[0] = 1.0;
    out[1] = -th[0];
    out[2] = th[0];
    out[3] = 1.0;
  }
  void mobility_parameter(const ParameterVector&, std::size_t k, std::span<double> out) const override {
    out[0] = out[3] = 0.0;
    out[1] = k == 0 ? -1.0 : 0.0;
    out[2] = k == 0 ? 1.0 : 0.0;
  }
  respfit::MarginalDensity quadrature_density(const ParameterVector& th) const override {
    respfit::MarginalDensity d;
    d.dim = 2;
    d.log_density = [this, th](std::span<const double> x) { return -potential(x, th) / th[1]; };
    d.center = {0.0, 0.0};
    d.scale = {std::sqrt(th[1]), std::sqrt(th[1])};
    return d;
  }
};

/// Stationary E[X(t) X(0)^T] = exp(t B) Sigma for the linear SDE dX = B X dt + ...
inline Eigen::MatrixXd linear_covariance(const Eigen::MatrixXd& drift, const Eigen::MatrixXd& sigma, double t) {
  return (drift * t).exp() * sigma;
}

/// Harmonic Langevin: drift matrix and stationary covariance of (x, v).
inline Eigen::Matrix2d harmonic_drift(double gamma, double stiffness) {
  Eigen::Matrix2d b;
  b << 0.0, 1.0, -stiffness, -gamma;
  return b;
}
inline Eigen::Matrix2d harmonic_sigma(double kbt, double stiffness) {
  Eigen::Matrix2d s;
  s << kbt / stiffness, 0.0, 0.0, kbt;
  return s;
}

/// E[v(t) v(0)] for the underdamped harmonic oscillator, written out.
inline double harmonic_velocity_autocov(double gamma, double kbt, double stiffness, double t) {
  const double omega = std::sqrt(stiffness - 0.25 * gamma * gamma);
  return kbt * std::exp(-0.5 * gamma * t) *
         (std::cos(omega * t) - gamma / (2.0 * omega) * std::sin(omega * t));
}

/// Composite Simpson rule with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double lo, double hi, int n = 20000) {
  if (n % 2) ++n;
  const double h = (hi - lo) / n;
  double s = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
  return s * h / 3.0;
}

/// Legendre p5 and its derivative from the monomial expansion.
inline double p5(double x) { return (63.0 * std::pow(x, 5) - 70.0 * std::pow(x, 3) + 15.0 * x) / 8.0; }
inline double p5_prime(double x) { return (315.0 * std::pow(x, 4) - 210.0 * x * x + 15.0) / 8.0; }

/// Central finite difference of a scalar function of one coordinate.
inline double central_difference(const std::function<double(double)>& f, double x, double step) {
  return (f(x + step) - f(x - step)) / (2.0 * step);
}

/// Triple-well potential written directly from its definition, for checking
/// the model's own implementation.
inline double triple_well_potential(double x1, double x2, double a, double gamma) {
  auto v = [a](double z) { return z * z < a * a ? 10.0 * std::exp(1.0 / (z * z - a * a)) : 0.0; };
  const double s3 = std::sqrt(3.0);
  return -v(x1 * x1 + x2 * x2) - (1.0 - gamma) * v((x1 - 2.0 * a) * (x1 - 2.0 * a) + x2 * x2) -
         (1.0 + gamma) * v((x1 - a) * (x1 - a) + (x2 - a * s3) * (x2 - a * s3)) +
         0.2 * ((x1 - a) * (x1 - a) + (x2 - a / s3) * (x2 - a / s3));
}

}  // namespace oracle
