#include "respfit/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "respfit/error.hpp"

namespace respfit {

namespace {

const char* kModule = "models";

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::string join(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterVector / ParameterBox

ParameterVector::ParameterVector(std::vector<std::string> names, std::vector<double> values)
    : names_(std::move(names)), values_(std::move(values)) {
  if (names_.size() != values_.size()) {
    throw ValidationError(kModule, "parameter names and values differ in length");
  }
}

std::size_t ParameterVector::index_of(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) {
    throw ValidationError(kModule, "unknown parameter '" + name + "' (have: " + join(names_) + ")");
  }
  return static_cast<std::size_t>(it - names_.begin());
}

bool ParameterVector::has(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

double ParameterVector::at(const std::string& name) const { return values_[index_of(name)]; }

void ParameterVector::set(const std::string& name, double value) { values_[index_of(name)] = value; }

ParameterBox::ParameterBox(std::vector<double> lower, std::vector<double> upper,
                           std::vector<std::string> names)
    : lower_(std::move(lower)), upper_(std::move(upper)), names_(std::move(names)) {
  if (lower_.size() != upper_.size() || (!names_.empty() && names_.size() != lower_.size())) {
    throw ValidationError(kModule, "parameter box bounds differ in length");
  }
  for (std::size_t i = 0; i < lower_.size(); ++i) {
    if (!(lower_[i] < upper_[i])) {
      throw ValidationError(kModule, "parameter box needs lower < upper on axis " +
                                         (names_.empty() ? std::to_string(i) : names_[i]));
    }
  }
}

bool ParameterBox::contains(std::span<const double> physical, double rel_tol) const {
  if (physical.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const double slack = rel_tol * (upper_[i] - lower_[i]);
    if (!(physical[i] >= lower_[i] - slack && physical[i] <= upper_[i] + slack)) return false;
  }
  return true;
}

std::vector<double> ParameterBox::to_cube(std::span<const double> physical) const {
  std::vector<double> u(size());
  for (std::size_t i = 0; i < size(); ++i) u[i] = (physical[i] - center(i)) / scale(i);
  return u;
}

std::vector<double> ParameterBox::from_cube(std::span<const double> cube) const {
  std::vector<double> p(size());
  // Faces of the cube land exactly on the box faces.
  for (std::size_t i = 0; i < size(); ++i) {
    p[i] = std::clamp(center(i) + scale(i) * cube[i], lower_[i], upper_[i]);
    if (cube[i] == -1.0) p[i] = lower_[i];
    if (cube[i] == 1.0) p[i] = upper_[i];
  }
  return p;
}

// ---------------------------------------------------------------------------
// ModelSpec defaults

std::vector<double> ModelSpec::default_initial_state(const ParameterVector&) const {
  return std::vector<double>(state_dim(), 0.0);
}

std::vector<double> ModelSpec::initial_state_derivative(const ParameterVector&, std::size_t) const {
  return std::vector<double>(state_dim(), 0.0);
}

double ModelSpec::relaxation_time_hint(const ParameterVector&) const { return 1.0; }

double ModelSpec::log_peq(std::span<const double>, const ParameterVector&) const {
  throw UnsupportedCapability(kModule, "model '" + id() + "' has no equilibrium density");
}

void ModelSpec::score(std::span<const double>, const ParameterVector&, std::span<double>) const {
  throw UnsupportedCapability(kModule, "model '" + id() + "' has no equilibrium density");
}

MarginalDensity ModelSpec::quadrature_density(const ParameterVector&) const {
  throw UnsupportedCapability(kModule, "model '" + id() + "' has no equilibrium density");
}

void ModelSpec::drift_state_jacobian(std::span<const double>, const ParameterVector&,
                                     std::span<double>) const {
  throw UnsupportedCapability(kModule, "model '" + id() + "' has no analytic derivatives");
}

void ModelSpec::drift_parameter_derivative(std::span<const double>, const ParameterVector&,
                                           std::size_t, std::span<double>) const {
  throw UnsupportedCapability(kModule, "model '" + id() + "' has no analytic derivatives");
}

void ModelSpec::diffusion_parameter_derivative(std::span<const double>, const ParameterVector&,
                                               std::size_t, std::span<double>) const {
  throw UnsupportedCapability(kModule, "model '" + id() + "' has no analytic derivatives");
}

ParameterVector ModelSpec::make_parameters(std::vector<double> values) const {
  auto names = parameter_names();
  if (values.size() != names.size()) {
    throw ValidationError(kModule, "model '" + id() + "' takes " + std::to_string(names.size()) +
                                       " parameters (" + join(names) + "), got " +
                                       std::to_string(values.size()));
  }
  return ParameterVector(std::move(names), std::move(values));
}

void ModelSpec::validate_parameters(const ParameterVector& theta) const {
  const auto names = parameter_names();
  if (theta.names() != names) {
    throw ValidationError(kModule, "model '" + id() + "' expects parameters (" + join(names) +
                                       "), got (" + join(theta.names()) + ")");
  }
  const auto domain = parameter_domain();
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double v = theta[i];
    if (!std::isfinite(v) || v < domain.lower()[i] || v > domain.upper()[i]) {
      throw ValidationError(kModule, "parameter '" + names[i] + "' = " + std::to_string(v) +
                                         " outside [" + std::to_string(domain.lower()[i]) + ", " +
                                         std::to_string(domain.upper()[i]) + "]");
    }
  }
}

// ---------------------------------------------------------------------------
// LangevinModel

void LangevinModel::drift(std::span<const double> x, const ParameterVector& theta,
                          std::span<double> out) const {
  out[0] = x[1];
  out[1] = -potential_derivative(x[0], theta) - gamma(theta) * x[1];
}

void LangevinModel::diffusion(std::span<const double>, const ParameterVector& theta,
                              std::span<double> out) const {
  out[0] = 0.0;
  out[1] = std::sqrt(2.0 * gamma(theta) * kbt(theta));
}

double LangevinModel::relaxation_time_hint(const ParameterVector& theta) const {
  return 1.0 / gamma(theta);
}

double LangevinModel::log_peq(std::span<const double> x, const ParameterVector& theta) const {
  return -(potential(x[0], theta) + 0.5 * x[1] * x[1]) / kbt(theta);
}

void LangevinModel::score(std::span<const double> x, const ParameterVector& theta,
                          std::span<double> out) const {
  const double kt = kbt(theta);
  out[0] = potential_derivative(x[0], theta) / kt;
  out[1] = x[1] / kt;
}

MarginalDensity LangevinModel::quadrature_density(const ParameterVector& theta) const {
  MarginalDensity d;
  d.dim = 1;
  d.log_density = [this, theta](std::span<const double> q) {
    return -potential(q[0], theta) / kbt(theta);
  };
  d.center = {position_center(theta)};
  d.scale = {position_scale(theta)};
  return d;
}

void LangevinModel::drift_state_jacobian(std::span<const double> x, const ParameterVector& theta,
                                         std::span<double> out) const {
  out[0] = 0.0;
  out[1] = 1.0;
  out[2] = -potential_second_derivative(x[0], theta);
  out[3] = -gamma(theta);
}

void LangevinModel::drift_parameter_derivative(std::span<const double> x,
                                               const ParameterVector& theta, std::size_t k,
                                               std::span<double> out) const {
  out[0] = 0.0;
  if (k == gamma_index()) {
    out[1] = -x[1];
  } else if (k == kbt_index()) {
    out[1] = 0.0;
  } else {
    out[1] = -potential_derivative_parameter(x[0], theta, k);
  }
}

void LangevinModel::diffusion_parameter_derivative(std::span<const double>,
                                                   const ParameterVector& theta, std::size_t k,
                                                   std::span<double> out) const {
  out[0] = 0.0;
  if (k == gamma_index()) {
    out[1] = std::sqrt(kbt(theta) / (2.0 * gamma(theta)));
  } else if (k == kbt_index()) {
    out[1] = std::sqrt(gamma(theta) / (2.0 * kbt(theta)));
  } else {
    out[1] = 0.0;
  }
}

// ---------------------------------------------------------------------------
// LangevinMorseModel

double LangevinMorseModel::u0(double y, double eps) {
  return eps * (std::exp(-2.0 * y) - 2.0 * std::exp(-y) + kRetaining * y * y);
}

double LangevinMorseModel::u0_prime(double y, double eps) {
  return eps * (-2.0 * std::exp(-2.0 * y) + 2.0 * std::exp(-y) + 2.0 * kRetaining * y);
}

double LangevinMorseModel::u0_second(double y, double eps) {
  return eps * (4.0 * std::exp(-2.0 * y) - 2.0 * std::exp(-y) + 2.0 * kRetaining);
}

std::vector<std::string> LangevinMorseModel::parameter_names() const {
  return {"gamma", "kBT", "eps", "a", "x0"};
}

ParameterBox LangevinMorseModel::parameter_domain() const {
  return ParameterBox({1e-12, 1e-12, 1e-12, 1e-12, -1e6}, {1e6, 1e6, 1e6, 1e6, 1e6},
                      parameter_names());
}

double LangevinMorseModel::potential(double x, const ParameterVector& theta) const {
  return u0(theta[3] * (x - theta[4]), theta[2]);
}

double LangevinMorseModel::potential_derivative(double x, const ParameterVector& theta) const {
  const double a = theta[3];
  return a * u0_prime(a * (x - theta[4]), theta[2]);
}

double LangevinMorseModel::potential_second_derivative(double x,
                                                       const ParameterVector& theta) const {
  const double a = theta[3];
  return a * a * u0_second(a * (x - theta[4]), theta[2]);
}

double LangevinMorseModel::potential_derivative_parameter(double x, const ParameterVector& theta,
                                                          std::size_t k) const {
  const double eps = theta[2];
  const double a = theta[3];
  const double dx = x - theta[4];
  const double y = a * dx;
  switch (k) {
    case 2:  // eps: U' is linear in eps
      return a * u0_prime(y, 1.0);
    case 3:  // a
      return u0_prime(y, eps) + a * dx * u0_second(y, eps);
    case 4:  // x0: d/dx0 U' = -U''
      return -potential_second_derivative(x, theta);
    default:
      return 0.0;
  }
}

std::vector<double> LangevinMorseModel::default_initial_state(const ParameterVector& theta) const {
  return {theta[4], 0.0};
}

std::vector<double> LangevinMorseModel::initial_state_derivative(const ParameterVector&,
                                                                 std::size_t k) const {
  if (k == 4) return {1.0, 0.0};
  return {0.0, 0.0};
}

double LangevinMorseModel::position_center(const ParameterVector& theta) const {
  return theta[4] + 1.0 / theta[3];
}

double LangevinMorseModel::position_scale(const ParameterVector& theta) const {
  // Width of the retaining well: U ~ eps * 0.01 * a^2 (x - x0)^2.
  const double stiffness = 2.0 * theta[2] * kRetaining * theta[3] * theta[3];
  return std::sqrt(theta[1] / stiffness);
}

// ---------------------------------------------------------------------------
// GradientModel

void GradientModel::drift(std::span<const double> x, const ParameterVector& theta,
                          std::span<double> out) const {
  const std::size_t n = state_dim();
  double grad[8];
  double c[64];
  potential_gradient(x, theta, std::span<double>(grad, n));
  mobility(theta, std::span<double>(c, n * n));
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += c[i * n + j] * grad[j];
    out[i] = -s;
  }
}

void GradientModel::diffusion(std::span<const double>, const ParameterVector& theta,
                              std::span<double> out) const {
  const std::size_t n = state_dim();
  const double s = std::sqrt(2.0 * kbt(theta));
  std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n * n), 0.0);
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = s;
}

double GradientModel::log_peq(std::span<const double> x, const ParameterVector& theta) const {
  return -potential(x, theta) / kbt(theta);
}

void GradientModel::score(std::span<const double> x, const ParameterVector& theta,
                          std::span<double> out) const {
  potential_gradient(x, theta, out);
  const double kt = kbt(theta);
  for (std::size_t i = 0; i < state_dim(); ++i) out[i] /= kt;
}

void GradientModel::drift_state_jacobian(std::span<const double> x, const ParameterVector& theta,
                                         std::span<double> out) const {
  const std::size_t n = state_dim();
  double h[64];
  double c[64];
  potential_hessian(x, theta, std::span<double>(h, n * n));
  mobility(theta, std::span<double>(c, n * n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < n; ++l) s += c[i * n + l] * h[l * n + j];
      out[i * n + j] = -s;
    }
  }
}

void GradientModel::drift_parameter_derivative(std::span<const double> x,
                                               const ParameterVector& theta, std::size_t k,
                                               std::span<double> out) const {
  const std::size_t n = state_dim();
  double grad[8];
  double dgrad[8];
  double c[64];
  double dc[64];
  potential_gradient(x, theta, std::span<double>(grad, n));
  potential_gradient_parameter(x, theta, k, std::span<double>(dgrad, n));
  mobility(theta, std::span<double>(c, n * n));
  mobility_parameter(theta, k, std::span<double>(dc, n * n));
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += dc[i * n + j] * grad[j] + c[i * n + j] * dgrad[j];
    out[i] = -s;
  }
}

void GradientModel::diffusion_parameter_derivative(std::span<const double>,
                                                   const ParameterVector& theta, std::size_t k,
                                                   std::span<double> out) const {
  const std::size_t n = state_dim();
  std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n * n), 0.0);
  if (k == kbt_index()) {
    const double s = 1.0 / std::sqrt(2.0 * kbt(theta));
    for (std::size_t i = 0; i < n; ++i) out[i * n + i] = s;
  }
}

// ---------------------------------------------------------------------------
// Triple well

BumpValue bump(double z, double a) {
  BumpValue b;
  const double den = z * z - a * a;
  if (!(den < -1e-12 * a * a)) return b;
  const double inv = 1.0 / den;
  const double inv2 = inv * inv;
  const double v = 10.0 * std::exp(inv);
  const double g = -2.0 * z * inv2;
  const double gz = -2.0 * inv2 + 8.0 * z * z * inv2 * inv;
  const double ga = -8.0 * a * z * inv2 * inv;
  b.value = v;
  b.dz = v * g;
  b.dzz = v * (g * g + gz);
  b.da = v * 2.0 * a * inv2;
  b.dza = b.da * g + v * ga;
  return b;
}

namespace {

struct Well {
  double cx, cy;      // center
  double dcx, dcy;    // d center / da
  double weight;      // depth multiplier
  double dweight;     // d weight / d gamma
};

std::array<Well, 3> wells(double a, double g) {
  const double s3 = std::sqrt(3.0);
  return {{{0.0, 0.0, 0.0, 0.0, 1.0, 0.0},
           {2.0 * a, 0.0, 2.0, 0.0, 1.0 - g, -1.0},
           {a, a * s3, 1.0, s3, 1.0 + g, 1.0}}};
}

}  // namespace

std::vector<std::string> TripleWellModel::parameter_names() const {
  return {"d", "a", "kBT", "gamma"};
}

ParameterBox TripleWellModel::parameter_domain() const {
  return ParameterBox({-0.999999, 1e-6, 1e-12, -1e6}, {0.999999, 1e6, 1e6, 1e6},
                      parameter_names());
}

double TripleWellModel::potential(std::span<const double> x, const ParameterVector& theta) const {
  const double a = theta[1];
  const double s3 = std::sqrt(3.0);
  double v = 0.0;
  for (const auto& w : wells(a, theta[3])) {
    const double dx = x[0] - w.cx;
    const double dy = x[1] - w.cy;
    v -= w.weight * bump(dx * dx + dy * dy, a).value;
  }
  const double rx = x[0] - a;
  const double ry = x[1] - a / s3;
  return v + kRetaining * (rx * rx + ry * ry);
}

void TripleWellModel::potential_gradient(std::span<const double> x, const ParameterVector& theta,
                                         std::span<double> out) const {
  const double a = theta[1];
  const double s3 = std::sqrt(3.0);
  double gx = 2.0 * kRetaining * (x[0] - a);
  double gy = 2.0 * kRetaining * (x[1] - a / s3);
  for (const auto& w : wells(a, theta[3])) {
    const double dx = x[0] - w.cx;
    const double dy = x[1] - w.cy;
    const double dv = bump(dx * dx + dy * dy, a).dz;
    gx -= w.weight * dv * 2.0 * dx;
    gy -= w.weight * dv * 2.0 * dy;
  }
  out[0] = gx;
  out[1] = gy;
}

void TripleWellModel::potential_hessian(std::span<const double> x, const ParameterVector& theta,
                                        std::span<double> out) const {
  const double a = theta[1];
  double hxx = 2.0 * kRetaining;
  double hyy = 2.0 * kRetaining;
  double hxy = 0.0;
  for (const auto& w : wells(a, theta[3])) {
    const double dx = x[0] - w.cx;
    const double dy = x[1] - w.cy;
    const auto b = bump(dx * dx + dy * dy, a);
    hxx -= w.weight * (4.0 * b.dzz * dx * dx + 2.0 * b.dz);
    hyy -= w.weight * (4.0 * b.dzz * dy * dy + 2.0 * b.dz);
    hxy -= w.weight * 4.0 * b.dzz * dx * dy;
  }
  out[0] = hxx;
  out[1] = hxy;
  out[2] = hxy;
  out[3] = hyy;
}

void TripleWellModel::potential_gradient_parameter(std::span<const double> x,
                                                   const ParameterVector& theta, std::size_t k,
                                                   std::span<double> out) const {
  const double a = theta[1];
  out[0] = 0.0;
  out[1] = 0.0;
  if (k == 1) {
    const double s3 = std::sqrt(3.0);
    double gx = -2.0 * kRetaining;
    double gy = -2.0 * kRetaining / s3;
    for (const auto& w : wells(a, theta[3])) {
      const double dx = x[0] - w.cx;
      const double dy = x[1] - w.cy;
      const auto b = bump(dx * dx + dy * dy, a);
      const double dz_da = -2.0 * (dx * w.dcx + dy * w.dcy);
      const double dvz = b.dza + b.dzz * dz_da;  // total d(v'(z))/da
      gx -= w.weight * (dvz * 2.0 * dx - 2.0 * b.dz * w.dcx);
      gy -= w.weight * (dvz * 2.0 * dy - 2.0 * b.dz * w.dcy);
    }
    out[0] = gx;
    out[1] = gy;
  } else if (k == 3) {
    for (const auto& w : wells(a, theta[3])) {
      if (w.dweight == 0.0) continue;
      const double dx = x[0] - w.cx;
      const double dy = x[1] - w.cy;
      const double dv = bump(dx * dx + dy * dy, a).dz;
      out[0] -= w.dweight * dv * 2.0 * dx;
      out[1] -= w.dweight * dv * 2.0 * dy;
    }
  }
}

void TripleWellModel::mobility(const ParameterVector& theta, std::span<double> out) const {
  const double d = theta[0];
  out[0] = 1.0;
  out[1] = -d;
  out[2] = d;
  out[3] = 1.0;
}

void TripleWellModel::mobility_parameter(const ParameterVector&, std::size_t k,
                                         std::span<double> out) const {
  std::fill(out.begin(), out.begin() + 4, 0.0);
  if (k == 0) {
    out[1] = -1.0;
    out[2] = 1.0;
  }
}

MarginalDensity TripleWellModel::quadrature_density(const ParameterVector& theta) const {
  MarginalDensity d;
  d.dim = 2;
  d.log_density = [this, theta](std::span<const double> q) { return log_peq(q, theta); };
  const double a = theta[1];
  d.center = {a, a / std::sqrt(3.0)};
  d.scale = {2.0 * a + std::sqrt(theta[2] / kRetaining), 2.0 * a + std::sqrt(theta[2] / kRetaining)};
  return d;
}

std::vector<double> TripleWellModel::default_initial_state(const ParameterVector&) const {
  return {0.0, 0.0};
}

// ---------------------------------------------------------------------------

std::shared_ptr<const ModelSpec> make_model(const std::string& id) {
  if (id == "langevin_morse") return std::make_shared<LangevinMorseModel>();
  if (id == "triple_well") return std::make_shared<TripleWellModel>();
  throw ValidationError(kModule, "unknown model '" + id + "' (expected langevin_morse or triple_well)");
}

std::vector<double> eval_drift(const ModelSpec& model, std::span<const double> x,
                               const ParameterVector& theta) {
  model.validate_parameters(theta);
  if (x.size() != model.state_dim() || !all_finite(x)) {
    throw ValidationError(kModule, "state must be finite with dimension " +
                                       std::to_string(model.state_dim()));
  }
  std::vector<double> out(model.state_dim());
  model.drift(x, theta, out);
  if (!all_finite(out)) {
    throw NumericalError(kModule, "non-finite drift for model '" + model.id() +
                                      "'; parameters or state may be out of range");
  }
  return out;
}

double eval_log_peq(const ModelSpec& model, std::span<const double> x,
                    const ParameterVector& theta) {
  if (!model.has_equilibrium()) {
    throw UnsupportedCapability(kModule, "model '" + model.id() + "' has no equilibrium density");
  }
  model.validate_parameters(theta);
  return model.log_peq(x, theta);
}

std::vector<double> conjugate_B(const ModelSpec& model, std::span<const double> x,
                                const ParameterVector& theta, std::span<const double> c) {
  if (!model.has_equilibrium()) {
    throw UnsupportedCapability(kModule, "conjugate variable needs an equilibrium density");
  }
  if (c.size() != model.state_dim()) {
    throw ValidationError(kModule, "forcing direction must have the state dimension");
  }
  std::vector<double> out(model.state_dim());
  model.score(x, theta, out);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return out;
}

double gradient_consistency_error(const GradientModel& model, const ParameterVector& theta,
                                  const std::vector<std::vector<double>>& points) {
  const std::size_t n = model.state_dim();
  std::vector<double> b(n), s(n), c(n * n);
  model.mobility(theta, c);
  const double kt = model.kbt(theta);
  double worst = 0.0;
  for (const auto& p : points) {
    model.drift(p, theta, b);
    model.score(p, theta, s);
    for (std::size_t i = 0; i < n; ++i) {
      double cs = 0.0;
      for (std::size_t j = 0; j < n; ++j) cs += c[i * n + j] * s[j];
      worst = std::max(worst, std::abs(b[i] + kt * cs));
    }
  }
  return worst;
}

}  // namespace respfit
