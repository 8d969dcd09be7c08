#include "respfit/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <sstream>

#include "respfit/error.hpp"

namespace respfit {

namespace {

const char* kModule = "surrogate";

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

LegendreValue legendre_eval(int k, double x) {
  if (k < 0) throw ValidationError(kModule, "Legendre order must be non-negative");
  std::vector<double> v(static_cast<std::size_t>(k) + 1), d(static_cast<std::size_t>(k) + 1);
  legendre_all(k, x, v, d);
  return {v.back(), d.back()};
}

void legendre_all(int order, double x, std::span<double> values, std::span<double> derivatives) {
  // (n+1) p_{n+1} = (2n+1) x p_n - n p_{n-1};  p'_{n+1} = p'_{n-1} + (2n+1) p_n.
  double p_prev = 1.0, p = x;
  double d_prev = 0.0, d = 1.0;
  for (int n = 0; n <= order; ++n) {
    double pn, dn;
    if (n == 0) {
      pn = 1.0;
      dn = 0.0;
    } else if (n == 1) {
      pn = x;
      dn = 1.0;
    } else {
      const double m = n - 1;
      const double p_next = ((2.0 * m + 1.0) * x * p - m * p_prev) / (m + 1.0);
      const double d_next = d_prev + (2.0 * m + 1.0) * p;
      p_prev = p;
      p = p_next;
      d_prev = d;
      d = d_next;
      pn = p;
      dn = d;
    }
    const double norm = std::sqrt(n + 0.5);
    values[static_cast<std::size_t>(n)] = norm * pn;
    derivatives[static_cast<std::size_t>(n)] = norm * dn;
  }
}

std::vector<double> chebyshev_nodes(std::size_t count) {
  if (count == 0) throw ValidationError(kModule, "need at least one Chebyshev node");
  // cos((2k-1) pi / 2M) = sin(pi (M - 2k + 1) / 2M); the sine form is exactly
  // antisymmetric, so the node set is symmetric about 0 to the last bit.
  std::vector<double> nodes;
  const auto m = static_cast<long>(count);
  for (long j = -(m - 1); j <= m - 1; j += 2) {
    nodes.push_back(std::sin(std::numbers::pi * static_cast<double>(j) / (2.0 * static_cast<double>(m))));
  }
  return nodes;
}

MultiIndexSet::MultiIndexSet(std::size_t dim, int order) : dim_(dim), order_(order) {
  if (dim == 0 || order < 0) throw ValidationError(kModule, "index set needs dim >= 1 and order >= 0");
  std::vector<int> k(dim, 0);
  for (;;) {
    indices_.push_back(k);
    std::size_t d = dim;
    while (d > 0) {
      --d;
      if (k[d] < order) {
        ++k[d];
        break;
      }
      k[d] = 0;
      if (d == 0) return;
    }
  }
}

CollocationDesign CollocationDesign::make(const ParameterBox& box, std::size_t nodes_per_axis) {
  CollocationDesign design;
  design.box = box;
  design.nodes_per_axis = nodes_per_axis;
  const auto nodes = chebyshev_nodes(nodes_per_axis);
  const MultiIndexSet grid(box.size(), static_cast<int>(nodes_per_axis) - 1);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<double> u(box.size());
    for (std::size_t d = 0; d < box.size(); ++d) u[d] = nodes[static_cast<std::size_t>(grid[i][d])];
    design.physical_nodes.push_back(box.from_cube(u));
    design.cube_nodes.push_back(std::move(u));
  }
  return design;
}

std::size_t CollocationDesign::axis_position(std::size_t node, std::size_t axis) const {
  std::size_t stride = 1;
  for (std::size_t d = box.size() - 1; d > axis; --d) stride *= nodes_per_axis;
  return (node / stride) % nodes_per_axis;
}

// ---------------------------------------------------------------------------

namespace {

// Basis values and cube gradients for all multi-indices at u.
void basis(const MultiIndexSet& set, std::span<const double> u, Eigen::VectorXd& phi,
           Eigen::MatrixXd* grad) {
  const std::size_t n = set.dim();
  const int order = set.order();
  std::vector<std::vector<double>> v(n, std::vector<double>(static_cast<std::size_t>(order) + 1));
  std::vector<std::vector<double>> dv = v;
  for (std::size_t d = 0; d < n; ++d) legendre_all(order, u[d], v[d], dv[d]);
  phi.resize(idx(set.size()));
  if (grad) grad->resize(idx(set.size()), idx(n));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& k = set[i];
    double prod = 1.0;
    for (std::size_t d = 0; d < n; ++d) prod *= v[d][static_cast<std::size_t>(k[d])];
    phi(idx(i)) = prod;
    if (grad) {
      for (std::size_t d = 0; d < n; ++d) {
        double g = dv[d][static_cast<std::size_t>(k[d])];
        for (std::size_t e = 0; e < n; ++e) {
          if (e != d) g *= v[e][static_cast<std::size_t>(k[e])];
        }
        (*grad)(idx(i), idx(d)) = g;
      }
    }
  }
}

}  // namespace

Surrogate Surrogate::fit(const CollocationDesign& design, int order, const Eigen::MatrixXd& values,
                         const Eigen::MatrixXd& value_stderrs) {
  const std::size_t n = design.box.size();
  if (order < 0) throw ValidationError(kModule, "surrogate order must be non-negative");
  if (design.nodes_per_axis < static_cast<std::size_t>(order) + 1) {
    throw ValidationError(kModule, "collocation needs at least M+1 = " + std::to_string(order + 1) +
                                       " nodes per axis, got " +
                                       std::to_string(design.nodes_per_axis));
  }
  if (static_cast<std::size_t>(values.rows()) != design.size()) {
    throw ValidationError(kModule, "training values need one row per collocation node");
  }
  if (!values.allFinite()) throw ValidationError(kModule, "training values must be finite");

  Surrogate s;
  s.indices_ = MultiIndexSet(n, order);
  s.box_ = design.box;
  Eigen::MatrixXd p(idx(design.size()), idx(s.indices_.size()));
  Eigen::VectorXd phi;
  for (std::size_t i = 0; i < design.size(); ++i) {
    basis(s.indices_, design.cube_nodes[i], phi, nullptr);
    p.row(idx(i)) = phi.transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(p);
  const auto& sv = svd.singularValues();
  s.design_condition_ = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1)
                                                : std::numeric_limits<double>::infinity();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(p);
  qr.setThreshold(1e-12);
  if (qr.rank() < p.cols()) {
    std::ostringstream msg;
    msg << "collocation matrix is rank deficient (rank " << qr.rank() << " of " << p.cols()
        << ", condition number " << s.design_condition_ << ")";
    throw NumericalError(kModule, msg.str());
  }
  const Eigen::MatrixXd alpha = qr.solve(values);  // |index set| x K
  s.coefficients_ = alpha.transpose();
  s.fit_residuals_ = (p * alpha - values).colwise().norm().transpose();
  s.training_values_ = values;
  s.training_stderrs_ = value_stderrs.size() == values.size()
                            ? value_stderrs
                            : Eigen::MatrixXd::Zero(values.rows(), values.cols());
  s.training_nodes_ = design.physical_nodes;
  return s;
}

Surrogate Surrogate::from_coefficients(const ParameterBox& box, int order,
                                       const Eigen::MatrixXd& coefficients) {
  Surrogate s;
  s.indices_ = MultiIndexSet(box.size(), order);
  if (static_cast<std::size_t>(coefficients.cols()) != s.indices_.size()) {
    throw ValidationError(kModule, "coefficient matrix needs " + std::to_string(s.indices_.size()) +
                                       " columns");
  }
  s.box_ = box;
  s.coefficients_ = coefficients;
  s.fit_residuals_ = Eigen::VectorXd::Zero(coefficients.rows());
  return s;
}

SurrogateValue Surrogate::eval_cube(std::span<const double> u) const {
  if (u.size() != dim()) throw ValidationError(kModule, "parameter dimension mismatch");
  Eigen::VectorXd phi;
  Eigen::MatrixXd grad;
  basis(indices_, u, phi, &grad);
  return {coefficients_ * phi, coefficients_ * grad};
}

SurrogateValue Surrogate::eval(std::span<const double> theta) const {
  if (theta.size() != dim()) throw ValidationError(kModule, "parameter dimension mismatch");
  if (!box_.contains(theta, 1e-12)) {
    throw ValidationError(kModule, "parameter outside the surrogate box; clip before evaluating");
  }
  auto u = box_.to_cube(theta);
  for (auto& x : u) x = std::clamp(x, -1.0, 1.0);
  auto out = eval_cube(u);
  for (std::size_t d = 0; d < dim(); ++d) out.jac.col(idx(d)) /= box_.scale(d);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::ordered_json matrix_json(const Eigen::MatrixXd& m) {
  auto rows = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = nlohmann::ordered_json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd json_matrix(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != cols) {
      throw IoError(kModule, "ragged matrix in surrogate file");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

}  // namespace

std::string Surrogate::to_json() const {
  nlohmann::ordered_json j;
  j["dim"] = dim();
  j["order"] = indices_.order();
  j["box"] = {{"names", box_.names()}, {"lower", box_.lower()}, {"upper", box_.upper()}};
  auto idxs = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < indices_.size(); ++i) idxs.push_back(indices_[i]);
  j["indices"] = idxs;
  j["coefficients"] = matrix_json(coefficients_);
  j["fit_residual_norms"] = std::vector<double>(fit_residuals_.data(),
                                                fit_residuals_.data() + fit_residuals_.size());
  j["design_condition"] = design_condition_;
  j["training_nodes"] = training_nodes_;
  j["training_values"] = matrix_json(training_values_);
  j["training_stderrs"] = matrix_json(training_stderrs_);
  return j.dump(1);
}

Surrogate Surrogate::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Surrogate s;
    const auto order = j.at("order").get<int>();
    const auto& b = j.at("box");
    s.box_ = ParameterBox(b.at("lower").get<std::vector<double>>(),
                          b.at("upper").get<std::vector<double>>(),
                          b.at("names").get<std::vector<std::string>>());
    s.indices_ = MultiIndexSet(j.at("dim").get<std::size_t>(), order);
    const auto stored = j.at("indices").get<std::vector<std::vector<int>>>();
    if (stored.size() != s.indices_.size()) throw IoError(kModule, "index set size mismatch");
    for (std::size_t i = 0; i < stored.size(); ++i) {
      if (stored[i] != s.indices_[i]) throw IoError(kModule, "index set order mismatch");
    }
    s.coefficients_ = json_matrix(j.at("coefficients"));
    const auto res = j.at("fit_residual_norms").get<std::vector<double>>();
    s.fit_residuals_ = Eigen::Map<const Eigen::VectorXd>(res.data(), static_cast<Eigen::Index>(res.size()));
    s.design_condition_ = j.at("design_condition").get<double>();
    s.training_nodes_ = j.at("training_nodes").get<std::vector<std::vector<double>>>();
    s.training_values_ = json_matrix(j.at("training_values"));
    s.training_stderrs_ = json_matrix(j.at("training_stderrs"));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(kModule, std::string("malformed surrogate: ") + e.what());
  }
}

void Surrogate::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
  os << to_json() << '\n';
  if (!os) throw IoError(kModule, "write failed for '" + path + "'");
}

Surrogate Surrogate::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(kModule, "cannot open surrogate '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

// ---------------------------------------------------------------------------

std::size_t numerical_rank(const Eigen::MatrixXd& m, double rel_threshold) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > rel_threshold * sv(0)) ++rank;
  }
  return rank;
}

RankReport rank_diagnostic(const Surrogate& s, std::optional<std::vector<double>> theta) {
  RankReport r;
  r.residuals = s.residual_count();
  r.parameters = s.dim();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(s.coefficients());
  r.coefficient_singular_values = svd.singularValues();
  r.coefficient_rank = numerical_rank(s.coefficients());
  r.dependent = r.coefficient_rank < r.residuals;
  r.underdetermined = r.residuals < r.parameters;
  if (theta) {
    const auto value = s.eval(*theta);
    r.jacobian_rank = numerical_rank(value.jac);
    r.jacobian_full_rank = *r.jacobian_rank == r.parameters;
  }
  return r;
}

}  // namespace respfit
