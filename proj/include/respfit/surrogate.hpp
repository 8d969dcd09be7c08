#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "respfit/models.hpp"

namespace respfit {

struct LegendreValue {
  double value = 0.0;
  double derivative = 0.0;
};

/// Normalized Legendre P_k = sqrt(k + 1/2) p_k and its derivative, so that
/// the P_k are orthonormal in L2([-1,1], dx).
LegendreValue legendre_eval(int k, double x);
/// P_0..P_order at x, written into values/derivatives (size order + 1).
void legendre_all(int order, double x, std::span<double> values, std::span<double> derivatives);

/// Roots of the degree-count Chebyshev polynomial of the first kind, ascending.
std::vector<double> chebyshev_nodes(std::size_t count);

/// Full tensor multi-index set {k : max_d k_d <= order} in lexicographic order
/// (last axis fastest).
class MultiIndexSet {
 public:
  MultiIndexSet() = default;
  MultiIndexSet(std::size_t dim, int order);

  std::size_t dim() const { return dim_; }
  int order() const { return order_; }
  std::size_t size() const { return indices_.size(); }
  const std::vector<int>& operator[](std::size_t i) const { return indices_[i]; }

 private:
  std::size_t dim_ = 0;
  int order_ = 0;
  std::vector<std::vector<int>> indices_;
};

/// Tensor-product Chebyshev nodes in the cube and their physical images.
struct CollocationDesign {
  ParameterBox box;
  std::size_t nodes_per_axis = 0;
  std::vector<std::vector<double>> cube_nodes;      // lexicographic, last axis fastest
  std::vector<std::vector<double>> physical_nodes;

  static CollocationDesign make(const ParameterBox& box, std::size_t nodes_per_axis);
  std::size_t size() const { return cube_nodes.size(); }
  /// Axis position (0..nodes_per_axis-1) of node i along axis d.
  std::size_t axis_position(std::size_t node, std::size_t axis) const;
};

struct SurrogateValue {
  Eigen::VectorXd f;    // K residuals
  Eigen::MatrixXd jac;  // K x N
};

/// Per-residual Legendre expansions on the canonical cube. Coefficients are
/// stored against the cube variable; public evaluation takes physical values.
class Surrogate {
 public:
  /// values: one row per design node, one column per residual.
  static Surrogate fit(const CollocationDesign& design, int order, const Eigen::MatrixXd& values,
                       const Eigen::MatrixXd& value_stderrs = {});

  std::size_t residual_count() const { return static_cast<std::size_t>(coefficients_.rows()); }
  std::size_t dim() const { return indices_.dim(); }
  const MultiIndexSet& indices() const { return indices_; }
  const ParameterBox& box() const { return box_; }
  /// K x |index set|.
  const Eigen::MatrixXd& coefficients() const { return coefficients_; }
  const Eigen::VectorXd& fit_residual_norms() const { return fit_residuals_; }
  double design_condition() const { return design_condition_; }
  const Eigen::MatrixXd& training_values() const { return training_values_; }
  const Eigen::MatrixXd& training_stderrs() const { return training_stderrs_; }
  const std::vector<std::vector<double>>& training_nodes() const { return training_nodes_; }

  /// Physical theta; throws ValidationError outside the box.
  SurrogateValue eval(std::span<const double> theta) const;
  /// Cube coordinates; Jacobian with respect to the cube variable.
  SurrogateValue eval_cube(std::span<const double> u) const;

  std::string to_json() const;
  static Surrogate from_json(const std::string& text);
  void save(const std::string& path) const;
  static Surrogate load(const std::string& path);

  /// Builds a surrogate directly from coefficients (tests and diagnostics).
  static Surrogate from_coefficients(const ParameterBox& box, int order,
                                     const Eigen::MatrixXd& coefficients);

 private:
  MultiIndexSet indices_;
  ParameterBox box_;
  Eigen::MatrixXd coefficients_;
  Eigen::VectorXd fit_residuals_;
  double design_condition_ = 0.0;
  Eigen::MatrixXd training_values_;
  Eigen::MatrixXd training_stderrs_;
  std::vector<std::vector<double>> training_nodes_;
};

struct RankReport {
  std::size_t residuals = 0;
  std::size_t parameters = 0;
  std::size_t coefficient_rank = 0;
  Eigen::VectorXd coefficient_singular_values;
  bool dependent = false;        // rank < K: the residual expansions are linearly dependent
  bool underdetermined = false;  // K < N
  std::optional<std::size_t> jacobian_rank;
  bool jacobian_full_rank = false;
};

/// Numerical rank with threshold 1e-10 * sigma_max.
std::size_t numerical_rank(const Eigen::MatrixXd& m, double rel_threshold = 1e-10);

RankReport rank_diagnostic(const Surrogate& s,
                           std::optional<std::vector<double>> theta = std::nullopt);

}  // namespace respfit
