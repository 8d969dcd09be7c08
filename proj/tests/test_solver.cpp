#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "respfit/error.hpp"
#include "respfit/solver.hpp"

using namespace respfit;

namespace {

Surrogate system2(const std::function<Eigen::VectorXd(double, double)>& f, std::size_t k,
                  const ParameterBox& box = ParameterBox({-1.0, -1.0}, {1.0, 1.0}, {"t1", "t2"})) {
  const auto design = CollocationDesign::make(box, 3);
  Eigen::MatrixXd v(design.size(), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < design.size(); ++i) {
    v.row(static_cast<Eigen::Index>(i)) = f(design.physical_nodes[i][0], design.physical_nodes[i][1]).transpose();
  }
  return Surrogate::fit(design, 2, v);
}

Surrogate linear1(double root, const ParameterBox& box = ParameterBox({-1.0}, {1.0}, {"t"})) {
  const auto design = CollocationDesign::make(box, 2);
  Eigen::MatrixXd v(2, 1);
  for (int i = 0; i < 2; ++i) v(i, 0) = design.physical_nodes[i][0] - root;
  return Surrogate::fit(design, 1, v);
}

Surrogate bumpy() {
  return system2([](double a, double b) {
    Eigen::VectorXd f(3);
    f << a * a - 0.3 * b - 0.1, (b - 0.2) * (a + 0.5), a * b - 0.05;
    return f;
  }, 3);
}

TEST(Solver, LinearResidualConvergesInOneStep) {
  const auto s = linear1(0.3);
  GaussNewtonConfig cfg;
  cfg.max_iterations = 1;
  const auto rec = gauss_newton(s, std::vector<double>{-0.8}, cfg);
  EXPECT_NEAR(rec.final_theta[0], 0.3, 1e-14);
  cfg.max_iterations = 100;
  const auto full = gauss_newton(s, std::vector<double>{-0.8}, cfg);
  EXPECT_TRUE(full.converged);
  EXPECT_LE(full.iterations, 2);
}

TEST(Solver, ConvexCostAllStartsAgree) {
  const auto s = system2([](double a, double b) {
    Eigen::VectorXd f(2);
    f << a - 0.1, b + 0.2;
    return f;
  }, 2);
  GaussNewtonConfig cfg;
  cfg.starts = 40;
  cfg.seed = 3;
  const auto r = multistart(s, cfg);
  EXPECT_EQ(r.inliers, 40u);
  for (const auto& rec : r.records) {
    EXPECT_NEAR(rec.final_theta[0], 0.1, 1e-12);
    EXPECT_NEAR(rec.final_theta[1], -0.2, 1e-12);
  }
  EXPECT_NEAR(r.estimate[0], 0.1, 1e-12);
  EXPECT_NEAR(r.median[1], -0.2, 1e-12);
  EXPECT_FALSE(r.boundary_fallback);
}

TEST(Solver, PermutationInvariance) {
  const auto s = bumpy();
  std::vector<std::vector<double>> starts;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 50; ++i) starts.push_back({u(rng), u(rng)});
  GaussNewtonConfig cfg;
  const auto a = multistart(s, starts, cfg);
  std::reverse(starts.begin(), starts.end());
  const auto b = multistart(s, starts, cfg);
  EXPECT_EQ(a.estimate, b.estimate);
  EXPECT_EQ(a.median, b.median);
  EXPECT_EQ(a.inliers, b.inliers);
}

TEST(Solver, DeterministicAndThreadIndependent) {
  const auto s = bumpy();
  GaussNewtonConfig cfg;
  cfg.starts = 60;
  cfg.seed = 8;
  const auto a = multistart(s, cfg);
  const auto b = multistart(s, cfg);
  cfg.threads = 3;
  const auto c = multistart(s, cfg);
  EXPECT_EQ(a.estimate, b.estimate);
  EXPECT_EQ(a.estimate, c.estimate);
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].final_theta, c.records[i].final_theta);
}

TEST(Solver, ProjectionFlagsBoundary) {
  const auto s = linear1(1.5, ParameterBox({-1.0}, {1.0}, {"t"}));
  GaussNewtonConfig cfg;
  const auto rec = gauss_newton(s, std::vector<double>{0.0}, cfg);
  EXPECT_DOUBLE_EQ(rec.final_theta[0], 1.0);
  EXPECT_TRUE(rec.boundary_hit);
  EXPECT_TRUE(rec.ended_on_boundary);
  cfg.starts = 10;
  const auto r = multistart(s, cfg);
  EXPECT_TRUE(r.boundary_fallback);
  EXPECT_DOUBLE_EQ(r.estimate[0], 1.0);
}

TEST(Solver, DampingNeverIncreasesResidual) {
  // One residual in two parameters: the normal matrix is singular.
  const auto s = system2([](double a, double b) {
    Eigen::VectorXd f(1);
    f << a * a + b - 0.4;
    return f;
  }, 1);
  GaussNewtonConfig cfg;
  const std::vector<double> start{0.7, -0.6};
  const double initial = s.eval(start).f.norm();
  const auto rec = gauss_newton(s, start, cfg);
  EXPECT_TRUE(rec.damped);
  EXPECT_LE(rec.residual_norm, initial);
  for (int it = 1; it < 10; ++it) {
    cfg.max_iterations = it;
    const double r1 = gauss_newton(s, start, cfg).residual_norm;
    cfg.max_iterations = it + 1;
    EXPECT_LE(gauss_newton(s, start, cfg).residual_norm, r1 + 1e-15);
  }
}

TEST(Solver, NoConvergedStartIsAnError) {
  const auto s = bumpy();
  GaussNewtonConfig cfg;
  cfg.max_iterations = 1;
  cfg.starts = 5;
  try {
    multistart(s, cfg);
    FAIL();
  } catch (const EstimationError& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kEstimation);
  }
  cfg.starts = 0;
  EXPECT_THROW(validate_config(cfg), ValidationError);
  cfg.starts = 1;
  cfg.step_tolerance = 0.0;
  EXPECT_THROW(validate_config(cfg), ValidationError);
}

TEST(Solver, ResidualAtSolutionShrinksWithOrder) {
  // f(t) = exp(t) - 1.3 has a simple zero; the surrogate's root residual in f
  // decreases as the order grows.
  double prev = 1e300;
  for (int m = 2; m <= 8; m += 2) {
    const ParameterBox box({-1.0}, {1.0}, {"t"});
    const auto design = CollocationDesign::make(box, static_cast<std::size_t>(m + 1));
    Eigen::MatrixXd v(design.size(), 1);
    for (std::size_t i = 0; i < design.size(); ++i) v(i, 0) = std::exp(design.physical_nodes[i][0]) - 1.3;
    const auto s = Surrogate::fit(design, m, v);
    GaussNewtonConfig cfg;
    const auto rec = gauss_newton(s, std::vector<double>{0.5}, cfg);
    const double true_residual = std::abs(std::exp(rec.final_theta[0]) - 1.3);
    EXPECT_LT(true_residual, prev);
    prev = true_residual;
  }
}

TEST(Solver, ExportsFiles) {
  const auto s = bumpy();
  GaussNewtonConfig cfg;
  cfg.starts = 12;
  const auto r = multistart(s, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "respfit-test-solver";
  std::filesystem::create_directories(dir);
  write_estimation_json((dir / "e.json").string(), r);
  write_starts_csv((dir / "s.csv").string(), r);
  std::ifstream is(dir / "s.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 13u);
  EXPECT_GT(std::filesystem::file_size(dir / "e.json"), 0u);
}

// f = (t + 1, 10 t^2 + t - 1) has a large residual at its minimizer, where
// undamped Gauss-Newton steps overshoot and cycle.
TEST(Solver, LargeResidualMinimumIsReached) {
  const ParameterBox box({-1.0}, {1.0}, {"t"});
  const auto design = CollocationDesign::make(box, 3);
  Eigen::MatrixXd v(3, 2);
  for (int i = 0; i < 3; ++i) {
    const double t = design.physical_nodes[static_cast<std::size_t>(i)][0];
    v(i, 0) = t + 1.0;
    v(i, 1) = 10.0 * t * t + t - 1.0;
  }
  const auto s = Surrogate::fit(design, 2, v);
  const auto cost = [](double t) { return std::pow(t + 1.0, 2) + std::pow(10.0 * t * t + t - 1.0, 2); };
  for (double start : {-0.9, 0.6, 0.95}) {
    const auto rec = gauss_newton(s, std::vector<double>{start}, GaussNewtonConfig{});
    ASSERT_TRUE(rec.converged) << "start " << start;
    const double t = rec.final_theta[0];
    const double slope = (t + 1.0) + (10.0 * t * t + t - 1.0) * (20.0 * t + 1.0);
    EXPECT_LT(std::abs(slope), 1e-6) << "start " << start << " -> " << t;
    EXPECT_LT(cost(t), cost(t + 1e-3));
    EXPECT_LT(cost(t), cost(t - 1e-3));
  }
}

// A triple-well residual surrogate fitted to noisy training data. Plain
// Gauss-Newton creeps along its curved minimum without meeting the step
// tolerance from any start.
TEST(Solver, NoisySurrogateStartsConverge) {
  const auto s = Surrogate::load(RESPFIT_TEST_DATA_DIR "/wiggly_surrogate.json");
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int k = 0; k < 20; ++k) {
    const auto start = s.box().from_cube(std::vector<double>{unit(rng), unit(rng)});
    EXPECT_TRUE(gauss_newton(s, start, GaussNewtonConfig{}).converged) << start[0] << ", " << start[1];
  }
}

}  // namespace
