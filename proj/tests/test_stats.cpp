#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "respfit/error.hpp"
#include "respfit/models.hpp"
#include "respfit/stats.hpp"
#include "support/oracles.hpp"

using namespace respfit;
namespace fs = std::filesystem;

namespace {

ParameterVector morse(double eps = 0.2, double a = 10.0, double x0 = 0.0) {
  return ParameterVector({"gamma", "kBT", "eps", "a", "x0"}, {0.5, 1.0, eps, a, x0});
}
ParameterVector triple() { return ParameterVector({"d", "a", "kBT", "gamma"}, {0.5, 1.0, 1.5, 0.25}); }

Trajectory morse_run(std::size_t samples, std::uint64_t seed, double h = 2e-3) {
  LangevinMorseModel m;
  IntegratorConfig c;
  c.scheme = Scheme::kLangevinSplitting;
  c.h = h;
  c.dt = 2e-3;
  c.samples = samples;
  c.seed = seed;
  return simulate(m, morse(), c);
}

Trajectory triple_run(std::size_t samples, std::uint64_t seed) {
  TripleWellModel m;
  IntegratorConfig c;
  c.scheme = Scheme::kWeakTrapezoidal;
  c.h = 1e-3;
  c.samples = samples;
  c.seed = seed;
  return simulate(m, triple(), c);
}

TEST(Stats, LagGridValidation) {
  EXPECT_NO_THROW(LagGrid({0.0, 0.1, 0.2}, 1e-3));
  EXPECT_THROW(LagGrid({0.1, 0.05}, 1e-3), ValidationError);
  EXPECT_THROW(LagGrid({0.1005}, 1e-3 * 2), ValidationError);
  const auto g = LagGrid::uniform(20, 0.04, 0.2, 2e-3);
  EXPECT_EQ(g.size(), 20u);
  EXPECT_NEAR(g.lags().front(), 0.24, 1e-15);
  EXPECT_EQ(g.steps().back(), 500u);
}

TEST(Stats, ForwardAndReversedAgreeForEqualObservables) {
  const auto traj = morse_run(50000, 1);
  const auto grid = LagGrid::uniform(10, 0.1, 0.0, traj.h);
  const auto fwd = two_point_correlation(traj, {coordinate(1)}, {coordinate(1)}, grid, Pairing::kForward);
  const auto rev = two_point_correlation(traj, {coordinate(1)}, {coordinate(1)}, grid, Pairing::kReversed);
  for (std::size_t l = 0; l < grid.size(); ++l) {
    EXPECT_NEAR(fwd.values[l](0, 0), rev.values[l](0, 0), 1e-12);
  }
}

TEST(Stats, StandardErrorsShrinkLikeInverseRoot) {
  const auto traj = morse_run(1600000, 2);
  const LagGrid grid({0.5}, traj.h);
  std::vector<double> lx, ly;
  for (std::size_t n : {25000u, 100000u, 400000u, 1600000u}) {
    Trajectory part = traj;
    part.data.resize(n * traj.dim);
    const auto es = two_point_correlation(part, {coordinate(1)}, {coordinate(1)}, grid);
    EXPECT_GT(es.stderrs[0](0, 0), 0.0);
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(std::log(es.stderrs[0](0, 0)));
  }
  const double mx = (lx[0] + lx[1] + lx[2] + lx[3]) / 4, my = (ly[0] + ly[1] + ly[2] + ly[3]) / 4;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 4; ++i) sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx);
  EXPECT_NEAR(sxy / sxx, -0.5, 0.15);
}

TEST(Stats, SpanAndPairCountErrors) {
  const auto traj = morse_run(1000, 3);
  EXPECT_THROW(two_point_correlation(traj, {coordinate(0)}, {coordinate(0)}, LagGrid({2.5}, traj.h)), ValidationError);
  EXPECT_THROW(two_point_correlation(traj, {coordinate(0)}, {coordinate(0)}, LagGrid({1.96}, traj.h)), EstimationError);
}

TEST(Stats, VelocityVarianceNearTemperature) {
  const auto traj = morse_run(400000, 4);
  const auto m = time_average(traj, {"v2", [](std::span<const double> x) { return x[1] * x[1]; }});
  EXPECT_LT(std::abs(m.value - 1.0), 4.0 * m.std_error);
}

TEST(Stats, TripleWellEquipartitionAndSymmetry) {
  const auto traj = triple_run(400000, 5);
  auto model = std::make_shared<TripleWellModel>();
  const std::vector<double> ones{1.0, 1.0};
  std::vector<Observable> b{conjugate_observable(model, triple(), ones, 0), conjugate_observable(model, triple(), ones, 1)};
  const auto es = two_point_correlation(traj, {coordinate(0), coordinate(1)}, b, LagGrid({0.0}, traj.h));
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      EXPECT_LT(std::abs(es.values[0](i, j) - (i == j)), 4.0 * es.stderrs[0](i, j)) << i << j;
    }
  }
  const auto m = two_point_correlation(traj, {coordinate(0), coordinate(1)}, {coordinate(0), coordinate(1)},
                                       LagGrid({0.0}, traj.h));
  EXPECT_LT(std::abs(m.values[0](0, 1) - m.values[0](1, 0)),
            3.0 * std::hypot(m.stderrs[0](0, 1), m.stderrs[0](1, 0)) + 1e-12);
}

// m'(t) = -kBT C K(-t)^T with K(-t)_{jl} = E[x_j(s) B_l(s + t)] and B_l = V_{x_l} / kBT.
TEST(Stats, LinearTransformationIdentity) {
  const auto traj = triple_run(1000000, 6);
  auto model = std::make_shared<TripleWellModel>();
  const std::vector<double> ones{1.0, 1.0};
  const std::vector<Observable> x{coordinate(0), coordinate(1)};
  const std::vector<Observable> b{conjugate_observable(model, triple(), ones, 0),
                                  conjugate_observable(model, triple(), ones, 1)};
  const LagGrid grid({0.05, 0.1, 0.2, 0.3, 0.5}, traj.h);
  const auto mprime = derivative_at_lags(traj, x, x, grid);
  const auto k_rev = two_point_correlation(traj, x, b, grid, Pairing::kReversed);
  Eigen::Matrix2d cinv = oracle::QuadraticGradient::mobility_matrix(0.5).inverse();
  for (std::size_t l = 0; l < grid.size(); ++l) {
    const Eigen::Matrix2d recon = (-cinv * mprime.values[l] / 1.5).transpose();
    const Eigen::Matrix2d recon_se = (cinv.cwiseAbs() * mprime.stderrs[l] / 1.5).transpose();
    for (int j = 0; j < 2; ++j) {
      for (int q = 0; q < 2; ++q) {
        const double tol = 4.0 * std::hypot(recon_se(j, q), k_rev.stderrs[l](j, q));
        EXPECT_LT(std::abs(recon(j, q) - k_rev.values[l](j, q)), tol) << "lag " << grid.lags()[l] << " entry " << j << q;
      }
    }
  }
}

TEST(Stats, DerivativeAtZeroSlope) {
  const auto traj = morse_run(1000000, 7);
  const auto d = derivative_at_zero_plus(traj, {coordinate(1)}, {coordinate(1)}, 3);
  EXPECT_EQ(d.stencil, 3);
  EXPECT_LT(std::abs(d.value(0, 0) + 0.5), 4.0 * d.std_error(0, 0));
  EXPECT_FALSE(d.any_low_confidence());
  EXPECT_THROW(derivative_at_zero_plus(traj, {coordinate(1)}, {coordinate(1)}, 5), ValidationError);
}

TEST(Stats, TripleWellReductionSlopes) {
  const auto traj = triple_run(400000, 8);
  const auto d = derivative_at_zero_plus(traj, {coordinate(0), coordinate(1)}, {coordinate(0), coordinate(1)}, 3);
  EXPECT_LT(std::abs(-d.value(0, 0) - 1.5), 4.0 * d.std_error(0, 0));
  EXPECT_LT(std::abs(-d.value(1, 0) / 1.5 - 0.5), 4.0 * d.std_error(1, 0) / 1.5);
}

TEST(Stats, QuadratureGaussian) {
  MarginalDensity g;
  g.log_density = [](std::span<const double> x) { return -0.5 * x[0] * x[0] / 4.0; };
  g.center = {0.0};
  g.scale = {2.0};
  const auto m = quadrature_moments(g, {1, 2, 3});
  EXPECT_NEAR(m[0], 0.0, 1e-12);
  EXPECT_NEAR(m[1], 4.0, 4e-8);
  EXPECT_NEAR(m[2], 0.0, 1e-10);
  EXPECT_NEAR(quadrature_expectation(g, [](std::span<const double> x) { return std::cos(x[0]); }), std::exp(-2.0), 1e-9);
}

TEST(Stats, QuadratureRescaling) {
  LangevinMorseModel m;
  const auto one = quadrature_moments(m, morse(0.2, 1.0, 0.0), {1, 2});
  const auto ten = quadrature_moments(m, morse(0.2, 10.0, 0.3), {1, 2});
  const double var1 = one[1] - one[0] * one[0];
  const double var10 = ten[1] - ten[0] * ten[0];
  EXPECT_NEAR(var10, var1 / 100.0, 1e-8 * var1 / 100.0);
  EXPECT_NEAR(ten[0], one[0] / 10.0 + 0.3, 1e-9);
}

TEST(Stats, QuadratureRejectsNonNormalizable) {
  MarginalDensity flat;
  flat.log_density = [](std::span<const double>) { return 0.0; };
  flat.center = {0.0};
  flat.scale = {1.0};
  EXPECT_ANY_THROW(quadrature_moments(flat, {1}));
}

TEST(Stats, EquilibriumMomentsMatchQuadrature) {
  const auto traj = morse_run(1000000, 9, 0.02);
  const auto sim = equilibrium_moments(traj, 0, {1, 2});
  LangevinMorseModel m;
  const auto q = quadrature_moments(m, morse(), {1, 2});
  for (int p = 0; p < 2; ++p) EXPECT_LT(std::abs(sim[p].value - q[p]), 4.0 * sim[p].std_error) << p + 1;
}

TEST(Stats, AnsatzSingleExponential) {
  std::vector<double> lags, values;
  for (int i = 1; i <= 20; ++i) lags.push_back(0.1 * i), values.push_back(2.5 * std::exp(-0.7 * 0.1 * i));
  const auto fit = fit_response_ansatz(lags, values, 1);
  EXPECT_NEAR(fit.beta(0), -0.7, 1e-6);
  EXPECT_NEAR(fit.alpha(0), 2.5, 1e-6);
  EXPECT_THROW(fit_response_ansatz(lags, values, 11), ValidationError);
}

TEST(Stats, AnsatzOnLangevinVelocityCorrelation) {
  const auto traj = morse_run(1000000, 10);
  const auto es = two_point_correlation(traj, {coordinate(1)}, {coordinate(1)}, LagGrid::uniform(20, 0.1, 0.0, traj.h));
  const auto fit = fit_response_ansatz(es, 4);
  EXPECT_LT(fit.relative_residual, 0.05);
}

TEST(Stats, CsvRoundTrip) {
  const auto traj = morse_run(20000, 11);
  const auto grid = LagGrid::uniform(5, 0.1, 0.0, traj.h);
  const auto es = two_point_correlation(traj, {coordinate(0), coordinate(1)}, {coordinate(1)}, grid);
  const auto d = derivative_at_zero_plus(traj, {coordinate(0), coordinate(1)}, {coordinate(1)}, 3);
  const auto dir = fs::temp_directory_path() / "respfit-test-stats";
  fs::create_directories(dir);
  const auto path = (dir / "s.csv").string();
  write_statistics_csv(path, es, &d);
  const auto back = read_statistics_csv(path);
  ASSERT_EQ(back.lags, es.lags);
  for (std::size_t l = 0; l < es.lags.size(); ++l) {
    EXPECT_EQ(back.values[l], es.values[l]);
    EXPECT_EQ(back.stderrs[l], es.stderrs[l]);
    EXPECT_TRUE((back.stderrs[l].array() > 0).all());
  }
  EXPECT_THROW(read_statistics_csv((dir / "none.csv").string()), IoError);
}

}  // namespace
