#include "respfit/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>

#include "respfit/error.hpp"
#include "respfit/parallel.hpp"

namespace respfit {

namespace {

const char* kModule = "sensitivity";
constexpr std::size_t kChunk = 64;

}  // namespace

SpreadReport apriori_spread(const CollocationDesign& design, const Eigen::MatrixXd& values,
                            const Eigen::MatrixXd& stderrs, const std::vector<double>& lags) {
  if (design.nodes_per_axis < 2) {
    throw ValidationError(kModule, "spread needs at least 2 nodes per axis");
  }
  if (static_cast<std::size_t>(values.rows()) != design.size()) {
    throw ValidationError(kModule, "training values need one row per collocation node");
  }
  const std::size_t n = design.box.size();
  const std::size_t middle = design.nodes_per_axis / 2;
  const auto stats = static_cast<std::size_t>(values.cols());
  SpreadReport r;
  r.names = design.box.names();
  r.lags = lags;
  r.spread.assign(n, std::vector<double>(stats, 0.0));
  r.noise.assign(n, 0.0);
  r.non_identifiable.assign(n, false);
  for (std::size_t axis = 0; axis < n; ++axis) {
    std::vector<std::size_t> line;
    for (std::size_t node = 0; node < design.size(); ++node) {
      bool on_line = true;
      for (std::size_t d = 0; d < n && on_line; ++d) {
        if (d != axis) on_line = design.axis_position(node, d) == middle;
      }
      if (on_line) line.push_back(node);
    }
    double largest = 0.0;
    for (std::size_t i = 0; i < stats; ++i) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t node : line) {
        const double v = values(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(i));
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        if (stderrs.size() == values.size()) {
          r.noise[axis] = std::max(
              r.noise[axis], stderrs(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(i)));
        }
      }
      r.spread[axis][i] = hi - lo;
      largest = std::max(largest, hi - lo);
    }
    r.non_identifiable[axis] = largest < 2.0 * r.noise[axis] || largest == 0.0;
  }
  return r;
}

SensitivityReport pathwise_derivative(const ModelSpec& model, const ParameterVector& theta,
                                      std::size_t parameter, const PathwiseConfig& cfg) {
  if (!model.has_derivatives()) {
    throw UnsupportedCapability(kModule, "model '" + model.id() + "' has no analytic derivatives");
  }
  model.validate_parameters(theta);
  if (parameter >= theta.size()) throw ValidationError(kModule, "parameter index out of range");
  if (cfg.ensemble < 1) throw ValidationError(kModule, "field 'ensemble' must be at least 1");
  if (!(cfg.dt > 0.0) || !(cfg.horizon > 0.0) || cfg.record_every < 1) {
    throw ValidationError(kModule, "dt, horizon and record_every must be positive");
  }
  if (!model.additive_noise()) {
    throw UnsupportedCapability(kModule, "pathwise derivatives need additive noise (sigma_X = 0)");
  }
  const std::size_t n = model.state_dim();
  const std::size_t w = model.noise_dim();
  {
    std::vector<double> sig_theta(n * w);
    const auto x0 = cfg.initial_state ? *cfg.initial_state : model.default_initial_state(theta);
    model.diffusion_parameter_derivative(x0, theta, parameter, sig_theta);
    if (std::any_of(sig_theta.begin(), sig_theta.end(), [](double v) { return v != 0.0; })) {
      throw UnsupportedCapability(kModule, "parameter '" + theta.names()[parameter] +
                                               "' enters the noise; its pathwise derivative is "
                                               "not an ODE along the path");
    }
  }

  const auto steps = static_cast<std::size_t>(std::llround(cfg.horizon / cfg.dt));
  const std::size_t records = steps / cfg.record_every + 1;
  SensitivityReport rep;
  rep.parameter = theta.names()[parameter];
  rep.ensemble = cfg.ensemble;
  for (std::size_t r = 0; r < records; ++r) {
    rep.times.push_back(static_cast<double>(r * cfg.record_every) * cfg.dt);
  }

  // Fixed chunks of realizations, each summed in order, then chunks summed in
  // order: the result does not depend on the thread count.
  const std::size_t chunks = (cfg.ensemble + kChunk - 1) / kChunk;
  struct Partial {
    std::vector<double> sum, abs_sum;
    std::vector<double> max_dev;
  };
  std::vector<Partial> partial(chunks);

  parallel_for(chunks, cfg.threads, [&](std::size_t c) {
    Partial& p = partial[c];
    p.sum.assign(n * records, 0.0);
    p.abs_sum.assign(n * records, 0.0);
    p.max_dev.assign(n, 0.0);
    Stepper stepper(model, theta, cfg.scheme, cfg.dt);
    std::vector<double> x(n), x_next(n), x_mid(n), y(n), y0(n), k1(n), k2(n), k3(n), k4(n), tmp(n);
    std::vector<double> jac(n * n), dtheta(n);
    auto rhs = [&](std::span<const double> state, std::span<const double> yy, std::span<double> out) {
      model.drift_state_jacobian(state, theta, jac);
      model.drift_parameter_derivative(state, theta, parameter, dtheta);
      for (std::size_t i = 0; i < n; ++i) {
        double s = dtheta[i];
        for (std::size_t j = 0; j < n; ++j) s += jac[i * n + j] * yy[j];
        out[i] = s;
      }
    };
    const std::size_t first = c * kChunk;
    const std::size_t last = std::min(cfg.ensemble, first + kChunk);
    for (std::size_t real = first; real < last; ++real) {
      Rng rng = make_rng(cfg.seed, real);
      x = cfg.initial_state ? *cfg.initial_state : model.default_initial_state(theta);
      y0 = model.initial_state_derivative(theta, parameter);
      y = y0;
      std::size_t rec = 0;
      auto record = [&] {
        for (std::size_t i = 0; i < n; ++i) {
          p.sum[i * records + rec] += y[i];
          p.abs_sum[i * records + rec] += std::abs(y[i]);
          p.max_dev[i] = std::max(p.max_dev[i], std::abs(y[i] - y0[i]));
        }
        ++rec;
      };
      record();
      const double dt = cfg.dt;
      for (std::size_t s = 1; s <= steps; ++s) {
        x_next = x;
        stepper.step(x_next, rng);
        for (std::size_t i = 0; i < n; ++i) x_mid[i] = 0.5 * (x[i] + x_next[i]);
        rhs(x, y, k1);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k1[i];
        rhs(x_mid, tmp, k2);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * dt * k2[i];
        rhs(x_mid, tmp, k3);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + dt * k3[i];
        rhs(x_next, tmp, k4);
        for (std::size_t i = 0; i < n; ++i) {
          y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        x.swap(x_next);
        for (std::size_t i = 0; i < n; ++i) {
          if (!std::isfinite(x[i]) || !std::isfinite(y[i]) || std::abs(x[i]) > 1e8) {
            throw NumericalError(kModule, "path or sensitivity blew up at step " + std::to_string(s) +
                                              " of realization " + std::to_string(real));
          }
        }
        if (s % cfg.record_every == 0) record();
      }
    }
  });

  rep.mean.assign(n, std::vector<double>(records, 0.0));
  rep.abs_mean = rep.mean;
  rep.mean_abs = rep.mean;
  rep.max_deviation.assign(n, 0.0);
  const auto count = static_cast<double>(cfg.ensemble);
  for (const auto& p : partial) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < records; ++r) {
        rep.mean[i][r] += p.sum[i * records + r];
        rep.mean_abs[i][r] += p.abs_sum[i * records + r];
      }
      rep.max_deviation[i] = std::max(rep.max_deviation[i], p.max_dev[i]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < records; ++r) {
      rep.mean[i][r] /= count;
      rep.mean_abs[i][r] /= count;
      rep.abs_mean[i][r] = std::abs(rep.mean[i][r]);
    }
  }
  return rep;
}

void write_spread_csv(const std::string& path, const SpreadReport& r) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
  os << std::setprecision(17) << "index,lag";
  for (const auto& name : r.names) os << ",spread_" << name;
  os << '\n';
  const std::size_t stats = r.spread.empty() ? 0 : r.spread[0].size();
  for (std::size_t i = 0; i < stats; ++i) {
    os << i << ',' << (i < r.lags.size() ? r.lags[i] : 0.0);
    for (const auto& axis : r.spread) os << ',' << axis[i];
    os << '\n';
  }
}

void write_sensitivity_csv(const std::string& path, const std::vector<SensitivityReport>& reports,
                           std::size_t component) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
  if (reports.empty()) return;
  os << std::setprecision(17) << "t";
  for (const auto& r : reports) {
    os << ",mean_" << r.parameter << ",abs_mean_" << r.parameter << ",mean_abs_" << r.parameter;
  }
  os << '\n';
  for (std::size_t t = 0; t < reports[0].times.size(); ++t) {
    os << reports[0].times[t];
    for (const auto& r : reports) {
      os << ',' << r.mean[component][t] << ',' << r.abs_mean[component][t] << ','
         << r.mean_abs[component][t];
    }
    os << '\n';
  }
}

}  // namespace respfit
