#include "respfit/sde.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "respfit/error.hpp"

namespace respfit {

namespace {

const char* kModule = "sde";
constexpr double kBlowUp = 1e8;
constexpr char kMagic[8] = {'R', 'E', 'S', 'P', 'F', 'I', 'T', '1'};

// Ratio h/dt rounded, with a relative tolerance for decimal inputs like 2e-3/1e-3.
std::size_t lag_ratio(double h, double dt) {
  const double r = h / dt;
  const double n = std::round(r);
  if (n < 1.0 || std::abs(r - n) > 1e-9 * n) return 0;
  return static_cast<std::size_t>(n);
}

void check_state(std::span<const double> x, std::size_t step) {
  for (double v : x) {
    if (!std::isfinite(v) || std::abs(v) > kBlowUp) {
      throw NumericalError(kModule, "state blew up at step " + std::to_string(step) +
                                        "; reduce dt or check parameters");
    }
  }
}

}  // namespace

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kEulerMaruyama: return "euler_maruyama";
    case Scheme::kLangevinSplitting: return "langevin_splitting";
    case Scheme::kWeakTrapezoidal: return "weak_trapezoidal";
  }
  return "unknown";
}

Scheme parse_scheme(const std::string& name) {
  if (name == "euler_maruyama") return Scheme::kEulerMaruyama;
  if (name == "langevin_splitting") return Scheme::kLangevinSplitting;
  if (name == "weak_trapezoidal") return Scheme::kWeakTrapezoidal;
  throw ValidationError(kModule, "unknown scheme '" + name +
                                     "' (euler_maruyama, langevin_splitting, weak_trapezoidal)");
}

void validate_config(const IntegratorConfig& cfg) {
  if (!(cfg.h > 0.0) || !std::isfinite(cfg.h)) {
    throw ValidationError(kModule, "field 'h' must be positive");
  }
  if (cfg.dt < 0.0 || !std::isfinite(cfg.dt)) {
    throw ValidationError(kModule, "field 'dt' must be positive");
  }
  if (cfg.dt > 0.0 && lag_ratio(cfg.h, cfg.dt) == 0) {
    throw ValidationError(kModule, "field 'h' must be an integer multiple of field 'dt'");
  }
  if (cfg.samples == 0) throw ValidationError(kModule, "field 'samples' must be positive");
  if (!std::isfinite(cfg.burn_in)) throw ValidationError(kModule, "field 'burn_in' must be finite");
}

double effective_dt(const IntegratorConfig& cfg) { return cfg.dt > 0.0 ? cfg.dt : cfg.h; }

std::size_t steps_per_sample(const IntegratorConfig& cfg) {
  return cfg.dt > 0.0 ? lag_ratio(cfg.h, cfg.dt) : 1;
}

double effective_burn_in(const ModelSpec& model, const ParameterVector& theta,
                         const IntegratorConfig& cfg) {
  if (cfg.burn_in >= 0.0) return cfg.burn_in;
  const double span = cfg.h * static_cast<double>(cfg.samples);
  return std::max(0.1 * span, 100.0 * model.relaxation_time_hint(theta));
}

std::vector<double> Trajectory::column(std::size_t i) const {
  std::vector<double> out(samples());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = data[k * dim + i];
  return out;
}

// ---------------------------------------------------------------------------

Stepper::Stepper(const ModelSpec& model, const ParameterVector& theta, Scheme scheme, double dt)
    : model_(model),
      theta_(theta),
      scheme_(scheme),
      dt_(dt),
      n_(model.state_dim()),
      w_(model.noise_dim()) {
  if (scheme == Scheme::kLangevinSplitting) {
    langevin_ = dynamic_cast<const LangevinModel*>(&model);
    if (langevin_ == nullptr) {
      throw ValidationError(kModule, "langevin_splitting needs a Langevin (x, v) model, got '" +
                                         model.id() + "'");
    }
  }
  noise_count_ = scheme == Scheme::kEulerMaruyama     ? w_
                 : scheme == Scheme::kLangevinSplitting ? 2
                                                        : 2 * w_;
  b0_.resize(n_);
  b1_.resize(n_);
  sig0_.resize(n_ * w_);
  sig1_.resize(n_ * w_);
  tmp_.resize(n_);
  normals_.resize(noise_count_);
}

void Stepper::step(std::span<double> x, Rng& rng) {
  for (auto& z : normals_) z = normal_(rng);
  step_with(x, normals_);
}

void Stepper::step_with(std::span<double> x, std::span<const double> normals) {
  switch (scheme_) {
    case Scheme::kEulerMaruyama: euler(x, normals); break;
    case Scheme::kLangevinSplitting: splitting(x, normals); break;
    case Scheme::kWeakTrapezoidal: trapezoidal(x, normals); break;
  }
}

void Stepper::euler(std::span<double> x, std::span<const double> xi) {
  model_.drift(x, theta_, b0_);
  model_.diffusion(x, theta_, sig0_);
  const double sq = std::sqrt(dt_);
  for (std::size_t i = 0; i < n_; ++i) {
    double noise = 0.0;
    for (std::size_t j = 0; j < w_; ++j) noise += sig0_[i * w_ + j] * xi[j];
    tmp_[i] = x[i] + b0_[i] * dt_ + sq * noise;
  }
  std::copy(tmp_.begin(), tmp_.end(), x.begin());
}

// O(dt/2) B(dt/2) A(dt) B(dt/2) O(dt/2), the OU half-steps solved exactly.
void Stepper::splitting(std::span<double> x, std::span<const double> xi) {
  const double gamma = langevin_->gamma(theta_);
  const double kbt = langevin_->kbt(theta_);
  const double decay = std::exp(-0.5 * gamma * dt_);
  const double kick = std::sqrt(kbt * (1.0 - decay * decay));
  double q = x[0];
  double p = x[1];
  p = decay * p + kick * xi[0];
  p -= 0.5 * dt_ * langevin_->potential_derivative(q, theta_);
  q += dt_ * p;
  p -= 0.5 * dt_ * langevin_->potential_derivative(q, theta_);
  p = decay * p + kick * xi[1];
  x[0] = q;
  x[1] = p;
}

// Two-stage trapezoidal scheme with theta = 1/2:
//   y* = y + b(y) dt/2 + sigma(y) sqrt(dt/2) xi1
//   y' = y* + (2 b(y*) - b(y)) dt/2 + sqrt(2 a(y*) - a(y))^+ sqrt(dt/2) xi2,  a = sigma sigma^T.
void Stepper::trapezoidal(std::span<double> x, std::span<const double> xi) {
  const double half = 0.5 * dt_;
  const double sq = std::sqrt(half);
  model_.drift(x, theta_, b0_);
  model_.diffusion(x, theta_, sig0_);
  for (std::size_t i = 0; i < n_; ++i) {
    double noise = 0.0;
    for (std::size_t j = 0; j < w_; ++j) noise += sig0_[i * w_ + j] * xi[j];
    tmp_[i] = x[i] + b0_[i] * half + sq * noise;
  }
  model_.drift(tmp_, theta_, b1_);
  std::span<const double> xi2 = xi.subspan(w_);
  if (model_.additive_noise()) {
    // 2 a - a = a, so the corrector noise matrix is sigma itself.
    for (std::size_t i = 0; i < n_; ++i) {
      double noise = 0.0;
      for (std::size_t j = 0; j < w_; ++j) noise += sig0_[i * w_ + j] * xi2[j];
      x[i] = tmp_[i] + (2.0 * b1_[i] - b0_[i]) * half + sq * noise;
    }
    return;
  }
  model_.diffusion(tmp_, theta_, sig1_);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> s0(sig0_.data(), n_, w_);
  Eigen::Map<const RowMat> s1(sig1_.data(), n_, w_);
  Eigen::MatrixXd target = 2.0 * s1 * s1.transpose() - s0 * s0.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(target);
  Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd root = eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
  // The corrector noise is n-dimensional; run() guarantees w >= n here.
  Eigen::VectorXd z = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_));
  for (std::size_t i = 0; i < std::min(n_, w_); ++i) z[static_cast<Eigen::Index>(i)] = xi2[i];
  Eigen::VectorXd noise = root * z;
  for (std::size_t i = 0; i < n_; ++i) {
    x[i] = tmp_[i] + (2.0 * b1_[i] - b0_[i]) * half + sq * noise[static_cast<Eigen::Index>(i)];
  }
}

// ---------------------------------------------------------------------------

Rng make_rng(std::uint64_t seed, std::optional<std::uint64_t> stream) {
  if (!stream) return Rng(seed);
  const std::uint64_t s = *stream;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
  return Rng(seq);
}

namespace {

Trajectory run(const ModelSpec& model, const ParameterVector& theta, const IntegratorConfig& cfg,
               std::vector<double> state) {
  validate_config(cfg);
  model.validate_parameters(theta);
  if (state.size() != model.state_dim()) {
    throw ValidationError(kModule, "initial state has dimension " + std::to_string(state.size()) +
                                       ", model needs " + std::to_string(model.state_dim()));
  }
  if (cfg.scheme == Scheme::kWeakTrapezoidal && !model.additive_noise() &&
      model.noise_dim() < model.state_dim()) {
    throw UnsupportedCapability(kModule,
                                "weak_trapezoidal with multiplicative noise needs w >= n");
  }
  const double dt = effective_dt(cfg);
  const std::size_t stride = steps_per_sample(cfg);
  const double burn = effective_burn_in(model, theta, cfg);
  const auto burn_steps = static_cast<std::size_t>(std::ceil(burn / dt - 1e-9));

  Trajectory traj;
  traj.dim = model.state_dim();
  traj.h = cfg.h;
  traj.dt = dt;
  traj.burn_in = static_cast<double>(burn_steps) * dt;
  traj.theta = theta;
  traj.model_id = model.id();
  traj.seed = cfg.seed;
  traj.scheme = cfg.scheme;
  traj.data.resize(cfg.samples * traj.dim);

  Stepper stepper(model, theta, cfg.scheme, dt);
  Rng rng = make_rng(cfg.seed, cfg.stream);
  std::size_t step = 0;
  check_state(state, step);
  for (; step < burn_steps; ++step) {
    stepper.step(state, rng);
    if ((step & 1023u) == 0) check_state(state, step);
  }
  check_state(state, step);
  for (std::size_t k = 0; k < cfg.samples; ++k) {
    if (k > 0) {
      for (std::size_t s = 0; s < stride; ++s, ++step) stepper.step(state, rng);
      check_state(state, step);
    }
    std::copy(state.begin(), state.end(), traj.data.begin() + static_cast<std::ptrdiff_t>(k * traj.dim));
  }
  return traj;
}

}  // namespace

Trajectory simulate(const ModelSpec& model, const ParameterVector& theta,
                    const IntegratorConfig& cfg) {
  std::vector<double> x0 =
      cfg.initial_state ? *cfg.initial_state : model.default_initial_state(theta);
  return run(model, theta, cfg, std::move(x0));
}

std::pair<Trajectory, Trajectory> simulate_pair_common_noise(
    const ModelSpec& model, const ParameterVector& theta_first,
    const ParameterVector& theta_second, const IntegratorConfig& cfg,
    const std::vector<double>& initial_first, const std::vector<double>& initial_second) {
  return {run(model, theta_first, cfg, initial_first),
          run(model, theta_second, cfg, initial_second)};
}

std::pair<Trajectory, Trajectory> simulate_pair_common_noise(
    const ModelSpec& model, const ParameterVector& theta, const IntegratorConfig& cfg,
    const std::vector<double>& initial_first, const std::vector<double>& initial_second) {
  return simulate_pair_common_noise(model, theta, theta, cfg, initial_first, initial_second);
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

template <class T>
void put_le(std::ostream& os, T value) {
  static_assert(sizeof(T) == 8);
  std::uint64_t bits;
  std::memcpy(&bits, &value, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  os.write(reinterpret_cast<const char*>(&bits), 8);
}

template <class T>
T get_le(const char* p) {
  std::uint64_t bits;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  T value;
  std::memcpy(&value, &bits, 8);
  return value;
}

}  // namespace

void write_trajectory(const std::string& path, const Trajectory& traj) {
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
    os.write(kMagic, 8);
    put_le<std::uint64_t>(os, traj.dim);
    put_le<std::uint64_t>(os, traj.samples());
    put_le<double>(os, traj.h);
    put_le<std::uint64_t>(os, traj.seed);
    const char pad[24] = {};
    os.write(pad, sizeof pad);
    if constexpr (std::endian::native == std::endian::little) {
      os.write(reinterpret_cast<const char*>(traj.data.data()),
               static_cast<std::streamsize>(traj.data.size() * sizeof(double)));
    } else {
      for (double v : traj.data) put_le<double>(os, v);
    }
    if (!os) throw IoError(kModule, "write failed for '" + path + "'");
  }
  nlohmann::ordered_json meta;
  meta["model"] = traj.model_id;
  meta["scheme"] = scheme_name(traj.scheme);
  meta["dim"] = traj.dim;
  meta["samples"] = traj.samples();
  meta["h"] = traj.h;
  meta["dt"] = traj.dt;
  meta["burn_in"] = traj.burn_in;
  meta["seed"] = traj.seed;
  meta["parameter_names"] = traj.theta.names();
  meta["parameters"] = traj.theta.values();
  std::ofstream ms(path + ".json", std::ios::trunc);
  if (!ms) throw IoError(kModule, "cannot open '" + path + ".json' for writing");
  ms << std::setprecision(17) << meta.dump(2) << '\n';
}

Trajectory read_trajectory(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(kModule, "cannot open trajectory '" + path + "'");
  char header[64];
  if (!is.read(header, 64) || std::memcmp(header, kMagic, 8) != 0) {
    throw IoError(kModule, "'" + path + "' is not a trajectory file (bad header)");
  }
  Trajectory traj;
  traj.dim = get_le<std::uint64_t>(header + 8);
  const auto samples = get_le<std::uint64_t>(header + 16);
  traj.h = get_le<double>(header + 24);
  traj.seed = get_le<std::uint64_t>(header + 32);
  if (traj.dim == 0 || traj.dim > 64 || samples == 0) {
    throw IoError(kModule, "'" + path + "' has an invalid header");
  }
  traj.data.resize(traj.dim * samples);
  std::vector<char> raw(traj.data.size() * 8);
  if (!is.read(raw.data(), static_cast<std::streamsize>(raw.size()))) {
    throw IoError(kModule, "'" + path + "' is truncated");
  }
  for (std::size_t i = 0; i < traj.data.size(); ++i) traj.data[i] = get_le<double>(raw.data() + 8 * i);

  std::ifstream ms(path + ".json");
  if (ms) {
    try {
      auto meta = nlohmann::json::parse(ms);
      traj.model_id = meta.at("model").get<std::string>();
      traj.scheme = parse_scheme(meta.at("scheme").get<std::string>());
      traj.dt = meta.at("dt").get<double>();
      traj.burn_in = meta.at("burn_in").get<double>();
      traj.theta = ParameterVector(meta.at("parameter_names").get<std::vector<std::string>>(),
                                   meta.at("parameters").get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(kModule, "bad metadata '" + path + ".json': " + e.what());
    }
  }
  return traj;
}

void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot open '" + path + "' for writing");
  os << std::setprecision(17);
  os << "t";
  for (std::size_t i = 0; i < traj.dim; ++i) os << ",x" << i + 1;
  os << '\n';
  for (std::size_t k = 0; k < traj.samples(); ++k) {
    os << static_cast<double>(k) * traj.h;
    for (std::size_t i = 0; i < traj.dim; ++i) os << ',' << traj.at(k, i);
    os << '\n';
  }
}

}  // namespace respfit
