#include "respfit/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "respfit/error.hpp"

namespace respfit {

namespace {

const char* kModule = "config";
using Json = nlohmann::ordered_json;

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ValidationError(kModule, "field '" + path + "' " + what);
}

void allow_only(const Json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) {
    if (path.empty()) throw ValidationError(kModule, "top level must be an object");
    fail(path, "must be an object");
  }
  for (const auto& item : obj.items()) {
    const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) { return item.key() == k; });
    if (!known) throw ValidationError(kModule, "unknown field '" + join(path, item.key()) + "'");
  }
}

const Json* member(const Json& obj, const char* key) {
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

double number(const Json& v, const std::string& path) {
  if (!v.is_number()) fail(path, "must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(path, "must be finite");
  return x;
}

void read(const Json& obj, const char* key, const std::string& path, double& out) {
  if (const auto* v = member(obj, key)) out = number(*v, join(path, key));
}

std::uint64_t count_value(const Json& v, const std::string& path) {
  const double x = number(v, path);
  if (x < 0.0 || x != std::floor(x) || x > 9.0e18) fail(path, "must be a non-negative integer");
  return v.is_number_integer() ? v.get<std::uint64_t>() : static_cast<std::uint64_t>(x);
}

template <class Int>
void read(const Json& obj, const char* key, const std::string& path, Int& out)
  requires std::is_integral_v<Int> && (!std::is_same_v<Int, bool>)
{
  if (const auto* v = member(obj, key)) {
    const auto x = count_value(*v, join(path, key));
    if (x > static_cast<std::uint64_t>(std::numeric_limits<Int>::max())) fail(join(path, key), "is too large");
    out = static_cast<Int>(x);
  }
}

void read(const Json& obj, const char* key, const std::string& path, bool& out) {
  if (const auto* v = member(obj, key)) {
    if (!v->is_boolean()) fail(join(path, key), "must be true or false");
    out = v->get<bool>();
  }
}

void read(const Json& obj, const char* key, const std::string& path, std::string& out) {
  if (const auto* v = member(obj, key)) {
    if (!v->is_string()) fail(join(path, key), "must be a string");
    out = v->get<std::string>();
  }
}

void read(const Json& obj, const char* key, const std::string& path, std::vector<std::string>& out) {
  if (const auto* v = member(obj, key)) {
    if (!v->is_array()) fail(join(path, key), "must be a list of strings");
    out.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!(*v)[i].is_string()) fail(join(path, key) + "[" + std::to_string(i) + "]", "must be a string");
      out.push_back((*v)[i].get<std::string>());
    }
  }
}

Scheme read_scheme(const Json& obj, const std::string& path, Scheme fallback) {
  std::string name;
  read(obj, "scheme", path, name);
  if (name.empty()) return fallback;
  try {
    return parse_scheme(name);
  } catch (const Error&) {
    fail(join(path, "scheme"), "names an unknown scheme '" + name + "'");
  }
}

void read_simulation(const Json& root, const char* key, SimulationSpec& sim, Scheme scheme,
                     double h, std::vector<std::string>& pinned) {
  sim.scheme = scheme;
  sim.h = h;
  const auto* obj = member(root, key);
  if (!obj) fail(key, "is required");
  allow_only(*obj, key, {"scheme", "h", "dt", "burn_in", "samples", "seed"});
  sim.scheme = read_scheme(*obj, key, scheme);
  read(*obj, "h", key, sim.h);
  read(*obj, "dt", key, sim.dt);
  read(*obj, "burn_in", key, sim.burn_in);
  if (!member(*obj, "samples")) fail(join(key, "samples"), "is required");
  read(*obj, "samples", key, sim.samples);
  if (member(*obj, "seed")) {
    read(*obj, "seed", key, sim.seed);
    pinned.emplace_back(key);
  }
}

bool pinned(const ExperimentConfig& c, const char* name) {
  return std::find(c.pinned_seeds.begin(), c.pinned_seeds.end(), name) != c.pinned_seeds.end();
}

struct PipelineDefaults {
  const char* model;
  Scheme scheme;
  double h;
};

PipelineDefaults defaults_for(const std::string& pipeline) {
  if (pipeline == "langevin") return {"langevin_morse", Scheme::kLangevinSplitting, 2e-3};
  if (pipeline == "triplewell") return {"triple_well", Scheme::kWeakTrapezoidal, 1e-3};
  fail("pipeline", "must be 'langevin' or 'triplewell', got '" + pipeline + "'");
}

Json sim_json(const SimulationSpec& s) {
  Json j;
  j["scheme"] = scheme_name(s.scheme);
  j["h"] = s.h;
  j["dt"] = s.dt;
  j["burn_in"] = s.burn_in;
  j["samples"] = s.samples;
  j["seed"] = s.seed;
  return j;
}

std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  Json root;
  try {
    root = Json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    std::string detail = e.what();
    if (const auto pos = detail.find("syntax error"); pos != std::string::npos) detail = detail.substr(pos);
    throw ValidationError(kModule, source + ": " + line_col(text, e.byte) + ": " + detail);
  }
  try {
    allow_only(root, "", {"pipeline", "model", "truth", "data", "training", "common_random_numbers",
                          "lags", "surrogate", "x0_fixed", "solver", "reduction", "stats",
                          "sensitivity", "output", "threads", "seed"});
    ExperimentConfig c;
    if (!member(root, "pipeline")) fail("pipeline", "is required");
    read(root, "pipeline", "", c.pipeline);
    const auto defaults = defaults_for(c.pipeline);
    PipelineConfig& run = c.run;
    run.model = defaults.model;
    read(root, "model", "", run.model);
    if (run.model != defaults.model) {
      fail("model", "must be '" + std::string(defaults.model) + "' for pipeline '" + c.pipeline + "'");
    }
    const auto model = make_model(run.model);

    const auto* truth = member(root, "truth");
    if (!truth) fail("truth", "is required");
    if (!truth->is_object()) fail("truth", "must be an object of parameter values");
    const auto names = model->parameter_names();
    for (const auto& item : truth->items()) {
      if (std::find(names.begin(), names.end(), item.key()) == names.end()) {
        throw ValidationError(kModule, "unknown field 'truth." + item.key() + "'");
      }
    }
    run.truth.clear();
    for (const auto& name : names) {
      const auto* v = member(*truth, name.c_str());
      if (!v) fail("truth." + name, "is required");
      run.truth.push_back(number(*v, "truth." + name));
    }

    read(root, "seed", "", c.seed);
    read(root, "threads", "", c.threads);
    read(root, "output", "", c.output);
    read(root, "x0_fixed", "", run.x0_fixed);
    read(root, "common_random_numbers", "", run.common_random_numbers);
    read_simulation(root, "data", run.data, defaults.scheme, defaults.h, c.pinned_seeds);
    read_simulation(root, "training", run.training, defaults.scheme, defaults.h, c.pinned_seeds);

    if (const auto* lags = member(root, "lags")) {
      allow_only(*lags, "lags", {"count", "spacing", "offset"});
      read(*lags, "count", "lags", run.lags.count);
      read(*lags, "spacing", "lags", run.lags.spacing);
      read(*lags, "offset", "lags", run.lags.offset);
    }

    const auto* sur = member(root, "surrogate");
    if (!sur) fail("surrogate", "is required");
    allow_only(*sur, "surrogate", {"order", "nodes_per_axis", "box"});
    read(*sur, "order", "surrogate", run.order);
    read(*sur, "nodes_per_axis", "surrogate", run.nodes_per_axis);
    const auto* box = member(*sur, "box");
    if (!box) fail("surrogate.box", "is required");
    if (!box->is_object()) fail("surrogate.box", "must map parameter names to [lower, upper]");
    std::vector<double> lo, hi;
    std::vector<std::string> box_names;
    for (const auto& item : box->items()) {
      const std::string path = "surrogate.box." + item.key();
      if (std::find(names.begin(), names.end(), item.key()) == names.end()) {
        throw ValidationError(kModule, "unknown field '" + path + "'");
      }
      if (!item.value().is_array() || item.value().size() != 2) fail(path, "must be [lower, upper]");
      lo.push_back(number(item.value()[0], path + "[0]"));
      hi.push_back(number(item.value()[1], path + "[1]"));
      if (!(lo.back() < hi.back())) fail(path, "needs lower < upper");
      box_names.push_back(item.key());
    }
    run.box = ParameterBox(lo, hi, box_names);

    if (const auto* solver = member(root, "solver")) {
      allow_only(*solver, "solver", {"starts", "seed", "step_tolerance", "max_iterations",
                                     "damping_floor", "damping_condition"});
      read(*solver, "starts", "solver", run.solver.starts);
      read(*solver, "step_tolerance", "solver", run.solver.step_tolerance);
      read(*solver, "max_iterations", "solver", run.solver.max_iterations);
      read(*solver, "damping_floor", "solver", run.solver.damping_floor);
      read(*solver, "damping_condition", "solver", run.solver.damping_condition);
      if (member(*solver, "seed")) {
        read(*solver, "seed", "solver", run.solver.seed);
        c.pinned_seeds.emplace_back("solver");
      }
    }
    if (const auto* red = member(root, "reduction")) {
      allow_only(*red, "reduction", {"stencil"});
      read(*red, "stencil", "reduction", run.stencil);
    }

    if (const auto* st = member(root, "stats")) {
      allow_only(*st, "stats", {"trajectory", "a", "b", "pairing"});
      read(*st, "trajectory", "stats", c.stats.trajectory);
      read(*st, "a", "stats", c.stats.a);
      read(*st, "b", "stats", c.stats.b);
      std::string pairing = "forward";
      read(*st, "pairing", "stats", pairing);
      if (pairing == "forward") {
        c.stats.pairing = Pairing::kForward;
      } else if (pairing == "reversed") {
        c.stats.pairing = Pairing::kReversed;
      } else {
        fail("stats.pairing", "must be 'forward' or 'reversed'");
      }
    }

    auto& pw = c.sensitivity.pathwise;
    pw.scheme = defaults.scheme;
    pw.dt = defaults.h;
    if (const auto* se = member(root, "sensitivity")) {
      allow_only(*se, "sensitivity", {"parameters", "ensemble", "horizon", "dt", "record_every",
                                      "scheme", "seed", "initial_state"});
      read(*se, "parameters", "sensitivity", c.sensitivity.parameters);
      read(*se, "ensemble", "sensitivity", pw.ensemble);
      read(*se, "horizon", "sensitivity", pw.horizon);
      read(*se, "dt", "sensitivity", pw.dt);
      read(*se, "record_every", "sensitivity", pw.record_every);
      pw.scheme = read_scheme(*se, "sensitivity", defaults.scheme);
      if (member(*se, "seed")) {
        read(*se, "seed", "sensitivity", pw.seed);
        c.pinned_seeds.emplace_back("sensitivity");
      }
      if (const auto* init = member(*se, "initial_state")) {
        if (!init->is_array()) fail("sensitivity.initial_state", "must be a list of numbers");
        std::vector<double> x;
        for (std::size_t i = 0; i < init->size(); ++i) {
          x.push_back(number((*init)[i], "sensitivity.initial_state[" + std::to_string(i) + "]"));
        }
        pw.initial_state = x;
      }
    }
    for (const auto& p : c.sensitivity.parameters) {
      if (std::find(names.begin(), names.end(), p) == names.end()) {
        fail("sensitivity.parameters", "names unknown parameter '" + p + "'");
      }
    }
    reseed(c, c.seed);
    return c;
  } catch (const Error& e) {
    std::string msg = e.what();
    const std::string own = "[" + std::string(kModule) + "] ";
    if (msg.rfind(own, 0) == 0) msg = msg.substr(own.size());
    throw ValidationError(kModule, source + ": " + msg);
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(kModule, "cannot read config '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  // A run manifest carries its resolved config under "config".
  try {
    const auto j = Json::parse(text, nullptr, true, true);
    if (j.is_object() && j.contains("command") && j.contains("config")) {
      return parse_config(j.at("config").dump(), path + " (manifest config)");
    }
  } catch (const nlohmann::json::parse_error&) {
    // parse_config reports the location below
  }
  return parse_config(text, path);
}

void reseed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  if (!pinned(c, "data")) c.run.data.seed = seed;
  if (!pinned(c, "training")) c.run.training.seed = seed + 1;
  if (!pinned(c, "solver")) c.run.solver.seed = seed + 2;
  if (!pinned(c, "sensitivity")) c.sensitivity.pathwise.seed = seed + 3;
}

Json to_json(const ExperimentConfig& c) {
  const auto model = make_model(c.run.model);
  Json j;
  j["pipeline"] = c.pipeline;
  j["model"] = c.run.model;
  Json truth = Json::object();
  const auto names = model->parameter_names();
  for (std::size_t i = 0; i < names.size() && i < c.run.truth.size(); ++i) truth[names[i]] = c.run.truth[i];
  j["truth"] = truth;
  j["data"] = sim_json(c.run.data);
  j["training"] = sim_json(c.run.training);
  j["common_random_numbers"] = c.run.common_random_numbers;
  j["lags"] = {{"count", c.run.lags.count}, {"spacing", c.run.lags.spacing}, {"offset", c.run.lags.offset}};
  Json box = Json::object();
  for (std::size_t i = 0; i < c.run.box.size(); ++i) {
    box[c.run.box.names()[i]] = {c.run.box.lower()[i], c.run.box.upper()[i]};
  }
  j["surrogate"] = {{"order", c.run.order}, {"nodes_per_axis", c.run.nodes_per_axis}, {"box", box}};
  j["x0_fixed"] = c.run.x0_fixed;
  j["solver"] = {{"starts", c.run.solver.starts},
                 {"seed", c.run.solver.seed},
                 {"step_tolerance", c.run.solver.step_tolerance},
                 {"max_iterations", c.run.solver.max_iterations},
                 {"damping_floor", c.run.solver.damping_floor},
                 {"damping_condition", c.run.solver.damping_condition}};
  j["reduction"] = {{"stencil", c.run.stencil}};
  j["stats"] = {{"trajectory", c.stats.trajectory},
                {"a", c.stats.a},
                {"b", c.stats.b},
                {"pairing", c.stats.pairing == Pairing::kForward ? "forward" : "reversed"}};
  const auto& pw = c.sensitivity.pathwise;
  Json se = {{"parameters", c.sensitivity.parameters},
             {"ensemble", pw.ensemble},
             {"horizon", pw.horizon},
             {"dt", pw.dt},
             {"record_every", pw.record_every},
             {"scheme", scheme_name(pw.scheme)},
             {"seed", pw.seed}};
  if (pw.initial_state) se["initial_state"] = *pw.initial_state;
  j["sensitivity"] = se;
  j["output"] = c.output;
  j["threads"] = c.threads;
  j["seed"] = c.seed;
  return j;
}

void validate(const ExperimentConfig& c) {
  if (c.threads < 1) fail("threads", "must be at least 1");
  validate_pipeline_config(c.run);
  const auto model = make_model(c.run.model);
  const auto& pw = c.sensitivity.pathwise;
  if (pw.ensemble < 1) fail("sensitivity.ensemble", "must be at least 1");
  if (!(pw.horizon > 0.0)) fail("sensitivity.horizon", "must be positive");
  if (!(pw.dt > 0.0)) fail("sensitivity.dt", "must be positive");
  if (pw.record_every < 1) fail("sensitivity.record_every", "must be at least 1");
  if (pw.initial_state && pw.initial_state->size() != model->state_dim()) {
    fail("sensitivity.initial_state", "needs one value per state component");
  }
  auto check_ids = [&](const std::vector<std::string>& ids, const std::string& path) {
    if (ids.empty()) fail(path, "needs at least one observable");
    for (const auto& id : ids) {
      const bool ok = id.size() >= 2 && (id[0] == 'x' || id[0] == 'B') &&
                      std::all_of(id.begin() + 1, id.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
      if (!ok) fail(path, "has unknown observable '" + id + "' (use x1, x2, ... or B1, B2, ...)");
      const auto index = std::stoul(id.substr(1));
      if (index < 1 || index > model->state_dim()) fail(path, "observable '" + id + "' is out of range");
    }
  };
  check_ids(c.stats.a, "stats.a");
  check_ids(c.stats.b, "stats.b");
}

void write_manifest(const std::string& path, const RunManifest& m) {
  Json j;
  j["command"] = m.command;
  j["config"] = to_json(m.config);
  j["artifacts"] = m.artifacts;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(kModule, "cannot write '" + path + "'");
  os << j.dump(2) << '\n';
}

}  // namespace respfit
