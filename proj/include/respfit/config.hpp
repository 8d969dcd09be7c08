#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "respfit/pipelines.hpp"
#include "respfit/sensitivity.hpp"
#include "respfit/stats.hpp"

namespace respfit {

/// Observables for the `stats` command, by id: "x1", "x2", ... for
/// coordinates and "B1", "B2", ... for conjugate variables at the truth.
struct StatsSettings {
  std::string trajectory;  // empty: <output>/data.traj
  std::vector<std::string> a = {"x1"};
  std::vector<std::string> b = {"x1"};
  Pairing pairing = Pairing::kForward;
};

struct SensitivitySettings {
  std::vector<std::string> parameters;
  PathwiseConfig pathwise;
};

struct ExperimentConfig {
  std::string pipeline;  // "langevin" or "triplewell"
  PipelineConfig run;
  StatsSettings stats;
  SensitivitySettings sensitivity;
  std::string output = "respfit-out";
  unsigned threads = 1;
  std::uint64_t seed = 0;
  /// Component seeds set explicitly in the file ("data", "training",
  /// "solver", "sensitivity"); reseed() leaves these alone.
  std::vector<std::string> pinned_seeds;
};

/// Parses the JSON dialect with // and /* */ comments. Unknown fields, type
/// mismatches and invalid values raise ValidationError naming the field path;
/// syntax errors name the line and column. `source` labels messages.
///
/// Seeds not given explicitly derive from the global seed: data = seed,
/// training = seed + 1, solver = seed + 2, sensitivity = seed + 3.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
/// Reads a config file, or the "config" member of a run manifest.
ExperimentConfig load_config(const std::string& path);

/// Fully resolved config; parse_config(to_json(c).dump()) reproduces c.
nlohmann::ordered_json to_json(const ExperimentConfig& c);

/// Re-derives the component seeds after the global seed changes, except
/// those the config file pinned.
void reseed(ExperimentConfig& c, std::uint64_t seed);

/// Checks everything that can be checked without computing.
void validate(const ExperimentConfig& c);

struct RunManifest {
  std::string command;
  ExperimentConfig config;
  std::vector<std::string> artifacts;
};
void write_manifest(const std::string& path, const RunManifest& m);

}  // namespace respfit
