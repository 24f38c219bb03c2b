#pragma once

// Distribution-shift experiment: regimes, the per-seed MPC reference pass,
// (beta, seed) cells, manifests and CSV outputs.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "oodcharge/analysis.hpp"
#include "oodcharge/config.hpp"
#include "oodcharge/env.hpp"
#include "oodcharge/mpc.hpp"
#include "oodcharge/ood.hpp"

namespace oodcharge {

inline constexpr const char* kVersion = "0.1.0";

/// Session day and solar model of each side of the shift.
struct Regimes {
  SessionSet pre, post;
  SolarModel solar_pre, solar_post;

  const SessionSet& sessions(bool shifted) const { return shifted ? post : pre; }
  const SolarModel& solar(bool shifted) const { return shifted ? solar_post : solar_pre; }
};

/// Loads the configured fixtures, or generates the built-in profiles.
Regimes load_regimes(const ExperimentConfig& cfg);

/// Environment seed of one episode; shared by every beta of a seed.
std::uint64_t episode_seed(const ExperimentConfig& cfg, std::uint64_t seed, int episode);
std::uint64_t learner_seed(const ExperimentConfig& cfg, std::uint64_t seed);

DdpgParams ddpg_params(const ExperimentConfig& cfg);
AgentSettings agent_settings(const ExperimentConfig& cfg, double beta, AgentMode mode);

/// Pure-MPC episode costs of one seed, the normalizer of reward_norm.
std::vector<double> reference_costs(const ExperimentConfig& cfg, const Regimes& regimes, std::uint64_t seed);

struct CellSpec {
  int index = 0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::string rewards_path;
  std::string stats_path;
  std::string trust_path;  // empty when the trust log is off
};

struct CellResult {
  std::vector<EpisodeRecord> episodes;
  bool ok = true;
  std::string error;
};

/// Runs every episode of one (beta, seed) cell and writes its CSVs. The
/// reference costs normalize the rewards; trust records go to `trust` when given.
CellResult run_cell(const ExperimentConfig& cfg, const Regimes& regimes, const CellSpec& cell,
                    const std::vector<double>& reference, std::ostream* trust = nullptr);

struct RunManifest {
  std::uint64_t config_hash = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> betas;
  std::vector<CellSpec> cells;
  std::string version = kVersion;

  static RunManifest plan(const ExperimentConfig& cfg);
  /// First line of manifest.jsonl.
  std::string header_json() const;
};

struct ExperimentOutcome {
  std::vector<CellResult> cells;
  std::vector<SummaryRow> summary;
  int exit_code = 0;  // 0 ok, 2 some cell failed
};

/// Full grid into cfg.out_dir: manifest.jsonl, per-cell CSVs, rewards.csv,
/// episode_stats.csv and summary.csv. Progress lines go to `log` when given.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// Re-aggregates rewards.csv / episode_stats.csv of an output directory.
std::vector<SummaryRow> analyze_directory(const std::string& dir, const ExperimentConfig& cfg);

}  // namespace oodcharge
