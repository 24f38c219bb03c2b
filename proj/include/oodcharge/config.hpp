#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodcharge/core.hpp"

namespace oodcharge {

enum class HorizonMode { kDeparture, kFixed };
enum class SolarForecast { kLast, kMean, kOracle, kZero };
enum class DepartureSource { kUser, kObserved };

/// Every knob of a distribution-shift experiment. Defaults reproduce the
/// case study (T = 144, m = 2, 1,200 episodes, shift at 800).
struct ExperimentConfig {
  int episodes = 1200;
  int shift_episode = 800;
  int T = 144;
  int m = 2;
  double delta_hours = 1.0 / 6.0;
  double mu_eff = 0.8;
  double beta_ctrl = 0.2;
  double alpha_cost = 0.1;
  std::vector<double> beta_ood_grid{0.0, 0.1, 1.0, 10.0, kInf};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::uint64_t master_seed = 20240501;

  double solar_pre_mean = 10.0;
  double solar_pre_sd = 0.05;
  double solar_post_mean = 0.0;
  double solar_post_sd = 0.05;
  double solar_truncation_sd = 4.0;

  // Session fixtures; an empty path selects the built-in generated profile.
  std::string sessions_pre;
  std::string sessions_post;
  int generated_session_count = 12;

  // Spaces.
  std::string space_mode = "box";
  double e_bound = 100.0;
  double b_bound = 6.6;
  double line_limit = 8.0;
  double action_lo = -2.0;
  double action_hi = 2.0;

  // MPC.
  HorizonMode horizon_mode = HorizonMode::kDeparture;
  int horizon = 12;  // fixed mode
  int max_horizon = 144;
  double qp_tol = 1e-8;
  int qp_max_iter = 50000;
  SolarForecast solar_forecast = SolarForecast::kLast;
  DepartureSource departure_source = DepartureSource::kUser;
  bool estimator_clip = true;
  bool mpc_state_constraints = false;

  // Learner.
  double lr = 1e-3;
  int batch = 128;
  int buffer = 1000000;
  double tau_soft = 0.005;
  int hidden = 64;
  int hidden_layers = 2;
  std::string optimizer = "adam";
  double discount = 1.0;
  double cost_scale = 1e-3;
  double noise_start = 0.1;  // fraction of the action range
  double noise_end = 0.01;
  int update_every = 1;

  // Awareness radius.
  bool td_absolute = true;
  double td_decay = 1.0;

  // Outputs.
  bool normalize_rewards = true;
  bool trust_log = true;
  int window_pre_begin = -1;  // -1 -> derived from shift_episode
  int window_pre_end = -1;
  int window_post_begin = -1;
  int window_post_end = -1;
  int jobs = 0;  // 0 -> hardware concurrency
  std::string out_dir = "out";

  /// Throws ValidationError on inconsistent settings.
  void validate() const;

  int pre_begin() const;
  int pre_end() const;
  int post_begin() const;
  int post_end() const;

  SpaceSpec space() const;
  DynamicsSpec dynamics() const;
  CostSpec costs() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
  /// FNV-1a of the canonical JSON dump.
  std::uint64_t hash() const;
};

std::string format_beta(double beta);
double parse_beta(const nlohmann::json& j);

}  // namespace oodcharge
