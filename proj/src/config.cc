#include "oodcharge/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>

namespace oodcharge {

using nlohmann::json;

namespace {

const char* to_string(HorizonMode mode) {
  return mode == HorizonMode::kDeparture ? "departure" : "fixed";
}

const char* to_string(SolarForecast f) {
  switch (f) {
    case SolarForecast::kLast: return "last";
    case SolarForecast::kMean: return "mean";
    case SolarForecast::kOracle: return "oracle";
    case SolarForecast::kZero: return "zero";
  }
  return "last";
}

const char* to_string(DepartureSource d) {
  return d == DepartureSource::kUser ? "user" : "observed";
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("config key '{}': {}", key, e.what()));
  }
}

}  // namespace

std::string format_beta(double beta) {
  if (std::isinf(beta)) return "inf";
  return fmt::format("{}", beta);
}

double parse_beta(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf" || s == "infinity" || s == "Infinity") return kInf;
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
  }
  throw ParseError(fmt::format("invalid beta value '{}'", j.dump()));
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("config: " + msg); };
  if (episodes < 1) fail("episodes must be >= 1");
  if (shift_episode < 1 || shift_episode >= episodes) fail("shift_episode must be in [1, episodes - 1]");
  if (T < 1) fail("T must be >= 1");
  if (m < 1) fail("m must be >= 1");
  if (!(delta_hours > 0)) fail("delta_hours must be positive");
  if (mu_eff < 0 || mu_eff > 1) fail("mu_eff must be in [0, 1]");
  if (beta_ctrl < 0 || beta_ctrl > 1) fail("beta_ctrl must be in [0, 1]");
  if (!(alpha_cost > 0)) fail("alpha_cost must be positive");
  if (beta_ood_grid.empty()) fail("beta_ood_grid must be nonempty");
  for (double b : beta_ood_grid) {
    if (std::isnan(b) || b < 0) fail("every beta must be >= 0 or inf");
  }
  if (seeds.empty()) fail("seeds must be nonempty");
  if (solar_pre_sd < 0 || solar_post_sd < 0) fail("solar sd must be >= 0");
  if (space_mode != "box" && space_mode != "simplex") fail("space_mode must be box or simplex");
  if (!(action_lo <= action_hi)) fail("action bounds reversed");
  if (horizon < 1 || max_horizon < 1) fail("horizon must be >= 1");
  if (!(qp_tol > 0)) fail("qp_tol must be positive");
  if (qp_max_iter < 1) fail("qp_max_iter must be >= 1");
  if (!(lr > 0)) fail("lr must be positive");
  if (batch < 1) fail("batch must be >= 1");
  if (buffer < batch) fail("buffer must hold at least one batch");
  if (!(tau_soft > 0 && tau_soft <= 1)) fail("tau_soft must be in (0, 1]");
  if (hidden < 1 || hidden_layers < 0) fail("invalid network size");
  if (optimizer != "adam" && optimizer != "sgd") fail("optimizer must be adam or sgd");
  if (!(discount > 0 && discount <= 1)) fail("discount must be in (0, 1]");
  if (!(cost_scale > 0)) fail("cost_scale must be positive");
  if (update_every < 1) fail("update_every must be >= 1");
  if (!(td_decay > 0 && td_decay <= 1)) fail("td_decay must be in (0, 1]");
  if (pre_begin() < 0 || pre_end() > episodes || pre_begin() >= pre_end()) {
    fail("pre-shift window is empty or out of range");
  }
  if (post_begin() < 0 || post_end() > episodes || post_begin() >= post_end()) {
    fail("post-shift window is empty or out of range");
  }
}

// Default windows scale with the schedule: for (1200, 800) they are
// [600, 800) and [1000, 1200).
int ExperimentConfig::pre_begin() const {
  return window_pre_begin >= 0 ? window_pre_begin : shift_episode - std::max(1, shift_episode / 4);
}
int ExperimentConfig::pre_end() const {
  return window_pre_end >= 0 ? window_pre_end : shift_episode;
}
int ExperimentConfig::post_begin() const {
  return window_post_begin >= 0 ? window_post_begin : episodes - std::max(1, (episodes - shift_episode) / 2);
}
int ExperimentConfig::post_end() const {
  return window_post_end >= 0 ? window_post_end : episodes;
}

SpaceSpec ExperimentConfig::space() const {
  if (space_mode == "simplex") {
    return SpaceSpec::nonneg_simplex(m, line_limit, b_bound, action_lo, action_hi);
  }
  return SpaceSpec::box(m, e_bound, b_bound, action_lo, action_hi);
}

DynamicsSpec ExperimentConfig::dynamics() const {
  return DynamicsSpec::constant(m, delta_hours, mu_eff, beta_ctrl);
}

CostSpec ExperimentConfig::costs() const { return CostSpec::diagonal(m, 1.0, alpha_cost); }

json ExperimentConfig::to_json() const {
  json grid = json::array();
  for (double b : beta_ood_grid) {
    if (std::isinf(b)) {
      grid.push_back("inf");
    } else {
      grid.push_back(b);
    }
  }
  json j;
  j["episodes"] = episodes;
  j["shift_episode"] = shift_episode;
  j["T"] = T;
  j["m"] = m;
  j["delta_hours"] = delta_hours;
  j["mu_eff"] = mu_eff;
  j["beta_ctrl"] = beta_ctrl;
  j["alpha_cost"] = alpha_cost;
  j["beta_ood_grid"] = grid;
  j["seeds"] = seeds;
  j["master_seed"] = master_seed;
  j["solar_pre_mean"] = solar_pre_mean;
  j["solar_pre_sd"] = solar_pre_sd;
  j["solar_post_mean"] = solar_post_mean;
  j["solar_post_sd"] = solar_post_sd;
  j["solar_truncation_sd"] = solar_truncation_sd;
  j["sessions_pre"] = sessions_pre;
  j["sessions_post"] = sessions_post;
  j["generated_session_count"] = generated_session_count;
  j["space_mode"] = space_mode;
  j["e_bound"] = e_bound;
  j["b_bound"] = b_bound;
  j["line_limit"] = line_limit;
  j["action_lo"] = action_lo;
  j["action_hi"] = action_hi;
  j["horizon_mode"] = to_string(horizon_mode);
  j["horizon"] = horizon;
  j["max_horizon"] = max_horizon;
  j["qp_tol"] = qp_tol;
  j["qp_max_iter"] = qp_max_iter;
  j["solar_forecast"] = to_string(solar_forecast);
  j["departure_source"] = to_string(departure_source);
  j["estimator_clip"] = estimator_clip;
  j["mpc_state_constraints"] = mpc_state_constraints;
  j["lr"] = lr;
  j["batch"] = batch;
  j["buffer"] = buffer;
  j["tau_soft"] = tau_soft;
  j["hidden"] = hidden;
  j["hidden_layers"] = hidden_layers;
  j["optimizer"] = optimizer;
  j["discount"] = discount;
  j["cost_scale"] = cost_scale;
  j["noise_start"] = noise_start;
  j["noise_end"] = noise_end;
  j["update_every"] = update_every;
  j["td_absolute"] = td_absolute;
  j["td_decay"] = td_decay;
  j["normalize_rewards"] = normalize_rewards;
  j["trust_log"] = trust_log;
  j["window_pre_begin"] = pre_begin();
  j["window_pre_end"] = pre_end();
  j["window_post_begin"] = post_begin();
  j["window_post_end"] = post_end();
  j["out_dir"] = out_dir;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ParseError("config must be a flat JSON object");
  static const std::set<std::string> known = {
      "episodes", "shift_episode", "T", "m", "delta_hours", "mu_eff", "beta_ctrl",
      "alpha_cost", "beta_ood_grid", "seeds", "master_seed", "solar_pre_mean", "solar_pre_sd",
      "solar_post_mean", "solar_post_sd", "solar_truncation_sd", "sessions_pre",
      "sessions_post", "generated_session_count", "space_mode", "e_bound", "b_bound",
      "line_limit", "action_lo", "action_hi", "horizon_mode", "horizon", "max_horizon",
      "qp_tol", "qp_max_iter", "solar_forecast", "departure_source", "estimator_clip",
      "mpc_state_constraints", "lr", "batch", "buffer", "tau_soft", "hidden",
      "hidden_layers", "optimizer", "discount", "cost_scale", "noise_start", "noise_end",
      "update_every", "td_absolute", "td_decay", "normalize_rewards", "trust_log",
      "window_pre_begin", "window_pre_end", "window_post_begin", "window_post_end", "jobs",
      "out_dir"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ParseError(fmt::format("unknown config key '{}'", key));
    if (value.is_object()) throw ParseError(fmt::format("config key '{}' must be flat", key));
  }

  ExperimentConfig c;
  read(j, "episodes", c.episodes);
  read(j, "shift_episode", c.shift_episode);
  read(j, "T", c.T);
  read(j, "m", c.m);
  read(j, "delta_hours", c.delta_hours);
  read(j, "mu_eff", c.mu_eff);
  read(j, "beta_ctrl", c.beta_ctrl);
  read(j, "alpha_cost", c.alpha_cost);
  if (j.contains("beta_ood_grid")) {
    const json& g = j.at("beta_ood_grid");
    c.beta_ood_grid.clear();
    if (g.is_array()) {
      for (const json& b : g) c.beta_ood_grid.push_back(parse_beta(b));
    } else {
      c.beta_ood_grid.push_back(parse_beta(g));
    }
  }
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    c.seeds.clear();
    if (s.is_number_integer()) {
      const auto count = s.get<long long>();
      if (count < 1) throw ParseError("config key 'seeds': count must be >= 1");
      for (long long k = 0; k < count; ++k) c.seeds.push_back(static_cast<std::uint64_t>(k));
    } else if (s.is_array()) {
      for (const json& v : s) {
        if (!v.is_number_integer()) throw ParseError("config key 'seeds': integers expected");
        c.seeds.push_back(v.get<std::uint64_t>());
      }
    } else {
      throw ParseError("config key 'seeds' must be a count or a list");
    }
  }
  read(j, "master_seed", c.master_seed);
  read(j, "solar_pre_mean", c.solar_pre_mean);
  read(j, "solar_pre_sd", c.solar_pre_sd);
  read(j, "solar_post_mean", c.solar_post_mean);
  read(j, "solar_post_sd", c.solar_post_sd);
  read(j, "solar_truncation_sd", c.solar_truncation_sd);
  read(j, "sessions_pre", c.sessions_pre);
  read(j, "sessions_post", c.sessions_post);
  read(j, "generated_session_count", c.generated_session_count);
  read(j, "space_mode", c.space_mode);
  read(j, "e_bound", c.e_bound);
  read(j, "b_bound", c.b_bound);
  read(j, "line_limit", c.line_limit);
  read(j, "action_lo", c.action_lo);
  read(j, "action_hi", c.action_hi);
  if (j.contains("horizon_mode")) {
    std::string mode;
    read(j, "horizon_mode", mode);
    if (mode == "departure") {
      c.horizon_mode = HorizonMode::kDeparture;
    } else if (mode == "fixed") {
      c.horizon_mode = HorizonMode::kFixed;
    } else {
      throw ParseError(fmt::format("config key 'horizon_mode': unknown value '{}'", mode));
    }
  }
  read(j, "horizon", c.horizon);
  read(j, "max_horizon", c.max_horizon);
  read(j, "qp_tol", c.qp_tol);
  read(j, "qp_max_iter", c.qp_max_iter);
  if (j.contains("solar_forecast")) {
    std::string f;
    read(j, "solar_forecast", f);
    if (f == "last") {
      c.solar_forecast = SolarForecast::kLast;
    } else if (f == "mean") {
      c.solar_forecast = SolarForecast::kMean;
    } else if (f == "oracle") {
      c.solar_forecast = SolarForecast::kOracle;
    } else if (f == "zero") {
      c.solar_forecast = SolarForecast::kZero;
    } else {
      throw ParseError(fmt::format("config key 'solar_forecast': unknown value '{}'", f));
    }
  }
  if (j.contains("departure_source")) {
    std::string d;
    read(j, "departure_source", d);
    if (d == "user") {
      c.departure_source = DepartureSource::kUser;
    } else if (d == "observed") {
      c.departure_source = DepartureSource::kObserved;
    } else {
      throw ParseError(fmt::format("config key 'departure_source': unknown value '{}'", d));
    }
  }
  read(j, "estimator_clip", c.estimator_clip);
  read(j, "mpc_state_constraints", c.mpc_state_constraints);
  read(j, "lr", c.lr);
  read(j, "batch", c.batch);
  read(j, "buffer", c.buffer);
  read(j, "tau_soft", c.tau_soft);
  read(j, "hidden", c.hidden);
  read(j, "hidden_layers", c.hidden_layers);
  read(j, "optimizer", c.optimizer);
  read(j, "discount", c.discount);
  read(j, "cost_scale", c.cost_scale);
  read(j, "noise_start", c.noise_start);
  read(j, "noise_end", c.noise_end);
  read(j, "update_every", c.update_every);
  read(j, "td_absolute", c.td_absolute);
  read(j, "td_decay", c.td_decay);
  read(j, "normalize_rewards", c.normalize_rewards);
  read(j, "trust_log", c.trust_log);
  read(j, "window_pre_begin", c.window_pre_begin);
  read(j, "window_pre_end", c.window_pre_end);
  read(j, "window_post_begin", c.window_post_begin);
  read(j, "window_post_end", c.window_post_end);
  read(j, "jobs", c.jobs);
  read(j, "out_dir", c.out_dir);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open config file '{}'", path));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("config file '{}': {}", path, e.what()));
  }
  return from_json(j);
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a(to_json().dump()); }

}  // namespace oodcharge
