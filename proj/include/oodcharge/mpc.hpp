#pragma once

// Receding-horizon baseline: state estimation from user-provided session
// information and the per-step horizon QP.

#include <iosfwd>
#include <vector>

#include "oodcharge/config.hpp"
#include "oodcharge/core.hpp"
#include "oodcharge/env.hpp"
#include "oodcharge/qp.hpp"

namespace oodcharge {

/// What the controller believes about the session at each charger, built only
/// from observed arrivals (with their user inputs) and observed departures.
class SessionBelief {
 public:
  explicit SessionBelief(int m = 0) : slots_(m) {}

  void clear();
  void record_arrival(int charger, double arrival, double user_departure, double user_energy);
  void record_departure(int charger);

  bool occupied(int charger) const { return slots_[charger].occupied; }
  /// Believed active at state index tau (arrived, not departed, tau < user departure).
  bool active(int charger, double tau) const;
  /// Largest user departure over the chargers believed active at tau; -inf if none.
  double latest_departure(double tau) const;
  int m() const { return static_cast<int>(slots_.size()); }

 private:
  struct Slot {
    bool occupied = false;
    double arrival = 0.0;
    double user_departure = 0.0;
    double user_energy = 0.0;
  };
  std::vector<Slot> slots_;
};

/// Predicted perturbations and reset masks for transitions tau = t .. t_end-1.
struct PredictionSet {
  int t = 0;
  int t_end = 0;
  std::vector<Vec> offsets;               // w~_{tau|t}
  std::vector<std::vector<bool>> reset;   // predicted idle/departure masks
  int horizon() const { return t_end - t; }
};

/// s~_t = g~_S(A s~_{t-1} + B g_A(a_{t-1}) + w~_{t-1}): reset the chargers in
/// `reset`, add the predicted e-injection, then (optionally) project onto S.
Vec estimate_state(const SystemMatrices& sys, const SpaceSpec& spec, const Vec& prev, const Vec& action,
                   const Vec& w_pred, const std::vector<bool>& reset, bool clip);

/// Horizon QP of the baseline at time t. The terminal weight is P_term when
/// t_end < T-1 and Q_{t_end} otherwise.
StagedQp build_mpc_problem(const Vec& s_est, const PredictionSet& preds, const CostSpec& costs,
                           const DynamicsSpec& dyn, const SpaceSpec& space, int T, bool state_constraints,
                           const Mat* terminal = nullptr);

struct MpcResult {
  Vec action;  // g_A-projected first action
  StagedSolution solution;
};

/// Solves the horizon problem and commits the first action. A zero-length
/// horizon returns the zero action.
MpcResult mpc_action(const StagedQp& problem, const SpaceSpec& space, const SolverSettings& settings,
                     const Vec* warm_start = nullptr);

struct MpcSettings {
  HorizonMode horizon_mode = HorizonMode::kDeparture;
  int horizon = 12;
  int max_horizon = 144;
  SolverSettings solver;
  SolarForecast solar_forecast = SolarForecast::kLast;
  double solar_prior = 10.0;   // forecast before any observation and in mean mode
  double solar_oracle = 10.0;  // regime mean, used by the oracle mode
  DepartureSource departure_source = DepartureSource::kUser;
  bool estimator_clip = true;
  bool state_constraints = false;
  bool warm_start = true;

  static MpcSettings from_config(const ExperimentConfig& cfg);
};

struct MpcStepLog {
  int t = 0;
  int horizon = 0;
  int iterations = 0;
  double objective = 0.0;
  Vec action;
};

/// pi_MPC. Reads only observations and user inputs; never the true state or any
/// learned quantity.
class MpcController {
 public:
  MpcController(SpaceSpec space, DynamicsSpec dynamics, CostSpec costs, int T, MpcSettings settings);

  void begin_episode(const SessionSet& sessions);
  /// Baseline action at the current estimate (time t).
  Vec action(int t);
  /// Advances the estimate across the transition that used `applied`.
  void observe(const Vec& applied, const Observation& obs);

  const Vec& estimate() const { return estimate_; }
  int time() const { return t_; }
  const MpcStepLog& last_log() const { return log_; }
  const SessionBelief& belief() const { return belief_; }
  const MpcSettings& settings() const { return settings_; }
  void set_regime_solar(double prior, double oracle) {
    settings_.solar_prior = prior;
    settings_.solar_oracle = oracle;
  }

  PredictionSet predictions(int t) const;
  int horizon_length(int t) const;

 private:
  double solar_forecast() const;

  SpaceSpec space_;
  DynamicsSpec dynamics_;
  CostSpec costs_;
  int T_;
  MpcSettings settings_;
  const SessionSet* sessions_ = nullptr;
  SessionBelief belief_;
  Vec estimate_;
  int t_ = 0;
  double last_solar_ = 0.0;
  bool have_solar_ = false;
  Vec warm_;
  MpcStepLog log_;
};

/// Runs pi_MPC alone through an episode.
class MpcPolicy : public Policy {
 public:
  explicit MpcPolicy(MpcController& controller) : controller_(controller) {}
  void begin_episode(const SessionSet& sessions) override { controller_.begin_episode(sessions); }
  Vec act(int t) override { return controller_.action(t); }
  void observe(const Vec& applied, const StepOutcome& outcome) override {
    controller_.observe(applied, outcome.observed);
  }

 private:
  MpcController& controller_;
};

void write_mpc_log_header(std::ostream& out, int m);
void write_mpc_log(std::ostream& out, const MpcStepLog& log);

}  // namespace oodcharge
