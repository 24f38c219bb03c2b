#pragma once

// The charging MDP: ground-truth state, safety projections, arrival and solar
// perturbations, and per-step costs.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "oodcharge/core.hpp"

namespace oodcharge {

struct StationState {
  Vec e;  // remaining demand per charger (kWh)
  Vec b;  // charging rates
  int t = 0;

  Vec stacked() const;
  static StationState from_stacked(const Vec& s, int t);
  static StationState zero(int m) { return {Vec::Zero(m), Vec::Zero(m), 0}; }
};

/// Scalar solar injection h ~ N(mean, sd^2), truncated at +-truncation_sd
/// standard deviations so perturbations stay bounded.
struct SolarModel {
  double mean = 0.0;
  double sd = 0.0;
  double truncation_sd = 4.0;

  double sample(Rng& rng) const;
  /// Largest |h| the model can produce.
  double bound() const;
};

/// Session events of the transition t -> t+1 at each charger.
struct TransitionEvents {
  std::vector<bool> reset;      // departure in (t, t+1] or charger idle at t+1
  std::vector<bool> departed;   // departure in (t, t+1]
  Vec arrival;                  // true energy of sessions arriving in (t, t+1]
  std::vector<int> arrived;     // indices into the session set
};

TransitionEvents transition_events(const SessionSet& sessions, int t, int m);

/// Departure/idle reset followed by the Euclidean projection onto S.
StationState project_state(const Vec& s, const SpaceSpec& spec, const std::vector<bool>& reset, int t = 0);
void project_state_inplace(Eigen::Ref<Vec> s, const SpaceSpec& spec);
Vec project_action(const Vec& a, const SpaceSpec& spec);

struct Observation {
  std::vector<bool> departed;
  std::vector<int> arrived;  // session indices; user inputs are readable, true values are not
  double solar = 0.0;        // realized h of this transition
};

struct StepOutcome {
  Observation observed;
  double cost = 0.0;
  StationState true_state;  // hidden from policies, diagnostics only
  Vec arrival;              // true l_t, diagnostics only
  double perturbation_norm = 0.0;  // |l' - Delta h'|
  bool done = false;
};

/// One transition in the projected form
///   s' = g_S[A s + B g_A(a) + l' - Delta h'].
Vec transition(const SystemMatrices& sys, const SpaceSpec& spec, double delta_hours, const Vec& s,
               const Vec& a, const TransitionEvents& ev, double h);

/// The same transition written as s' = A s + B a + w(s, a), with w assembled
/// from its additive pieces (action clip, resets, arrivals, solar, state clip).
Vec transition_w_form(const SystemMatrices& sys, const SpaceSpec& spec, double delta_hours, const Vec& s,
                      const Vec& a, const TransitionEvents& ev, double h, Vec* w_out = nullptr);

class ChargingEnv {
 public:
  ChargingEnv(SpaceSpec space, DynamicsSpec dynamics, CostSpec costs, int T);

  void reset(const SessionSet& sessions, const SolarModel& solar, std::uint64_t seed);
  StepOutcome step(const Vec& a);

  const StationState& state() const { return state_; }
  bool done() const { return state_.t >= T_; }
  int horizon() const { return T_; }
  const SpaceSpec& space() const { return space_; }
  const DynamicsSpec& dynamics() const { return dynamics_; }
  const CostSpec& costs() const { return costs_; }
  const SessionSet& sessions() const { return *sessions_; }

 private:
  SpaceSpec space_;
  DynamicsSpec dynamics_;
  CostSpec costs_;
  int T_;
  const SessionSet* sessions_ = nullptr;
  SolarModel solar_;
  Rng rng_;
  StationState state_;
};

/// Largest |l' - Delta h'| any transition of the session set can produce.
double perturbation_bound(const SessionSet& sessions, const SolarModel& solar, double delta_hours, int m);

/// Per-step action source for run_episode.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void begin_episode(const SessionSet& sessions) { (void)sessions; }
  virtual Vec act(int t) = 0;
  virtual void observe(const Vec& applied, const StepOutcome& outcome) {
    (void)applied;
    (void)outcome;
  }
};

class ZeroPolicy : public Policy {
 public:
  explicit ZeroPolicy(int m) : m_(m) {}
  Vec act(int) override { return Vec::Zero(m_); }

 private:
  int m_;
};

struct Trajectory {
  std::vector<StationState> states;  // T+1
  std::vector<Vec> actions;          // T, after g_A
  std::vector<double> costs;         // T
  std::vector<double> solar;         // T
  double total_cost = 0.0;
};

Trajectory run_episode(ChargingEnv& env, Policy& policy, const SessionSet& sessions, const SolarModel& solar,
                       std::uint64_t seed);

void write_trajectory_header(std::ostream& out, int m);
void write_trajectory(std::ostream& out, int episode, const Trajectory& traj);

}  // namespace oodcharge
