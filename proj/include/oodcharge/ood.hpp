#pragma once

// The meta-policy: accumulate TD-errors of the learned critic, turn them into
// an awareness radius around the baseline action, and project the learned
// action onto that ball.

#include <iosfwd>
#include <memory>
#include <vector>

#include "oodcharge/core.hpp"
#include "oodcharge/env.hpp"
#include "oodcharge/mpc.hpp"
#include "oodcharge/nn.hpp"

namespace oodcharge {

/// Episode-local accumulator of TD magnitudes and the resulting radius.
struct RadiusState {
  double beta = 1.0;  // may be +inf
  bool absolute = true;
  double decay = 1.0;
  double cum_td = 0.0;

  void reset() { cum_td = 0.0; }
  void accumulate(double td) { cum_td = decay * cum_td + (absolute ? std::abs(td) : td); }
  double radius(double gap) const;
};

/// c_prev + q_next - q_prev.
inline double td_error(double cost_prev, double q_next, double q_prev) { return cost_prev + q_next - q_prev; }

/// c_{t-1} + Q(s_t, pi(s_t)) - Q(s_{t-1}, a_{t-1}), states given as learner features.
double td_error(const Mlp& critic, const Mlp& actor, const Vec& s_t, const Vec& s_prev, const Vec& a_prev,
                double cost_prev);

/// [gap - beta * cum]^+; beta = inf gives 0, and 0 when cum = 0 as well.
double awareness_radius(double beta, double cum_td, double gap);

/// min{1, r / gap}. When gap = 0: 1 if the radius budget is untouched
/// (finite beta with beta * cum = 0), else 0.
double trust_coefficient(double gap, double radius, double beta, double cum_td);

/// argmin ||a - a_tilde|| over the action box intersected with the ball
/// B(a_bar, r). a_bar must lie in the box.
Vec project_to_ball(const Vec& a_tilde, const Vec& a_bar, double r, const SpaceSpec& space);

/// Learner input: state scaled by the state box, then t / T.
Vec learner_features(const Vec& s, int t, const SpaceSpec& space, int T);

struct TrustRecord {
  int t = 0;
  Vec a_bar;
  Vec a_tilde;
  Vec action;
  double gap = 0.0;
  double radius = 0.0;
  double lambda = 0.0;
  double td = 0.0;
  double cum_td = 0.0;
};

enum class AgentMode { kOod, kMpc, kLearned };

struct AgentSettings {
  AgentMode mode = AgentMode::kOod;
  double beta = 1.0;
  bool td_absolute = true;
  double td_decay = 1.0;
  double cost_scale = 1e-3;
  int update_every = 1;
  bool train = true;    // store transitions and update the learner
  bool explore = true;  // add exploration noise to the learned action
};

/// One Algorithm-1 loop over an episode. The MPC controller provides both the
/// baseline action and the state estimate; the learner (absent in pure MPC
/// mode) provides the learned action and the critic.
class OodAgent : public Policy {
 public:
  OodAgent(const SpaceSpec& space, int T, MpcController& mpc, DdpgLearner* learner, AgentSettings settings);

  void begin_episode(const SessionSet& sessions) override;
  Vec act(int t) override;
  void observe(const Vec& applied, const StepOutcome& outcome) override;

  /// Fraction of training elapsed, drives the exploration decay.
  void set_progress(double progress) { progress_ = progress; }
  const std::vector<TrustRecord>& records() const { return records_; }
  const RadiusState& radius_state() const { return radius_; }
  const AgentSettings& settings() const { return settings_; }

 private:
  SpaceSpec space_;
  int T_;
  MpcController& mpc_;
  DdpgLearner* learner_;
  AgentSettings settings_;
  RadiusState radius_;
  double progress_ = 0.0;
  long steps_ = 0;

  std::vector<TrustRecord> records_;
  Vec features_;       // features of s~_t at the current step
  Vec prev_features_;  // of s~_{t-1}
  Vec prev_action_;
  double prev_cost_ = 0.0;
  bool have_prev_ = false;
};

void write_trust_log_header(std::ostream& out);
void write_trust_log(std::ostream& out, int episode, const std::vector<TrustRecord>& records);

}  // namespace oodcharge
