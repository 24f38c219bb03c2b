#include "oodcharge/env.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>

#include "oodcharge/qp.hpp"

namespace oodcharge {

Vec StationState::stacked() const {
  Vec s(e.size() + b.size());
  s << e, b;
  return s;
}

StationState StationState::from_stacked(const Vec& s, int t) {
  const auto m = s.size() / 2;
  return {s.head(m), s.tail(m), t};
}

double SolarModel::sample(Rng& rng) const {
  if (sd <= 0.0) return mean;
  std::normal_distribution<double> dist(0.0, 1.0);
  double z = dist(rng);
  if (std::isfinite(truncation_sd)) z = std::clamp(z, -truncation_sd, truncation_sd);
  return mean + sd * z;
}

double SolarModel::bound() const {
  if (sd <= 0.0) return std::abs(mean);
  return std::abs(mean) + truncation_sd * sd;
}

TransitionEvents transition_events(const SessionSet& sessions, int t, int m) {
  TransitionEvents ev;
  ev.reset.assign(m, false);
  ev.departed.assign(m, false);
  ev.arrival = Vec::Zero(m);
  std::vector<bool> active_next(m, false);
  const auto& all = sessions.sessions();
  for (std::size_t j = 0; j < all.size(); ++j) {
    const auto& s = all[j];
    const int i = s.charger - 1;
    if (i >= m) continue;
    if (s.departs_in(t)) ev.departed[i] = true;
    if (s.active_at(t + 1)) active_next[i] = true;
    // a session that both arrives and leaves inside (t, t+1] is never observed in a state
    if (s.arrives_in(t) && s.active_at(t + 1)) {
      ev.arrival[i] += s.energy_kwh;
      ev.arrived.push_back(static_cast<int>(j));
    }
  }
  for (int i = 0; i < m; ++i) ev.reset[i] = ev.departed[i] || !active_next[i];
  return ev;
}

void project_state_inplace(Eigen::Ref<Vec> s, const SpaceSpec& spec) {
  if (spec.mode == SpaceMode::kBox) {
    s = s.cwiseMax(spec.state_lo).cwiseMin(spec.state_hi);
    return;
  }
  SumRow row;
  row.limit = spec.line_limit;
  for (int i = 0; i < spec.m; ++i) row.index.push_back(spec.m + i);
  project_bounds_rows(s, spec.state_lo, spec.state_hi, {row});
}

StationState project_state(const Vec& s, const SpaceSpec& spec, const std::vector<bool>& reset, int t) {
  Vec out = s;
  for (int i = 0; i < spec.m && i < static_cast<int>(reset.size()); ++i)
    if (reset[i]) out[i] = 0.0;
  project_state_inplace(out, spec);
  return StationState::from_stacked(out, t);
}

Vec project_action(const Vec& a, const SpaceSpec& spec) {
  return a.cwiseMax(spec.action_lo).cwiseMin(spec.action_hi);
}

Vec transition(const SystemMatrices& sys, const SpaceSpec& spec, double delta_hours, const Vec& s,
               const Vec& a, const TransitionEvents& ev, double h) {
  const int m = spec.m;
  Vec y = sys.A * s + sys.B * project_action(a, spec);
  for (int i = 0; i < m; ++i)
    if (ev.reset[i]) y[i] = 0.0;
  y.head(m) += ev.arrival;
  y.tail(m).array() -= delta_hours * h;
  project_state_inplace(y, spec);
  return y;
}

Vec transition_w_form(const SystemMatrices& sys, const SpaceSpec& spec, double delta_hours, const Vec& s,
                      const Vec& a, const TransitionEvents& ev, double h, Vec* w_out) {
  const int m = spec.m;
  const int n = 2 * m;
  const Vec base = sys.A * s + sys.B * a;
  const Vec w_action = sys.B * (project_action(a, spec) - a);
  const Vec pre_reset = base + w_action;
  Vec w_reset = Vec::Zero(n);
  for (int i = 0; i < m; ++i)
    if (ev.reset[i]) w_reset[i] = -pre_reset[i];
  Vec w_arrival = Vec::Zero(n);
  w_arrival.head(m) = ev.arrival;
  Vec w_solar = Vec::Zero(n);
  w_solar.tail(m).setConstant(-delta_hours * h);
  const Vec y = pre_reset + w_reset + w_arrival + w_solar;
  Vec projected = y;
  project_state_inplace(projected, spec);
  const Vec w_clip = projected - y;
  const Vec w = w_action + w_reset + w_arrival + w_solar + w_clip;
  if (w_out) *w_out = w;
  return base + w;
}

ChargingEnv::ChargingEnv(SpaceSpec space, DynamicsSpec dynamics, CostSpec costs, int T)
    : space_(std::move(space)), dynamics_(std::move(dynamics)), costs_(std::move(costs)), T_(T) {
  if (space_.m != dynamics_.m) throw ValidationError("space and dynamics disagree on the charger count");
  if (T_ < 1) throw ValidationError("episode length must be positive");
  state_ = StationState::zero(space_.m);
}

void ChargingEnv::reset(const SessionSet& sessions, const SolarModel& solar, std::uint64_t seed) {
  if (sessions.max_charger() > space_.m) {
    throw ValidationError(fmt::format("session set uses charger {} but the station has {}", sessions.max_charger(),
                                      space_.m));
  }
  sessions_ = &sessions;
  solar_ = solar;
  rng_.seed(seed);
  state_ = StationState::zero(space_.m);
}

StepOutcome ChargingEnv::step(const Vec& a) {
  if (!sessions_) throw Error("step before reset");
  if (done()) throw Error(fmt::format("step after episode end (t = {})", state_.t));
  if (a.size() != space_.m) throw ValidationError("action has the wrong dimension");
  const int t = state_.t;
  const Vec s = state_.stacked();
  const Vec applied = project_action(a, space_);
  StepOutcome out;
  out.cost = costs_.stage_cost(t, s, applied);
  const TransitionEvents ev = transition_events(*sessions_, t, space_.m);
  const double h = solar_.sample(rng_);
  const Vec next = transition(assemble_dynamics(dynamics_, t), space_, dynamics_.delta_hours, s, applied, ev, h);
  state_ = StationState::from_stacked(next, t + 1);
  out.observed.departed = ev.departed;
  out.observed.arrived = ev.arrived;
  out.observed.solar = h;
  out.true_state = state_;
  out.arrival = ev.arrival;
  out.perturbation_norm =
      std::sqrt(ev.arrival.squaredNorm() + space_.m * (dynamics_.delta_hours * h) * (dynamics_.delta_hours * h));
  out.done = done();
  return out;
}

double perturbation_bound(const SessionSet& sessions, const SolarModel& solar, double delta_hours, int m) {
  double worst = 0.0;
  const double sol = delta_hours * solar.bound();
  for (int t = 0; t < sessions.horizon(); ++t) {
    const auto ev = transition_events(sessions, t, m);
    worst = std::max(worst, ev.arrival.squaredNorm());
  }
  return std::sqrt(worst + m * sol * sol);
}

Trajectory run_episode(ChargingEnv& env, Policy& policy, const SessionSet& sessions, const SolarModel& solar,
                       std::uint64_t seed) {
  env.reset(sessions, solar, seed);
  policy.begin_episode(sessions);
  Trajectory traj;
  traj.states.push_back(env.state());
  while (!env.done()) {
    const int t = env.state().t;
    const Vec a = project_action(policy.act(t), env.space());
    StepOutcome out = env.step(a);
    traj.actions.push_back(a);
    traj.costs.push_back(out.cost);
    traj.solar.push_back(out.observed.solar);
    traj.total_cost += out.cost;
    traj.states.push_back(out.true_state);
    policy.observe(a, out);
  }
  return traj;
}

void write_trajectory_header(std::ostream& out, int m) {
  out << "episode,t";
  for (const char* block : {"e", "b", "a"})
    for (int i = 1; i <= m; ++i) out << ',' << block << '_' << i;
  out << ",cost";
  for (int i = 1; i <= m; ++i) out << ",h_" << i;
  out << '\n';
}

void write_trajectory(std::ostream& out, int episode, const Trajectory& traj) {
  for (std::size_t t = 0; t < traj.actions.size(); ++t) {
    const auto& st = traj.states[t];
    std::string line = fmt::format("{},{}", episode, t);
    for (Eigen::Index i = 0; i < st.e.size(); ++i) line += fmt::format(",{}", st.e[i]);
    for (Eigen::Index i = 0; i < st.b.size(); ++i) line += fmt::format(",{}", st.b[i]);
    for (Eigen::Index i = 0; i < traj.actions[t].size(); ++i) line += fmt::format(",{}", traj.actions[t][i]);
    line += fmt::format(",{}", traj.costs[t]);
    for (Eigen::Index i = 0; i < st.e.size(); ++i) line += fmt::format(",{}", traj.solar[t]);
    out << line << '\n';
  }
}

}  // namespace oodcharge
