#include "oodcharge/mpc.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>

namespace oodcharge {

void SessionBelief::clear() {
  for (auto& s : slots_) s = Slot{};
}

void SessionBelief::record_arrival(int charger, double arrival, double user_departure, double user_energy) {
  slots_.at(charger) = Slot{true, arrival, user_departure, user_energy};
}

void SessionBelief::record_departure(int charger) { slots_.at(charger) = Slot{}; }

bool SessionBelief::active(int charger, double tau) const {
  const Slot& s = slots_[charger];
  return s.occupied && s.arrival <= tau && tau < s.user_departure;
}

double SessionBelief::latest_departure(double tau) const {
  double best = -kInf;
  for (int i = 0; i < m(); ++i)
    if (active(i, tau)) best = std::max(best, slots_[i].user_departure);
  return best;
}

Vec estimate_state(const SystemMatrices& sys, const SpaceSpec& spec, const Vec& prev, const Vec& action,
                   const Vec& w_pred, const std::vector<bool>& reset, bool clip) {
  Vec y = sys.A * prev + sys.B * project_action(action, spec);
  for (int i = 0; i < spec.m; ++i)
    if (reset[i]) y[i] = 0.0;
  y += w_pred;
  if (clip) project_state_inplace(y, spec);
  return y;
}

StagedQp build_mpc_problem(const Vec& s_est, const PredictionSet& preds, const CostSpec& costs,
                           const DynamicsSpec& dyn, const SpaceSpec& space, int T, bool state_constraints,
                           const Mat* terminal) {
  const int N = preds.horizon();
  const int m = space.m, n = space.n();
  if (N < 0 || static_cast<int>(preds.offsets.size()) != N || static_cast<int>(preds.reset.size()) != N) {
    throw ValidationError("MPC problem: prediction set does not match its horizon");
  }
  if (s_est.size() != n) throw ValidationError("MPC problem: state estimate has the wrong dimension");
  StagedQp qp;
  KktSystem& sys = qp.core;
  sys.initial_state = s_est;
  for (int j = 0; j < N; ++j) {
    const int tau = preds.t + j;
    SystemMatrices sm = assemble_dynamics(dyn, tau);
    Vec w = preds.offsets[j];
    if (w.size() != n) throw ValidationError("MPC problem: prediction has the wrong dimension");
    // predicted departures pin the e-coordinate to zero in the next state
    for (int i = 0; i < m; ++i) {
      if (preds.reset[j][i]) {
        sm.A.row(i).setZero();
        sm.B.row(i).setZero();
        w[i] = 0.0;
      }
    }
    sys.A.push_back(std::move(sm.A));
    sys.B.push_back(std::move(sm.B));
    sys.offsets.push_back(std::move(w));
    sys.Q.push_back(costs.state_weight(tau));
    sys.R.push_back(costs.action_weight(tau));
  }
  if (terminal) sys.terminal = *terminal;
  else sys.terminal = preds.t_end < T - 1 ? costs.terminal() : costs.state_weight(preds.t_end);

  const int d = sys.primal_dim();
  qp.lower = Vec::Constant(d, -kInf);
  qp.upper = Vec::Constant(d, kInf);
  for (int j = 0; j < N; ++j) {
    qp.lower.segment(sys.action_offset(j), m).setConstant(space.action_lo);
    qp.upper.segment(sys.action_offset(j), m).setConstant(space.action_hi);
    if (!state_constraints) continue;
    const int so = sys.state_offset(j + 1);
    qp.lower.segment(so, n) = space.state_lo;
    qp.upper.segment(so, n) = space.state_hi;
    if (space.has_line_limit()) {
      SumRow row;
      row.limit = space.line_limit;
      for (int i = 0; i < m; ++i) row.index.push_back(so + m + i);
      qp.sum_rows.push_back(std::move(row));
    }
  }
  return qp;
}

MpcResult mpc_action(const StagedQp& problem, const SpaceSpec& space, const SolverSettings& settings,
                     const Vec* warm_start) {
  MpcResult out;
  if (problem.core.stages() == 0) {
    out.action = Vec::Zero(space.m);
    out.solution.primal = problem.core.initial_state;
    out.solution.states = {problem.core.initial_state};
    out.solution.objective = problem.core.objective(out.solution.primal);
    return out;
  }
  out.solution = solve_staged_qp(problem, settings, warm_start);
  out.action = project_action(out.solution.actions.front(), space);
  return out;
}

MpcSettings MpcSettings::from_config(const ExperimentConfig& cfg) {
  MpcSettings s;
  s.horizon_mode = cfg.horizon_mode;
  s.horizon = cfg.horizon;
  s.max_horizon = cfg.max_horizon;
  s.solver.tol = cfg.qp_tol;
  s.solver.max_iter = cfg.qp_max_iter;
  s.solar_forecast = cfg.solar_forecast;
  s.solar_prior = cfg.solar_pre_mean;
  s.solar_oracle = cfg.solar_pre_mean;
  s.departure_source = cfg.departure_source;
  s.estimator_clip = cfg.estimator_clip;
  s.state_constraints = cfg.mpc_state_constraints;
  return s;
}

MpcController::MpcController(SpaceSpec space, DynamicsSpec dynamics, CostSpec costs, int T, MpcSettings settings)
    : space_(std::move(space)),
      dynamics_(std::move(dynamics)),
      costs_(std::move(costs)),
      T_(T),
      settings_(std::move(settings)),
      belief_(space_.m) {
  estimate_ = Vec::Zero(space_.n());
}

void MpcController::begin_episode(const SessionSet& sessions) {
  sessions_ = &sessions;
  belief_.clear();
  estimate_ = Vec::Zero(space_.n());
  t_ = 0;
  have_solar_ = false;
  last_solar_ = 0.0;
  warm_.resize(0);
}

double MpcController::solar_forecast() const {
  switch (settings_.solar_forecast) {
    case SolarForecast::kLast:
      return have_solar_ ? last_solar_ : settings_.solar_prior;
    case SolarForecast::kMean:
      return settings_.solar_prior;
    case SolarForecast::kOracle:
      return settings_.solar_oracle;
    case SolarForecast::kZero:
      return 0.0;
  }
  return 0.0;
}

int MpcController::horizon_length(int t) const {
  int k = settings_.horizon;
  if (settings_.horizon_mode == HorizonMode::kDeparture) {
    const double latest = belief_.latest_departure(t);
    k = std::isfinite(latest) ? std::max(1, static_cast<int>(std::ceil(latest)) - t) : 1;
  }
  return std::clamp(k, 1, std::max(1, settings_.max_horizon));
}

PredictionSet MpcController::predictions(int t) const {
  PredictionSet p;
  p.t = t;
  p.t_end = std::min(t + horizon_length(t), T_ - 1);
  const double h = solar_forecast();
  const int m = space_.m;
  for (int tau = t; tau < p.t_end; ++tau) {
    Vec w = Vec::Zero(space_.n());
    w.tail(m).setConstant(-dynamics_.delta_hours * h);
    p.offsets.push_back(std::move(w));
    std::vector<bool> reset(m);
    for (int i = 0; i < m; ++i) reset[i] = !belief_.active(i, tau + 1);
    p.reset.push_back(std::move(reset));
  }
  return p;
}

namespace {

// Drops the first (s, a) block of a splitting state and pads/truncates to the
// new horizon by repeating the last (a, s) pair.
Vec shift_warm(const Vec& v, int n, int m, int stages) {
  const int d = (stages + 1) * n + stages * m;
  if (v.size() < 2 * n + m) return Vec();
  Vec out(d);
  const Vec tail = v.tail(v.size() - (n + m));  // (s_1, a_1, ..., s_N)
  const int copy = std::min<int>(d, tail.size());
  out.head(copy) = tail.head(copy);
  // copy ends on a state block; pad with (last action or 0, last state) pairs
  const Vec last_s = tail.tail(n);
  const Vec last_a = tail.size() >= n + m + n ? Vec(tail.segment(tail.size() - n - m, m)) : Vec(Vec::Zero(m));
  for (int i = copy; i < d; i += n + m) {
    out.segment(i, m) = last_a;
    out.segment(i + m, n) = last_s;
  }
  return out;
}

}  // namespace

Vec MpcController::action(int t) {
  if (!sessions_) throw Error("MPC controller used before begin_episode");
  if (t != t_) throw Error(fmt::format("MPC controller at t = {} asked for t = {}", t_, t));
  const PredictionSet preds = predictions(t);
  log_ = MpcStepLog{};
  log_.t = t;
  log_.horizon = preds.horizon();
  if (preds.horizon() == 0) {
    log_.action = Vec::Zero(space_.m);
    return log_.action;
  }
  const StagedQp qp = build_mpc_problem(estimate_, preds, costs_, dynamics_, space_, T_, settings_.state_constraints);
  Vec warm;
  if (settings_.warm_start && warm_.size() > 0) warm = shift_warm(warm_, space_.n(), space_.m, preds.horizon());
  MpcResult res;
  try {
    res = mpc_action(qp, space_, settings_.solver, warm.size() > 0 ? &warm : nullptr);
  } catch (const SolverError& e) {
    throw SolverError(fmt::format("MPC solve at t = {}: {}", t, e.what()));
  }
  warm_ = res.solution.splitting_state;
  log_.iterations = res.solution.iterations;
  log_.objective = res.solution.objective;
  log_.action = res.action;
  return res.action;
}

void MpcController::observe(const Vec& applied, const Observation& obs) {
  const int m = space_.m;
  Vec w = Vec::Zero(space_.n());
  for (int i = 0; i < m && i < static_cast<int>(obs.departed.size()); ++i)
    if (obs.departed[i]) belief_.record_departure(i);
  for (int j : obs.arrived) {
    const auto& s = sessions_->sessions().at(j);
    belief_.record_arrival(s.charger - 1, s.arrival, s.user_departure, s.user_energy_kwh);
    w[s.charger - 1] += s.user_energy_kwh;
  }
  w.tail(m).setConstant(-dynamics_.delta_hours * obs.solar);
  last_solar_ = obs.solar;
  have_solar_ = true;
  std::vector<bool> reset(m);
  for (int i = 0; i < m; ++i) {
    const bool departed = i < static_cast<int>(obs.departed.size()) && obs.departed[i];
    const bool idle = settings_.departure_source == DepartureSource::kUser ? !belief_.active(i, t_ + 1)
                                                                           : !belief_.occupied(i);
    reset[i] = departed || idle;
  }
  estimate_ = estimate_state(assemble_dynamics(dynamics_, t_), space_, estimate_, applied, w, reset,
                             settings_.estimator_clip);
  ++t_;
}

void write_mpc_log_header(std::ostream& out, int m) {
  out << "t,horizon,iters,obj";
  for (int i = 1; i <= m; ++i) out << ",action_" << i;
  out << '\n';
}

void write_mpc_log(std::ostream& out, const MpcStepLog& log) {
  std::string line = fmt::format("{},{},{},{}", log.t, log.horizon, log.iterations, log.objective);
  for (Eigen::Index i = 0; i < log.action.size(); ++i) line += fmt::format(",{}", log.action[i]);
  out << line << '\n';
}

}  // namespace oodcharge
