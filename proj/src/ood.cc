#include "oodcharge/ood.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>

namespace oodcharge {

double awareness_radius(double beta, double cum_td, double gap) {
  if (std::isinf(beta)) return 0.0;
  if (beta == 0.0) return std::max(0.0, gap);
  return std::max(0.0, gap - beta * cum_td);
}

double RadiusState::radius(double gap) const { return awareness_radius(beta, cum_td, gap); }

double td_error(const Mlp& critic, const Mlp& actor, const Vec& s_t, const Vec& s_prev, const Vec& a_prev,
                double cost_prev) {
  const double q_next = q_eval(critic, s_t, actor.forward(s_t));
  const double q_prev = q_eval(critic, s_prev, a_prev);
  return td_error(cost_prev, q_next, q_prev);
}

double trust_coefficient(double gap, double radius, double beta, double cum_td) {
  if (gap > 0.0) return std::min(1.0, radius / gap);
  if (std::isinf(beta)) return 0.0;
  return beta == 0.0 || cum_td == 0.0 ? 1.0 : 0.0;
}

namespace {

bool in_box(const Vec& a, const SpaceSpec& space) {
  return (a.array() >= space.action_lo).all() && (a.array() <= space.action_hi).all();
}

Vec clamp_box(const Vec& a, const SpaceSpec& space) {
  return a.cwiseMax(space.action_lo).cwiseMin(space.action_hi);
}

}  // namespace

Vec project_to_ball(const Vec& a_tilde, const Vec& a_bar, double r, const SpaceSpec& space) {
  if (a_tilde.size() != a_bar.size()) throw ValidationError("ball projection: action sizes differ");
  if (!(r > 0.0)) return a_bar;
  const Vec clamped = clamp_box(a_tilde, space);
  if ((clamped - a_bar).norm() <= r) return clamped;
  const Vec d = a_tilde - a_bar;
  const double gap = d.norm();
  const Vec radial = a_bar + (r / gap) * d;
  if (in_box(radial, space)) return radial;
  // both constraints bind: a(lam) = clamp(a_bar + lam d), |a(lam) - a_bar| increasing in lam
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-16; ++it) {
    const double mid = 0.5 * (lo + hi);
    if ((clamp_box(a_bar + mid * d, space) - a_bar).norm() <= r) lo = mid;
    else hi = mid;
  }
  return clamp_box(a_bar + lo * d, space);
}

Vec learner_features(const Vec& s, int t, const SpaceSpec& space, int T) {
  Vec f(s.size() + 1);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double scale = std::max(std::abs(space.state_lo[i]), std::abs(space.state_hi[i]));
    f[i] = std::isfinite(scale) && scale > 0.0 ? s[i] / scale : s[i];
  }
  f[s.size()] = static_cast<double>(t) / T;
  return f;
}

OodAgent::OodAgent(const SpaceSpec& space, int T, MpcController& mpc, DdpgLearner* learner, AgentSettings settings)
    : space_(space), T_(T), mpc_(mpc), learner_(learner), settings_(settings) {
  if (settings_.mode != AgentMode::kMpc && !learner_) throw ValidationError("agent mode needs a learner");
  if (settings_.update_every < 1) throw ValidationError("update_every must be at least 1");
  radius_.beta = settings_.beta;
  radius_.absolute = settings_.td_absolute;
  radius_.decay = settings_.td_decay;
}

void OodAgent::begin_episode(const SessionSet& sessions) {
  mpc_.begin_episode(sessions);
  radius_.reset();
  records_.clear();
  have_prev_ = false;
}

Vec OodAgent::act(int t) {
  TrustRecord rec;
  rec.t = t;
  if (settings_.mode != AgentMode::kLearned) rec.a_bar = mpc_.action(t);
  if (learner_) {
    features_ = learner_features(mpc_.estimate(), t, space_, T_);
    if (settings_.mode != AgentMode::kMpc) {
      rec.a_tilde = settings_.explore ? learner_->explore(features_, progress_) : learner_->act(features_);
    }
    if (have_prev_) {
      rec.td = td_error(learner_->critic(), learner_->actor(), features_, prev_features_, prev_action_, prev_cost_);
      radius_.accumulate(rec.td);
    }
  }
  rec.cum_td = radius_.cum_td;
  switch (settings_.mode) {
    case AgentMode::kMpc:
      rec.action = rec.a_bar;
      break;
    case AgentMode::kLearned:
      rec.action = project_action(rec.a_tilde, space_);
      rec.lambda = 1.0;
      break;
    case AgentMode::kOod:
      rec.gap = (rec.a_tilde - rec.a_bar).norm();
      rec.radius = radius_.radius(rec.gap);
      rec.lambda = trust_coefficient(rec.gap, rec.radius, settings_.beta, radius_.cum_td);
      rec.action = project_to_ball(rec.a_tilde, rec.a_bar, rec.radius, space_);
      break;
  }
  records_.push_back(rec);
  return rec.action;
}

void OodAgent::observe(const Vec& applied, const StepOutcome& outcome) {
  const int t = mpc_.time();
  mpc_.observe(applied, outcome.observed);
  if (!learner_) return;
  const double c = settings_.cost_scale * outcome.cost;
  if (settings_.train) {
    const Vec next = learner_features(mpc_.estimate(), t + 1, space_, T_);
    learner_->store(features_, applied, next, c, outcome.done);
    ++steps_;
    if (learner_->ready() && steps_ % settings_.update_every == 0) learner_->update();
  }
  prev_features_ = features_;
  prev_action_ = applied;
  prev_cost_ = c;
  have_prev_ = true;
}

void write_trust_log_header(std::ostream& out) { out << "episode,t,gap,radius,lambda,td_abs,cum_td\n"; }

void write_trust_log(std::ostream& out, int episode, const std::vector<TrustRecord>& records) {
  for (const auto& r : records) {
    out << fmt::format("{},{},{},{},{},{},{}\n", episode, r.t, r.gap, r.radius, r.lambda, std::abs(r.td),
                       r.cum_td);
  }
}

}  // namespace oodcharge
