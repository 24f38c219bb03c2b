#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "oodcharge/experiment.hpp"
#include "oodcharge/ood.hpp"
#include "support.hpp"

namespace oodcharge {
namespace {

const SpaceSpec kWide = SpaceSpec::box(2, 100.0, 6.6, -100.0, 100.0);
const SpaceSpec kBox = SpaceSpec::box(2, 100.0, 6.6, -2.0, 2.0);

Vec v2(double a, double b) {
  Vec out(2);
  out << a, b;
  return out;
}

// Dykstra's alternating projections onto box and ball: converges to the
// projection onto the intersection.
Vec dykstra(const Vec& x0, const Vec& center, double r, const SpaceSpec& space) {
  Vec x = x0, p = Vec::Zero(x0.size()), q = Vec::Zero(x0.size());
  for (int k = 0; k < 20000; ++k) {
    const Vec y = (x + p).cwiseMax(space.action_lo).cwiseMin(space.action_hi);
    p = x + p - y;
    Vec z = y + q - center;
    if (z.norm() > r) z *= r / z.norm();
    z += center;
    q = y + q - z;
    x = z;
  }
  return x;
}

TEST(TdError, Arithmetic) {
  EXPECT_EQ(td_error(1.0, 5.0, 6.0), 0.0);
  EXPECT_EQ(td_error(1.0, 5.0, 4.0), 2.0);
  RadiusState r;
  r.accumulate(td_error(1.0, 5.0, 4.0));
  EXPECT_EQ(r.cum_td, 2.0);
  r.accumulate(-1.5);
  EXPECT_EQ(r.cum_td, 3.5);
  r.reset();
  EXPECT_EQ(r.cum_td, 0.0);
}

TEST(TdError, SignedAndDecayedAccumulation) {
  RadiusState r;
  r.absolute = false;
  r.decay = 0.5;
  r.accumulate(2.0);
  r.accumulate(-1.0);
  EXPECT_EQ(r.cum_td, 0.0);
}

TEST(TdError, BellmanConsistentCriticOnChain) {
  // feature x = t, unit cost, Q(x, a) = T - x: every TD-error vanishes
  const int T = 12;
  Mlp critic({2, 1}, Head::kIdentity);
  critic.params() << -1.0, 0.0, static_cast<double>(T);
  const Mlp actor({1, 1}, Head::kSquash, -1.0, 1.0);
  for (int t = 1; t < T; ++t) {
    const Vec s_t = Vec::Constant(1, t), s_prev = Vec::Constant(1, t - 1);
    EXPECT_EQ(td_error(critic, actor, s_t, s_prev, actor.forward(s_prev), 1.0), 0.0);
  }
}

TEST(Radius, Examples) {
  EXPECT_EQ(awareness_radius(0.0, 123.0, 5.0), 5.0);
  EXPECT_EQ(awareness_radius(1.0, 1.0, 4.0), 3.0);
  EXPECT_EQ(awareness_radius(2.0, 2.0, 4.0), 0.0);
  EXPECT_EQ(awareness_radius(2.0, 7.0, 4.0), 0.0);
  EXPECT_EQ(awareness_radius(kInf, 0.0, 4.0), 0.0);
}

TEST(Radius, TrustCoefficient) {
  EXPECT_EQ(trust_coefficient(4.0, 3.0, 1.0, 1.0), 0.75);
  EXPECT_EQ(trust_coefficient(4.0, 4.0, 0.0, 9.0), 1.0);
  EXPECT_EQ(trust_coefficient(4.0, 0.0, kInf, 0.0), 0.0);
  // equal actions
  EXPECT_EQ(trust_coefficient(0.0, 0.0, 0.0, 5.0), 1.0);
  EXPECT_EQ(trust_coefficient(0.0, 0.0, 1.0, 0.0), 1.0);
  EXPECT_EQ(trust_coefficient(0.0, 0.0, 1.0, 2.0), 0.0);
  EXPECT_EQ(trust_coefficient(0.0, 0.0, kInf, 0.0), 0.0);
}

TEST(Radius, LambdaNonIncreasingInBeta) {
  Rng rng(1);
  const std::vector<double> betas{0.0, 0.1, 1.0, 10.0, kInf};
  for (int k = 0; k < 1000; ++k) {
    const double gap = testing::random_vec(1, 0, 5, rng)[0];
    const double cum = testing::random_vec(1, 0, 3, rng)[0];
    double prev = kInf;
    for (double b : betas) {
      const double lam = trust_coefficient(gap, awareness_radius(b, cum, gap), b, cum);
      ASSERT_LE(lam, prev);
      prev = lam;
    }
  }
}

TEST(Ball, Examples) {
  EXPECT_EQ(project_to_ball(v2(3, 4), v2(0, 0), 5.0, kWide), v2(3, 4));
  const Vec half = project_to_ball(v2(3, 4), v2(0, 0), 2.5, kWide);
  EXPECT_NEAR(half[0], 1.5, 1e-15);
  EXPECT_NEAR(half[1], 2.0, 1e-15);
  EXPECT_EQ(project_to_ball(v2(3, 4), v2(0.5, -1), 0.0, kWide), v2(0.5, -1));
}

TEST(Ball, MatchesAlternatingProjectionOracle) {
  Rng rng(2);
  for (int k = 0; k < 300; ++k) {
    const Vec a_bar = testing::random_vec(2, -2, 2, rng);
    const Vec a_tilde = testing::random_vec(2, -5, 5, rng);
    const double r = testing::random_vec(1, 0.01, 3, rng)[0];
    const Vec a = project_to_ball(a_tilde, a_bar, r, kBox);
    ASSERT_LE((a - a_bar).norm(), r + 1e-9);
    ASSERT_TRUE((a.array() >= -2.0).all() && (a.array() <= 2.0).all());
    ASSERT_LE((a - dykstra(a_tilde, a_bar, r, kBox)).norm(), 1e-6) << "case " << k;
  }
}

TEST(Ball, InterpolationIdentityWhenBoxInactive) {
  Rng rng(3);
  for (int k = 0; k < 1000; ++k) {
    const Vec a_bar = testing::random_vec(2, -1, 1, rng);
    const Vec a_tilde = testing::random_vec(2, -1, 1, rng);
    const double gap = (a_tilde - a_bar).norm();
    const double r = awareness_radius(1.0, testing::random_vec(1, 0, 2, rng)[0], gap);
    const double lam = trust_coefficient(gap, r, 1.0, 1.0);
    const Vec a = project_to_ball(a_tilde, a_bar, r, kBox);
    ASSERT_LE((a - (lam * a_tilde + (1.0 - lam) * a_bar)).lpNorm<Eigen::Infinity>(), 1e-12);
  }
}

TEST(Features, ScaledByStateBox) {
  Vec s(4);
  s << 50.0, -100.0, 3.3, 6.6;
  const Vec f = learner_features(s, 36, kBox, 144);
  ASSERT_EQ(f.size(), 5);
  EXPECT_EQ(f[0], 0.5);
  EXPECT_EQ(f[1], -1.0);
  EXPECT_EQ(f[2], 0.5);
  EXPECT_EQ(f[3], 1.0);
  EXPECT_EQ(f[4], 0.25);
}

std::vector<double> numbers(const std::string& line) {
  std::vector<double> out;
  std::stringstream in(line);
  std::string cell;
  while (std::getline(in, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

struct AgentRun {
  Trajectory traj;
  std::vector<TrustRecord> records;
};

AgentRun run_agent(AgentMode mode, double beta, int episodes) {
  ExperimentConfig cfg;
  cfg.batch = 32;
  cfg.hidden = 16;
  const SessionSet set = testing::three_sessions();
  MpcController mpc = testing::make_mpc(cfg);
  DdpgLearner learner(cfg.space().n() + 1, cfg.m, cfg.action_lo, cfg.action_hi, ddpg_params(cfg), 99);
  OodAgent agent(cfg.space(), cfg.T, mpc, mode == AgentMode::kMpc ? nullptr : &learner,
                 agent_settings(cfg, beta, mode));
  ChargingEnv env = testing::make_env(cfg);
  AgentRun r;
  for (int ep = 0; ep < episodes; ++ep) {
    agent.set_progress(static_cast<double>(ep) / episodes);
    r.traj = run_episode(env, agent, set, SolarModel{10.0, 0.05, 4.0}, 1000 + ep);
  }
  r.records = agent.records();
  return r;
}

void expect_same(const Trajectory& a, const Trajectory& b) {
  ASSERT_EQ(a.actions.size(), b.actions.size());
  for (std::size_t t = 0; t < a.actions.size(); ++t) ASSERT_EQ(a.actions[t], b.actions[t]) << "t = " << t;
  for (std::size_t t = 0; t < a.states.size(); ++t) ASSERT_EQ(a.states[t].stacked(), b.states[t].stacked());
  EXPECT_EQ(a.total_cost, b.total_cost);
}

TEST(Agent, InfiniteBetaIsPureMpc) {
  const AgentRun ood = run_agent(AgentMode::kOod, kInf, 3);
  const AgentRun mpc = run_agent(AgentMode::kMpc, kInf, 3);
  expect_same(ood.traj, mpc.traj);
  for (const auto& rec : ood.records) ASSERT_EQ(rec.lambda, 0.0);
}

TEST(Agent, ZeroBetaIsProjectedLearnedPolicy) {
  const AgentRun ood = run_agent(AgentMode::kOod, 0.0, 3);
  const AgentRun learned = run_agent(AgentMode::kLearned, 0.0, 3);
  expect_same(ood.traj, learned.traj);
  for (const auto& rec : ood.records) ASSERT_EQ(rec.lambda, 1.0);
}

// Golden trajectory written once by the finished implementation; rerun with
// OODCHARGE_REGEN_GOLDEN=1 only after an intentional model or learner change.
TEST(Agent, BetaOneGoldenTrajectory) {
  const AgentRun r = run_agent(AgentMode::kOod, 1.0, 2);
  for (const auto& rec : r.records) {
    ASSERT_GE(rec.lambda, 0.0);
    ASSERT_LE(rec.lambda, 1.0);
    ASSERT_LE((rec.action - rec.a_bar).norm(), rec.radius + 1e-9);
  }
  std::ostringstream now;
  write_trajectory_header(now, 2);
  write_trajectory(now, 1, r.traj);
  const std::string path = testing::data_path("golden_beta1.csv");
  if (std::getenv("OODCHARGE_REGEN_GOLDEN")) {
    std::ofstream(path) << now.str();
    GTEST_SKIP() << "golden file rewritten";
  }
  std::ifstream file(path);
  ASSERT_TRUE(file) << path;
  std::istringstream got(now.str());
  std::string want_line, got_line;
  int row = 0;
  while (std::getline(file, want_line)) {
    ASSERT_TRUE(std::getline(got, got_line)) << "trajectory ends at row " << row;
    if (row++ == 0) {
      ASSERT_EQ(got_line, want_line);
      continue;
    }
    const auto want = numbers(want_line), have = numbers(got_line);
    ASSERT_EQ(want.size(), have.size());
    for (std::size_t k = 0; k < want.size(); ++k)
      ASSERT_NEAR(want[k], have[k], 1e-9 * std::max(1.0, std::abs(want[k]))) << "row " << row << " column " << k;
  }
  EXPECT_FALSE(std::getline(got, got_line)) << "trajectory longer than the golden file";
}

}  // namespace
}  // namespace oodcharge
