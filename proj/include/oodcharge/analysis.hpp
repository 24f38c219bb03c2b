#pragma once

// Executable theory (stabilizability floor, bound constants, Q-error against a
// dynamic-programming oracle) and aggregation of experiment logs.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "oodcharge/core.hpp"

namespace oodcharge {

double sigma_min(const Mat& M);

struct StabilizabilityReport {
  struct Pair {
    int t = 0;
    int t_end = 0;
    double sigma_min = 0.0;
  };
  std::vector<Pair> pairs;
  double min_sigma = kInf;
  double floor = 0.0;
  bool pass = false;
};

/// sigma_min(Phi_{t,t'}) over the given pairs. Without pairs, every window
/// (t, min(t + window, T)) of the sequence is checked.
StabilizabilityReport verify_stabilizability(const std::vector<SystemMatrices>& sequence, double floor,
                                             int window, const std::vector<std::pair<int, int>>& pairs = {});
std::vector<SystemMatrices> dynamics_sequence(const DynamicsSpec& spec, int T);

struct BoundInputs {
  double A_bar = 1.0;
  double B_bar = 0.2;
  double W_bar = 0.0;
  double mu = 0.1;     // lower eigenvalue bound of the costs
  double xi = 1.0;     // upper eigenvalue bound
  double sigma = 1.0;  // stabilizability floor
  double lambda = 0.0; // the undefined lambda inside C; <= 0 selects lambda_bar
};

struct BoundResult {
  double lambda_bar = 0.0;
  double C = 0.0;
  double sigma_upper = 0.0;
  double sigma_lower = 0.0;
  double lambda_used = 0.0;
  double bound = 0.0;
};

/// Closed-form constants of the ratio-of-expectations bound. Throws
/// DomainError when a square root or the 1 - lambda_bar denominator leaves
/// its domain.
BoundResult roe_mpc_bound(const BoundInputs& in);

// ---------------------------------------------------------------------------

/// Finite-horizon tabular MDP. Costs are indexed [t][s][a], transitions
/// [s][a][s'] (time-invariant).
struct ToyMdp {
  int states = 0;
  int actions = 0;
  int horizon = 0;
  std::vector<double> cost;
  std::vector<double> transition;

  double c(int t, int s, int a) const { return cost[(static_cast<std::size_t>(t) * states + s) * actions + a]; }
  double p(int s, int a, int s2) const {
    return transition[(static_cast<std::size_t>(s) * actions + a) * states + s2];
  }
  std::size_t index(int t, int s, int a) const { return (static_cast<std::size_t>(t) * states + s) * actions + a; }
  /// Shape, nonnegative costs, row-stochastic transitions.
  void check() const;

  /// Random instance; deterministic transitions when `deterministic`.
  static ToyMdp random(int states, int actions, int horizon, bool deterministic, Rng& rng);
};

using QTable = std::vector<double>;  // indexed like ToyMdp::cost

/// Q*_t(s,a) = c_t(s,a) + sum_s' P(s'|s,a) min_a' Q*_{t+1}(s',a'), Q*_T = 0.
QTable backward_induction(const ToyMdp& mdp);
/// Repeated application of the Bellman operator to the whole table until it
/// stops changing.
QTable value_iteration(const ToyMdp& mdp, int* sweeps = nullptr);

/// (1/T) sum_t max_{s,a} |Q~_t(s,a) - Q*_t(s,a)|.
double q_error_epsilon(const std::function<double(int t, int s, int a)>& q_tilde, const ToyMdp& mdp);

// ---------------------------------------------------------------------------
// Metrics

struct EpisodeRecord {
  double beta = 0.0;
  std::uint64_t seed = 0;
  int episode = 0;
  double reward_raw = 0.0;
  double reward_norm = 0.0;
  double avg_lambda = 0.0;
  double avg_abs_td = 0.0;
};

struct Window {
  int begin = 0;  // inclusive
  int end = 0;    // exclusive
};

struct SummaryRow {
  double beta = 0.0;
  double avg_reward_pre = 0.0;
  double avg_reward_post = 0.0;
  double sd_pre = 0.0;
  double sd_post = 0.0;
  double avg_lambda = 0.0;
  double avg_abs_td = 0.0;
};

/// Per beta: mean reward over seeds and window episodes; sd is the population
/// sd across seeds per episode, averaged over the window; lambda and |TD|
/// averaged over all episodes and seeds. Rows are sorted by beta.
std::vector<SummaryRow> aggregate_metrics(const std::vector<EpisodeRecord>& records, Window pre, Window post,
                                          bool normalized);

void write_summary(std::ostream& out, const std::vector<SummaryRow>& rows);

void write_reward_header(std::ostream& out);
void write_reward(std::ostream& out, const EpisodeRecord& r);
void write_episode_stats_header(std::ostream& out);
void write_episode_stats(std::ostream& out, const EpisodeRecord& r);

/// Reads a reward CSV back into records.
std::vector<EpisodeRecord> read_reward_csv(std::istream& in);
/// Fills avg_lambda / avg_abs_td of matching (beta, seed, episode) records.
void merge_episode_stats(std::istream& in, std::vector<EpisodeRecord>& records);

}  // namespace oodcharge
