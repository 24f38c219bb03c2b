#include "oodcharge/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include <Eigen/SVD>
#include <fmt/format.h>

#include "oodcharge/config.hpp"
#include "oodcharge/qp.hpp"

namespace oodcharge {

double sigma_min(const Mat& M) {
  if (M.size() == 0) throw ValidationError("sigma_min of an empty matrix");
  Eigen::JacobiSVD<Mat> svd(M);
  return svd.singularValues().minCoeff();
}

std::vector<SystemMatrices> dynamics_sequence(const DynamicsSpec& spec, int T) {
  std::vector<SystemMatrices> seq;
  seq.reserve(T);
  for (int t = 0; t < T; ++t) seq.push_back(assemble_dynamics(spec, t));
  return seq;
}

StabilizabilityReport verify_stabilizability(const std::vector<SystemMatrices>& sequence, double floor,
                                             int window, const std::vector<std::pair<int, int>>& pairs) {
  const int T = static_cast<int>(sequence.size());
  if (T < 1) throw ValidationError("stabilizability check needs at least one stage");
  std::vector<std::pair<int, int>> todo = pairs;
  if (todo.empty()) {
    if (window < 0) throw ValidationError("stabilizability window must be nonnegative");
    for (int t = 0; t < T; ++t) todo.emplace_back(t, std::min(t + window, T));
  }
  StabilizabilityReport rep;
  rep.floor = floor;
  for (auto [t, t_end] : todo) {
    if (t < 0 || t_end < t || t_end > T) {
      throw ValidationError(fmt::format("stabilizability pair ({}, {}) outside [0, {}]", t, t_end, T));
    }
    const double s = sigma_min(build_phi(sequence, t, t_end));
    rep.pairs.push_back({t, t_end, s});
    rep.min_sigma = std::min(rep.min_sigma, s);
  }
  rep.pass = rep.min_sigma >= floor;
  return rep;
}

BoundResult roe_mpc_bound(const BoundInputs& in) {
  if (!(in.A_bar >= 0.0 && in.B_bar >= 0.0 && in.W_bar >= 0.0)) {
    throw DomainError("bound inputs: A_bar, B_bar and W_bar must be nonnegative");
  }
  if (!(in.mu > 0.0 && in.xi > 0.0 && in.sigma > 0.0)) throw DomainError("bound inputs: mu, xi, sigma must be positive");
  if (in.mu > in.xi) throw DomainError(fmt::format("bound inputs: mu = {} exceeds xi = {}", in.mu, in.xi));
  BoundResult r;
  const double abx = in.A_bar + in.B_bar;
  r.sigma_lower = std::min(in.mu, 1.0) * (abx + 1.0) *
                  std::sqrt(in.xi / (2.0 * in.mu * in.xi + in.mu * in.sigma * in.sigma));
  r.sigma_upper = std::sqrt(2.0) * (in.xi + abx + 1.0);
  if (!(r.sigma_lower < r.sigma_upper)) {
    throw DomainError(fmt::format("bound: sigma_lower = {} is not below sigma_upper = {}", r.sigma_lower,
                                  r.sigma_upper));
  }
  r.lambda_bar = std::sqrt((r.sigma_upper - r.sigma_lower) / (r.sigma_upper + r.sigma_lower));
  if (!(r.lambda_bar < 1.0)) throw DomainError(fmt::format("bound: lambda_bar = {} is not below 1", r.lambda_bar));
  r.lambda_used = in.lambda > 0.0 ? in.lambda : r.lambda_bar;
  if (!(r.lambda_used > 0.0)) throw DomainError("bound: the lambda inside C must be positive");
  r.C = 4.0 * (in.xi + 1.0 + abx) / (r.sigma_lower * r.sigma_lower * r.lambda_used);
  const double C2 = r.C * r.C;
  const double gap = 1.0 - r.lambda_bar;
  r.bound = 2.0 * in.xi * C2 * (1.0 + C2) * (1.0 + in.A_bar * in.A_bar + in.B_bar * in.B_bar) / (in.mu * gap * gap);
  return r;
}

// ---------------------------------------------------------------------------

void ToyMdp::check() const {
  if (states <= 0 || actions <= 0 || horizon <= 0) throw ValidationError("toy MDP: sizes must be positive");
  if (static_cast<long long>(states) * actions > 10000) {
    throw ValidationError(fmt::format("toy MDP: {} state-action pairs exceed the exact-DP limit of 10000",
                                      static_cast<long long>(states) * actions));
  }
  if (cost.size() != static_cast<std::size_t>(horizon) * states * actions) {
    throw ValidationError("toy MDP: cost table has the wrong size");
  }
  if (transition.size() != static_cast<std::size_t>(states) * actions * states) {
    throw ValidationError("toy MDP: transition table has the wrong size");
  }
  for (double c : cost)
    if (!(c >= 0.0)) throw ValidationError("toy MDP: costs must be nonnegative");
  for (int s = 0; s < states; ++s) {
    for (int a = 0; a < actions; ++a) {
      double sum = 0.0;
      for (int s2 = 0; s2 < states; ++s2) {
        if (p(s, a, s2) < 0.0) throw ValidationError("toy MDP: negative transition probability");
        sum += p(s, a, s2);
      }
      if (std::abs(sum - 1.0) > 1e-12) {
        throw ValidationError(fmt::format("toy MDP: row (s={}, a={}) sums to {}", s, a, sum));
      }
    }
  }
}

ToyMdp ToyMdp::random(int states, int actions, int horizon, bool deterministic, Rng& rng) {
  ToyMdp mdp;
  mdp.states = states;
  mdp.actions = actions;
  mdp.horizon = horizon;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  mdp.cost.resize(static_cast<std::size_t>(horizon) * states * actions);
  for (double& c : mdp.cost) c = u(rng);
  mdp.transition.assign(static_cast<std::size_t>(states) * actions * states, 0.0);
  std::uniform_int_distribution<int> pick(0, states - 1);
  for (int s = 0; s < states; ++s) {
    for (int a = 0; a < actions; ++a) {
      double* row = &mdp.transition[(static_cast<std::size_t>(s) * actions + a) * states];
      if (deterministic) {
        row[pick(rng)] = 1.0;
        continue;
      }
      double sum = 0.0;
      for (int s2 = 0; s2 < states; ++s2) sum += (row[s2] = u(rng));
      for (int s2 = 0; s2 < states; ++s2) row[s2] /= sum;
    }
  }
  return mdp;
}

namespace {

// Bellman backup of stage t from the table's stage t+1 (zero beyond the horizon).
double backup(const ToyMdp& mdp, const QTable& Q, int t, int s, int a) {
  double q = mdp.c(t, s, a);
  if (t + 1 == mdp.horizon) return q;
  for (int s2 = 0; s2 < mdp.states; ++s2) {
    const double p = mdp.p(s, a, s2);
    if (p == 0.0) continue;
    double v = kInf;
    for (int a2 = 0; a2 < mdp.actions; ++a2) v = std::min(v, Q[mdp.index(t + 1, s2, a2)]);
    q += p * v;
  }
  return q;
}

}  // namespace

QTable backward_induction(const ToyMdp& mdp) {
  mdp.check();
  QTable Q(mdp.cost.size(), 0.0);
  for (int t = mdp.horizon - 1; t >= 0; --t)
    for (int s = 0; s < mdp.states; ++s)
      for (int a = 0; a < mdp.actions; ++a) Q[mdp.index(t, s, a)] = backup(mdp, Q, t, s, a);
  return Q;
}

QTable value_iteration(const ToyMdp& mdp, int* sweeps) {
  mdp.check();
  QTable Q(mdp.cost.size(), 0.0);
  int k = 0;
  for (bool changed = true; changed; ++k) {
    QTable next(Q.size());
    for (int t = 0; t < mdp.horizon; ++t)
      for (int s = 0; s < mdp.states; ++s)
        for (int a = 0; a < mdp.actions; ++a) next[mdp.index(t, s, a)] = backup(mdp, Q, t, s, a);
    changed = next != Q;
    Q = std::move(next);
    if (k > mdp.horizon + 1) throw SolverError("value iteration did not settle within the horizon");
  }
  if (sweeps) *sweeps = k;
  return Q;
}

double q_error_epsilon(const std::function<double(int, int, int)>& q_tilde, const ToyMdp& mdp) {
  const QTable Q = backward_induction(mdp);
  double total = 0.0;
  for (int t = 0; t < mdp.horizon; ++t) {
    double worst = 0.0;
    for (int s = 0; s < mdp.states; ++s)
      for (int a = 0; a < mdp.actions; ++a) worst = std::max(worst, std::abs(q_tilde(t, s, a) - Q[mdp.index(t, s, a)]));
    total += worst;
  }
  return total / mdp.horizon;
}

// ---------------------------------------------------------------------------

namespace {

struct Moments {
  double mean = 0.0;
  double sd = 0.0;
};

// Mean over all (seed, episode) values and the per-episode population sd
// across seeds averaged over the episodes.
Moments window_moments(const std::map<int, std::vector<double>>& by_episode, Window w) {
  Moments out;
  double sum = 0.0, sd_sum = 0.0;
  long count = 0;
  int episodes = 0;
  for (const auto& [ep, values] : by_episode) {
    if (ep < w.begin || ep >= w.end || values.empty()) continue;
    double s = 0.0;
    for (double v : values) s += v;
    const double mean = s / values.size();
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    sd_sum += std::sqrt(ss / values.size());
    sum += s;
    count += static_cast<long>(values.size());
    ++episodes;
  }
  if (count == 0) throw ValidationError(fmt::format("no episodes in window [{}, {})", w.begin, w.end));
  out.mean = sum / count;
  out.sd = sd_sum / episodes;
  return out;
}

}  // namespace

std::vector<SummaryRow> aggregate_metrics(const std::vector<EpisodeRecord>& records, Window pre, Window post,
                                          bool normalized) {
  if (records.empty()) throw ValidationError("no episode records to aggregate");
  struct Acc {
    std::map<int, std::vector<double>> rewards;
    double lambda = 0.0, td = 0.0;
    long count = 0;
  };
  std::map<double, Acc> by_beta;
  // seed order must not matter: sort a copy by (beta, episode, seed)
  std::vector<EpisodeRecord> sorted = records;
  std::sort(sorted.begin(), sorted.end(), [](const EpisodeRecord& a, const EpisodeRecord& b) {
    return std::tie(a.beta, a.episode, a.seed) < std::tie(b.beta, b.episode, b.seed);
  });
  for (const auto& r : sorted) {
    Acc& acc = by_beta[r.beta];
    acc.rewards[r.episode].push_back(normalized ? r.reward_norm : r.reward_raw);
    acc.lambda += r.avg_lambda;
    acc.td += r.avg_abs_td;
    ++acc.count;
  }
  std::vector<SummaryRow> rows;
  for (const auto& [beta, acc] : by_beta) {
    SummaryRow row;
    row.beta = beta;
    const Moments a = window_moments(acc.rewards, pre);
    const Moments b = window_moments(acc.rewards, post);
    row.avg_reward_pre = a.mean;
    row.sd_pre = a.sd;
    row.avg_reward_post = b.mean;
    row.sd_post = b.sd;
    row.avg_lambda = acc.lambda / acc.count;
    row.avg_abs_td = acc.td / acc.count;
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::string format_sd(double beta, double sd) {
  if (std::isinf(beta) && sd == 0.0) return "-";
  return fmt::format("{}", sd);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, int line) {
  if (s == "inf") return kInf;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(fmt::format("line {}: bad number '{}'", line, s));
}

// Reads rows of a CSV whose header must equal `header`.
template <typename F>
void read_rows(std::istream& in, const std::string& header, F&& on_row) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw ParseError(fmt::format("unexpected CSV header '{}', expected '{}'", line, header));
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    on_row(cells, row);
  }
}

constexpr const char* kRewardHeader = "beta,seed,episode,reward_raw,reward_norm";
constexpr const char* kStatsHeader = "beta,seed,episode,avg_lambda,avg_abs_td";

}  // namespace

void write_summary(std::ostream& out, const std::vector<SummaryRow>& rows) {
  out << "beta,avg_reward_pre,avg_reward_post,sd_pre,sd_post,avg_lambda,avg_abs_td\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{},{},{}\n", format_beta(r.beta), r.avg_reward_pre, r.avg_reward_post,
                       format_sd(r.beta, r.sd_pre), format_sd(r.beta, r.sd_post), r.avg_lambda, r.avg_abs_td);
  }
}

void write_reward_header(std::ostream& out) { out << kRewardHeader << '\n'; }

void write_reward(std::ostream& out, const EpisodeRecord& r) {
  out << fmt::format("{},{},{},{},{}\n", format_beta(r.beta), r.seed, r.episode, r.reward_raw, r.reward_norm);
}

void write_episode_stats_header(std::ostream& out) { out << kStatsHeader << '\n'; }

void write_episode_stats(std::ostream& out, const EpisodeRecord& r) {
  out << fmt::format("{},{},{},{},{}\n", format_beta(r.beta), r.seed, r.episode, r.avg_lambda, r.avg_abs_td);
}

std::vector<EpisodeRecord> read_reward_csv(std::istream& in) {
  std::vector<EpisodeRecord> out;
  read_rows(in, kRewardHeader, [&](const std::vector<std::string>& c, int row) {
    if (c.size() != 5) throw ParseError(fmt::format("line {}: expected 5 fields, got {}", row, c.size()));
    EpisodeRecord r;
    r.beta = parse_number(c[0], row);
    r.seed = static_cast<std::uint64_t>(parse_number(c[1], row));
    r.episode = static_cast<int>(parse_number(c[2], row));
    r.reward_raw = parse_number(c[3], row);
    r.reward_norm = parse_number(c[4], row);
    out.push_back(r);
  });
  return out;
}

void merge_episode_stats(std::istream& in, std::vector<EpisodeRecord>& records) {
  std::map<std::tuple<double, std::uint64_t, int>, EpisodeRecord*> index;
  for (auto& r : records) index[{r.beta, r.seed, r.episode}] = &r;
  read_rows(in, kStatsHeader, [&](const std::vector<std::string>& c, int row) {
    if (c.size() != 5) throw ParseError(fmt::format("line {}: expected 5 fields, got {}", row, c.size()));
    const auto key = std::make_tuple(parse_number(c[0], row), static_cast<std::uint64_t>(parse_number(c[1], row)),
                                     static_cast<int>(parse_number(c[2], row)));
    auto it = index.find(key);
    if (it == index.end()) return;
    it->second->avg_lambda = parse_number(c[3], row);
    it->second->avg_abs_td = parse_number(c[4], row);
  });
}

}  // namespace oodcharge
