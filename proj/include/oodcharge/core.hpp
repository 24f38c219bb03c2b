#pragma once

// Shared domain types: sessions, state/action spaces, dynamics and cost
// specifications, seeding helpers.

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oodcharge {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input (CSV row, config value).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input that violates a model invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure inside a solver (singular system, non-finite values).
class SolverError : public Error {
 public:
  using Error::Error;
};

/// Formula evaluated outside of its domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Sessions

/// One EV visit. Times are real-valued step indices: the session arrives in
/// the transition (floor, ceil] that contains `arrival` and is active in every
/// state index tau with arrival <= tau < departure.
struct ChargingSession {
  std::string id;
  double arrival = 0.0;
  double departure = 0.0;
  double energy_kwh = 0.0;
  int charger = 1;  // 1-based
  double user_departure = 0.0;
  double user_energy_kwh = 0.0;

  bool arrives_in(int t) const { return t < arrival && arrival <= t + 1; }
  bool departs_in(int t) const { return t < departure && departure <= t + 1; }
  bool active_at(double tau) const { return arrival <= tau && tau < departure; }
};

/// Validated, immutable collection of sessions for one episode day.
class SessionSet {
 public:
  SessionSet() = default;
  /// Validates field invariants and per-charger exclusivity; throws
  /// ValidationError naming the offending session ids (and source rows when
  /// `rows` is given).
  SessionSet(std::vector<ChargingSession> sessions, int horizon,
             const std::vector<int>& rows = {});

  const std::vector<ChargingSession>& sessions() const { return sessions_; }
  int horizon() const { return horizon_; }
  int max_charger() const { return max_charger_; }
  std::size_t size() const { return sessions_.size(); }
  bool empty() const { return sessions_.empty(); }

 private:
  std::vector<ChargingSession> sessions_;
  int horizon_ = 0;
  int max_charger_ = 0;
};

inline constexpr const char* kSessionHeader =
    "id,arrival,departure,energy_kwh,charger,user_departure,user_energy_kwh";

SessionSet parse_sessions(std::istream& in, int horizon);
SessionSet load_sessions(const std::string& path, int horizon);
void write_sessions(std::ostream& out, const SessionSet& set);
void save_sessions(const std::string& path, const SessionSet& set);

// ---------------------------------------------------------------------------
// Spaces

enum class SpaceMode { kBox, kNonnegSimplex };

/// Feasible state set S and action box A. The state is s = (e || b) with
/// n = 2m coordinates.
struct SpaceSpec {
  SpaceMode mode = SpaceMode::kBox;
  int m = 0;
  double line_limit = kInf;         // ||b||_1 <= line_limit (simplex mode)
  double per_charger_limit = kInf;  // b_i <= per_charger_limit
  double action_lo = -kInf;
  double action_hi = kInf;
  Vec state_lo;  // length n
  Vec state_hi;  // length n

  int n() const { return 2 * m; }
  bool has_line_limit() const { return mode == SpaceMode::kNonnegSimplex; }

  /// Hyper-rectangle spaces: e in [-e_bound, e_bound], b in [-b_bound, b_bound].
  static SpaceSpec box(int m, double e_bound, double b_bound, double a_lo, double a_hi);
  /// e >= 0, 0 <= b_i <= b_bar, sum(b) <= line_limit.
  static SpaceSpec nonneg_simplex(int m, double line_limit, double b_bar, double a_lo,
                                  double a_hi);

  Vec action_lower() const { return Vec::Constant(m, action_lo); }
  Vec action_upper() const { return Vec::Constant(m, action_hi); }
};

// ---------------------------------------------------------------------------
// Dynamics and costs

/// Parameters of the non-ideal battery model. Sequences of length 1 are
/// broadcast over time.
struct DynamicsSpec {
  double delta_hours = 1.0 / 6.0;
  std::vector<double> mu_eff{0.8};
  std::vector<double> beta_ctrl{0.2};
  int m = 2;

  int n() const { return 2 * m; }
  double mu_at(int t) const;
  double beta_at(int t) const;

  static DynamicsSpec constant(int m, double delta_hours, double mu_eff, double beta_ctrl);
};

struct SystemMatrices {
  Mat A;  // n x n
  Mat B;  // n x m
};

/// A_t = [I, -delta*mu_t*I; 0, I], B_t = [0; beta_t*I].
SystemMatrices assemble_dynamics(const DynamicsSpec& spec, int t);

/// Quadratic stage costs. Every matrix is checked positive definite on
/// construction.
class CostSpec {
 public:
  CostSpec() = default;
  CostSpec(std::vector<Mat> state_weights, std::vector<Mat> action_weights, Mat terminal);

  /// Q = q*I_n, R_cost = alpha*I_m, P_term = Q.
  static CostSpec diagonal(int m, double q, double alpha);

  const Mat& state_weight(int t) const;
  const Mat& action_weight(int t) const;
  const Mat& terminal() const { return terminal_; }

  /// Smallest and largest eigenvalue over every stored matrix.
  std::pair<double, double> eigen_range() const;
  /// Throws ValidationError unless every eigenvalue lies in [mu_lb, xi_ub].
  void check_bounds(double mu_lb, double xi_ub) const;

  double stage_cost(int t, const Vec& s, const Vec& a) const;

 private:
  std::vector<Mat> q_;
  std::vector<Mat> r_;
  Mat terminal_;
};

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Mat& m);
double max_eigenvalue(const Mat& m);

// ---------------------------------------------------------------------------
// Seeding

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
/// Stream seed = hash(master, cell, stream).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t cell, std::uint64_t stream);

/// Stable 64-bit FNV-1a, used for config hashes and string stream ids.
std::uint64_t fnv1a(const std::string& text);

}  // namespace oodcharge
