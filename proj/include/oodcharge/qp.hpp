#pragma once

// Quadratic programming: the horizon KKT system of the linear-quadratic
// prediction problem and a bound/sum-row constrained convex QP solver.
//
// The inequality solver is a relaxed Douglas-Rachford splitting
//
//   x = argmin f(x) + rho/2 |x - v|^2      (f: quadratic + equality rows)
//   z = Proj_C(2x - v)                      (C: bounds and sum rows)
//   v = v + alpha (z - x)
//
// with a fixed penalty rho, so the fixed-point residual |z - x| is
// non-increasing. Two backends evaluate the x-step: a dense saddle-point
// factorization and a Riccati recursion for stage-structured problems.

#include <string>
#include <vector>

#include "oodcharge/core.hpp"

namespace oodcharge {

/// One-sided row sum(z[index]) <= limit. With nonnegative lower bounds on the
/// indexed variables this is the l1 limit |z[index]|_1 <= limit.
struct SumRow {
  std::vector<int> index;
  double limit = kInf;
};

/// Euclidean projection onto {lo <= z <= hi} intersected with the (disjoint)
/// sum rows. Returns, per row, the threshold theta >= 0 subtracted from the
/// row's coordinates before clamping (0 when the row is inactive).
std::vector<double> project_bounds_rows(Eigen::Ref<Vec> z, const Vec& lo, const Vec& hi,
                                        const std::vector<SumRow>& rows);

/// Projection of v onto {lo <= z <= hi, sum(z) <= limit}.
Vec project_capped_box(const Vec& v, const Vec& lo, const Vec& hi, double limit);

// ---------------------------------------------------------------------------

struct BoxQp {
  Mat hessian;  // positive definite
  Vec linear;
  Vec lower;
  Vec upper;
  Mat eq_matrix;  // rows x dim, may have zero rows
  Vec eq_rhs;
  std::vector<SumRow> sum_rows;

  int dim() const { return static_cast<int>(hessian.rows()); }
  double objective(const Vec& x) const { return 0.5 * x.dot(hessian * x) + linear.dot(x); }
  /// Dimension and bound consistency; throws ValidationError.
  void check() const;
};

struct SolverSettings {
  double tol = 1e-8;
  int max_iter = 50000;
  double rho = 0.0;  // <= 0 selects a scale-based default
  double relaxation = 1.6;
  bool polish = true;
  bool record_residuals = false;
  // stage problems with bounds on actions only: try primal-dual active set first
  bool active_set = true;
  int max_active_set_passes = 1000;
};

enum class SolveStatus { kSolved, kMaxIterations };

struct QpSolution {
  Vec x;
  Vec eq_multipliers;
  Vec bound_multipliers;  // H x + g + E'nu + sum_r mu_r 1_r + y = 0
  std::vector<double> row_multipliers;
  double objective = 0.0;
  SolveStatus status = SolveStatus::kSolved;
  int iterations = 0;
  bool polished = false;
  double residual = 0.0;
  std::vector<double> residuals;  // fixed-point residual per iteration
  Vec splitting_state;            // v, reusable as a warm start
};

/// Thrown when the equality rows cannot be met inside the bounds. The message
/// names the row and the attainable interval.
class InfeasibleError : public SolverError {
 public:
  using SolverError::SolverError;
};

QpSolution solve_box_qp(const BoxQp& qp, const SolverSettings& settings = {},
                        const Vec* warm_start = nullptr);
inline QpSolution solve_box_qp(const BoxQp& qp, double tol, int max_iter) {
  SolverSettings s;
  s.tol = tol;
  s.max_iter = max_iter;
  return solve_box_qp(qp, s);
}

const char* to_string(SolveStatus status);

// ---------------------------------------------------------------------------
// Horizon KKT system

/// Phi_{t,t'} for the pairs (A_tau, B_tau), tau in [t, t'-1]. Rows are the
/// (t'-t+1) state blocks; columns follow (s_t, a_t, s_{t+1}, ..., s_{t'}).
Mat build_phi(const std::vector<SystemMatrices>& sequence, int t, int t_end);

/// Stacked prediction problem
///   min  sum_tau 1/2 s'Q s + q's + 1/2 a'R a + r'a  +  1/2 s_N' P s_N + p's_N
///   s.t. s_0 = initial_state, s_{tau+1} = A s + B a + offset_tau.
/// Variables are ordered (s_0, a_0, s_1, a_1, ..., a_{N-1}, s_N).
struct KktSystem {
  Vec initial_state;
  std::vector<Mat> A, B;         // N stages
  std::vector<Vec> offsets;      // N stages (predicted perturbations)
  std::vector<Mat> Q, R;         // N stages
  std::vector<Vec> q, r;         // optional linear terms (empty = zero)
  Mat terminal;
  Vec terminal_linear;           // optional

  int stages() const { return static_cast<int>(A.size()); }
  int n() const { return static_cast<int>(initial_state.size()); }
  int m() const { return B.empty() ? 0 : static_cast<int>(B.front().cols()); }
  int primal_dim() const { return (stages() + 1) * n() + stages() * m(); }
  int dual_dim() const { return (stages() + 1) * n(); }
  int state_offset(int tau) const { return tau * (n() + m()); }
  int action_offset(int tau) const { return tau * (n() + m()) + n(); }

  void check() const;
  Mat gamma() const;
  Vec gradient_offset() const;  // stacked linear terms
  Mat phi() const;
  Vec rhs() const;              // (s_t, w_t, ..., w_{N-1})
  Mat matrix() const;           // [[Gamma, Phi'], [Phi, 0]]
  double objective(const Vec& primal) const;
};

struct KktSolution {
  Vec primal;
  Vec dual;  // eta_0..eta_N
  std::vector<Vec> states;
  std::vector<Vec> actions;
};

/// Solves the saddle-point system by a Riccati recursion. Throws SolverError
/// (with a condition estimate) when a stage Hessian is not positive definite.
KktSolution solve_kkt(const KktSystem& sys);

// ---------------------------------------------------------------------------
// Stage-structured QP (the MPC form)

struct StagedQp {
  KktSystem core;
  Vec lower;  // primal_dim, ordering as in KktSystem; s_0 entries ignored
  Vec upper;
  std::vector<SumRow> sum_rows;  // indices into the primal vector

  void check() const;
  /// Same problem as a dense BoxQp (equality rows Phi z = rhs).
  BoxQp dense() const;
  double objective(const Vec& primal) const { return core.objective(primal); }
};

struct StagedSolution {
  Vec primal;
  std::vector<Vec> states;
  std::vector<Vec> actions;
  double objective = 0.0;
  SolveStatus status = SolveStatus::kSolved;
  int iterations = 0;
  double residual = 0.0;
  bool unconstrained = false;  // the equality-only optimum was already feasible
  bool active_set = false;     // solved by the active-set path (iterations = passes)
  std::vector<double> residuals;
  Vec splitting_state;  // warm start for the next solve (DR state or primal)
};

StagedSolution solve_staged_qp(const StagedQp& qp, const SolverSettings& settings = {},
                               const Vec* warm_start = nullptr);

}  // namespace oodcharge
