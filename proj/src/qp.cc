#include "oodcharge/qp.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <fmt/format.h>

namespace oodcharge {

namespace {

double clampd(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

// sum_i clamp(z_i - theta) over one row
double shifted_sum(const Eigen::Ref<const Vec>& z, const Vec& lo, const Vec& hi,
                   const std::vector<int>& idx, double theta) {
  double s = 0.0;
  for (int i : idx) s += clampd(z[i] - theta, lo[i], hi[i]);
  return s;
}

}  // namespace

std::vector<double> project_bounds_rows(Eigen::Ref<Vec> z, const Vec& lo, const Vec& hi,
                                        const std::vector<SumRow>& rows) {
  std::vector<double> thetas(rows.size(), 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& idx = rows[r].index;
    const double limit = rows[r].limit;
    if (shifted_sum(z, lo, hi, idx, 0.0) <= limit) continue;
    // f(theta) is piecewise linear and non-increasing; kinks at z-hi and z-lo.
    std::vector<double> kinks;
    for (int i : idx) {
      if (std::isfinite(hi[i]) && z[i] - hi[i] > 0.0) kinks.push_back(z[i] - hi[i]);
      if (std::isfinite(lo[i]) && z[i] - lo[i] > 0.0) kinks.push_back(z[i] - lo[i]);
    }
    std::sort(kinks.begin(), kinks.end());
    double ta = 0.0;
    double fa = shifted_sum(z, lo, hi, idx, 0.0);
    double theta = ta;
    bool found = false;
    for (double tb : kinks) {
      const double fb = shifted_sum(z, lo, hi, idx, tb);
      if (fb <= limit) {
        theta = (fa == fb) ? tb : ta + (fa - limit) * (tb - ta) / (fa - fb);
        found = true;
        break;
      }
      ta = tb;
      fa = fb;
    }
    if (!found) {
      // beyond the last kink the slope is minus the number of unbounded-below coordinates
      int slope = 0;
      for (int i : idx)
        if (!std::isfinite(lo[i]) && z[i] - ta < hi[i]) ++slope;
      if (slope == 0) {
        throw SolverError(fmt::format("sum row {} cannot reach limit {} inside the bounds", r, limit));
      }
      theta = ta + (fa - limit) / slope;
    }
    for (int i : idx) z[i] = z[i] - theta;
    thetas[r] = theta;
  }
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = clampd(z[i], lo[i], hi[i]);
  return thetas;
}

Vec project_capped_box(const Vec& v, const Vec& lo, const Vec& hi, double limit) {
  Vec z = v;
  SumRow row;
  row.limit = limit;
  for (int i = 0; i < v.size(); ++i) row.index.push_back(i);
  project_bounds_rows(z, lo, hi, {row});
  return z;
}

const char* to_string(SolveStatus status) {
  return status == SolveStatus::kSolved ? "solved" : "max_iterations";
}

// ---------------------------------------------------------------------------

void BoxQp::check() const {
  const int d = dim();
  if (hessian.cols() != d || linear.size() != d || lower.size() != d || upper.size() != d) {
    throw ValidationError("box QP: dimension mismatch");
  }
  if (eq_matrix.rows() > 0 && (eq_matrix.cols() != d || eq_rhs.size() != eq_matrix.rows())) {
    throw ValidationError("box QP: equality rows have the wrong shape");
  }
  for (int i = 0; i < d; ++i) {
    if (!(lower[i] <= upper[i])) {
      throw ValidationError(fmt::format("box QP: lower[{}] = {} exceeds upper = {}", i, lower[i], upper[i]));
    }
  }
  for (const auto& row : sum_rows) {
    for (int i : row.index) {
      if (i < 0 || i >= d) throw ValidationError("box QP: sum row index out of range");
    }
  }
  std::vector<int> seen(d, 0);
  for (const auto& row : sum_rows) {
    for (int i : row.index) {
      if (seen[i]++) throw ValidationError("box QP: sum rows must be disjoint");
    }
  }
}

namespace {

// Interval arithmetic over the box: every equality row must be attainable.
void check_feasible(const Mat& E, const Vec& e, const Vec& lo, const Vec& hi,
                    const std::vector<SumRow>& rows) {
  for (Eigen::Index r = 0; r < E.rows(); ++r) {
    double min_val = 0.0, max_val = 0.0;
    for (Eigen::Index j = 0; j < E.cols(); ++j) {
      const double c = E(r, j);
      if (c == 0.0) continue;
      const double a = c * lo[j], b = c * hi[j];
      min_val += std::min(a, b);
      max_val += std::max(a, b);
    }
    const double slack = 1e-9 * (1.0 + std::abs(e[r]));
    if (e[r] < min_val - slack || e[r] > max_val + slack) {
      throw InfeasibleError(fmt::format(
          "equality row {} requires {} but the bounds allow only [{}, {}]", r, e[r], min_val, max_val));
    }
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double min_sum = 0.0;
    for (int i : rows[r].index) min_sum += lo[i];
    if (min_sum > rows[r].limit) {
      throw InfeasibleError(fmt::format("sum row {} has limit {} below the sum of lower bounds {}", r,
                                        rows[r].limit, min_sum));
    }
  }
}

struct DrOutcome {
  Vec x, z, v;
  std::vector<double> thetas;
  int iterations = 0;
  double residual = 0.0;
  SolveStatus status = SolveStatus::kMaxIterations;
  std::vector<double> residuals;
};

template <class Prox>
DrOutcome douglas_rachford(Prox& prox, const Vec& lo, const Vec& hi, const std::vector<SumRow>& rows,
                           const SolverSettings& settings, Vec v) {
  DrOutcome out;
  const int d = static_cast<int>(lo.size());
  Vec x(d), z(d);
  for (int k = 1; k <= settings.max_iter; ++k) {
    prox(v, x);
    z = 2.0 * x - v;
    out.thetas = project_bounds_rows(z, lo, hi, rows);
    const double res_inf = (z - x).lpNorm<Eigen::Infinity>();
    if (settings.record_residuals) out.residuals.push_back((z - x).norm());
    out.iterations = k;
    out.residual = res_inf;
    if (!std::isfinite(res_inf)) throw SolverError("splitting iteration produced non-finite values");
    if (res_inf <= settings.tol * (1.0 + z.lpNorm<Eigen::Infinity>())) {
      out.status = SolveStatus::kSolved;
      break;
    }
    v += settings.relaxation * (z - x);
  }
  out.x = std::move(x);
  out.z = std::move(z);
  out.v = std::move(v);
  return out;
}

class DenseProx {
 public:
  DenseProx(const BoxQp& qp, double rho) : qp_(qp), rho_(rho) {
    const int d = qp.dim();
    const int p = static_cast<int>(qp.eq_matrix.rows());
    Mat kkt = Mat::Zero(d + p, d + p);
    kkt.topLeftCorner(d, d) = qp.hessian;
    kkt.topLeftCorner(d, d).diagonal().array() += rho;
    if (p > 0) {
      kkt.topRightCorner(d, p) = qp.eq_matrix.transpose();
      kkt.bottomLeftCorner(p, d) = qp.eq_matrix;
    }
    lu_.compute(kkt);
    rhs_.resize(d + p);
    if (p > 0) rhs_.tail(p) = qp.eq_rhs;
  }

  void operator()(const Vec& v, Vec& x) {
    const int d = qp_.dim();
    rhs_.head(d) = rho_ * v - qp_.linear;
    sol_ = lu_.solve(rhs_);
    x = sol_.head(d);
  }

  Vec multipliers() const { return sol_.tail(sol_.size() - qp_.dim()); }

 private:
  const BoxQp& qp_;
  double rho_;
  Eigen::PartialPivLU<Mat> lu_;
  Vec rhs_, sol_;
};

// Solves the equality-constrained problem with the guessed active set. Returns
// false when the guess fails the sign or feasibility checks.
bool polish(const BoxQp& qp, const Vec& z, const std::vector<double>& thetas, QpSolution& out) {
  const int d = qp.dim();
  const int p = static_cast<int>(qp.eq_matrix.rows());
  std::vector<int> state(d, 0);  // -1 lower, +1 upper, 0 free
  for (int i = 0; i < d; ++i) {
    if (z[i] <= qp.lower[i]) state[i] = -1;
    else if (z[i] >= qp.upper[i]) state[i] = 1;
  }
  std::vector<int> free_idx, active_rows;
  for (int i = 0; i < d; ++i)
    if (state[i] == 0) free_idx.push_back(i);
  for (std::size_t r = 0; r < qp.sum_rows.size(); ++r)
    if (thetas[r] > 0.0) active_rows.push_back(static_cast<int>(r));

  Vec x = z;
  for (int i = 0; i < d; ++i) {
    if (state[i] < 0) x[i] = qp.lower[i];
    if (state[i] > 0) x[i] = qp.upper[i];
  }
  const int nf = static_cast<int>(free_idx.size());
  const int na = static_cast<int>(active_rows.size());
  const int size = nf + p + na;
  Vec nu = Vec::Zero(p);
  Vec mu = Vec::Zero(na);
  if (size > 0) {
    Mat K = Mat::Zero(size, size);
    Vec rhs = Vec::Zero(size);
    Vec fixed_part = qp.hessian * x;  // x holds fixed values; free entries zeroed below
    for (int i : free_idx) fixed_part -= qp.hessian.col(i) * x[i];
    for (int a = 0; a < nf; ++a) {
      const int i = free_idx[a];
      for (int b = 0; b < nf; ++b) K(a, b) = qp.hessian(i, free_idx[b]);
      rhs[a] = -qp.linear[i] - fixed_part[i];
      for (int r = 0; r < p; ++r) K(a, nf + r) = K(nf + r, a) = qp.eq_matrix(r, i);
    }
    for (int r = 0; r < p; ++r) {
      double fixed_sum = 0.0;
      for (int j = 0; j < d; ++j)
        if (state[j] != 0) fixed_sum += qp.eq_matrix(r, j) * x[j];
      rhs[nf + r] = qp.eq_rhs[r] - fixed_sum;
    }
    for (int q = 0; q < na; ++q) {
      const auto& row = qp.sum_rows[active_rows[q]];
      double fixed_sum = 0.0;
      for (int i : row.index) {
        if (state[i] != 0) {
          fixed_sum += x[i];
          continue;
        }
        const int a = static_cast<int>(std::find(free_idx.begin(), free_idx.end(), i) - free_idx.begin());
        K(a, nf + p + q) = K(nf + p + q, a) = 1.0;
      }
      rhs[nf + p + q] = row.limit - fixed_sum;
    }
    Eigen::FullPivLU<Mat> lu(K);
    if (!lu.isInvertible()) return false;
    const Vec sol = lu.solve(rhs);
    if (!sol.allFinite() || (K * sol - rhs).lpNorm<Eigen::Infinity>() > 1e-9 * (1.0 + rhs.lpNorm<Eigen::Infinity>())) {
      return false;
    }
    for (int a = 0; a < nf; ++a) x[free_idx[a]] = sol[a];
    nu = sol.segment(nf, p);
    mu = sol.tail(na);
  }

  const double scale = 1.0 + qp.linear.lpNorm<Eigen::Infinity>() + (qp.hessian * x).lpNorm<Eigen::Infinity>();
  const double ftol = 1e-7 * scale;
  Vec grad = qp.hessian * x + qp.linear;
  if (p > 0) grad += qp.eq_matrix.transpose() * nu;
  std::vector<double> row_mult(qp.sum_rows.size(), 0.0);
  for (int q = 0; q < na; ++q) {
    if (mu[q] < -ftol) return false;
    row_mult[active_rows[q]] = std::max(mu[q], 0.0);
    for (int i : qp.sum_rows[active_rows[q]].index) grad[i] += mu[q];
  }
  const double btol = 1e-9 * (1.0 + x.lpNorm<Eigen::Infinity>());
  for (int i : free_idx) {
    if (x[i] < qp.lower[i] - btol || x[i] > qp.upper[i] + btol) return false;
    x[i] = clampd(x[i], qp.lower[i], qp.upper[i]);
  }
  for (const auto& row : qp.sum_rows) {
    double s = 0.0;
    for (int i : row.index) s += x[i];
    if (s > row.limit + btol) return false;
  }
  Vec y = Vec::Zero(d);
  for (int i = 0; i < d; ++i) {
    if (state[i] == 0) continue;
    y[i] = -grad[i];
    if (state[i] < 0 && y[i] > ftol) return false;
    if (state[i] > 0 && y[i] < -ftol) return false;
  }
  out.x = x;
  out.eq_multipliers = nu;
  out.bound_multipliers = y;
  out.row_multipliers = row_mult;
  out.polished = true;
  return true;
}

double default_rho(double lo_eig, double hi_eig) {
  lo_eig = std::max(lo_eig, 1e-6 * hi_eig);
  return std::sqrt(lo_eig * hi_eig);
}

}  // namespace

QpSolution solve_box_qp(const BoxQp& qp, const SolverSettings& settings, const Vec* warm_start) {
  qp.check();
  check_feasible(qp.eq_matrix, qp.eq_rhs, qp.lower, qp.upper, qp.sum_rows);
  const int d = qp.dim();
  const int p = static_cast<int>(qp.eq_matrix.rows());
  if (p > 0) {
    Eigen::FullPivLU<Mat> rank_check(qp.eq_matrix);
    if (rank_check.rank() < p) throw ValidationError("box QP: equality rows are linearly dependent");
  }
  double rho = settings.rho;
  if (rho <= 0.0) {
    Eigen::SelfAdjointEigenSolver<Mat> eig(qp.hessian, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues()[0] <= 0.0) throw ValidationError("box QP: Hessian is not positive definite");
    rho = default_rho(eig.eigenvalues()[0], eig.eigenvalues()[d - 1]);
  }
  DenseProx prox(qp, rho);
  Vec v0 = (warm_start && warm_start->size() == d) ? *warm_start : Vec(Vec::Zero(d));
  DrOutcome dr = douglas_rachford(prox, qp.lower, qp.upper, qp.sum_rows, settings, std::move(v0));

  QpSolution out;
  out.status = dr.status;
  out.iterations = dr.iterations;
  out.residual = dr.residual;
  out.residuals = std::move(dr.residuals);
  out.splitting_state = dr.v;
  if (!(settings.polish && polish(qp, dr.z, dr.thetas, out))) {
    out.x = dr.z;
    out.eq_multipliers = prox.multipliers();
    Vec w = 2.0 * dr.x - dr.v;
    Vec y = rho * (w - dr.z);
    out.row_multipliers.assign(qp.sum_rows.size(), 0.0);
    for (std::size_t r = 0; r < qp.sum_rows.size(); ++r) {
      out.row_multipliers[r] = rho * dr.thetas[r];
      for (int i : qp.sum_rows[r].index) y[i] -= out.row_multipliers[r];
    }
    out.bound_multipliers = y;
  }
  out.objective = qp.objective(out.x);
  return out;
}

// ---------------------------------------------------------------------------

Mat build_phi(const std::vector<SystemMatrices>& sequence, int t, int t_end) {
  if (t < 0 || t > t_end || t_end > static_cast<int>(sequence.size())) {
    throw std::out_of_range(fmt::format("build_phi: window [{}, {}] outside [0, {}]", t, t_end, sequence.size()));
  }
  if (sequence.empty()) throw std::out_of_range("build_phi: empty dynamics sequence");
  const int n = static_cast<int>(sequence.front().A.rows());
  const int m = static_cast<int>(sequence.front().B.cols());
  const int k = t_end - t;
  Mat phi = Mat::Zero((k + 1) * n, (k + 1) * n + k * m);
  phi.topLeftCorner(n, n).setIdentity();
  for (int j = 0; j < k; ++j) {
    const auto& sm = sequence[t + j];
    const int row = (j + 1) * n;
    const int col = j * (n + m);
    phi.block(row, col, n, n) = -sm.A;
    phi.block(row, col + n, n, m) = -sm.B;
    phi.block(row, col + n + m, n, n).setIdentity();
  }
  return phi;
}

void KktSystem::check() const {
  const int N = stages();
  const int nn = n();
  if (static_cast<int>(B.size()) != N || static_cast<int>(offsets.size()) != N ||
      static_cast<int>(Q.size()) != N || static_cast<int>(R.size()) != N) {
    throw ValidationError("KKT system: stage sequences have different lengths");
  }
  if ((!q.empty() && static_cast<int>(q.size()) != N) || (!r.empty() && static_cast<int>(r.size()) != N)) {
    throw ValidationError("KKT system: linear term sequences have the wrong length");
  }
  const int mm = m();
  for (int tau = 0; tau < N; ++tau) {
    if (A[tau].rows() != nn || A[tau].cols() != nn || B[tau].rows() != nn || B[tau].cols() != mm ||
        offsets[tau].size() != nn || Q[tau].rows() != nn || Q[tau].cols() != nn || R[tau].rows() != mm ||
        R[tau].cols() != mm) {
      throw ValidationError(fmt::format("KKT system: stage {} has inconsistent dimensions", tau));
    }
    if ((!q.empty() && q[tau].size() != nn) || (!r.empty() && r[tau].size() != mm)) {
      throw ValidationError(fmt::format("KKT system: stage {} linear terms have the wrong size", tau));
    }
  }
  if (terminal.rows() != nn || terminal.cols() != nn) throw ValidationError("KKT system: terminal matrix size");
  if (terminal_linear.size() != 0 && terminal_linear.size() != nn) {
    throw ValidationError("KKT system: terminal linear term size");
  }
}

Mat KktSystem::gamma() const {
  const int d = primal_dim();
  Mat g = Mat::Zero(d, d);
  for (int tau = 0; tau < stages(); ++tau) {
    g.block(state_offset(tau), state_offset(tau), n(), n()) = Q[tau];
    g.block(action_offset(tau), action_offset(tau), m(), m()) = R[tau];
  }
  g.block(state_offset(stages()), state_offset(stages()), n(), n()) = terminal;
  return g;
}

Vec KktSystem::gradient_offset() const {
  Vec g = Vec::Zero(primal_dim());
  for (int tau = 0; tau < stages(); ++tau) {
    if (!q.empty()) g.segment(state_offset(tau), n()) = q[tau];
    if (!r.empty()) g.segment(action_offset(tau), m()) = r[tau];
  }
  if (terminal_linear.size() == n()) g.segment(state_offset(stages()), n()) = terminal_linear;
  return g;
}

Mat KktSystem::phi() const {
  std::vector<SystemMatrices> seq;
  seq.reserve(stages());
  for (int tau = 0; tau < stages(); ++tau) seq.push_back({A[tau], B[tau]});
  if (seq.empty()) return Mat::Identity(n(), n());
  return build_phi(seq, 0, stages());
}

Vec KktSystem::rhs() const {
  Vec out(dual_dim());
  out.head(n()) = initial_state;
  for (int tau = 0; tau < stages(); ++tau) out.segment((tau + 1) * n(), n()) = offsets[tau];
  return out;
}

Mat KktSystem::matrix() const {
  const int d = primal_dim(), p = dual_dim();
  Mat k = Mat::Zero(d + p, d + p);
  k.topLeftCorner(d, d) = gamma();
  const Mat ph = phi();
  k.topRightCorner(d, p) = ph.transpose();
  k.bottomLeftCorner(p, d) = ph;
  return k;
}

double KktSystem::objective(const Vec& primal) const {
  double obj = 0.0;
  for (int tau = 0; tau < stages(); ++tau) {
    const auto s = primal.segment(state_offset(tau), n());
    const auto a = primal.segment(action_offset(tau), m());
    obj += 0.5 * s.dot(Q[tau] * s) + 0.5 * a.dot(R[tau] * a);
    if (!q.empty()) obj += q[tau].dot(s);
    if (!r.empty()) obj += r[tau].dot(a);
  }
  const auto sN = primal.segment(state_offset(stages()), n());
  obj += 0.5 * sN.dot(terminal * sN);
  if (terminal_linear.size() == n()) obj += terminal_linear.dot(sN);
  return obj;
}

namespace {

// Actions held at a bound during a Riccati solve: state[tau*m+i] is -1/+1 for
// lower/upper, 0 for free.
struct Pinning {
  const std::vector<signed char>* state = nullptr;
  const Vec* lower = nullptr;
  const Vec* upper = nullptr;
};

class StageSolver {
 public:
  virtual ~StageSolver() = default;
  // Minimizer of 1/2 z'(Gamma + rho I)z + g'z subject to the dynamics.
  virtual void solve(const Vec& g, Vec& z) const = 0;
};

// Riccati factorization of the stage problem with every Hessian block shifted
// by rho. Small stations use bounded-size storage so nothing touches the heap
// inside the recursion.
template <int MaxN, int MaxM>
class Riccati final : public StageSolver {
  using MNN = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, MaxN, MaxN>;
  using MNM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, MaxN, MaxM>;
  using MMN = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, MaxM, MaxN>;
  using MMM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, MaxM, MaxM>;
  using VN = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, MaxN, 1>;
  using VM = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, MaxM, 1>;

  struct Stage {
    MNN A;
    MNM B;
    MMN K, G;
    MMM Minv;
    VN c, Vc;
    VM rfix;      // linear term from pinned neighbours
    VM pin_mask;  // 1 where pinned
    VM pin_value;
  };

 public:
  Riccati(const KktSystem& sys, double rho, const Pinning* pin)
      : sys_(sys), n_(sys.n()), m_(sys.m()), N_(sys.stages()), stages_(N_) {
    MNN V = sys.terminal;
    V.diagonal().array() += rho;
    for (int tau = N_ - 1; tau >= 0; --tau) {
      Stage& st = stages_[tau];
      st.A = sys.A[tau];
      st.B = sys.B[tau];
      st.c = sys.offsets[tau];
      MMM R = sys.R[tau];
      st.rfix = VM::Zero(m_);
      st.pin_mask = VM::Zero(m_);
      st.pin_value = VM::Zero(m_);
      if (pin) {
        for (int i = 0; i < m_; ++i) {
          const int sgn = (*pin->state)[tau * m_ + i];
          if (sgn == 0) continue;
          const int k = sys.action_offset(tau) + i;
          st.pin_mask[i] = 1.0;
          st.pin_value[i] = sgn < 0 ? (*pin->lower)[k] : (*pin->upper)[k];
        }
        for (int i = 0; i < m_; ++i) {
          if (st.pin_mask[i] == 0.0) continue;
          const double val = st.pin_value[i];
          st.c += st.B.col(i) * val;
          for (int j = 0; j < m_; ++j)
            if (st.pin_mask[j] == 0.0) st.rfix[j] += R(j, i) * val;
        }
        for (int i = 0; i < m_; ++i) {
          if (st.pin_mask[i] == 0.0) continue;
          st.B.col(i).setZero();
          R.row(i).setZero();
          R.col(i).setZero();
          R(i, i) = 1.0;
        }
      }
      MMM M = R + st.B.transpose() * V * st.B;
      M.diagonal().array() += rho;
      Eigen::LLT<MMM> llt(M);
      if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<MMM> eig(M, Eigen::EigenvaluesOnly);
        const double lo = eig.eigenvalues()[0], hi = eig.eigenvalues()[m_ - 1];
        throw SolverError(fmt::format(
            "KKT system is singular at stage {}: reduced Hessian eigenvalues [{:.3e}, {:.3e}], condition "
            "estimate {:.3e}",
            tau, lo, hi, lo == 0.0 ? kInf : std::abs(hi / lo)));
      }
      st.Minv = llt.solve(MMM::Identity(m_, m_));
      st.G = st.B.transpose() * V * st.A;
      st.K = -st.Minv * st.G;
      st.Vc = V * st.c;
      MNN Vn = sys.Q[tau] + st.A.transpose() * V * st.A + st.G.transpose() * st.K;
      Vn.diagonal().array() += rho;
      V = 0.5 * (Vn + Vn.transpose());
    }
    k_.resize(N_);
  }

  void solve(const Vec& g, Vec& z) const override {
    const int n = n_, m = m_;
    if (z.size() != sys_.primal_dim()) z.resize(sys_.primal_dim());
    VN vnext = g.segment(sys_.state_offset(N_), n);
    VN u(n);
    VM h(m);
    for (int tau = N_ - 1; tau >= 0; --tau) {
      const Stage& st = stages_[tau];
      u = st.Vc + vnext;
      h = g.segment(sys_.action_offset(tau), m) + st.rfix;
      h.noalias() += st.B.transpose() * u;
      for (int i = 0; i < m; ++i)
        if (st.pin_mask[i] != 0.0) h[i] = -st.pin_value[i];
      k_[tau].noalias() = -st.Minv * h;
      if (tau > 0) {
        VN vcur = g.segment(sys_.state_offset(tau), n);
        vcur.noalias() += st.A.transpose() * u;
        vcur.noalias() += st.G.transpose() * k_[tau];
        vnext = vcur;
      }
    }
    z.segment(0, n) = sys_.initial_state;
    VN s = sys_.initial_state;
    VM a(m);
    for (int tau = 0; tau < N_; ++tau) {
      const Stage& st = stages_[tau];
      a.noalias() = st.K * s;
      a += k_[tau];
      z.segment(sys_.action_offset(tau), m) = a;
      VN sn = st.c;
      sn.noalias() += st.A * s;
      sn.noalias() += st.B * a;
      z.segment(sys_.state_offset(tau + 1), n) = sn;
      s = sn;
    }
  }

 private:
  const KktSystem& sys_;
  int n_, m_, N_;
  std::vector<Stage> stages_;
  mutable std::vector<VM> k_;
};

std::unique_ptr<StageSolver> make_stage_solver(const KktSystem& sys, double rho, const Pinning* pin = nullptr) {
  if (sys.n() <= 8 && sys.m() <= 4) return std::make_unique<Riccati<8, 4>>(sys, rho, pin);
  return std::make_unique<Riccati<Eigen::Dynamic, Eigen::Dynamic>>(sys, rho, pin);
}

void split_primal(const KktSystem& sys, const Vec& z, std::vector<Vec>& states, std::vector<Vec>& actions) {
  states.clear();
  actions.clear();
  for (int tau = 0; tau <= sys.stages(); ++tau) states.push_back(z.segment(sys.state_offset(tau), sys.n()));
  for (int tau = 0; tau < sys.stages(); ++tau) actions.push_back(z.segment(sys.action_offset(tau), sys.m()));
}

}  // namespace

KktSolution solve_kkt(const KktSystem& sys) {
  sys.check();
  KktSolution out;
  const Vec g = sys.gradient_offset();
  make_stage_solver(sys, 0.0)->solve(g, out.primal);
  const int n = sys.n(), N = sys.stages();
  out.dual.resize(sys.dual_dim());
  const auto sN = out.primal.segment(sys.state_offset(N), n);
  Vec eta = -(sys.terminal * sN + g.segment(sys.state_offset(N), n));
  out.dual.segment(N * n, n) = eta;
  for (int tau = N - 1; tau >= 0; --tau) {
    const auto s = out.primal.segment(sys.state_offset(tau), n);
    eta = -(sys.Q[tau] * s + g.segment(sys.state_offset(tau), n)) + sys.A[tau].transpose() * eta;
    out.dual.segment(tau * n, n) = eta;
  }
  split_primal(sys, out.primal, out.states, out.actions);
  return out;
}

// ---------------------------------------------------------------------------

void StagedQp::check() const {
  core.check();
  const int d = core.primal_dim();
  if (lower.size() != d || upper.size() != d) throw ValidationError("staged QP: bound vectors have the wrong size");
  for (int i = core.n(); i < d; ++i) {
    if (!(lower[i] <= upper[i])) throw ValidationError(fmt::format("staged QP: lower[{}] exceeds upper", i));
  }
  for (const auto& row : sum_rows)
    for (int i : row.index)
      if (i < core.n() || i >= d) throw ValidationError("staged QP: sum row index out of range");
}

BoxQp StagedQp::dense() const {
  check();
  BoxQp qp;
  qp.hessian = core.gamma();
  qp.linear = core.gradient_offset();
  qp.lower = lower;
  qp.upper = upper;
  qp.lower.head(core.n()).setConstant(-kInf);
  qp.upper.head(core.n()).setConstant(kInf);
  qp.eq_matrix = core.phi();
  qp.eq_rhs = core.rhs();
  qp.sum_rows = sum_rows;
  return qp;
}

namespace {

bool inside(const StagedQp& qp, const Vec& lo, const Vec& hi, const Vec& z) {
  for (int i = qp.core.n(); i < z.size(); ++i)
    if (z[i] < lo[i] || z[i] > hi[i]) return false;
  for (const auto& row : qp.sum_rows) {
    double s = 0.0;
    for (int i : row.index) s += z[i];
    if (s > row.limit) return false;
  }
  return true;
}

double stage_scale_rho(const KktSystem& sys) {
  double lo = kInf, hi = 0.0;
  auto visit = [&](const Mat& M) {
    lo = std::min(lo, M.diagonal().minCoeff());
    hi = std::max(hi, M.diagonal().maxCoeff());
  };
  for (int tau = 0; tau < sys.stages(); ++tau) {
    visit(sys.Q[tau]);
    visit(sys.R[tau]);
  }
  visit(sys.terminal);
  return default_rho(lo, hi);
}

}  // namespace

namespace {

bool action_bounds_only(const StagedQp& qp) {
  const KktSystem& sys = qp.core;
  if (!qp.sum_rows.empty()) return false;
  for (int tau = 1; tau <= sys.stages(); ++tau) {
    const int so = sys.state_offset(tau);
    for (int i = 0; i < sys.n(); ++i)
      if (std::isfinite(qp.lower[so + i]) || std::isfinite(qp.upper[so + i])) return false;
  }
  return true;
}

// Rolls the dynamics forward from the actions stored in z.
void rollout(const KktSystem& sys, Vec& z) {
  const int n = sys.n(), m = sys.m();
  double* data = z.data();
  for (int tau = 0; tau < sys.stages(); ++tau) {
    const double* s = data + sys.state_offset(tau);
    const double* a = data + sys.action_offset(tau);
    double* out = data + sys.state_offset(tau + 1);
    const Mat& A = sys.A[tau];
    const Mat& B = sys.B[tau];
    for (int i = 0; i < n; ++i) {
      double acc = sys.offsets[tau][i];
      for (int j = 0; j < n; ++j) acc += A(i, j) * s[j];
      for (int j = 0; j < m; ++j) acc += B(i, j) * a[j];
      out[i] = acc;
    }
  }
}

double quad_form(const Mat& M, const double* x, int d) {
  double acc = 0.0;
  for (int j = 0; j < d; ++j) {
    double col = 0.0;
    for (int i = 0; i < d; ++i) col += M(i, j) * x[i];
    acc += col * x[j];
  }
  return acc;
}

double linear_form(const Vec& g, const double* x, int offset, int d) {
  double acc = 0.0;
  for (int i = 0; i < d; ++i) acc += g[offset + i] * x[i];
  return acc;
}

// Objective with the stacked linear term g, without temporaries.
double staged_objective(const KktSystem& sys, const Vec& g, const Vec& z) {
  const int n = sys.n(), m = sys.m(), N = sys.stages();
  const double* data = z.data();
  double obj = 0.0;
  for (int tau = 0; tau < N; ++tau) {
    const double* s = data + sys.state_offset(tau);
    const double* a = data + sys.action_offset(tau);
    obj += 0.5 * quad_form(sys.Q[tau], s, n) + 0.5 * quad_form(sys.R[tau], a, m);
    obj += linear_form(g, s, sys.state_offset(tau), n) + linear_form(g, a, sys.action_offset(tau), m);
  }
  const double* sN = data + sys.state_offset(N);
  return obj + 0.5 * quad_form(sys.terminal, sN, n) + linear_form(g, sN, sys.state_offset(N), n);
}

// Gradient of the objective with respect to the actions (states eliminated),
// through the costates of the dynamics.
void action_gradient(const KktSystem& sys, const Vec& g, const Vec& z, Vec& grad) {
  const int N = sys.stages(), n = sys.n(), m = sys.m();
  grad.resize(N * m);
  std::vector<double> eta(n), next(n);
  const double* data = z.data();
  const double* sN = data + sys.state_offset(N);
  for (int i = 0; i < n; ++i) {
    double acc = g[sys.state_offset(N) + i];
    for (int j = 0; j < n; ++j) acc += sys.terminal(i, j) * sN[j];
    eta[i] = -acc;
  }
  for (int tau = N - 1; tau >= 0; --tau) {
    const double* s = data + sys.state_offset(tau);
    const double* a = data + sys.action_offset(tau);
    const Mat& A = sys.A[tau];
    const Mat& B = sys.B[tau];
    const Mat& R = sys.R[tau];
    const Mat& Q = sys.Q[tau];
    for (int i = 0; i < m; ++i) {
      double acc = g[sys.action_offset(tau) + i];
      for (int j = 0; j < m; ++j) acc += R(i, j) * a[j];
      for (int j = 0; j < n; ++j) acc -= B(j, i) * eta[j];
      grad[tau * m + i] = acc;
    }
    for (int i = 0; i < n; ++i) {
      double acc = -g[sys.state_offset(tau) + i];
      for (int j = 0; j < n; ++j) acc += A(j, i) * eta[j] - Q(i, j) * s[j];
      next[i] = acc;
    }
    eta.swap(next);
  }
}

// Stage problem with the actions in `pinned` (+-1) held at their bounds and the
// rest free.
void pinned_solve(const StagedQp& qp, const std::vector<signed char>& pinned, Vec& z) {
  const KktSystem& sys = qp.core;
  Pinning pin{&pinned, &qp.lower, &qp.upper};
  make_stage_solver(sys, 0.0, &pin)->solve(sys.gradient_offset(), z);
  const int N = sys.stages(), m = sys.m();
  for (int tau = 0; tau < N; ++tau) {
    for (int i = 0; i < m; ++i) {
      const int st = pinned[tau * m + i];
      const int k = sys.action_offset(tau) + i;
      if (st < 0) z[k] = qp.lower[k];
      if (st > 0) z[k] = qp.upper[k];
    }
  }
}

void clamp_actions(const StagedQp& qp, Vec& z) {
  const KktSystem& sys = qp.core;
  for (int tau = 0; tau < sys.stages(); ++tau)
    for (int i = 0; i < sys.m(); ++i) {
      const int k = sys.action_offset(tau) + i;
      z[k] = clampd(z[k], qp.lower[k], qp.upper[k]);
    }
}

// Primal-dual active set: the pinned solve gives the free actions, the
// costates give the multipliers of the pinned ones, and the guess is updated
// from both at once. Fast when it works but may cycle; `best` receives the
// lowest-objective clamped iterate either way.
bool primal_dual_active_set(const StagedQp& qp, const Vec& guess, int max_passes, Vec& z, Vec& best,
                            int& passes) {
  const KktSystem& sys = qp.core;
  const int N = sys.stages(), m = sys.m();
  const Vec g = sys.gradient_offset();
  std::vector<signed char> state(N * m, 0), next(N * m, 0);
  for (int tau = 0; tau < N; ++tau)
    for (int i = 0; i < m; ++i) {
      const int k = sys.action_offset(tau) + i;
      if (guess[k] <= qp.lower[k]) state[tau * m + i] = -1;
      else if (guess[k] >= qp.upper[k]) state[tau * m + i] = 1;
    }
  std::vector<std::vector<signed char>> seen;
  double best_f = kInf;
  Vec grad, clamped;
  for (passes = 1; passes <= max_passes; ++passes) {
    pinned_solve(qp, state, z);
    action_gradient(sys, g, z, grad);
    bool optimal = true;
    for (int tau = 0; tau < N; ++tau)
      for (int i = 0; i < m; ++i) {
        const int j = tau * m + i;
        const int k = sys.action_offset(tau) + i;
        const double x = z[k];
        const double y = state[j] == 0 ? 0.0 : -grad[j];
        next[j] = 0;
        if (y + (x - qp.upper[k]) > 0.0) next[j] = 1;
        else if (y + (x - qp.lower[k]) < 0.0) next[j] = -1;
        const double tol = 1e-10 * (1.0 + std::abs(grad[j]));
        if (state[j] == 0 && (x > qp.upper[k] || x < qp.lower[k])) optimal = false;
        if (state[j] > 0 && y < -tol) optimal = false;
        if (state[j] < 0 && y > tol) optimal = false;
      }
    if (optimal) return true;
    clamped = z;
    clamp_actions(qp, clamped);
    rollout(sys, clamped);
    const double f = staged_objective(sys, g, clamped);
    if (f < best_f) {
      best_f = f;
      best = clamped;
    }
    if (next == state || std::find(seen.begin(), seen.end(), next) != seen.end()) return false;
    seen.push_back(state);
    state.swap(next);
  }
  return false;
}

// Projected Newton on the action bounds. Coordinates at a bound whose gradient
// points outward are held; the free ones take the Newton step of the pinned
// problem; an Armijo search along the projection arc keeps the objective
// decreasing. Returns false when the pass budget runs out.
bool projected_newton(const StagedQp& qp, const Vec& guess, int max_passes, double tol, Vec& z, int& passes) {
  const KktSystem& sys = qp.core;
  const int N = sys.stages(), m = sys.m();
  const Vec g = sys.gradient_offset();
  z = guess;
  z.head(sys.n()) = sys.initial_state;
  clamp_actions(qp, z);
  rollout(sys, z);
  double f = staged_objective(sys, g, z);
  Vec grad, target, trial;
  std::vector<signed char> pinned(N * m);
  for (passes = 1; passes <= max_passes; ++passes) {
    action_gradient(sys, g, z, grad);
    // projected-gradient stationarity measure
    double pg = 0.0;
    for (int tau = 0; tau < N; ++tau)
      for (int i = 0; i < m; ++i) {
        const int k = sys.action_offset(tau) + i;
        const double step = clampd(z[k] - grad[tau * m + i], qp.lower[k], qp.upper[k]) - z[k];
        pg = std::max(pg, std::abs(step));
      }
    if (pg <= tol * (1.0 + grad.lpNorm<Eigen::Infinity>())) return true;
    const double eps = std::min(1e-6, pg);
    for (int tau = 0; tau < N; ++tau)
      for (int i = 0; i < m; ++i) {
        const int k = sys.action_offset(tau) + i;
        const double gi = grad[tau * m + i];
        signed char st = 0;
        if (z[k] <= qp.lower[k] + eps && gi > 0.0) st = -1;
        else if (z[k] >= qp.upper[k] - eps && gi < 0.0) st = 1;
        pinned[tau * m + i] = st;
      }
    pinned_solve(qp, pinned, target);
    double alpha = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
      trial = z;
      for (int tau = 0; tau < N; ++tau)
        for (int i = 0; i < m; ++i) {
          const int k = sys.action_offset(tau) + i;
          trial[k] = pinned[tau * m + i] != 0 ? target[k]
                                              : clampd(z[k] + alpha * (target[k] - z[k]), qp.lower[k], qp.upper[k]);
        }
      rollout(sys, trial);
      const double ft = staged_objective(sys, g, trial);
      double decrease = 0.0;
      for (int tau = 0; tau < N; ++tau)
        for (int i = 0; i < m; ++i) {
          const int k = sys.action_offset(tau) + i;
          decrease += grad[tau * m + i] * (trial[k] - z[k]);
        }
      if (ft <= f + 1e-4 * decrease + 1e-15 * std::abs(f)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) return false;
    z.swap(trial);
    f = staged_objective(sys, g, z);
  }
  return false;
}

}  // namespace

StagedSolution solve_staged_qp(const StagedQp& qp, const SolverSettings& settings, const Vec* warm_start) {
  qp.check();
  const KktSystem& sys = qp.core;
  const int d = sys.primal_dim();
  const Vec g = sys.gradient_offset();
  Vec lo = qp.lower, hi = qp.upper;
  lo.head(sys.n()) = sys.initial_state;
  hi.head(sys.n()) = sys.initial_state;

  StagedSolution out;
  {
    Vec z;
    make_stage_solver(sys, 0.0)->solve(g, z);
    if (inside(qp, lo, hi, z)) {
      out.primal = z;
      out.unconstrained = true;
      out.splitting_state = z;
    }
  }
  if (!out.unconstrained && settings.active_set && action_bounds_only(qp)) {
    Vec guess;
    if (warm_start && warm_start->size() == d) {
      guess = *warm_start;
    } else {
      make_stage_solver(sys, 0.0)->solve(g, guess);
    }
    Vec z, best;
    int passes = 0, newton_passes = 0;
    bool solved = primal_dual_active_set(qp, guess, 20, z, best, passes);
    if (!solved) {
      solved = projected_newton(qp, best.size() == d ? best : guess, settings.max_active_set_passes,
                                std::max(settings.tol * 1e-2, 1e-13), z, newton_passes);
    }
    if (solved) {
      out.primal = z;
      out.iterations = passes + newton_passes;
      out.active_set = true;
      out.splitting_state = z;
    }
  }
  if (!out.unconstrained && !out.active_set) {
    const double rho = settings.rho > 0.0 ? settings.rho : stage_scale_rho(sys);
    const auto ric = make_stage_solver(sys, rho);
    Vec gshift(d);
    auto prox = [&](const Vec& v, Vec& x) {
      gshift.noalias() = g - rho * v;
      ric->solve(gshift, x);
    };
    Vec v0 = (warm_start && warm_start->size() == d) ? *warm_start : Vec(Vec::Zero(d));
    DrOutcome dr = douglas_rachford(prox, lo, hi, qp.sum_rows, settings, std::move(v0));
    out.status = dr.status;
    out.iterations = dr.iterations;
    out.residual = dr.residual;
    out.residuals = std::move(dr.residuals);
    out.splitting_state = dr.v;
    // actions from the bound-feasible iterate; states re-simulated so the
    // dynamics hold exactly
    Vec z = dr.z;
    for (int tau = 0; tau < sys.stages(); ++tau) {
      z.segment(sys.state_offset(tau + 1), sys.n()) =
          sys.A[tau] * z.segment(sys.state_offset(tau), sys.n()) +
          sys.B[tau] * z.segment(sys.action_offset(tau), sys.m()) + sys.offsets[tau];
    }
    out.primal = std::move(z);
  }
  out.objective = sys.objective(out.primal);
  split_primal(sys, out.primal, out.states, out.actions);
  return out;
}

}  // namespace oodcharge
