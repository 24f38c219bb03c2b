#include "oodcharge/core.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

namespace oodcharge {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream stream(line);
  while (std::getline(stream, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& text, int row, const char* column) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ParseError(fmt::format("row {}: column '{}' is not a number: '{}'", row, column, text));
  }
  return value;
}

int parse_int(const std::string& text, int row, const char* column) {
  int value = 0;
  const char* begin = text.data();
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ParseError(fmt::format("row {}: column '{}' is not an integer: '{}'", row, column, text));
  }
  return value;
}

}  // namespace

SessionSet::SessionSet(std::vector<ChargingSession> sessions, int horizon,
                       const std::vector<int>& rows)
    : sessions_(std::move(sessions)), horizon_(horizon) {
  if (horizon_ < 1) throw ValidationError("session horizon must be positive");
  auto where = [&](const ChargingSession& s) {
    const auto k = static_cast<std::size_t>(&s - sessions_.data());
    return k < rows.size() ? fmt::format(" (row {})", rows[k]) : std::string();
  };
  for (const ChargingSession& s : sessions_) {
    if (!(s.arrival > 0.0)) {
      throw ValidationError(fmt::format("session {}{}: arrival must be > 0", s.id, where(s)));
    }
    if (!(s.arrival < s.departure)) {
      throw ValidationError(fmt::format("session {}{}: arrival must precede departure", s.id, where(s)));
    }
    if (!(s.energy_kwh > 0.0)) {
      throw ValidationError(fmt::format("session {}{}: energy demand must be positive", s.id, where(s)));
    }
    if (s.charger < 1) {
      throw ValidationError(fmt::format("session {}{}: charger index must be >= 1", s.id, where(s)));
    }
    if (!(s.user_departure > s.arrival)) {
      throw ValidationError(fmt::format("session {}{}: user departure must follow arrival", s.id, where(s)));
    }
    if (!(s.user_energy_kwh >= 0.0)) {
      throw ValidationError(fmt::format("session {}{}: user energy must be nonnegative", s.id, where(s)));
    }
    max_charger_ = std::max(max_charger_, s.charger);
  }

  // Exclusivity: [arrival, departure) intervals on one charger must not overlap.
  std::map<int, std::vector<const ChargingSession*>> by_charger;
  for (const ChargingSession& s : sessions_) by_charger[s.charger].push_back(&s);
  for (auto& [charger, list] : by_charger) {
    std::sort(list.begin(), list.end(), [](const ChargingSession* a, const ChargingSession* b) {
      return a->arrival < b->arrival;
    });
    for (std::size_t k = 1; k < list.size(); ++k) {
      if (list[k]->arrival < list[k - 1]->departure) {
        throw ValidationError(fmt::format("sessions {}{} and {}{} overlap on charger {}",
                                          list[k - 1]->id, where(*list[k - 1]), list[k]->id,
                                          where(*list[k]), charger));
      }
    }
  }
}

SessionSet parse_sessions(std::istream& in, int horizon) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("session file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kSessionHeader) {
    throw ParseError(fmt::format("row 1: unexpected header '{}', expected '{}'", line,
                                 kSessionHeader));
  }
  std::vector<ChargingSession> sessions;
  std::vector<int> rows;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != 7) {
      throw ParseError(fmt::format("row {}: expected 7 fields, found {}", row, fields.size()));
    }
    ChargingSession s;
    s.id = fields[0];
    if (s.id.empty()) throw ParseError(fmt::format("row {}: empty id", row));
    s.arrival = parse_double(fields[1], row, "arrival");
    s.departure = parse_double(fields[2], row, "departure");
    s.energy_kwh = parse_double(fields[3], row, "energy_kwh");
    s.charger = parse_int(fields[4], row, "charger");
    s.user_departure = parse_double(fields[5], row, "user_departure");
    s.user_energy_kwh = parse_double(fields[6], row, "user_energy_kwh");
    sessions.push_back(std::move(s));
    rows.push_back(row);
  }
  return SessionSet(std::move(sessions), horizon, rows);
}

SessionSet load_sessions(const std::string& path, int horizon) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open session file '{}'", path));
  return parse_sessions(in, horizon);
}

void write_sessions(std::ostream& out, const SessionSet& set) {
  out << kSessionHeader << '\n';
  for (const ChargingSession& s : set.sessions()) {
    out << fmt::format("{},{},{},{},{},{},{}\n", s.id, s.arrival, s.departure, s.energy_kwh,
                       s.charger, s.user_departure, s.user_energy_kwh);
  }
}

void save_sessions(const std::string& path, const SessionSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(fmt::format("cannot write session file '{}'", path));
  write_sessions(out, set);
}

// ---------------------------------------------------------------------------

SpaceSpec SpaceSpec::box(int m, double e_bound, double b_bound, double a_lo, double a_hi) {
  if (m < 1 || !(e_bound >= 0) || !(b_bound >= 0) || !(a_lo <= a_hi)) {
    throw ValidationError("invalid box space parameters");
  }
  SpaceSpec spec;
  spec.mode = SpaceMode::kBox;
  spec.m = m;
  spec.per_charger_limit = b_bound;
  spec.action_lo = a_lo;
  spec.action_hi = a_hi;
  spec.state_lo.resize(2 * m);
  spec.state_hi.resize(2 * m);
  spec.state_lo.head(m).setConstant(-e_bound);
  spec.state_hi.head(m).setConstant(e_bound);
  spec.state_lo.tail(m).setConstant(-b_bound);
  spec.state_hi.tail(m).setConstant(b_bound);
  return spec;
}

SpaceSpec SpaceSpec::nonneg_simplex(int m, double line_limit, double b_bar, double a_lo,
                                    double a_hi) {
  if (m < 1 || !(line_limit >= 0) || !(b_bar >= 0) || !(a_lo <= a_hi)) {
    throw ValidationError("invalid simplex space parameters");
  }
  SpaceSpec spec;
  spec.mode = SpaceMode::kNonnegSimplex;
  spec.m = m;
  spec.line_limit = line_limit;
  spec.per_charger_limit = b_bar;
  spec.action_lo = a_lo;
  spec.action_hi = a_hi;
  spec.state_lo = Vec::Zero(2 * m);
  spec.state_hi.resize(2 * m);
  spec.state_hi.head(m).setConstant(kInf);
  spec.state_hi.tail(m).setConstant(b_bar);
  return spec;
}

// ---------------------------------------------------------------------------

double DynamicsSpec::mu_at(int t) const {
  if (mu_eff.empty()) throw ValidationError("empty charging-efficiency sequence");
  return mu_eff.size() == 1 ? mu_eff[0] : mu_eff.at(static_cast<std::size_t>(t));
}

double DynamicsSpec::beta_at(int t) const {
  if (beta_ctrl.empty()) throw ValidationError("empty control-efficiency sequence");
  return beta_ctrl.size() == 1 ? beta_ctrl[0] : beta_ctrl.at(static_cast<std::size_t>(t));
}

DynamicsSpec DynamicsSpec::constant(int m, double delta_hours, double mu_eff,
                                    double beta_ctrl) {
  if (m < 1) throw ValidationError("charger count must be positive");
  if (mu_eff < 0 || mu_eff > 1 || beta_ctrl < 0 || beta_ctrl > 1) {
    throw ValidationError("efficiencies must lie in [0, 1]");
  }
  DynamicsSpec spec;
  spec.delta_hours = delta_hours;
  spec.mu_eff = {mu_eff};
  spec.beta_ctrl = {beta_ctrl};
  spec.m = m;
  return spec;
}

SystemMatrices assemble_dynamics(const DynamicsSpec& spec, int t) {
  const int m = spec.m;
  const int n = 2 * m;
  SystemMatrices sys{Mat::Identity(n, n), Mat::Zero(n, m)};
  const double coupling = -spec.delta_hours * spec.mu_at(t);
  const double control = spec.beta_at(t);
  for (int i = 0; i < m; ++i) {
    sys.A(i, m + i) = coupling;
    sys.B(m + i, i) = control;
  }
  return sys;
}

// ---------------------------------------------------------------------------

double min_eigenvalue(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> solver(m, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

double max_eigenvalue(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> solver(m, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().maxCoeff();
}

namespace {

void require_pd(const Mat& m, const char* what, std::size_t index) {
  if (m.rows() != m.cols()) {
    throw ValidationError(fmt::format("{}[{}] is not square", what, index));
  }
  if (!m.isApprox(m.transpose(), 1e-12)) {
    throw ValidationError(fmt::format("{}[{}] is not symmetric", what, index));
  }
  const double lo = min_eigenvalue(m);
  if (!(lo > 0.0)) {
    throw ValidationError(
        fmt::format("{}[{}] is not positive definite (min eigenvalue {})", what, index, lo));
  }
}

}  // namespace

CostSpec::CostSpec(std::vector<Mat> state_weights, std::vector<Mat> action_weights,
                   Mat terminal)
    : q_(std::move(state_weights)), r_(std::move(action_weights)), terminal_(std::move(terminal)) {
  if (q_.empty() || r_.empty()) throw ValidationError("cost sequences must be nonempty");
  for (std::size_t k = 0; k < q_.size(); ++k) require_pd(q_[k], "Q", k);
  for (std::size_t k = 0; k < r_.size(); ++k) require_pd(r_[k], "R_cost", k);
  require_pd(terminal_, "P_term", 0);
  if (terminal_.rows() != q_.front().rows()) {
    throw ValidationError("terminal matrix dimension differs from Q");
  }
}

CostSpec CostSpec::diagonal(int m, double q, double alpha) {
  const int n = 2 * m;
  Mat qm = q * Mat::Identity(n, n);
  return CostSpec({qm}, {alpha * Mat::Identity(m, m)}, qm);
}

const Mat& CostSpec::state_weight(int t) const {
  return q_.size() == 1 ? q_[0] : q_.at(static_cast<std::size_t>(t));
}

const Mat& CostSpec::action_weight(int t) const {
  return r_.size() == 1 ? r_[0] : r_.at(static_cast<std::size_t>(t));
}

std::pair<double, double> CostSpec::eigen_range() const {
  double lo = kInf;
  double hi = -kInf;
  auto visit = [&](const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> solver(m, Eigen::EigenvaluesOnly);
    lo = std::min(lo, solver.eigenvalues().minCoeff());
    hi = std::max(hi, solver.eigenvalues().maxCoeff());
  };
  for (const Mat& m : q_) visit(m);
  for (const Mat& m : r_) visit(m);
  visit(terminal_);
  return {lo, hi};
}

void CostSpec::check_bounds(double mu_lb, double xi_ub) const {
  const auto [lo, hi] = eigen_range();
  if (lo < mu_lb || hi > xi_ub) {
    throw ValidationError(fmt::format(
        "cost eigenvalues [{}, {}] fall outside the required range [{}, {}]", lo, hi, mu_lb,
        xi_ub));
  }
}

double CostSpec::stage_cost(int t, const Vec& s, const Vec& a) const {
  return 0.5 * (s.dot(state_weight(t) * s) + a.dot(action_weight(t) * a));
}

// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t cell, std::uint64_t stream) {
  return splitmix64(splitmix64(splitmix64(master) ^ cell) ^ stream);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

}  // namespace oodcharge
