#pragma once

// Fixtures shared by the unit tests.

#include <random>
#include <string>
#include <vector>

#include "oodcharge/config.hpp"
#include "oodcharge/core.hpp"
#include "oodcharge/env.hpp"
#include "oodcharge/mpc.hpp"

namespace oodcharge::testing {

inline std::string data_path(const std::string& name) { return std::string(OODCHARGE_TEST_DATA) + "/" + name; }

inline SessionSet three_sessions(int T = 144) { return load_sessions(data_path("three_sessions.csv"), T); }

inline ChargingSession session(const std::string& id, double arrival, double departure, double energy, int charger) {
  ChargingSession s;
  s.id = id;
  s.arrival = arrival;
  s.departure = departure;
  s.energy_kwh = energy;
  s.charger = charger;
  s.user_departure = departure;
  s.user_energy_kwh = energy;
  return s;
}

inline ChargingEnv make_env(const ExperimentConfig& cfg) {
  return ChargingEnv(cfg.space(), cfg.dynamics(), cfg.costs(), cfg.T);
}

inline MpcController make_mpc(const ExperimentConfig& cfg) {
  return MpcController(cfg.space(), cfg.dynamics(), cfg.costs(), cfg.T, MpcSettings::from_config(cfg));
}

inline Vec random_vec(int n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

inline Mat random_mat(int r, int c, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = u(rng);
  return m;
}

/// Random symmetric positive definite matrix with eigenvalues >= floor.
inline Mat random_spd(int n, double floor, Rng& rng) {
  const Mat G = random_mat(n, n, -1.0, 1.0, rng);
  return G * G.transpose() + floor * Mat::Identity(n, n);
}

}  // namespace oodcharge::testing
