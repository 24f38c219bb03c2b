#pragma once

// Parametric session-day generator with a workplace-style profile (morning
// arrival peak, long stays) and a flattened profile (arrivals spread over the
// day, shorter stays).

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "oodcharge/core.hpp"

namespace oodcharge {

enum class SessionProfile { kPre, kPost };

SessionProfile parse_profile(const std::string& name);
const char* to_string(SessionProfile p);

struct ProfileParams {
  // arrival hour: normal(mean, sd) when sd > 0, otherwise uniform[lo, hi]
  double arrival_mean_h = 8.5;
  double arrival_sd_h = 1.5;
  double arrival_lo_h = 6.0;
  double arrival_hi_h = 22.0;
  double duration_mean_h = 7.5;
  double duration_sd_h = 2.5;
  double duration_min_h = 0.5;
  double duration_max_h = 14.0;
  double energy_mean_kwh = 12.0;
  double energy_sd_kwh = 5.0;
  double energy_min_kwh = 2.0;
  double energy_max_kwh = 40.0;
  // user-input error
  double departure_bias_h = 0.0;
  double departure_sd_h = 1.0;
  double energy_bias_rel = 0.0;
  double energy_sd_rel = 0.2;

  static ProfileParams defaults(SessionProfile p);
};

/// Counts kept while drawing a day, so a fixture can be checked against how
/// it was produced.
struct GeneratorLog {
  int drawn = 0;
  int accepted = 0;
  int omitted = 0;  // every charger busy at arrival
  std::vector<int> arrivals_per_hour = std::vector<int>(24, 0);  // accepted sessions
};

/// Draws `count` candidate arrivals and keeps those that find a free charger
/// (lowest index first). Times are converted to steps of delta_hours.
SessionSet generate_sessions(const ProfileParams& params, int count, int m, int T, double delta_hours,
                             std::uint64_t seed, GeneratorLog* log = nullptr);
inline SessionSet generate_sessions(SessionProfile profile, int count, int m, int T, double delta_hours,
                                    std::uint64_t seed, GeneratorLog* log = nullptr) {
  return generate_sessions(ProfileParams::defaults(profile), count, m, T, delta_hours, seed, log);
}

void write_generator_log(std::ostream& out, const GeneratorLog& log);

}  // namespace oodcharge
