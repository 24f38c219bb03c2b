#include "oodcharge/sessions_gen.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>

namespace oodcharge {

SessionProfile parse_profile(const std::string& name) {
  if (name == "pre") return SessionProfile::kPre;
  if (name == "post") return SessionProfile::kPost;
  throw ValidationError(fmt::format("unknown session profile '{}' (expected pre or post)", name));
}

const char* to_string(SessionProfile p) { return p == SessionProfile::kPre ? "pre" : "post"; }

ProfileParams ProfileParams::defaults(SessionProfile p) {
  ProfileParams q;
  if (p == SessionProfile::kPost) {
    q.arrival_sd_h = 0.0;  // uniform over the day
    q.arrival_lo_h = 6.0;
    q.arrival_hi_h = 22.0;
    q.duration_mean_h = 4.0;
    q.duration_sd_h = 2.0;
    q.duration_max_h = 12.0;
    q.energy_mean_kwh = 9.0;
    q.energy_sd_kwh = 4.0;
  }
  return q;
}

SessionSet generate_sessions(const ProfileParams& p, int count, int m, int T, double delta_hours,
                             std::uint64_t seed, GeneratorLog* log) {
  if (count < 0 || m < 1 || T < 1 || !(delta_hours > 0.0)) {
    throw ValidationError("session generator: count >= 0, m >= 1, T >= 1 and delta_hours > 0 required");
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double day_h = T * delta_hours;

  struct Draw {
    double arrival_h, duration_h, energy, dep_err_h, energy_err;
  };
  std::vector<Draw> draws;
  for (int k = 0; k < count; ++k) {
    Draw d;
    d.arrival_h = p.arrival_sd_h > 0.0 ? p.arrival_mean_h + p.arrival_sd_h * normal(rng)
                                       : p.arrival_lo_h + (p.arrival_hi_h - p.arrival_lo_h) * uniform(rng);
    d.arrival_h = std::clamp(d.arrival_h, 0.5 * delta_hours, day_h - delta_hours);
    d.duration_h = std::clamp(p.duration_mean_h + p.duration_sd_h * normal(rng), p.duration_min_h, p.duration_max_h);
    d.energy = std::clamp(p.energy_mean_kwh + p.energy_sd_kwh * normal(rng), p.energy_min_kwh, p.energy_max_kwh);
    d.dep_err_h = p.departure_bias_h + p.departure_sd_h * normal(rng);
    d.energy_err = p.energy_bias_rel + p.energy_sd_rel * normal(rng);
    draws.push_back(d);
  }
  std::sort(draws.begin(), draws.end(), [](const Draw& a, const Draw& b) { return a.arrival_h < b.arrival_h; });

  GeneratorLog local;
  std::vector<double> free_at(m, 0.0);  // step at which each charger frees up
  std::vector<ChargingSession> sessions;
  for (const Draw& d : draws) {
    ++local.drawn;
    const double arrival = d.arrival_h / delta_hours;
    int charger = -1;
    for (int i = 0; i < m; ++i) {
      if (free_at[i] <= arrival) {
        charger = i;
        break;
      }
    }
    if (charger < 0) {
      ++local.omitted;
      continue;
    }
    ChargingSession s;
    s.arrival = arrival;
    s.departure = arrival + d.duration_h / delta_hours;
    s.energy_kwh = d.energy;
    s.charger = charger + 1;
    s.user_departure = std::max(s.departure + d.dep_err_h / delta_hours, arrival + 0.5);
    s.user_energy_kwh = std::max(0.0, d.energy * (1.0 + d.energy_err));
    free_at[charger] = s.departure;
    ++local.accepted;
    ++local.arrivals_per_hour[std::clamp(static_cast<int>(d.arrival_h), 0, 23)];
    sessions.push_back(s);
  }
  for (std::size_t k = 0; k < sessions.size(); ++k) sessions[k].id = fmt::format("s{}", k + 1);
  if (log) *log = local;
  return SessionSet(std::move(sessions), T);
}

void write_generator_log(std::ostream& out, const GeneratorLog& log) {
  out << fmt::format("drawn={} accepted={} omitted={}\n", log.drawn, log.accepted, log.omitted);
  out << "hour,arrivals\n";
  for (int h = 0; h < static_cast<int>(log.arrivals_per_hour.size()); ++h)
    out << h << ',' << log.arrivals_per_hour[h] << '\n';
}

}  // namespace oodcharge
