#include "oodcharge/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "oodcharge/sessions_gen.hpp"

namespace oodcharge {

namespace fs = std::filesystem;

Regimes load_regimes(const ExperimentConfig& cfg) {
  Regimes r;
  auto sessions = [&](const std::string& path, SessionProfile profile) {
    SessionSet set = path.empty()
                         ? generate_sessions(profile, cfg.generated_session_count, cfg.m, cfg.T, cfg.delta_hours,
                                             derive_seed(cfg.master_seed, 0, fnv1a(std::string("sessions-") +
                                                                                  to_string(profile))))
                         : load_sessions(path, cfg.T);
    if (set.max_charger() > cfg.m) {
      throw ValidationError(fmt::format("{} sessions use charger {} but m = {}", to_string(profile),
                                        set.max_charger(), cfg.m));
    }
    return set;
  };
  r.pre = sessions(cfg.sessions_pre, SessionProfile::kPre);
  r.post = sessions(cfg.sessions_post, SessionProfile::kPost);
  r.solar_pre = SolarModel{cfg.solar_pre_mean, cfg.solar_pre_sd, cfg.solar_truncation_sd};
  r.solar_post = SolarModel{cfg.solar_post_mean, cfg.solar_post_sd, cfg.solar_truncation_sd};
  return r;
}

std::uint64_t episode_seed(const ExperimentConfig& cfg, std::uint64_t seed, int episode) {
  return derive_seed(cfg.master_seed, seed, fnv1a("episode") + static_cast<std::uint64_t>(episode));
}

std::uint64_t learner_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  return derive_seed(cfg.master_seed, seed, fnv1a("learner"));
}

DdpgParams ddpg_params(const ExperimentConfig& cfg) {
  DdpgParams p;
  p.lr = cfg.lr;
  p.batch = cfg.batch;
  p.tau_soft = cfg.tau_soft;
  p.discount = cfg.discount;
  p.optimizer = cfg.optimizer;
  p.hidden = cfg.hidden;
  p.hidden_layers = cfg.hidden_layers;
  p.buffer = cfg.buffer;
  p.noise_start = cfg.noise_start;
  p.noise_end = cfg.noise_end;
  return p;
}

AgentSettings agent_settings(const ExperimentConfig& cfg, double beta, AgentMode mode) {
  AgentSettings s;
  s.mode = mode;
  s.beta = beta;
  s.td_absolute = cfg.td_absolute;
  s.td_decay = cfg.td_decay;
  s.cost_scale = cfg.cost_scale;
  s.update_every = cfg.update_every;
  return s;
}

namespace {

MpcController make_controller(const ExperimentConfig& cfg) {
  return MpcController(cfg.space(), cfg.dynamics(), cfg.costs(), cfg.T, MpcSettings::from_config(cfg));
}

bool shifted(const ExperimentConfig& cfg, int episode) { return episode >= cfg.shift_episode; }

// Runs fn(0..count-1) on up to `jobs` threads.
void parallel_for(int count, int jobs, const std::function<void(int)>& fn) {
  const int workers = std::max(1, std::min(count, jobs));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

int resolve_jobs(const ExperimentConfig& cfg) {
  if (cfg.jobs > 0) return cfg.jobs;
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace

std::vector<double> reference_costs(const ExperimentConfig& cfg, const Regimes& regimes, std::uint64_t seed) {
  MpcController mpc = make_controller(cfg);
  MpcPolicy policy(mpc);
  ChargingEnv env(cfg.space(), cfg.dynamics(), cfg.costs(), cfg.T);
  std::vector<double> costs;
  costs.reserve(cfg.episodes);
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    const bool s = shifted(cfg, ep);
    mpc.set_regime_solar(cfg.solar_pre_mean, regimes.solar(s).mean);
    const Trajectory tr = run_episode(env, policy, regimes.sessions(s), regimes.solar(s), episode_seed(cfg, seed, ep));
    costs.push_back(tr.total_cost);
  }
  return costs;
}

CellResult run_cell(const ExperimentConfig& cfg, const Regimes& regimes, const CellSpec& cell,
                    const std::vector<double>& reference, std::ostream* trust) {
  CellResult result;
  const SpaceSpec space = cfg.space();
  MpcController mpc = make_controller(cfg);
  DdpgLearner learner(space.n() + 1, cfg.m, cfg.action_lo, cfg.action_hi, ddpg_params(cfg),
                      learner_seed(cfg, cell.seed));
  OodAgent agent(space, cfg.T, mpc, &learner, agent_settings(cfg, cell.beta, AgentMode::kOod));
  ChargingEnv env(space, cfg.dynamics(), cfg.costs(), cfg.T);
  if (trust) write_trust_log_header(*trust);
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    const bool s = shifted(cfg, ep);
    mpc.set_regime_solar(cfg.solar_pre_mean, regimes.solar(s).mean);
    agent.set_progress(static_cast<double>(ep) / cfg.episodes);
    const Trajectory tr = run_episode(env, agent, regimes.sessions(s), regimes.solar(s), episode_seed(cfg, cell.seed, ep));
    EpisodeRecord rec;
    rec.beta = cell.beta;
    rec.seed = cell.seed;
    rec.episode = ep;
    rec.reward_raw = -tr.total_cost;
    // a zero-cost reference day leaves nothing to normalize by
    rec.reward_norm = reference.at(ep) > 0.0 ? -tr.total_cost / reference[ep] : rec.reward_raw;
    double lam = 0.0, td = 0.0;
    for (const auto& r : agent.records()) {
      lam += r.lambda;
      td += std::abs(r.td);
    }
    const auto steps = agent.records().size();
    rec.avg_lambda = steps ? lam / steps : 0.0;
    rec.avg_abs_td = steps > 1 ? td / (steps - 1) : 0.0;
    result.episodes.push_back(rec);
    if (trust) write_trust_log(*trust, ep, agent.records());
  }
  return result;
}

RunManifest RunManifest::plan(const ExperimentConfig& cfg) {
  RunManifest m;
  m.config_hash = cfg.hash();
  m.seeds = cfg.seeds;
  m.betas = cfg.beta_ood_grid;
  int index = 0;
  for (double beta : cfg.beta_ood_grid) {
    for (std::uint64_t seed : cfg.seeds) {
      CellSpec c;
      c.index = index++;
      c.beta = beta;
      c.seed = seed;
      const std::string tag = fmt::format("b{}_s{}", format_beta(beta), seed);
      c.rewards_path = (fs::path(cfg.out_dir) / "cells" / ("rewards_" + tag + ".csv")).string();
      c.stats_path = (fs::path(cfg.out_dir) / "cells" / ("stats_" + tag + ".csv")).string();
      if (cfg.trust_log) c.trust_path = (fs::path(cfg.out_dir) / "cells" / ("trust_" + tag + ".csv")).string();
      m.cells.push_back(c);
    }
  }
  return m;
}

std::string RunManifest::header_json() const {
  nlohmann::json j;
  j["config_hash"] = fmt::format("{:016x}", config_hash);
  j["version"] = version;
  j["seeds"] = seeds;
  nlohmann::json betas_json = nlohmann::json::array();
  for (double b : betas) betas_json.push_back(format_beta(b));
  j["betas"] = betas_json;
  nlohmann::json cells_json = nlohmann::json::array();
  for (const auto& c : cells) {
    cells_json.push_back({{"cell", c.index},
                          {"beta", format_beta(c.beta)},
                          {"seed", c.seed},
                          {"rewards", c.rewards_path},
                          {"stats", c.stats_path},
                          {"trust", c.trust_path}});
  }
  j["cells"] = cells_json;
  return j.dump();
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write '{}'", path));
  return out;
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  fs::create_directories(fs::path(cfg.out_dir) / "cells");
  const Regimes regimes = load_regimes(cfg);
  const RunManifest manifest = RunManifest::plan(cfg);
  {
    std::ofstream m = open_out((fs::path(cfg.out_dir) / "manifest.jsonl").string());
    m << manifest.header_json() << '\n';
  }
  {
    std::ofstream cfg_out = open_out((fs::path(cfg.out_dir) / "config.json").string());
    cfg_out << cfg.to_json().dump(2) << '\n';
  }
  const int jobs = resolve_jobs(cfg);
  std::mutex log_mutex;
  auto say = [&](const std::string& line) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    *log << line << std::endl;
  };

  // reference pass: one pure-MPC run per seed
  std::vector<std::vector<double>> reference(cfg.seeds.size());
  std::vector<std::string> reference_error(cfg.seeds.size());
  parallel_for(static_cast<int>(cfg.seeds.size()), jobs, [&](int k) {
    try {
      reference[k] = reference_costs(cfg, regimes, cfg.seeds[k]);
      say(fmt::format("reference seed {} done", cfg.seeds[k]));
    } catch (const std::exception& e) {
      reference_error[k] = e.what();
      say(fmt::format("reference seed {} failed: {}", cfg.seeds[k], e.what()));
    }
  });

  ExperimentOutcome outcome;
  outcome.cells.resize(manifest.cells.size());
  parallel_for(static_cast<int>(manifest.cells.size()), jobs, [&](int k) {
    const CellSpec& cell = manifest.cells[k];
    CellResult& res = outcome.cells[k];
    const auto seed_pos = static_cast<std::size_t>(
        std::find(cfg.seeds.begin(), cfg.seeds.end(), cell.seed) - cfg.seeds.begin());
    try {
      if (!reference_error[seed_pos].empty()) throw Error("reference pass failed: " + reference_error[seed_pos]);
      std::ofstream trust;
      if (!cell.trust_path.empty()) trust = open_out(cell.trust_path);
      res = run_cell(cfg, regimes, cell, reference[seed_pos], cell.trust_path.empty() ? nullptr : &trust);
      std::ofstream rewards = open_out(cell.rewards_path);
      std::ofstream stats = open_out(cell.stats_path);
      write_reward_header(rewards);
      write_episode_stats_header(stats);
      for (const auto& r : res.episodes) {
        write_reward(rewards, r);
        write_episode_stats(stats, r);
      }
      say(fmt::format("cell beta={} seed={} done", format_beta(cell.beta), cell.seed));
    } catch (const std::exception& e) {
      res = CellResult{};
      res.ok = false;
      res.error = e.what();
      say(fmt::format("cell beta={} seed={} failed: {}", format_beta(cell.beta), cell.seed, e.what()));
    }
  });

  // single writer: statuses and merged tables in cell order
  std::ofstream m((fs::path(cfg.out_dir) / "manifest.jsonl").string(), std::ios::app);
  std::ofstream rewards = open_out((fs::path(cfg.out_dir) / "rewards.csv").string());
  std::ofstream stats = open_out((fs::path(cfg.out_dir) / "episode_stats.csv").string());
  write_reward_header(rewards);
  write_episode_stats_header(stats);
  std::vector<EpisodeRecord> all;
  for (std::size_t k = 0; k < manifest.cells.size(); ++k) {
    const CellResult& res = outcome.cells[k];
    nlohmann::json status{{"cell", manifest.cells[k].index}, {"status", res.ok ? "ok" : "failed"}};
    if (!res.ok) {
      status["error"] = res.error;
      outcome.exit_code = 2;
    }
    m << status.dump() << '\n';
    for (const auto& r : res.episodes) {
      write_reward(rewards, r);
      write_episode_stats(stats, r);
      all.push_back(r);
    }
  }
  if (!all.empty()) {
    outcome.summary = aggregate_metrics(all, {cfg.pre_begin(), cfg.pre_end()}, {cfg.post_begin(), cfg.post_end()},
                                        cfg.normalize_rewards);
    std::ofstream summary = open_out((fs::path(cfg.out_dir) / "summary.csv").string());
    write_summary(summary, outcome.summary);
  }
  return outcome;
}

std::vector<SummaryRow> analyze_directory(const std::string& dir, const ExperimentConfig& cfg) {
  std::ifstream rewards((fs::path(dir) / "rewards.csv").string());
  if (!rewards) throw Error(fmt::format("no rewards.csv in '{}'", dir));
  std::vector<EpisodeRecord> records = read_reward_csv(rewards);
  std::ifstream stats((fs::path(dir) / "episode_stats.csv").string());
  if (stats) merge_episode_stats(stats, records);
  return aggregate_metrics(records, {cfg.pre_begin(), cfg.pre_end()}, {cfg.post_begin(), cfg.post_end()},
                           cfg.normalize_rewards);
}

}  // namespace oodcharge
