// Command-line entry point: simulate, experiment, analyze, verify, gen-sessions.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "oodcharge/analysis.hpp"
#include "oodcharge/experiment.hpp"
#include "oodcharge/qp.hpp"
#include "oodcharge/sessions_gen.hpp"

using namespace oodcharge;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : ExperimentConfig::load(path);
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
  return out;
}

// Records the controller's per-step log alongside the actions.
class LoggedMpcPolicy : public Policy {
 public:
  LoggedMpcPolicy(MpcController& mpc, std::ostream& log) : mpc_(mpc), log_(log) {}
  void begin_episode(const SessionSet& sessions) override { mpc_.begin_episode(sessions); }
  Vec act(int t) override {
    Vec a = mpc_.action(t);
    write_mpc_log(log_, mpc_.last_log());
    return a;
  }
  void observe(const Vec& applied, const StepOutcome& outcome) override { mpc_.observe(applied, outcome.observed); }

 private:
  MpcController& mpc_;
  std::ostream& log_;
};

int cmd_simulate(const std::string& config_path, const std::string& policy, double beta, std::uint64_t seed,
                 int episode, const std::string& out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  cfg.validate();
  const Regimes regimes = load_regimes(cfg);
  const bool shifted = episode >= cfg.shift_episode;
  fs::create_directories(out_dir);
  ChargingEnv env(cfg.space(), cfg.dynamics(), cfg.costs(), cfg.T);
  MpcController mpc(cfg.space(), cfg.dynamics(), cfg.costs(), cfg.T, MpcSettings::from_config(cfg));
  mpc.set_regime_solar(cfg.solar_pre_mean, regimes.solar(shifted).mean);
  std::ofstream mpc_log = open_out(fs::path(out_dir) / "mpc_log.csv");
  write_mpc_log_header(mpc_log, cfg.m);

  std::optional<DdpgLearner> learner;
  std::unique_ptr<Policy> pol;
  OodAgent* agent = nullptr;
  if (policy == "zero") {
    pol = std::make_unique<ZeroPolicy>(cfg.m);
  } else if (policy == "mpc") {
    pol = std::make_unique<LoggedMpcPolicy>(mpc, mpc_log);
  } else if (policy == "ood" || policy == "learned") {
    learner.emplace(cfg.space().n() + 1, cfg.m, cfg.action_lo, cfg.action_hi, ddpg_params(cfg),
                    learner_seed(cfg, seed));
    AgentSettings s = agent_settings(cfg, beta, policy == "ood" ? AgentMode::kOod : AgentMode::kLearned);
    s.explore = false;
    auto a = std::make_unique<OodAgent>(cfg.space(), cfg.T, mpc, &*learner, s);
    agent = a.get();
    pol = std::move(a);
  } else {
    throw ValidationError(fmt::format("unknown policy '{}' (zero, mpc, ood, learned)", policy));
  }
  const Trajectory tr = run_episode(env, *pol, regimes.sessions(shifted), regimes.solar(shifted),
                                    episode_seed(cfg, seed, episode));
  std::ofstream traj = open_out(fs::path(out_dir) / "trajectory.csv");
  write_trajectory_header(traj, cfg.m);
  write_trajectory(traj, episode, tr);
  if (agent) {
    std::ofstream trust = open_out(fs::path(out_dir) / "trust.csv");
    write_trust_log_header(trust);
    write_trust_log(trust, episode, agent->records());
  }
  std::cout << fmt::format("policy={} episode={} regime={} total_cost={} reward={}\n", policy, episode,
                           shifted ? "post" : "pre", tr.total_cost, -tr.total_cost);
  return 0;
}

void print_summary(const std::vector<SummaryRow>& rows) { write_summary(std::cout, rows); }

int cmd_verify(const std::string& config_path, int window, double floor) {
  ExperimentConfig cfg = load_config(config_path);
  cfg.validate();
  const auto seq = dynamics_sequence(cfg.dynamics(), cfg.T);
  const StabilizabilityReport rep = verify_stabilizability(seq, floor, window);
  std::cout << "t,t_end,sigma_min\n";
  for (const auto& p : rep.pairs) std::cout << fmt::format("{},{},{}\n", p.t, p.t_end, p.sigma_min);
  std::cout << fmt::format("min_sigma={} floor={} {}\n", rep.min_sigma, floor, rep.pass ? "PASS" : "FAIL");

  BoundInputs in;
  in.A_bar = 0.0;
  in.B_bar = 0.0;
  for (const auto& s : seq) {
    in.A_bar = std::max(in.A_bar, s.A.jacobiSvd().singularValues()(0));
    in.B_bar = std::max(in.B_bar, s.B.jacobiSvd().singularValues()(0));
  }
  const auto [lo, hi] = cfg.costs().eigen_range();
  in.mu = lo;
  in.xi = hi;
  in.sigma = rep.min_sigma;
  const Regimes regimes = load_regimes(cfg);
  in.W_bar = std::max(perturbation_bound(regimes.pre, regimes.solar_pre, cfg.delta_hours, cfg.m),
                      perturbation_bound(regimes.post, regimes.solar_post, cfg.delta_hours, cfg.m));
  std::cout << fmt::format("A_bar={} B_bar={} W_bar={} mu={} xi={} sigma={}\n", in.A_bar, in.B_bar, in.W_bar, in.mu,
                           in.xi, in.sigma);
  try {
    const BoundResult b = roe_mpc_bound(in);
    std::cout << fmt::format("sigma_lower={} sigma_upper={} lambda_bar={} lambda={} C={} bound={}\n", b.sigma_lower,
                             b.sigma_upper, b.lambda_bar, b.lambda_used, b.C, b.bound);
  } catch (const DomainError& e) {
    std::cout << "bound: " << e.what() << '\n';
  }
  return rep.pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Charging-station control under distribution shift"};
  app.require_subcommand(1);

  std::string config_path;

  auto* sim = app.add_subcommand("simulate", "Run one episode of one policy with verbose logs");
  std::string policy = "mpc", out_dir = "sim";
  std::string sim_beta = "1";
  std::uint64_t sim_seed = 0;
  int sim_episode = 0;
  sim->add_option("--config", config_path, "Config JSON")->check(CLI::ExistingFile);
  sim->add_option("--policy", policy, "zero | mpc | ood | learned");
  sim->add_option("--beta", sim_beta, "OOD tuning parameter (number or inf)");
  sim->add_option("--seed", sim_seed, "Seed");
  sim->add_option("--episode", sim_episode, "Episode index (selects the regime)");
  sim->add_option("--out", out_dir, "Output directory");

  auto* exp = app.add_subcommand("experiment", "Run the (beta, seed) grid");
  std::vector<std::string> betas;
  int seeds = 0, episodes = 0, shift = -1, jobs = 0;
  std::string exp_out;
  bool no_trust = false;
  exp->add_option("--config", config_path, "Config JSON")->check(CLI::ExistingFile);
  exp->add_option("--beta", betas, "Override the beta grid (repeatable, number or inf)");
  exp->add_option("--seeds", seeds, "Override with seeds 0..N-1");
  exp->add_option("--episodes", episodes, "Override episode count");
  exp->add_option("--shift", shift, "Override shift episode");
  exp->add_option("--jobs", jobs, "Worker threads");
  exp->add_option("--out", exp_out, "Output directory");
  exp->add_flag("--no-trust-log", no_trust, "Skip per-step trust logs");

  auto* ana = app.add_subcommand("analyze", "Aggregate existing experiment logs");
  std::string ana_dir = "out";
  ana->add_option("--dir", ana_dir, "Experiment output directory");
  ana->add_option("--config", config_path, "Config JSON (default: <dir>/config.json)");

  auto* ver = app.add_subcommand("verify", "Stabilizability table and bound constants");
  int window = 10;
  double floor = 1e-3;
  ver->add_option("--config", config_path, "Config JSON")->check(CLI::ExistingFile);
  ver->add_option("--window", window, "Window length t' - t");
  ver->add_option("--floor", floor, "Singular-value floor");

  auto* gen = app.add_subcommand("gen-sessions", "Generate a session fixture");
  std::string profile = "pre", gen_out, gen_log;
  int count = 20, gen_m = 2, gen_T = 144;
  double gen_delta = 1.0 / 6.0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--profile", profile, "pre | post");
  gen->add_option("--count", count, "Candidate arrivals");
  gen->add_option("--seed", gen_seed, "Seed");
  gen->add_option("--m", gen_m, "Chargers");
  gen->add_option("--T", gen_T, "Steps per day");
  gen->add_option("--delta", gen_delta, "Hours per step");
  gen->add_option("--out", gen_out, "Output CSV (default stdout)");
  gen->add_option("--log", gen_log, "Generator log file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sim->parsed()) {
      return cmd_simulate(config_path, policy, parse_beta(nlohmann::json(sim_beta)), sim_seed, sim_episode, out_dir);
    }
    if (exp->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      if (!betas.empty()) {
        cfg.beta_ood_grid.clear();
        for (const auto& b : betas) cfg.beta_ood_grid.push_back(parse_beta(nlohmann::json(b)));
      }
      if (seeds > 0) {
        cfg.seeds.clear();
        for (int k = 0; k < seeds; ++k) cfg.seeds.push_back(static_cast<std::uint64_t>(k));
      }
      if (episodes > 0) {
        // keep the shift at the same fraction of training unless given
        if (shift < 0) {
          shift = static_cast<int>(static_cast<long long>(cfg.shift_episode) * episodes / cfg.episodes);
        }
        cfg.episodes = episodes;
      }
      if (shift >= 0) cfg.shift_episode = shift;
      if (episodes > 0 || shift >= 0) {
        cfg.window_pre_begin = cfg.window_pre_end = cfg.window_post_begin = cfg.window_post_end = -1;
      }
      if (jobs > 0) cfg.jobs = jobs;
      if (!exp_out.empty()) cfg.out_dir = exp_out;
      if (no_trust) cfg.trust_log = false;
      try {
        cfg.validate();
      } catch (const ValidationError& e) {
        std::cerr << e.what() << '\n';
        return 1;
      }
      const ExperimentOutcome out = run_experiment(cfg, &std::cerr);
      print_summary(out.summary);
      if (out.exit_code != 0) std::cerr << "some cells failed, see " << cfg.out_dir << "/manifest.jsonl\n";
      return out.exit_code;
    }
    if (ana->parsed()) {
      const std::string path = config_path.empty() ? (fs::path(ana_dir) / "config.json").string() : config_path;
      const ExperimentConfig cfg = ExperimentConfig::load(path);
      const auto rows = analyze_directory(ana_dir, cfg);
      std::ofstream out = open_out(fs::path(ana_dir) / "summary.csv");
      write_summary(out, rows);
      print_summary(rows);
      return 0;
    }
    if (ver->parsed()) return cmd_verify(config_path, window, floor);
    if (gen->parsed()) {
      GeneratorLog log;
      const SessionSet set = generate_sessions(parse_profile(profile), count, gen_m, gen_T, gen_delta, gen_seed, &log);
      if (gen_out.empty()) {
        write_sessions(std::cout, set);
      } else {
        save_sessions(gen_out, set);
      }
      if (!gen_log.empty()) {
        std::ofstream l = open_out(gen_log);
        write_generator_log(l, log);
      }
      std::cerr << fmt::format("drawn={} accepted={} omitted={}\n", log.drawn, log.accepted, log.omitted);
      return 0;
    }
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
