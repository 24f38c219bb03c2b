#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "oodcharge/experiment.hpp"
#include "oodcharge/sessions_gen.hpp"
#include "support.hpp"

namespace oodcharge {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("oodcharge_test_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig smoke(const fs::path& out, std::vector<double> betas) {
  ExperimentConfig cfg;
  cfg.episodes = 4;
  cfg.shift_episode = 2;
  cfg.window_pre_begin = cfg.window_pre_end = cfg.window_post_begin = cfg.window_post_end = -1;
  cfg.seeds = {0};
  cfg.beta_ood_grid = std::move(betas);
  cfg.batch = 16;
  cfg.hidden = 16;
  cfg.jobs = 1;
  cfg.out_dir = out.string();
  return cfg;
}

int cli(const std::string& args) {
  const int status = std::system((std::string(OODCHARGE_CLI) + " " + args).c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Experiment, InfiniteBetaRewardIsConstant) {
  const fs::path out = scratch("inf");
  const ExperimentOutcome res = run_experiment(smoke(out, {kInf}));
  ASSERT_EQ(res.exit_code, 0);
  ASSERT_EQ(res.cells.size(), 1u);
  ASSERT_EQ(res.cells[0].episodes.size(), 4u);
  for (const auto& r : res.cells[0].episodes) {
    EXPECT_EQ(r.reward_norm, -1.0);
    EXPECT_EQ(r.avg_lambda, 0.0);
  }
  ASSERT_EQ(res.summary.size(), 1u);
  EXPECT_EQ(res.summary[0].avg_reward_pre, -1.0);
  EXPECT_EQ(res.summary[0].avg_reward_post, -1.0);
  for (const char* f : {"manifest.jsonl", "config.json", "rewards.csv", "episode_stats.csv", "summary.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto rows = analyze_directory(out.string(), smoke(out, {kInf}));
  EXPECT_EQ(rows[0].avg_reward_post, -1.0);
}

TEST(Experiment, RerunIsByteIdentical) {
  const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
  run_experiment(smoke(a, {0.0, 1.0}));
  run_experiment(smoke(b, {0.0, 1.0}));
  for (const char* f : {"rewards.csv", "episode_stats.csv", "summary.csv"}) {
    const std::string first = slurp(a / f);
    EXPECT_FALSE(first.empty()) << f;
    EXPECT_EQ(first, slurp(b / f)) << f;
  }
}

TEST(Experiment, ManifestListsEveryCellBeforeStatuses) {
  const fs::path out = scratch("manifest");
  ExperimentConfig cfg = smoke(out, {0.0, kInf});
  cfg.seeds = {3, 7};
  cfg.trust_log = false;
  run_experiment(cfg);
  std::ifstream in(out / "manifest.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto head = nlohmann::json::parse(line);
  EXPECT_EQ(head["version"], kVersion);
  EXPECT_EQ(head["config_hash"].get<std::string>().size(), 16u);
  ASSERT_EQ(head["cells"].size(), 4u);
  std::set<std::string> files;
  for (const auto& c : head["cells"]) {
    EXPECT_EQ(c["trust"], "");
    EXPECT_TRUE(files.insert(c["rewards"].get<std::string>()).second);
    EXPECT_TRUE(files.insert(c["stats"].get<std::string>()).second);
  }
  int statuses = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(nlohmann::json::parse(line)["status"], "ok");
    ++statuses;
  }
  EXPECT_EQ(statuses, 4);
  EXPECT_EQ(RunManifest::plan(cfg).header_json(), head.dump());
}

TEST(Experiment, EpisodeSeedsSharedAcrossBetas) {
  const ExperimentConfig cfg;
  EXPECT_EQ(episode_seed(cfg, 1, 5), episode_seed(cfg, 1, 5));
  EXPECT_NE(episode_seed(cfg, 1, 5), episode_seed(cfg, 2, 5));
  EXPECT_NE(episode_seed(cfg, 1, 5), episode_seed(cfg, 1, 6));
  EXPECT_NE(learner_seed(cfg, 1), episode_seed(cfg, 1, 0));
}

TEST(Generator, LogCountsAddUp) {
  for (auto profile : {SessionProfile::kPre, SessionProfile::kPost}) {
    GeneratorLog log;
    const SessionSet set = generate_sessions(profile, 30, 2, 144, 1.0 / 6.0, 4, &log);
    EXPECT_EQ(log.drawn, 30);
    EXPECT_EQ(log.accepted + log.omitted, log.drawn);
    EXPECT_EQ(static_cast<int>(set.size()), log.accepted);
    int per_hour = 0;
    for (int n : log.arrivals_per_hour) per_hour += n;
    EXPECT_EQ(per_hour, log.accepted);
  }
}

TEST(Cli, GenSessionsIsDeterministic) {
  const fs::path dir = scratch("gen");
  fs::create_directories(dir);
  ASSERT_EQ(cli("gen-sessions --profile post --seed 9 --out " + (dir / "a.csv").string() + " 2>/dev/null"), 0);
  ASSERT_EQ(cli("gen-sessions --profile post --seed 9 --out " + (dir / "b.csv").string() + " 2>/dev/null"), 0);
  ASSERT_EQ(cli("gen-sessions --profile post --seed 10 --out " + (dir / "c.csv").string() + " 2>/dev/null"), 0);
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_NE(slurp(dir / "a.csv"), slurp(dir / "c.csv"));
  const SessionSet loaded = load_sessions((dir / "a.csv").string(), 144);
  EXPECT_GT(loaded.size(), 0u);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  EXPECT_EQ(cli("--help >/dev/null"), 0);
  EXPECT_EQ(cli("no-such-command >/dev/null 2>&1"), 1);
  EXPECT_EQ(cli("gen-sessions --profile sideways >/dev/null 2>&1"), 1);
  std::ofstream(dir / "bad.json") << R"({"episodes": -3})";
  EXPECT_EQ(cli("experiment --config " + (dir / "bad.json").string() + " >/dev/null 2>&1"), 1);
  EXPECT_EQ(cli("verify >/dev/null"), 0);
  EXPECT_EQ(cli("verify --floor 1e6 >/dev/null"), 3);
  EXPECT_EQ(cli("simulate --policy mpc --out " + (dir / "sim").string() + " >/dev/null"), 0);
  EXPECT_TRUE(fs::exists(dir / "sim" / "trajectory.csv"));
  EXPECT_TRUE(fs::exists(dir / "sim" / "mpc_log.csv"));
}

}  // namespace
}  // namespace oodcharge
