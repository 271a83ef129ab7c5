#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "dsa/dsa.hpp"

namespace {

namespace ex = dsa::experiment;
namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("dsa_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" +
             std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string config_error(const std::string& text) {
  try {
    ex::parse_config_text(text);
  } catch (const dsa::ConfigError& e) {
    return e.what();
  }
  return "";
}

// Shortened variant of a preset that still exercises the whole pipeline.
ex::ExperimentSpec short_preset(const std::string& name, const fs::path& out) {
  auto s = ex::preset_spec(name);
  s.n_iter = 300;
  s.record_every = 10;
  s.replicas = 1;
  s.objective_trials = 50;
  s.gradient_trials = 50;
  s.output_dir = out.string();
  return s;
}

TEST(ParseConfig, MinimalConfigDefaults) {
  for (const std::string text : {"", "{}", "seed: 3\n"}) {
    const auto s = ex::parse_config_text(text);
    EXPECT_EQ(s.schedule.xi, 0.75);
    EXPECT_EQ(s.schedule.gamma0, 0.5);
    EXPECT_EQ(s.laziness.c, 1.0);
    EXPECT_EQ(s.laziness.eta, 0.0);
    EXPECT_EQ(s.record_every, 10u);
    EXPECT_EQ(s.problem, ex::ProblemKind::kQuadraticConsensus);
    EXPECT_EQ(s.graph.n_agents(), 4u);
    EXPECT_EQ(s.dimension(), 2u);
  }
}

TEST(ParseConfig, RejectsXiOutOfRange) {
  EXPECT_NE(config_error("schedule: {xi: 0.4}\n").find("xi must be in (1/2, 1]"),
            std::string::npos);
  EXPECT_NE(config_error("schedule: {xi: 0.5}\n").find("xi must be in (1/2, 1]"),
            std::string::npos);
  EXPECT_NE(config_error("schedule: {xi: 1.01}\n").find("xi must be in (1/2, 1]"),
            std::string::npos);
  EXPECT_EQ(ex::parse_config_text("schedule: {xi: 1}\n").schedule.xi, 1.0);
}

TEST(ParseConfig, RejectsUnknownKeysByName) {
  EXPECT_NE(config_error("colour: red\n").find("colour"), std::string::npos);
  EXPECT_NE(config_error("problem:\n  kind: quadratic-consensus\n  centres: [[0]]\n")
                .find("problem.centres"),
            std::string::npos);
  EXPECT_NE(config_error("schedule: {gamma0: 1, eta: 0.1}\n").find("schedule.eta"),
            std::string::npos);
}

TEST(ParseConfig, SyntaxErrorReportsLine) {
  const auto msg = config_error("seed: 1\nn_iter: 10\nschedule: {gamma0: [1, 2\n");
  EXPECT_NE(msg.find("line"), std::string::npos) << msg;
  const auto msg2 = config_error("seed: 1\nn_iter: 10\nreplicas: 2\n  bad: : x\n");
  EXPECT_NE(msg2.find("line 4"), std::string::npos) << msg2;
}

TEST(ParseConfig, SemanticErrors) {
  EXPECT_FALSE(config_error("schedule: {gamma0: 0}\n").empty());
  EXPECT_FALSE(config_error("n_iter: 0\n").empty());
  EXPECT_FALSE(config_error("replicas: 0\n").empty());
  EXPECT_FALSE(config_error("record_every: 0\n").empty());
  EXPECT_FALSE(config_error("laziness: {c: -0.1}\n").empty());
  EXPECT_FALSE(config_error("laziness: {eta: -1}\n").empty());
  EXPECT_FALSE(config_error("graph: {agents: 3, edges: [[1, 2], [2, 4]]}\n").empty());
  EXPECT_FALSE(config_error("preset: no-such-preset\n").empty());
  EXPECT_FALSE(config_error("problem: {kind: power-alloc}\ninitial: {kind: uniform}\n").empty());
  EXPECT_FALSE(
      config_error("problem: {kind: power-alloc}\ngraph: {agents: 3, edges: [[1, 2], [2, 3]]}\n")
          .empty());
  // Centers required when the default set does not fit.
  EXPECT_FALSE(config_error("graph: {agents: 3, edges: [[1, 2], [2, 3]]}\n").empty());
}

TEST(ParseConfig, OneBasedIndicesInFiles) {
  const auto s = ex::parse_config_text(
      "graph: {agents: 3, edges: [[1, 2], [2, 3]], weights: [1, 3]}\n"
      "problem:\n  centers: [[0], [1], [2]]\n"
      "  constraint: {kind: budget-simplex, groups: [[1]], budgets: [0.5]}\n");
  const std::vector<dsa::Edge> edges{{0, 1}, {1, 2}};
  EXPECT_EQ(s.graph.edges(), edges);
  EXPECT_DOUBLE_EQ(s.graph.pair_probs()[1], 0.75);
  EXPECT_EQ(s.constraint, dsa::ConstraintSet::budget_simplex(1, {{0}}, {0.5}));
}

TEST(ParseConfig, PaperPresetMatchesScenario) {
  const auto spec = ex::parse_config_text("preset: paper-scenario\nseed: 5\n");
  const auto got = ex::build_run_config(spec);
  const auto want = dsa::power::paper_scenario(5);
  EXPECT_EQ(got.schedule.gamma0, want.schedule.gamma0);
  EXPECT_EQ(got.schedule.xi, want.schedule.xi);
  EXPECT_EQ(got.gossip.graph.edges(), want.gossip.graph.edges());
  EXPECT_EQ(got.gossip.graph.pair_probs(), want.gossip.graph.pair_probs());
  EXPECT_EQ(got.gossip.laziness.c, want.gossip.laziness.c);
  EXPECT_EQ(got.gossip.laziness.eta, want.gossip.laziness.eta);
  EXPECT_EQ(got.n_iter, want.n_iter);
  EXPECT_EQ(got.record_every, want.record_every);
  EXPECT_EQ(got.seed, want.seed);
  EXPECT_EQ(got.replicas, want.replicas);
  EXPECT_EQ(got.initial.stacked(), want.initial.stacked());
  EXPECT_EQ(got.problem.constraint, want.problem.constraint);
  EXPECT_EQ(got.problem.dimension, want.problem.dimension);
  const Eigen::VectorXd theta = Eigen::VectorXd::Constant(8, 0.2);
  EXPECT_EQ(got.problem.objective(theta), want.problem.objective(theta));
}

TEST(ParseConfig, PresetOverlayAndOverrides) {
  const auto s = ex::parse_config_text("preset: box-toy\nschedule: {gamma0: 0.25}\n",
                                       {"seed=9", "laziness.eta=0.1", "output.dir=elsewhere"});
  EXPECT_EQ(s.schedule.gamma0, 0.25);
  EXPECT_EQ(s.schedule.xi, 0.75);
  EXPECT_EQ(s.seed, 9u);
  EXPECT_EQ(s.laziness.eta, 0.1);
  EXPECT_EQ(s.output_dir, "elsewhere");
  EXPECT_EQ(s.constraint, ex::preset_spec("box-toy").constraint);
  EXPECT_THROW(ex::parse_config_text("", {"no-equals-sign"}), dsa::ConfigError);
  EXPECT_THROW(ex::parse_config_text("", {"schedule.bogus=1"}), dsa::ConfigError);
}

TEST(ConfigRoundTrip, AllPresets) {
  for (const auto& name : ex::preset_names()) {
    const auto spec = ex::preset_spec(name);
    const auto text = ex::to_yaml(spec);
    const auto back = ex::parse_config_text(text);
    EXPECT_TRUE(back == spec) << name << "\n" << text;
    EXPECT_EQ(ex::to_yaml(back), text) << name;
    EXPECT_TRUE(ex::parse_config_text("preset: " + name + "\n") == spec) << name;
  }
}

TEST(ConfigRoundTrip, CustomSpec) {
  auto spec = ex::preset_spec("halfspace-toy");
  spec.graph = dsa::Graph::from_weights(3, {{0, 1}, {1, 2}, {0, 2}}, {1.0, 2.0, 0.1});
  spec.centers = {{0.1, 0.2}, {0.3, -0.7}, {1e-3, 2.5}};
  spec.schedule = {0.3, 0.9};
  spec.laziness = {0.7, 0.2};
  spec.initial = {ex::InitialSpec::Kind::kExplicit, 0.0, 0.0,
                  {{0.1, 0.2}, {0.3, 0.4}, {0.5, 1.0 / 3.0}}};
  spec.override_validation = true;
  spec.seed = 123456789012345ULL;
  const auto back = ex::parse_config_text(ex::to_yaml(spec));
  EXPECT_TRUE(back == spec) << ex::to_yaml(spec);
}

TEST(TraceCsv, ColumnsAndNoNanForEveryPreset) {
  TempDir tmp;
  for (const auto& name : ex::preset_names()) {
    const auto spec = short_preset(name, tmp / name);
    const auto outcome = ex::run_experiment(spec);
    ASSERT_EQ(outcome.trace_files.size(), 1u);
    std::ifstream in(outcome.trace_files[0]);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, ex::trace_header(spec.dimension()));
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      std::size_t cols = 1;
      for (char ch : line) cols += ch == ',';
      EXPECT_EQ(cols, 5 + spec.dimension()) << name;
      EXPECT_EQ(line.find("nan"), std::string::npos) << name << ": " << line;
      EXPECT_EQ(line.find("inf"), std::string::npos) << name << ": " << line;
    }
    EXPECT_EQ(rows, 30u) << name;
  }
}

TEST(TraceCsv, HeaderFormat) {
  EXPECT_EQ(ex::trace_header(2), "n,gamma,disagreement,residual,objective,avg_1,avg_2");
}

TEST(TraceCsv, BitExactRoundTrip) {
  TempDir tmp;
  const auto outcome = ex::run_experiment(short_preset("paper-scenario", tmp.path()));
  const auto& trace = outcome.results[0].trace;
  const auto back = ex::read_trace_csv(outcome.trace_files[0]);
  ASSERT_EQ(back.size(), trace.size());
  for (std::size_t r = 0; r < trace.size(); ++r) {
    EXPECT_EQ(back[r].n, trace[r].n);
    EXPECT_EQ(back[r].gamma, trace[r].gamma);
    EXPECT_EQ(back[r].disagreement, trace[r].disagreement);
    EXPECT_EQ(back[r].residual, trace[r].residual);
    EXPECT_EQ(back[r].objective, trace[r].objective);
    EXPECT_EQ(back[r].average, trace[r].average);
  }
  const auto again = tmp / "again.csv";
  ex::write_trace_csv(again, back, 8);
  EXPECT_EQ(slurp(again), slurp(outcome.trace_files[0]));
}

TEST(RunExperiment, ByteIdenticalRerun) {
  TempDir tmp;
  auto spec = ex::preset_spec("quadratic-consensus");
  spec.seed = 7;
  spec.output_dir = (tmp / "a").string();
  const auto a = ex::run_experiment(spec);
  spec.output_dir = (tmp / "b").string();
  const auto b = ex::run_experiment(spec);
  EXPECT_EQ(slurp(a.trace_files[0]), slurp(b.trace_files[0]));
  EXPECT_EQ(slurp(a.summary_file), slurp(b.summary_file));
  spec.seed = 8;
  spec.output_dir = (tmp / "c").string();
  EXPECT_NE(slurp(ex::run_experiment(spec).trace_files[0]), slurp(a.trace_files[0]));
}

TEST(RunExperiment, ReplicaFilesIndependentOfThreads) {
  TempDir tmp;
  auto spec = short_preset("box-toy", tmp / "t1");
  spec.replicas = 3;
  spec.threads = 1;
  const auto one = ex::run_experiment(spec);
  spec.threads = 3;
  spec.output_dir = (tmp / "t3").string();
  const auto three = ex::run_experiment(spec);
  ASSERT_EQ(one.trace_files.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(one.trace_files[r].filename(), ex::trace_file_name(r, 3));
    EXPECT_EQ(slurp(one.trace_files[r]), slurp(three.trace_files[r]));
  }
  EXPECT_NE(slurp(one.trace_files[0]), slurp(one.trace_files[1]));
}

// Least-squares slope of log(dis^2) against log n over the second half of
// the rows, written independently of the library fit.
double beta_from_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<double> x, y;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string n, gamma, dis;
    std::getline(ss, n, ',');
    std::getline(ss, gamma, ',');
    std::getline(ss, dis, ',');
    x.push_back(std::log(std::stod(n)));
    y.push_back(std::log(std::stod(dis) * std::stod(dis)));
  }
  const std::size_t start = x.size() - x.size() / 2;
  double mx = 0, my = 0;
  const double m = static_cast<double>(x.size() - start);
  for (std::size_t k = start; k < x.size(); ++k) {
    mx += x[k] / m;
    my += y[k] / m;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t k = start; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
  }
  return -sxy / sxx;
}

TEST(RunExperiment, SummaryRecomputableFromTrace) {
  TempDir tmp;
  auto spec = ex::preset_spec("box-toy");
  spec.n_iter = 4000;
  spec.output_dir = tmp.path().string();
  const auto outcome = ex::run_experiment(spec);
  const auto summary = ex::read_summary(outcome.summary_file);
  const auto trace = ex::read_trace_csv(outcome.trace_files[0]);
  EXPECT_EQ(std::stod(summary.at("final_residual")), trace.back().residual);
  EXPECT_EQ(std::stod(summary.at("final_disagreement")), trace.back().disagreement);
  EXPECT_EQ(std::stod(summary.at("final_average_1")), trace.back().average(0));
  EXPECT_EQ(std::stod(summary.at("final_average_2")), trace.back().average(1));
  const double beta = std::stod(summary.at("fitted_beta"));
  EXPECT_NEAR(beta, beta_from_csv(outcome.trace_files[0]), 1e-9 * (1 + std::abs(beta)));
  EXPECT_EQ(summary.at("problem"), "quadratic-consensus");
  EXPECT_EQ(summary.at("validation"), "pass");
  for (const auto& [k, v] : ex::summarize_traces({trace})) EXPECT_EQ(summary.at(k), v) << k;
}

TEST(RunExperiment, UndefinedBetaForShortTrace) {
  TempDir tmp;
  auto spec = short_preset("quadratic-consensus", tmp.path());
  spec.n_iter = 100;
  const auto s = ex::read_summary(ex::run_experiment(spec).summary_file);
  EXPECT_EQ(s.at("fitted_beta"), "undefined");
}

TEST(CltStudy, RejectsTooFewReplicas) {
  auto spec = ex::preset_spec("scalar-clt");
  spec.replicas = 10;
  EXPECT_THROW(ex::run_clt_study(spec), dsa::ConfigError);
  EXPECT_THROW(ex::run_clt_study(ex::preset_spec("box-toy")), dsa::ConfigError);
}

TEST(CltStudy, RecordsZetaBySchedule) {
  TempDir tmp;
  for (const auto& [name, gamma0, zeta] :
       std::vector<std::tuple<std::string, double, double>>{
           {"scalar-clt", 1.0, 0.0}, {"scalar-clt-unit-xi", 1.0, 0.5},
           {"scalar-clt-unit-xi", 2.0, 0.25}}) {
    auto spec = ex::preset_spec(name);
    spec.schedule.gamma0 = gamma0;
    spec.replicas = 120;
    spec.clt.tail_iteration = 2000;
    spec.output_dir = tmp.path().string();
    const auto outcome = ex::run_clt_study(spec);
    const auto s = ex::read_summary(outcome.summary_file);
    EXPECT_EQ(std::stod(s.at("zeta")), zeta) << name << " " << gamma0;
    EXPECT_EQ(outcome.estimate.zeta, zeta);
    EXPECT_EQ(std::stoul(s.at("replicas_used")), 120u);
    const double sigma = 0.25 / (2.0 * (1.0 - zeta));
    EXPECT_NEAR(std::stod(s.at("theoretical_cov")), sigma, 1e-14);
    EXPECT_EQ(s.at("degenerate"), "false");
  }
}

TEST(CltStudy, TooFewConvergedReplicas) {
  auto spec = ex::preset_spec("scalar-clt");
  spec.replicas = 100;
  spec.clt = {500, 1e-9};
  EXPECT_THROW(ex::run_clt_study(spec), dsa::InsufficientDataError);
}

#ifdef DSA_CLI_PATH

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DSA_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  TempDir tmp;
  const auto log = tmp / "log.txt";
  const auto good = tmp / "good.yaml";
  write_text(good, "preset: box-toy\nn_iter: 200\n");
  const auto out = (tmp / "out").string();

  EXPECT_EQ(run_cli("validate --config " + good.string(), log), 0);
  EXPECT_NE(slurp(log).find("ok"), std::string::npos);
  EXPECT_EQ(run_cli("run --config " + good.string() + " --out " + out + " --seed 4", log), 0);
  EXPECT_TRUE(fs::exists(fs::path(out) / "trace.csv"));
  EXPECT_NE(slurp(fs::path(out) / "summary.txt").find("seed = 4"), std::string::npos);
  EXPECT_EQ(run_cli("scenario --list", log), 0);
  EXPECT_NE(slurp(log).find("paper-scenario"), std::string::npos);
  EXPECT_EQ(run_cli("scenario paper-scenario", log), 0);
  EXPECT_TRUE(ex::parse_config_text(slurp(log)) == ex::preset_spec("paper-scenario"));

  const auto bad_xi = tmp / "bad_xi.yaml";
  write_text(bad_xi, "schedule: {xi: 0.4}\n");
  EXPECT_EQ(run_cli("run --config " + bad_xi.string(), log), 2);
  EXPECT_NE(slurp(log).find("xi must be in (1/2, 1]"), std::string::npos);
  const auto unknown = tmp / "unknown.yaml";
  write_text(unknown, "sead: 1\n");
  EXPECT_EQ(run_cli("run --config " + unknown.string(), log), 2);
  EXPECT_NE(slurp(log).find("sead"), std::string::npos);
  EXPECT_EQ(run_cli("run --config " + (tmp / "missing.yaml").string(), log), 2);
  EXPECT_EQ(run_cli("scenario no-such-preset", log), 2);

  const auto clt = tmp / "clt.yaml";
  write_text(clt, "preset: scalar-clt\nclt: {tail_iteration: 500, radius: 1.0e-9}\n");
  EXPECT_EQ(run_cli("clt --config " + clt.string() + " --replicas 10 --out " + out, log), 2);
  EXPECT_EQ(run_cli("clt --config " + clt.string() + " --replicas 100 --out " + out, log), 4);

  const auto diverge = tmp / "diverge.yaml";
  write_text(diverge,
             "schedule: {gamma0: 1.0e6, xi: 1}\nn_iter: 1000\noverride_validation: true\n"
             "output: {dir: " + out + "}\n");
  EXPECT_EQ(run_cli("run --config " + diverge.string(), log), 3);
  EXPECT_NE(slurp(log).find("aborted"), std::string::npos);
}

TEST(Cli, OverrideFlag) {
  TempDir tmp;
  const auto log = tmp / "log.txt";
  const auto cfg = tmp / "c.yaml";
  write_text(cfg, "preset: quadratic-consensus\nn_iter: 300\n");
  const auto out = (tmp / "o").string();
  EXPECT_EQ(run_cli("run --config " + cfg.string() + " --out " + out +
                        " --override n_iter=120 --override replicas=2",
                    log),
            0);
  const auto s = ex::read_summary(fs::path(out) / "summary.txt");
  EXPECT_EQ(s.at("n_iter"), "120");
  EXPECT_EQ(s.at("replicas"), "2");
  EXPECT_TRUE(fs::exists(fs::path(out) / "trace_r001.csv"));
}

#endif

}  // namespace
