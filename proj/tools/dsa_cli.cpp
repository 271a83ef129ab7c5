#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsa/dsa.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kAbort = 3, kInsufficient = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> replicas;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "YAML experiment config")->required();
  cmd->add_option("--seed", c.seed, "override the seed");
  cmd->add_option("--replicas", c.replicas, "override the replica count");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--override", c.overrides, "key.path=value, repeatable");
}

dsa::experiment::ExperimentSpec load(const Common& c) {
  auto overrides = c.overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  if (c.replicas) overrides.push_back("replicas=" + std::to_string(*c.replicas));
  if (c.out) overrides.push_back("output.dir=" + *c.out);
  return dsa::experiment::parse_config_file(c.config, overrides);
}

void print_summary(const dsa::experiment::Summary& s) {
  for (const auto& [k, v] : s) std::cout << k << " = " << v << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  namespace ex = dsa::experiment;
  CLI::App app{"Distributed stochastic approximation with gossip"};
  app.require_subcommand(1);

  Common run_opts, clt_opts, validate_opts;
  auto* run_cmd = app.add_subcommand("run", "run an experiment and write traces");
  add_common(run_cmd, run_opts);
  auto* clt_cmd = app.add_subcommand("clt", "replica study of the CLT covariance");
  add_common(clt_cmd, clt_opts);
  auto* validate_cmd = app.add_subcommand("validate", "check a config and the step-size assumptions");
  add_common(validate_cmd, validate_opts);

  std::string preset;
  bool list = false;
  auto* scenario_cmd = app.add_subcommand("scenario", "print a preset as a full config");
  scenario_cmd->add_option("name", preset, "preset name");
  scenario_cmd->add_flag("--list", list, "list preset names");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*scenario_cmd) {
      if (list || preset.empty()) {
        for (const auto& n : ex::preset_names()) std::cout << n << '\n';
        return kOk;
      }
      std::cout << ex::to_yaml(ex::preset_spec(preset));
      return kOk;
    }
    if (*validate_cmd) {
      const auto spec = load(validate_opts);
      const auto report = dsa::validate_assumptions(ex::build_run_config(spec));
      for (const auto& c : report.checks)
        std::cout << (c.passed ? "ok    " : "FAIL  ") << c.name << ": " << c.detail << '\n';
      return report.all_passed() ? kOk : kConfig;
    }
    if (*run_cmd) {
      const auto spec = load(run_opts);
      const auto outcome = ex::run_experiment(spec);
      print_summary(outcome.summary);
      return kOk;
    }
    if (*clt_cmd) {
      const auto spec = load(clt_opts);
      const auto outcome = ex::run_clt_study(spec);
      print_summary(outcome.summary);
      return kOk;
    }
  } catch (const dsa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const dsa::ArgumentError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const dsa::InsufficientDataError& e) {
    std::cerr << "insufficient data: " << e.what() << '\n';
    return kInsufficient;
  } catch (const dsa::RunAborted& e) {
    std::cerr << "run aborted at iteration " << e.iteration() << ": " << e.what() << '\n';
    return kAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kAbort;
  }
  return kOk;
}
