// Command-line entry point. Subcommands tie the training phases, the
// evaluation modes, and report generation together; every run artifact
// lands under the --out directory together with the resolved configuration.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
// divergence/warm-up failure, 5 infeasible budget, 1 anything else.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "ddi/commands.hpp"
#include "ddi/errors.hpp"

namespace {

// Flag values arrive as raw strings and flow through RunConfig::set so the
// CLI and the config file share one parser (and one error surface).
struct Overrides {
  std::vector<std::pair<std::string, std::string>> kv;

  void add(CLI::App* cmd, const std::string& flag, const std::string& key,
           const std::string& help) {
    cmd->add_option_function<std::string>(
        flag,
        [this, key](const std::string& v) { kv.emplace_back(key, v); },
        help);
  }
};

void add_common(CLI::App* cmd, std::string& config_path, Overrides& ov) {
  cmd->add_option("--config", config_path,
                  "sectioned key-value configuration file");
  ov.add(cmd, "--seed", "run.seed", "root random seed");
  ov.add(cmd, "--out", "run.out", "run directory for all outputs");
  ov.add(cmd, "--metric", "run.metric", "cost metric: uniform|flops|energy");
  ov.add(cmd, "--dataset", "data.dataset",
         "dataset: synthetic|mnist|cifar10|file");
  ov.add(cmd, "--arch", "arch.preset", "architecture preset, e.g. resnet20");
  ov.add(cmd, "--target-skip", "train.target_skip",
         "controller target skip ratio in [0,1]");
}

ddi::RunConfig resolve(const std::string& config_path, const Overrides& ov) {
  ddi::RunConfig cfg = config_path.empty()
                           ? ddi::RunConfig::from_text("")
                           : ddi::RunConfig::from_file(config_path);
  for (const auto& [key, value] : ov.kv) cfg.set(key, value);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"training and adaptive-inference engine for gated networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version",
                       std::string("ddi-engine ") + ddi::kEngineVersion);

  std::string train_config, eval_config, report_config;
  Overrides train_ov, eval_ov, report_ov;

  CLI::App* train = app.add_subcommand(
      "train", "run pretrain -> warm-up -> joint gating -> multi-exit phases");
  add_common(train, train_config, train_ov);

  CLI::App* eval = app.add_subcommand(
      "eval", "evaluate a checkpoint: adaptive, budgeted, or all exits");
  add_common(eval, eval_config, eval_ov);
  ddi::EvalOptions eopt;
  eval->add_option("--mode", eopt.mode, "adaptive|budget|all_exits")
      ->default_str("adaptive");
  eval->add_option("--budget", eopt.budget_limit,
                   "budget mode: single cost limit (omit for a 20-point sweep)");
  eval->add_option("--checkpoint", eopt.checkpoint,
                   "checkpoint path (default <out>/ckpt-ddi.bin)");
  eval->add_option("--budget-samples", eopt.max_budget_samples,
                   "budget mode: cap on evaluated samples");

  CLI::App* report = app.add_subcommand(
      "report", "turn eval outputs into plot-ready CSV/JSON artifacts");
  add_common(report, report_config, report_ov);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    nlohmann::json result;
    if (train->parsed()) {
      result = ddi::cmd_train(resolve(train_config, train_ov));
    } else if (eval->parsed()) {
      result = ddi::cmd_eval(resolve(eval_config, eval_ov), eopt);
    } else {
      result = ddi::cmd_report(resolve(report_config, report_ov).out_dir);
    }
    std::cout << result.dump(2) << "\n";
    return 0;
  } catch (const ddi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ddi::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ddi::WarmupFailure& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 4;
  } catch (const ddi::TrainingDivergence& e) {
    std::cerr << "training divergence: " << e.what() << "\n";
    return 4;
  } catch (const ddi::BudgetInfeasible& e) {
    std::cerr << "budget infeasible: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
