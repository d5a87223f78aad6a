#pragma once

// Command implementations behind the CLI and the python bindings: the full
// training pipeline, the evaluation modes, and report generation. Each
// command writes its artifacts under the run directory and returns the
// summary JSON it wrote. Nothing here prints; the CLI owns the terminal.

#include <string>
#include <utility>

#include <json.hpp>

#include "ddi/config.hpp"
#include "ddi/data.hpp"

namespace ddi {

inline constexpr const char* kEngineVersion = "1.0.0";

// (train, eval) pair for the configured source. Missing files raise
// DataError naming every expected path.
std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg);

// Orchestrates pretrain (optional) -> warm-up -> joint gating -> multi-exit
// fine-tune. Writes into cfg.out_dir: config.txt (resolved echo),
// version.txt, ckpt-{pretrain,warmup,iadi,ddi}.bin, train-log.jsonl (one
// JSON object per step), metrics.json. A phase cap of 0 skips that phase
// (its checkpoint still records the current state). On divergence the best
// usable snapshot is kept as ckpt-<phase>-lastgood.bin and the error
// propagates; earlier phase checkpoints stay on disk.
nlohmann::json cmd_train(const RunConfig& cfg);

struct EvalOptions {
  std::string mode = "adaptive";  // adaptive | budget | all_exits
  double budget_limit = 0.0;      // budget mode: 0 sweeps 20 points
  std::string checkpoint;         // empty -> <out>/ckpt-ddi.bin
  int max_budget_samples = 500;   // per-sample sweeps cap here
};

// adaptive: aggregate metrics + per-sample JSON-lines log + skip report
//   -> eval-adaptive.json, eval-adaptive-log.jsonl
// budget: (budget, accuracy) sweep, infeasible samples scored incorrect
//   -> eval-budget.json
// all_exits: accuracy at every branch and the head -> eval-all_exits.json
nlohmann::json cmd_eval(const RunConfig& cfg, const EvalOptions& opt);

// Turns evaluation outputs into plot-ready artifacts: frontier.csv
// (ascending by realized cost), skip-pattern.csv (one row per unit),
// easy-indices.txt, hard-indices.txt, report-summary.json. Requires
// cmd_eval outputs; missing inputs raise DataError naming the file and the
// command that produces it. Byte-identical on rerun.
nlohmann::json cmd_report(const std::string& run_dir);

}  // namespace ddi
