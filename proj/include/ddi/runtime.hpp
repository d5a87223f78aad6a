#pragma once

// Hard-gated adaptive inference, budget-constrained anytime prediction, and
// dataset-level skip-pattern analysis.

#include <string>
#include <vector>

#include "ddi/backbone.hpp"
#include "ddi/costmodel.hpp"
#include "ddi/data.hpp"

namespace ddi {

// Hard resource ceiling for one inference request, in the metric's units.
struct Budget {
  CostMetric metric = CostMetric::flops;
  double limit = 0.0;  // +infinity = unconstrained

  void validate() const;  // limit > 0; metric is flops or energy
};

// Outcome of one single-sample hard-gated pass.
struct InferenceResult {
  int predicted = -1;
  // 0..branches-1 = early exit at that branch; branches = the final head.
  int exit_index = -1;
  // Everything charged before the halt point, folded the same way the cost
  // model folds a trace; equals dynamic_cost(trace) for a full pass.
  double realized_cost = 0.0;
  // Blocks fully resolved before the halt point (a full pass covers every
  // unit). Gate work charged for a unit cut off mid-decision appears in
  // realized_cost but not here.
  SkipTrace trace;
  // One row per exit (final head last); empty for exits never evaluated.
  std::vector<std::vector<float>> exit_logits;
};

enum class Difficulty { easy, medium, hard };

// Input-adaptive pass: hard gates, channel gates short-circuited behind
// closed layer gates, every branch evaluated in passing, prediction at the
// final head. realized_cost equals dynamic_cost(trace, ledger, metric).
InferenceResult adaptive_infer(DDINetwork& net, const Tensor& input,
                               const CostLedger& ledger,
                               CostMetric metric = CostMetric::flops);

// Resource-bounded pass: charges every gate pipeline, block body, branch,
// and the head against the limit before executing it; halts at the first
// piece that no longer fits and classifies at the latest branch already
// evaluated. Throws BudgetInfeasible (carrying the sample's minimum feasible
// budget) when even the first branch is out of reach. With an infinite
// limit, identical to adaptive_infer.
InferenceResult budgeted_infer(DDINetwork& net, const Tensor& input,
                               const CostLedger& ledger, const Budget& budget);

// Skip-ratio thresholds: above 0.60 reads easy, below 0.40 hard.
Difficulty classify_difficulty(const InferenceResult& result);
std::string difficulty_name(Difficulty d);

struct SkipReportRow {
  int block_id = 0;
  int stage = 0;
  bool gated = false;
  double frequency = 0.0;  // execution frequency over the dataset, in [0,1]
};

// Dataset-level skip analysis: execution frequency per block, skip ratio per
// sample, easy/hard partitions, and the realized-versus-vanilla savings.
struct SkipReport {
  std::vector<SkipReportRow> rows;      // one per block, network order
  std::vector<double> per_sample_skip;  // dataset order
  std::vector<int> easy_indices;        // skip ratio > 0.60
  std::vector<int> hard_indices;        // skip ratio < 0.40; disjoint from easy
  int samples = 0;
  double mean_skip = 0.0;
  double mean_cost = 0.0;     // mean dynamic cost per sample
  double vanilla_cost = 0.0;  // static full-execution cost, no overhead
  double savings = 0.0;       // 1 - mean_cost / vanilla_cost
  CostMetric metric = CostMetric::flops;

  // Plot-ready rows: "block_id,stage,frequency" with a header line.
  std::string to_csv() const;
  std::string summary_json() const;
};

SkipReport skip_pattern_report(DDINetwork& net, const Dataset& ds,
                               const NormStats& stats, const CostLedger& ledger,
                               CostMetric metric, int batch_size = 128);

}  // namespace ddi
