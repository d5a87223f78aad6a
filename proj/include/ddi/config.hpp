#pragma once

// Run configuration: a flat, sectioned key-value text format chosen for
// diff-ability in experiment tracking, with CLI-flag overrides layered on
// top. A parsed RunConfig echoes back as fully resolved text (every key
// materialized) so each run directory carries its exact settings.

#include <cstdint>
#include <map>
#include <string>

#include "ddi/backbone.hpp"
#include "ddi/costmodel.hpp"
#include "ddi/training.hpp"

namespace ddi {

// section -> key -> value. Strict parse: malformed lines, keys outside any
// section, and duplicate keys raise ConfigError with the line number.
using ConfigMap = std::map<std::string, std::map<std::string, std::string>>;
ConfigMap parse_config_text(const std::string& text);

struct DataConfig {
  std::string dataset = "synthetic";  // synthetic | mnist | cifar10 | file
  // Directory holding the dataset files; when empty, the DDI_DATA_ROOT
  // environment variable is consulted at parse time so the echo is resolved.
  std::string root;
  int synthetic_train = 4000;
  int synthetic_eval = 1000;
};

struct RunConfig {
  // [run]
  std::string out_dir = "runs/run";
  uint64_t seed = 0;
  CostMetric metric = CostMetric::flops;

  // [arch]; a preset (resnet<depth> | densenet<depth>) resolves first and
  // explicit keys then override individual fields.
  std::string arch_preset;
  ArchConfig arch;

  // [train]; `train.iterations` is ignored here — the per-phase caps below
  // are copied into it phase by phase. A cap of 0 skips that phase.
  TrainConfig train;
  int pretrain_iters = 0;
  int warmup_iters = 400;
  int iadi_iters = 400;
  int ddi_iters = 200;

  // [cost]
  EnergyParams eparams;
  MemModelConfig mem;

  // [data]
  DataConfig data;

  void validate() const;

  // Fully resolved, canonically ordered echo; from_text() round-trips it
  // losslessly.
  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  static RunConfig from_file(const std::string& path);

  // Single-key override ("section.key=value" semantics) for CLI flags,
  // applied after file parsing. "arch.preset" re-resolves the preset.
  void set(const std::string& dotted_key, const std::string& value);
};

}  // namespace ddi
