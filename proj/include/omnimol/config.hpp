#pragma once

// Single-document run configuration (JSON). Every section is optional on
// input and filled from defaults; unknown keys are rejected.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "omnimol/model.hpp"
#include "omnimol/taskforge.hpp"
#include "omnimol/training.hpp"

namespace omnimol {

struct EvalConfig {
  std::string split = "test";
  std::size_t max_new_tokens = 40;
  std::vector<std::string> subtasks;  // empty = every subtask in the split
};

struct AlignConfig {
  std::vector<std::string> subtasks{"edit", "atoms", "grow", "caption"};
  std::size_t k = 10;
  std::size_t probe_size = 16;
  TrainConfig train;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig stage1;
  TrainConfig stage2;
  taskforge::CorpusSpec data;
  /// Subtask counts of the separate backbone corpus; empty = train split.
  std::map<std::string, int> pretrain_counts;
  EvalConfig eval;
  AlignConfig align;

  /// Pretrain/stage schedules and corpus counts used when nothing is given.
  static RunConfig defaults();
  /// Throws ConfigError.
  void validate() const;
};

/// Throws ConfigError on malformed JSON, unknown keys or bad values.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::string& path);
/// Pretty JSON with every key spelled out.
std::string dump_run_config(const RunConfig& cfg);

}  // namespace omnimol
