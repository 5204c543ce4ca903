#pragma once

// End-to-end runs: corpus → backbone pretraining → stage 1 → stage 2 →
// evaluation, with checkpoints and a replay manifest.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "omnimol/config.hpp"
#include "omnimol/metrics.hpp"
#include "omnimol/model.hpp"
#include "omnimol/taskforge.hpp"
#include "omnimol/training.hpp"

namespace omnimol {

struct CorpusSplits {
  std::vector<taskforge::InstructionSample> train;     // every instruction subtask but align
  std::vector<taskforge::InstructionSample> val;
  std::vector<taskforge::InstructionSample> test;
  std::vector<taskforge::InstructionSample> align;     // stage-1 captions
  std::vector<taskforge::InstructionSample> pretrain;  // backbone corpus
  taskforge::LeakageReport leakage;
};

/// Splits a generated corpus, removes train/val samples that leak into the
/// test split and builds the backbone corpus (a separate draw when
/// data.pretrain_counts is set, the train split otherwise).
CorpusSplits build_splits(const RunConfig& cfg, std::vector<taskforge::InstructionSample> corpus);
CorpusSplits build_splits(const RunConfig& cfg);

enum class StageSelection { One, Two, Both };
StageSelection parse_stage(std::string_view s);

struct TrainRunOptions {
  StageSelection stages = StageSelection::Both;
  std::string out_dir;                 // empty: no files written
  std::optional<std::string> resume;   // checkpoint path
  std::ostream* log = nullptr;         // JSONL training records
};

struct TrainRunResult {
  OmniModel model;
  std::vector<StageResult> stages;
  std::string final_checkpoint;  // serialized bytes
  std::string final_stage;
};

/// Deterministic in the config. Writes <out>/<stage>.ckpt after every epoch
/// and once a stage completes (tag "<stage>:done"), plus <out>/final.ckpt.
TrainRunResult run_training(const RunConfig& cfg, const CorpusSplits& splits,
                            const TrainRunOptions& opts);

/// Greedy predictions for `samples` (optionally restricted to subtasks).
std::vector<metrics::EvalRecord> run_predictions(OmniModel& model, const RunConfig& cfg,
                                                 std::span<const taskforge::InstructionSample> samples);

/// Rebuilds a model from a checkpoint; the config snapshot inside must
/// describe the same model layout.
OmniModel model_from_checkpoint(const Checkpoint& ck);

struct Manifest {
  std::string command;
  std::string config_json;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::uint64_t>> inputs;   // name, digest
  std::vector<std::pair<std::string, std::uint64_t>> outputs;  // name, digest
};
std::string manifest_json(const Manifest& m);
void write_text(const std::string& path, std::string_view text);
std::string read_text(const std::string& path);

inline constexpr std::string_view kVersion = "0.1.0";

}  // namespace omnimol
