#pragma once

// Optimisation of the toy model: backbone pretraining, projector alignment
// (stage 1), adapter/router tuning (stage 2), greedy prediction and binary
// checkpoints.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "omnimol/model.hpp"
#include "omnimol/taskforge.hpp"

namespace omnimol {

struct TrainConfig {
  double lr = 8e-5;
  int epochs = 15;
  /// When non-zero, overrides epochs with a fixed number of optimizer steps.
  std::size_t max_steps = 0;
  double warmup_ratio = 0.0075;
  std::size_t batch_size = 16;
  std::size_t grad_accum = 1;
  double lambda_aux = 0.01;
  std::uint64_t seed = 0;
  /// Validation evaluations without improvement before stopping; 0 disables.
  int early_stop_patience = 2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Throws ConfigError.
  void validate() const;
};

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio);
/// Linear warmup over steps 1..W (lr(W) == peak), cosine decay to 0 at total.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup, double peak);

/// Mean next-token NLL: position t predicts token t+1 wherever the label
/// mask of t+1 is set. UsageError when no position is labelled.
Tensor lm_loss(const Tensor& logits, const AssembledInputs& in);
/// lm + λ·mean(aux over MoGE layers); returns lm when the list is empty.
Tensor total_loss(const Tensor& lm, const std::vector<AuxLossStats>& aux, double lambda);

class Adam {
 public:
  Adam() = default;
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One update of every trainable parameter that holds a gradient.
  void step(std::span<const NamedParam> params, double lr);
  std::size_t steps() const noexcept { return t_; }

  struct Moments {
    std::vector<double> m, v;
  };
  const std::map<std::string, Moments>& state() const noexcept { return state_; }
  void restore(std::size_t t, std::map<std::string, Moments> state) {
    t_ = t;
    state_ = std::move(state);
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct LogRecord {
  std::string stage;
  std::size_t step = 0;
  double lr = 0.0;
  double lm_loss = 0.0;
  double aux_loss = 0.0;
  double lambda_aux = 0.0;
  std::vector<std::pair<double, double>> gamma;  // min, max per layer
};
std::string to_json_line(const LogRecord& r);

struct StageResult {
  std::size_t steps = 0;
  int epochs_run = 0;
  bool early_stopped = false;
  std::vector<double> val_losses;
  std::vector<LogRecord> log;
};

/// Resumable position inside a stage.
struct StageProgress {
  std::size_t step = 0;
  int epoch = 0;
  double best_val = 0.0;
  int bad_evals = 0;
  bool has_best = false;
};

struct StageHooks {
  std::ostream* log = nullptr;
  /// Called at the end of every epoch (and of a max_steps run).
  std::function<void(const StageProgress&, const Adam&)> on_epoch;
  const StageProgress* resume_from = nullptr;
  const Adam* resume_optimizer = nullptr;
};

/// Generic loop: sets `mode`, shuffles `train` every epoch, updates with
/// Adam under the warmup/cosine schedule, clips adapters after every step
/// and early-stops on validation L_LM when `val` is non-empty.
StageResult train_stage(OmniModel& model, TrainMode mode, const std::string& tag,
                        std::span<const taskforge::InstructionSample> train,
                        std::span<const taskforge::InstructionSample> val,
                        const taskforge::Tokenizer& tokenizer, const TrainConfig& cfg,
                        const StageHooks& hooks = {});

StageResult pretrain(OmniModel& model, std::span<const taskforge::InstructionSample> train,
                     const taskforge::Tokenizer& tokenizer, const TrainConfig& cfg,
                     const StageHooks& hooks = {});
StageResult train_stage1(OmniModel& model, std::span<const taskforge::InstructionSample> align,
                         std::span<const taskforge::InstructionSample> val,
                         const taskforge::Tokenizer& tokenizer, const TrainConfig& cfg,
                         const StageHooks& hooks = {});
StageResult train_stage2(OmniModel& model, std::span<const taskforge::InstructionSample> train,
                         std::span<const taskforge::InstructionSample> val,
                         const taskforge::Tokenizer& tokenizer, const TrainConfig& cfg,
                         const StageHooks& hooks = {});

/// Mean validation L_LM, weighted by labelled tokens.
double evaluate_loss(OmniModel& model, std::span<const taskforge::InstructionSample> samples,
                     const taskforge::Tokenizer& tokenizer, std::size_t batch_size);

/// Longest sequence collate() may produce so that the spliced graph rows
/// still fit into max_seq.
std::size_t collate_limit(const ModelConfig& cfg);

/// Greedy responses for every sample, decoded to text.
std::vector<std::string> predict(OmniModel& model,
                                 std::span<const taskforge::InstructionSample> samples,
                                 const taskforge::Tokenizer& tokenizer, std::size_t max_new);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  std::string config_json;
  std::string stage;
  StageProgress progress;
  std::map<std::string, std::pair<Shape, std::vector<double>>> params;
  std::size_t adam_steps = 0;
  std::map<std::string, Adam::Moments> adam_state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ck);
/// Throws IntegrityError carrying the byte offset of the first problem.
Checkpoint parse_checkpoint(std::string_view bytes);

Checkpoint snapshot(const OmniModel& model, const std::string& config_json,
                    const std::string& stage, const StageProgress& progress, const Adam* optimizer);
/// Copies parameters into the model. Throws IntegrityError on missing or
/// mis-shaped records.
void restore(OmniModel& model, const Checkpoint& ck);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

std::uint64_t fnv1a(std::string_view bytes);

}  // namespace omnimol
