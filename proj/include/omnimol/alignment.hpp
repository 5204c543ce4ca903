#pragma once

// Mutual-kNN representation similarity between models that share a probe
// batch.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "omnimol/model.hpp"
#include "omnimol/taskforge.hpp"
#include "omnimol/training.hpp"

namespace omnimol::alignment {

/// Row (b·layers + l) holds the masked sequence mean of layer l for probe b.
struct FeatureStack {
  std::size_t batch = 0;
  std::size_t layers = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  std::size_t rows() const noexcept { return batch * layers; }
};

/// `layer_outputs` are [batch*seq x dim] tensors; `mask` is batch*seq.
/// Throws DataError when a row has no unmasked position.
FeatureStack masked_mean_features(std::span<const Tensor> layer_outputs,
                                  std::span<const double> mask, std::size_t batch, std::size_t seq);

FeatureStack extract_features(OmniModel& model, const taskforge::Batch& probe);

/// Indices of the k nearest other rows (Euclidean, ties to the lower index).
std::vector<std::vector<std::size_t>> knn(const FeatureStack& f, std::size_t k);

/// Mean over rows of |knn_a ∩ knn_b| / k. Throws UsageError unless
/// 1 <= k < rows and both stacks have the same row count.
double mutual_knn_score(const FeatureStack& a, const FeatureStack& b, std::size_t k);

struct AlignmentReport {
  std::vector<std::string> labels;
  std::vector<double> scores;  // labels.size()^2, row-major
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::uint64_t probe_digest = 0;

  double at(std::size_t i, std::size_t j) const { return scores[i * labels.size() + j]; }
};

AlignmentReport score_matrix(std::span<const std::string> labels,
                             std::span<const FeatureStack> features, std::size_t k,
                             std::uint64_t seed, std::uint64_t probe_digest);

/// Header row of labels, then one row per model prefixed by its label.
std::string heatmap_csv(const AlignmentReport& report);
std::string report_json(const AlignmentReport& report);

/// Digest of the probe token ids, masks and graphs.
std::uint64_t probe_digest(const taskforge::Batch& probe);

struct Rung {
  std::string label;
  std::vector<std::string> subtasks;
};

/// The 1/2/4 ladder over the given subtasks, in order.
std::vector<Rung> default_ladder(std::span<const std::string> subtasks);

/// Trains one stage-2 model per rung from copies of `backbone`, then scores
/// every pair on the probe batch. k is clamped to rows-1.
AlignmentReport task_scaling_study(const OmniModel& backbone, std::span<const Rung> ladder,
                                   std::span<const taskforge::InstructionSample> train,
                                   std::span<const taskforge::InstructionSample> probe,
                                   const taskforge::Tokenizer& tokenizer, const TrainConfig& cfg,
                                   std::size_t k);

}  // namespace omnimol::alignment
