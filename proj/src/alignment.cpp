#include "omnimol/alignment.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "omnimol/errors.hpp"

namespace omnimol::alignment {

namespace tf = omnimol::taskforge;

FeatureStack masked_mean_features(std::span<const Tensor> layer_outputs,
                                  std::span<const double> mask, std::size_t batch,
                                  std::size_t seq) {
  if (layer_outputs.empty()) throw UsageError("masked_mean_features: no layers");
  if (mask.size() != batch * seq) throw DimensionError("masked_mean_features: mask size");
  FeatureStack f;
  f.batch = batch;
  f.layers = layer_outputs.size();
  f.dim = layer_outputs.front().cols();
  f.values.assign(f.rows() * f.dim, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double count = 0.0;
    for (std::size_t t = 0; t < seq; ++t) count += mask[b * seq + t];
    if (count == 0.0) throw DataError("masked_mean_features: probe row " + std::to_string(b) + " is empty");
    for (std::size_t l = 0; l < f.layers; ++l) {
      const Tensor& h = layer_outputs[l];
      if (h.rows() != batch * seq || h.cols() != f.dim) {
        throw DimensionError("masked_mean_features: layer " + std::to_string(l) + " has shape " +
                             shape_str(h.shape()));
      }
      const auto v = h.data();
      double* dst = f.values.data() + (b * f.layers + l) * f.dim;
      for (std::size_t t = 0; t < seq; ++t) {
        const double m = mask[b * seq + t];
        if (m == 0.0) continue;
        for (std::size_t j = 0; j < f.dim; ++j) dst[j] += m * v[(b * seq + t) * f.dim + j];
      }
      for (std::size_t j = 0; j < f.dim; ++j) dst[j] /= count;
    }
  }
  return f;
}

FeatureStack extract_features(OmniModel& model, const tf::Batch& probe) {
  NoGradGuard no_grad;
  const AssembledInputs in = model.assemble_inputs(probe);
  const ForwardResult r = model.forward(in, true);
  return masked_mean_features(r.layer_outputs, in.attn_mask, in.batch, in.seq);
}

std::vector<std::vector<std::size_t>> knn(const FeatureStack& f, std::size_t k) {
  const std::size_t n = f.rows();
  if (k == 0 || k >= n) {
    throw UsageError("knn: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + ")");
  }
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0.0;
      for (std::size_t c = 0; c < f.dim; ++c) {
        const double x = f.values[i * f.dim + c] - f.values[j * f.dim + c];
        d += x * x;
      }
      dist.emplace_back(d, j);
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    for (std::size_t q = 0; q < k; ++q) out[i].push_back(dist[q].second);
  }
  return out;
}

double mutual_knn_score(const FeatureStack& a, const FeatureStack& b, std::size_t k) {
  if (a.rows() != b.rows()) {
    throw UsageError("mutual_knn_score: row counts differ (" + std::to_string(a.rows()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  const auto na = knn(a, k);
  const auto nb = knn(b, k);
  double total = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i) {
    const std::set<std::size_t> sa(na[i].begin(), na[i].end());
    std::size_t shared = 0;
    for (std::size_t j : nb[i]) shared += sa.count(j);
    total += static_cast<double>(shared) / static_cast<double>(k);
  }
  return total / static_cast<double>(na.size());
}

AlignmentReport score_matrix(std::span<const std::string> labels,
                             std::span<const FeatureStack> features, std::size_t k,
                             std::uint64_t seed, std::uint64_t digest) {
  if (labels.size() != features.size() || labels.empty()) {
    throw UsageError("score_matrix: need one non-empty label per feature stack");
  }
  const std::size_t m = labels.size();
  AlignmentReport rep;
  rep.labels.assign(labels.begin(), labels.end());
  rep.k = std::min(k, features.front().rows() - 1);
  rep.seed = seed;
  rep.probe_digest = digest;
  rep.scores.assign(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    rep.scores[i * m + i] = mutual_knn_score(features[i], features[i], rep.k);
    for (std::size_t j = i + 1; j < m; ++j) {
      const double s = mutual_knn_score(features[i], features[j], rep.k);
      rep.scores[i * m + j] = s;
      rep.scores[j * m + i] = s;
    }
  }
  return rep;
}

std::string heatmap_csv(const AlignmentReport& report) {
  std::ostringstream ss;
  ss.precision(6);
  ss << std::fixed << "model";
  for (const auto& l : report.labels) ss << ',' << l;
  ss << '\n';
  for (std::size_t i = 0; i < report.labels.size(); ++i) {
    ss << report.labels[i];
    for (std::size_t j = 0; j < report.labels.size(); ++j) ss << ',' << report.at(i, j);
    ss << '\n';
  }
  return ss.str();
}

std::string report_json(const AlignmentReport& report) {
  nlohmann::ordered_json j;
  j["labels"] = report.labels;
  j["k"] = report.k;
  j["seed"] = report.seed;
  j["probe_digest"] = report.probe_digest;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < report.labels.size(); ++i) {
    std::vector<double> row(report.scores.begin() + static_cast<std::ptrdiff_t>(i * report.labels.size()),
                            report.scores.begin() + static_cast<std::ptrdiff_t>((i + 1) * report.labels.size()));
    rows.push_back(row);
  }
  j["scores"] = rows;
  return j.dump(2) + "\n";
}

std::uint64_t probe_digest(const tf::Batch& probe) {
  std::string bytes;
  auto put = [&bytes](const void* p, std::size_t n) { bytes.append(static_cast<const char*>(p), n); };
  put(&probe.batch_size, sizeof probe.batch_size);
  put(&probe.seq_len, sizeof probe.seq_len);
  put(probe.input_ids.data(), probe.input_ids.size() * sizeof(TokenId));
  put(probe.attn_mask.data(), probe.attn_mask.size() * sizeof(double));
  for (const auto& g : probe.graphs) {
    const std::string c = g ? tselfies::canonicalize(*g) : std::string("-");
    bytes += c;
    bytes.push_back('\n');
  }
  return fnv1a(bytes);
}

std::vector<Rung> default_ladder(std::span<const std::string> subtasks) {
  std::vector<Rung> out;
  for (std::size_t n : {1, 2, 4}) {
    if (n > subtasks.size()) break;
    Rung r;
    r.label = std::to_string(n) + "-task";
    r.subtasks.assign(subtasks.begin(), subtasks.begin() + static_cast<std::ptrdiff_t>(n));
    out.push_back(std::move(r));
  }
  return out;
}

AlignmentReport task_scaling_study(const OmniModel& backbone, std::span<const Rung> ladder,
                                   std::span<const tf::InstructionSample> train,
                                   std::span<const tf::InstructionSample> probe,
                                   const tf::Tokenizer& tokenizer, const TrainConfig& cfg,
                                   std::size_t k) {
  if (ladder.empty()) throw UsageError("task_scaling_study: empty ladder");
  if (probe.size() < 2) throw UsageError("task_scaling_study: probe needs at least two samples");
  const tf::Batch probe_batch = tf::collate(probe, tokenizer, collate_limit(backbone.config()));
  std::vector<std::string> labels;
  std::vector<FeatureStack> features;
  for (const auto& rung : ladder) {
    std::vector<tf::InstructionSample> subset;
    for (const auto& s : train) {
      if (std::find(rung.subtasks.begin(), rung.subtasks.end(), s.subtask) != rung.subtasks.end()) {
        subset.push_back(s);
      }
    }
    if (subset.empty()) throw DataError("task_scaling_study: rung " + rung.label + " has no samples");
    OmniModel model(backbone.config(), backbone.pad_id(), backbone.graph_id(), backbone.segment_breaks());
    model.copy_parameters_from(backbone);
    train_stage2(model, subset, {}, tokenizer, cfg);
    labels.push_back(rung.label);
    features.push_back(extract_features(model, probe_batch));
  }
  return score_matrix(labels, features, k, cfg.seed, probe_digest(probe_batch));
}

}  // namespace omnimol::alignment
