#include <gtest/gtest.h>

#include "omnimol/alignment.hpp"
#include "omnimol/errors.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace omnimol;
using namespace omnimol::alignment;
namespace tf = omnimol::taskforge;

namespace {

FeatureStack random_stack(std::size_t batch, std::size_t layers, std::size_t dim, Rng& rng) {
  FeatureStack f{batch, layers, dim, {}};
  for (std::size_t i = 0; i < batch * layers * dim; ++i) f.values.push_back(rng.uniform(-1, 1));
  return f;
}

std::vector<std::vector<double>> rows_of(const FeatureStack& f) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < f.rows(); ++r) {
    out.emplace_back(f.values.begin() + static_cast<std::ptrdiff_t>(r * f.dim),
                     f.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * f.dim));
  }
  return out;
}

}  // namespace

TEST(Alignment, MaskedMeanMatchesLoops) {
  Rng rng(1);
  const std::size_t batch = 2, seq = 3, dim = 4;
  std::vector<Tensor> layers{Tensor::uniform({batch * seq, dim}, -1, 1, rng),
                             Tensor::uniform({batch * seq, dim}, -1, 1, rng)};
  const std::vector<double> mask{1, 1, 0, 1, 0, 0};
  const auto f = masked_mean_features(layers, mask, batch, seq);
  ASSERT_EQ(f.rows(), 4u);
  for (std::size_t c = 0; c < dim; ++c) {
    const auto v = layers[1].data();
    EXPECT_NEAR(f.values[1 * dim + c], (v[0 * dim + c] + v[1 * dim + c]) / 2, 1e-15);
    EXPECT_EQ(f.values[3 * dim + c], v[3 * dim + c]);
  }
  EXPECT_THROW(masked_mean_features(layers, std::vector<double>{1, 1, 1, 0, 0, 0}, batch, seq), DataError);
}

TEST(Alignment, KnnAgreesWithBruteForce) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_stack(6, 3, 5, rng);
    for (std::size_t k : {1u, 4u, 17u}) {
      auto got = knn(f, k);
      for (auto& g : got) std::sort(g.begin(), g.end());
      EXPECT_EQ(got, oracle::knn(rows_of(f), k));
    }
  }
  const auto f = random_stack(2, 2, 3, rng);
  EXPECT_THROW(knn(f, 0), UsageError);
  EXPECT_THROW(knn(f, 4), UsageError);
}

TEST(Alignment, MutualKnnProperties) {
  Rng rng(3);
  const auto a = random_stack(8, 2, 6, rng), b = random_stack(8, 2, 6, rng);
  EXPECT_DOUBLE_EQ(mutual_knn_score(a, a, 5), 1.0);
  const double ab = mutual_knn_score(a, b, 5), ba = mutual_knn_score(b, a, 5);
  EXPECT_NEAR(ab, ba, 1e-12);
  EXPECT_GE(ab, 0.0);
  EXPECT_LE(ab, 1.0);
  // Monotone transforms of distances keep neighbourhoods.
  auto scaled = a;
  for (auto& v : scaled.values) v = 3 * v + 1;
  EXPECT_DOUBLE_EQ(mutual_knn_score(a, scaled, 5), 1.0);
  EXPECT_THROW(mutual_knn_score(a, random_stack(4, 2, 6, rng), 3), UsageError);
}

TEST(Alignment, ScoreMatrixAndReports) {
  Rng rng(4);
  std::vector<FeatureStack> fs{random_stack(5, 2, 4, rng), random_stack(5, 2, 4, rng), random_stack(5, 2, 4, rng)};
  const std::vector<std::string> labels{"1-task", "2-task", "4-task"};
  const auto rep = score_matrix(labels, fs, 100, 7, 99);
  EXPECT_EQ(rep.k, 9u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rep.at(i, i), 1.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(rep.at(i, j), rep.at(j, i));
  }
  const auto csv = heatmap_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,1-task,2-task,4-task");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto json = report_json(rep);
  EXPECT_NE(json.find("\"probe_digest\": 99"), std::string::npos);
}

TEST(Alignment, DefaultLadder) {
  const std::vector<std::string> subtasks{"edit", "atoms", "grow", "caption"};
  const auto ladder = default_ladder(subtasks);
  ASSERT_EQ(ladder.size(), 3u);
  EXPECT_EQ(ladder[0].subtasks, std::vector<std::string>{"edit"});
  EXPECT_EQ(ladder[2].subtasks.size(), 4u);
  EXPECT_EQ(ladder[1].label, "2-task");
}

TEST(Alignment, ExtractFeaturesAndStudy) {
  tf::Tokenizer tok;
  const auto corpus = tf::generate_corpus(fixture::small_spec(), 5);
  std::vector<tf::InstructionSample> train, probe;
  for (const auto& s : corpus) {
    if (s.subtask == "align") continue;
    (s.split == tf::Split::Test ? probe : train).push_back(s);
  }
  probe.resize(6);
  auto backbone = OmniModel::for_tokenizer(fixture::tiny_config(), tok);
  const auto batch = tf::collate(probe, tok, collate_limit(backbone.config()));
  const auto f = extract_features(backbone, batch);
  EXPECT_EQ(f.batch, 6u);
  EXPECT_EQ(f.layers, 2u);
  EXPECT_EQ(f.dim, 16u);
  EXPECT_EQ(probe_digest(batch), probe_digest(tf::collate(probe, tok, collate_limit(backbone.config()))));

  TrainConfig c;
  c.max_steps = 2;
  c.batch_size = 4;
  c.lr = 1e-2;
  c.early_stop_patience = 0;
  const std::vector<Rung> ladder{{"a", {"edit"}}, {"b", {"edit", "atoms"}}};
  const auto rep = task_scaling_study(backbone, ladder, train, probe, tok, c, 3);
  EXPECT_EQ(rep.labels.size(), 2u);
  EXPECT_EQ(rep.at(0, 0), 1.0);
  EXPECT_EQ(rep.at(0, 1), rep.at(1, 0));
  const std::vector<Rung> missing{{"x", {"nope"}}};
  EXPECT_THROW(task_scaling_study(backbone, missing, train, probe, tok, c, 3), DataError);
}
