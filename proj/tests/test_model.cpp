#include <gtest/gtest.h>

#include <set>

#include "omnimol/errors.hpp"
#include "omnimol/model.hpp"
#include "omnimol/training.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace omnimol;
namespace tf = omnimol::taskforge;
namespace ts = omnimol::tselfies;

namespace {

struct Bench {
  tf::Tokenizer tok;
  std::vector<tf::InstructionSample> corpus = tf::generate_corpus(fixture::small_spec(), 1);
  OmniModel model = OmniModel::for_tokenizer(fixture::tiny_config(), tok);

  const tf::InstructionSample& first(const std::string& subtask) const {
    for (const auto& s : corpus) {
      if (s.subtask == subtask) return s;
    }
    throw std::logic_error("no sample");
  }
};

std::vector<double> logits_of(OmniModel& m, const tf::Batch& b) {
  NoGradGuard ng;
  const auto r = m.forward(b);
  return {r.logits.data().begin(), r.logits.data().end()};
}

}  // namespace

TEST(Model, ConfigValidation) {
  auto c = fixture::tiny_config();
  c.vocab_size = 10;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.l_moge(), 1u);
  c.n_layers = 8;
  EXPECT_EQ(c.l_moge(), 2u);
  EXPECT_EQ(c.moge_layer_count(), 7u);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  c = fixture::tiny_config();
  c.vocab_size = 10;
  c.top_e = 3;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(Model, ParameterGroupsPartitionEveryMode) {
  Bench s;
  std::set<std::string> names;
  for (const auto& np : s.model.named_parameters()) names.insert(np.name);
  for (const char* n : {"tok_emb", "projector.w", "layers.0.moge.router", "layers.1.gal_q.alpha",
                        "layers.1.moge.expert1.gal_down.B", "layers.0.moge.shared.gal_up.p"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  for (TrainMode m : {TrainMode::Frozen, TrainMode::Pretrain, TrainMode::Stage1, TrainMode::Stage2}) {
    s.model.set_mode(m);
    EXPECT_NO_THROW(s.model.check_partition());
    for (const auto& np : s.model.named_parameters()) {
      const bool want = m == TrainMode::Pretrain   ? np.group == ParamGroup::Backbone
                        : m == TrainMode::Stage1   ? np.group == ParamGroup::Projector
                        : m == TrainMode::Stage2   ? np.group != ParamGroup::Backbone
                                                   : false;
      EXPECT_EQ(np.tensor.requires_grad(), want) << np.name;
    }
  }
  Tensor t = s.model.token_embedding();
  s.model.set_mode(TrainMode::Stage2);
  t.set_requires_grad(true);
  EXPECT_THROW(s.model.check_partition(), UsageError);
}

TEST(Model, SameSeedSameWeights) {
  tf::Tokenizer tok;
  auto a = OmniModel::for_tokenizer(fixture::tiny_config(3), tok);
  auto b = OmniModel::for_tokenizer(fixture::tiny_config(3), tok);
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
  }
}

TEST(Model, GraphRowsAreSplicedAtThePlaceholder) {
  Bench s;
  const auto& sample = s.first("atoms");
  std::vector<tf::InstructionSample> one{sample};
  const auto batch = tf::collate(one, s.tok, 80);
  const auto in = s.model.assemble_inputs(batch);
  const std::size_t n = s.model.config().graph_tokens;
  ASSERT_EQ(in.seq, batch.seq_len + n - 1);
  std::size_t placeholder = 0;
  while (batch.input_ids[placeholder] != s.tok.graph_id()) ++placeholder;
  for (std::size_t t = 0; t < in.seq; ++t) {
    const bool graph_row = t >= placeholder && t < placeholder + n;
    EXPECT_EQ(in.ids[t] == -1, graph_row);
    EXPECT_EQ(in.attn_mask[t], 1.0);
    if (!graph_row) {
      const std::size_t src = t < placeholder ? t : t - n + 1;
      EXPECT_EQ(in.ids[t], batch.input_ids[src]);
      EXPECT_EQ(in.label_mask[t], batch.label_mask[src]);
    }
  }
  // Graph rows carry the projected features: a different graph changes them.
  auto other = sample;
  other.graph = ts::decode("[F][C][C][C][C][=O]");
  std::vector<tf::InstructionSample> two{other};
  const auto in2 = s.model.assemble_inputs(tf::collate(two, s.tok, 80));
  const std::size_t d = s.model.config().d_model;
  double before = 0, inside = 0;
  for (std::size_t c = 0; c < d; ++c) {
    before += std::abs(in.embedded.data()[(placeholder - 1) * d + c] - in2.embedded.data()[(placeholder - 1) * d + c]);
    inside += std::abs(in.embedded.data()[placeholder * d + c] - in2.embedded.data()[placeholder * d + c]);
  }
  EXPECT_EQ(before, 0.0);
  EXPECT_GT(inside, 0.0);
}

TEST(Model, PlaceholderWithoutGraphIsRejected) {
  Bench s;
  auto sample = s.first("atoms");
  std::vector<tf::InstructionSample> one{sample};
  auto batch = tf::collate(one, s.tok, 80);
  batch.graph_present[0] = 0;
  batch.graphs[0].reset();
  EXPECT_THROW(s.model.assemble_inputs(batch), DataError);
}

TEST(Model, TooLongSequenceIsAnInputError) {
  Bench s;
  std::vector<tf::InstructionSample> one{s.first("edit")};
  const auto batch = tf::collate(one, s.tok, 200);
  auto cfg = fixture::tiny_config();
  cfg.max_seq = batch.seq_len;
  auto small = OmniModel::for_tokenizer(cfg, s.tok);
  EXPECT_THROW(small.assemble_inputs(batch), InputError);
}

TEST(Model, CausalityAndPaddingInvariance) {
  Bench s;
  fixture::perturb_adapters(s.model, 2);
  const auto& a = s.first("edit");
  const auto& b = s.first("caption");
  std::vector<tf::InstructionSample> alone{a}, pair{a, b};
  const auto la = logits_of(s.model, tf::collate(alone, s.tok, 80));
  const auto batch_pair = tf::collate(pair, s.tok, 80);
  const auto lp = logits_of(s.model, batch_pair);
  const std::size_t vocab = s.model.config().vocab_size;
  const std::size_t n_a = la.size() / vocab;
  const std::size_t seq_pair = lp.size() / vocab / 2;
  ASSERT_GE(seq_pair, n_a);
  for (std::size_t i = 0; i < n_a * vocab; ++i) ASSERT_NEAR(la[i], lp[i], 1e-10);

  // Changing the last token leaves earlier positions untouched.
  auto batch = tf::collate(alone, s.tok, 80);
  const auto base = logits_of(s.model, batch);
  const std::size_t len = batch.row_length(0);
  batch.input_ids[len - 1] = s.tok.id("[F]");
  const auto changed = logits_of(s.model, batch);
  const std::size_t rows = base.size() / vocab;
  for (std::size_t i = 0; i < (rows - 1) * vocab; ++i) ASSERT_EQ(base[i], changed[i]);
  double diff = 0;
  for (std::size_t i = (rows - 1) * vocab; i < rows * vocab; ++i) diff += std::abs(base[i] - changed[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Model, FreshAdaptersDoNotChangeTheOutput) {
  Bench s;
  std::vector<tf::InstructionSample> rows{s.first("edit"), s.first("atoms")};
  const auto batch = tf::collate(rows, s.tok, 80);
  s.model.set_mode(TrainMode::Pretrain);
  const auto pre = logits_of(s.model, batch);
  s.model.set_mode(TrainMode::Stage2);
  std::vector<double> st2;
  {
    // With grad on, every adapter runs its full low-rank path.
    const auto r = s.model.forward(batch);
    st2.assign(r.logits.data().begin(), r.logits.data().end());
  }
  ASSERT_EQ(pre.size(), st2.size());
  for (std::size_t i = 0; i < pre.size(); ++i) ASSERT_NEAR(pre[i], st2[i], 1e-10);
}

TEST(Model, LmLossMatchesLoopOracle) {
  Bench s;
  fixture::perturb_adapters(s.model, 3);
  std::vector<tf::InstructionSample> rows{s.first("edit"), s.first("caption"), s.first("design")};
  const auto in = s.model.assemble_inputs(tf::collate(rows, s.tok, 80));
  NoGradGuard ng;
  const auto r = s.model.forward(in);
  const double got = lm_loss(r.logits, in).item();
  const double want = oracle::lm_loss(r.logits.data(), s.model.config().vocab_size, in.ids, in.label_mask, in.batch, in.seq);
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(Model, AuxStatsOnePerMogeLayer) {
  Bench s;
  std::vector<tf::InstructionSample> rows{s.first("edit")};
  NoGradGuard ng;
  const auto r = s.model.forward(tf::collate(rows, s.tok, 80), true);
  EXPECT_EQ(r.aux.size(), s.model.config().moge_layer_count());
  EXPECT_EQ(r.layer_outputs.size(), s.model.config().n_layers);
}

TEST(Model, ToyGraphEncoderIsDeterministic) {
  const auto cfg = fixture::tiny_config();
  const auto g = ts::decode("[C][C][O]");
  const auto a = toy_graph_encode(g, cfg), b = toy_graph_encode(ts::decode("[O][C][C]"), cfg);
  EXPECT_EQ(a.digest, b.digest);
  EXPECT_TRUE(std::equal(a.values.data().begin(), a.values.data().end(), b.values.data().begin()));
  const auto c = toy_graph_encode(ts::decode("[N][N]"), cfg);
  EXPECT_NE(a.digest, c.digest);
  EXPECT_EQ(a.values.shape(), (Shape{cfg.graph_tokens, cfg.graph_dim}));
}

TEST(Model, GenerateRespectsBudget) {
  Bench s;
  const auto& sample = s.first("atoms");
  const auto prompt = tf::encode_prompt(sample, s.tok);
  const auto r = s.model.generate(prompt, sample.graph, 5, s.tok.eot_id());
  EXPECT_LE(r.tokens.size(), 5u);
  EXPECT_THROW(s.model.generate(prompt, sample.graph, s.model.config().max_seq, s.tok.eot_id()), UsageError);
}

TEST(Model, CopyParameters) {
  tf::Tokenizer tok;
  auto a = OmniModel::for_tokenizer(fixture::tiny_config(1), tok);
  auto b = OmniModel::for_tokenizer(fixture::tiny_config(2), tok);
  b.copy_parameters_from(a);
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
    EXPECT_FALSE(pa[i].tensor.same_node(pb[i].tensor));
  }
}
