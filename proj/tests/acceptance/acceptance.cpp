// Acceptance checks. Prints one PASS/FAIL line per criterion.
// Usage: omnimol_acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "omnimol/alignment.hpp"
#include "omnimol/gal.hpp"
#include "omnimol/metrics.hpp"
#include "omnimol/moge.hpp"
#include "omnimol/pipeline.hpp"
#include "omnimol/training.hpp"
#include "omnimol/tselfies.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace omnimol;
namespace tf = omnimol::taskforge;
namespace ts = omnimol::tselfies;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<void(Outcome&)> run;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

// ---------------------------------------------------------------------------

void gamma_range(Outcome& out) {
  Rng rng(0);
  GalAdapter g(128, 128, 64, rng);
  const auto& c = g.constants();
  double lo = 1e9, hi = -1e9;
  for (int corner = 0; corner < 8; ++corner) {
    g.alpha().mutable_data()[0] = c.alpha0 + ((corner & 1) ? c.eps : -c.eps);
    g.p().mutable_data()[0] = c.p0 + ((corner & 2) ? c.delta : -c.delta);
    g.beta().mutable_data()[0] = c.beta0 + ((corner & 4) ? c.eps : -c.eps);
    g.clip();
    const double v = g.scaling_value();
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // Values outside the box get clipped back onto a corner.
  g.alpha().mutable_data()[0] = 100;
  g.p().mutable_data()[0] = -3;
  g.beta().mutable_data()[0] = 7;
  g.clip();
  const double clipped = g.scaling_value();
  out.detail << "gamma in [" << fmt(lo) << ", " << fmt(hi) << "], clipped extreme " << fmt(clipped);
  out.require(std::abs(lo - 1.863) <= 1e-3 && std::abs(hi - 2.141) <= 1e-3, "corner extremes");
  out.require(clipped >= lo - 1e-12 && clipped <= hi + 1e-12, "clip keeps gamma in range");
}

// Five-point central differences on a sample of entries of `t`, with the
// step scaled to each entry's magnitude.
double sampled_rel_err(Tensor t, std::span<const double> analytic, const std::function<double()>& f,
                       Rng& rng, std::size_t max_entries = 24) {
  const std::size_t n = t.numel();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n > max_entries) {
    for (std::size_t i = 0; i < max_entries; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(max_entries);
  }
  auto v = t.mutable_data();
  std::vector<double> num, ana;
  for (std::size_t i : idx) {
    const double saved = v[i];
    const double h = 1e-4 * std::max(1.0, std::abs(saved));
    const auto at = [&](double dx) {
      v[i] = saved + dx;
      return f();
    };
    const double g = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
    v[i] = saved;
    num.push_back(g);
    ana.push_back(analytic[i]);
  }
  return oracle::rel_err(num, ana, 1e-8);
}

void gradient_checks(Outcome& out) {
  tf::Tokenizer tok;
  const auto corpus = tf::generate_corpus(fixture::small_spec(), 11);
  std::vector<tf::InstructionSample> rows;
  for (const auto& name : {"edit", "atoms", "caption"}) {
    rows.push_back(*std::find_if(corpus.begin(), corpus.end(), [&](const auto& s) { return s.subtask == name; }));
  }
  auto model = OmniModel::for_tokenizer(fixture::tiny_config(5), tok);
  fixture::perturb_adapters(model, 6);
  const auto suffix = [](const std::string& s, const std::string& x) {
    return s.size() >= x.size() && s.compare(s.size() - x.size(), x.size(), x) == 0;
  };
  std::map<std::string, std::vector<std::string>> kinds{
      {"A", {".A"}},         {"B", {".B"}},         {"alpha", {".alpha"}},
      {"p", {".p"}},         {"beta", {".beta"}},   {"router", {".router"}},
      {"projector", {"projector.w", "projector.b"}}};

  double worst = 0;
  std::string worst_name;
  Rng pick(7);
  std::map<std::string, std::size_t> covered;
  const auto check = [&](TrainMode mode, double lambda, const std::map<std::string, std::vector<std::string>>& groups) {
    model.set_mode(mode);
    for (const auto& np : model.named_parameters()) {
      if (np.tensor.requires_grad()) Tensor(np.tensor).zero_grad();
    }
    // Assembly again so the projector sits on the tape.
    const auto live = model.assemble_inputs(tf::collate(rows, tok, 90));
    {
      const auto r = model.forward(live);
      backward(total_loss(lm_loss(r.logits, live), r.aux, lambda));
    }
    const auto loss = [&]() {
      NoGradGuard ng;
      const auto a = model.assemble_inputs(tf::collate(rows, tok, 90));
      const auto r = model.forward(a);
      return total_loss(lm_loss(r.logits, a), r.aux, lambda).item();
    };
    for (const auto& np : model.named_parameters()) {
      for (const auto& [kind, suffixes] : groups) {
        if (!std::any_of(suffixes.begin(), suffixes.end(), [&](const auto& x) { return suffix(np.name, x); })) continue;
        if (!np.tensor.has_grad()) {
          out.require(false, "no gradient for " + np.name);
          continue;
        }
        const double e = sampled_rel_err(np.tensor, np.tensor.grad(), loss, pick);
        if (e > worst) {
          worst = e;
          worst_name = np.name;
        }
        ++covered[kind];
        if (e > 1e-4) out.require(false, np.name + " rel err " + fmt(e));
      }
    }
  };
  check(TrainMode::Stage2, 0.01, kinds);
  check(TrainMode::Pretrain, 0.0, {{"embeddings", {"tok_emb", "pos_emb", "seg_emb"}}});
  out.detail << "worst rel err " << fmt(worst, 3) << " (" << worst_name << ") over";
  for (const auto& [k, n] : covered) out.detail << " " << k << ":" << n;
  for (const char* k : {"A", "B", "alpha", "p", "beta", "router", "projector", "embeddings"}) {
    out.require(covered[k] > 0, std::string("covered ") + k);
  }
}

void moge_identity(Outcome& out) {
  Rng rng(3);
  const std::size_t d = 64, d_ff = 256;
  FfnWeights base{Tensor::uniform({d_ff, d}, -0.125, 0.125, rng), Tensor::uniform({d, d_ff}, -0.0625, 0.0625, rng)};
  auto layer = MogeLayer::upcycle(base, 2, 2, 8, rng);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t rows = 1 + rng.below(16);
    const auto h = Tensor::uniform({rows, d}, -2, 2, rng);
    const std::vector<double> mask(rows, 1.0);
    Tensor y;
    Tensor f;
    {
      NoGradGuard ng;
      f = ffn_forward(base, h);
    }
    // Grad on: the adapters run their full low-rank path.
    layer.router().set_requires_grad(true);
    y = layer.forward(h, 1, rows, mask);
    for (std::size_t k = 0; k < y.numel(); ++k) worst = std::max(worst, std::abs(y.data()[k] - 2 * f.data()[k]));
  }
  out.detail << "max |y - 2 FFN| = " << fmt(worst, 3);
  out.require(worst <= 1e-10, "identity at init");
}

AuxLossStats stats_for(MogeLayer& layer, const std::vector<double>& scores, const std::vector<std::size_t>& picks,
                       std::size_t batch, std::size_t seq, std::size_t n, const std::vector<double>& mask) {
  Routing r;
  r.scores = Tensor::from_data({batch * seq, n}, scores);
  r.indices = picks;
  return layer.collect_stats(r, batch, seq, mask);
}

void aux_loss_checks(Outcome& out) {
  Rng rng(4);
  FfnWeights base{Tensor::uniform({16, 8}, -0.3, 0.3, rng), Tensor::uniform({8, 16}, -0.3, 0.3, rng)};
  const std::size_t n = 4;
  auto top1 = MogeLayer::upcycle(base, n, 1, 4, rng);
  auto top2 = MogeLayer::upcycle(base, n, 2, 4, rng);

  // Uniform, balanced: top-1 and top-2.
  double uniform1, uniform2;
  {
    const std::size_t batch = 2, seq = 8;
    std::vector<double> s(batch * seq * n, 0.25);
    std::vector<std::size_t> p1, p2;
    for (std::size_t t = 0; t < batch * seq; ++t) {
      p1.push_back(t % n);
      p2.push_back((2 * t) % n);
      p2.push_back((2 * t + 1) % n);
    }
    const std::vector<double> mask(batch * seq, 1.0);
    uniform1 = aux_loss(stats_for(top1, s, p1, batch, seq, n, mask)).item();
    uniform2 = aux_loss(stats_for(top2, s, p2, batch, seq, n, mask)).item();
  }
  // Concentrated: every token on expert 0 with score 0.7.
  double concentrated;
  {
    const std::size_t seq = 6;
    std::vector<double> s;
    for (std::size_t t = 0; t < seq; ++t) s.insert(s.end(), {0.7, 0.1, 0.1, 0.1});
    concentrated = aux_loss(stats_for(top1, s, std::vector<std::size_t>(seq, 0), 1, seq, n, std::vector<double>(seq, 1.0))).item();
  }
  // Padding rows carry arbitrary scores and picks.
  double unpadded, padded;
  {
    std::vector<double> s;
    std::vector<std::size_t> p;
    for (int t = 0; t < 5; ++t) {
      double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), e = rng.uniform(), z = a + b + c + e;
      s.insert(s.end(), {a / z, b / z, c / z, e / z});
      p.push_back(rng.below(n));
    }
    unpadded = aux_loss(stats_for(top1, s, p, 1, 5, n, {1, 1, 1, 1, 1})).item();
    s.insert(s.end(), {0.97, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.97});
    p.insert(p.end(), {0, 3});
    padded = aux_loss(stats_for(top1, s, p, 1, 7, n, {1, 1, 1, 1, 1, 0, 0})).item();
  }
  out.detail << "uniform " << fmt(uniform1, 15) << "/" << fmt(uniform2, 15) << ", concentrated " << fmt(concentrated, 15)
             << " (want " << n * 0.7 << "), padding delta " << fmt(std::abs(padded - unpadded), 3);
  out.require(std::abs(uniform1 - 1.0) <= 1e-12 && std::abs(uniform2 - 1.0) <= 1e-12, "uniform = 1");
  out.require(std::abs(concentrated - n / 1.0 * 0.7) <= 1e-12, "concentrated = N/E max score");
  out.require(std::abs(padded - unpadded) <= 1e-12, "padding invariance");
}

std::map<std::string, std::vector<unsigned char>> param_bytes(const OmniModel& m) {
  std::map<std::string, std::vector<unsigned char>> out;
  for (const auto& np : m.named_parameters()) {
    const auto d = np.tensor.data();
    std::vector<unsigned char> b(d.size() * sizeof(double));
    std::memcpy(b.data(), d.data(), b.size());
    out[np.name] = std::move(b);
  }
  return out;
}

void freezing(Outcome& out) {
  tf::Tokenizer tok;
  const auto corpus = tf::generate_corpus(fixture::small_spec(2), 12);
  std::vector<tf::InstructionSample> train, align;
  for (const auto& s : corpus) {
    if (s.subtask == "align") align.push_back(s);
    else if (s.split == tf::Split::Train) train.push_back(s);
  }
  auto model = OmniModel::for_tokenizer(fixture::tiny_config(8), tok);
  TrainConfig c;
  c.max_steps = 100;
  c.batch_size = 4;
  c.lr = 1e-2;
  c.early_stop_patience = 0;

  std::map<std::string, ParamGroup> group;
  for (const auto& np : model.named_parameters()) group[np.name] = np.group;
  const auto diff = [](const auto& a, const auto& b) {
    std::set<std::string> changed;
    for (const auto& [k, v] : a) {
      if (v != b.at(k)) changed.insert(k);
    }
    return changed;
  };

  auto before = param_bytes(model);
  train_stage1(model, align, {}, tok, c);
  const auto s1 = diff(before, param_bytes(model));
  out.require(s1 == std::set<std::string>{"projector.w", "projector.b"}, "stage 1 changes exactly the projector");

  before = param_bytes(model);
  train_stage2(model, train, {}, tok, c);
  const auto after = param_bytes(model);
  const auto s2 = diff(before, after);
  std::size_t backbone_changed = 0, adapters = 0, router = 0, projector = 0;
  for (const auto& n : s2) {
    switch (group[n]) {
      case ParamGroup::Backbone: ++backbone_changed; break;
      case ParamGroup::Adapter: ++adapters; break;
      case ParamGroup::Router: ++router; break;
      case ParamGroup::Projector: ++projector; break;
    }
  }
  std::size_t backbone_total = 0;
  for (const auto& [n, g] : group) backbone_total += g == ParamGroup::Backbone;
  out.detail << "stage1 changed " << s1.size() << " tensors; stage2 changed adapters " << adapters << ", router "
             << router << ", projector " << projector << ", backbone " << backbone_changed << "/" << backbone_total;
  out.require(backbone_changed == 0, "backbone bit-identical");
  out.require(adapters > 0 && router > 0, "stage 2 trains adapters and router");
}

void decoding(Outcome& out) {
  Rng rng(6);
  const auto& alpha = ts::alphabet();
  std::size_t violations = 0, invalid = 0, roundtrip = 0;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    for (std::uint64_t k = 1 + rng.below(24); k > 0; --k) s += alpha[rng.below(alpha.size())].symbol;
    const auto g = ts::decode(s);
    std::vector<int> used(g.atoms.size(), 0);
    for (const auto& b : g.bonds) {
      used[static_cast<std::size_t>(b.a)] += b.order;
      used[static_cast<std::size_t>(b.b)] += b.order;
    }
    for (std::size_t a = 0; a < g.atoms.size(); ++a) violations += used[a] > ts::max_valence(g.atoms[a].element);
    invalid += !g.valid() || !metrics::validity(s);
    const auto canon = ts::canonicalize(g);
    roundtrip += ts::canonicalize(ts::decode(canon)) != canon;
  }
  const double validity = 1.0 - static_cast<double>(invalid) / n;
  out.detail << n << " strings: valence violations " << violations << ", validity " << fmt(validity, 4)
             << ", canonical round-trip mismatches " << roundtrip;
  out.require(violations == 0, "no valence violations");
  out.require(invalid == 0, "validity 1.00");
  out.require(roundtrip == 0, "canonical round trip");
}

bool heatmap_schema_ok(const std::string& csv, const std::vector<std::string>& labels) {
  std::istringstream in(csv);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  if (rows.size() != labels.size() + 1) return false;
  std::vector<std::string> header{"model"};
  header.insert(header.end(), labels.begin(), labels.end());
  if (rows[0] != header) return false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& r = rows[i + 1];
    if (r.size() != labels.size() + 1 || r[0] != labels[i]) return false;
    for (std::size_t j = 1; j < r.size(); ++j) {
      const auto v = metrics::parse_number(r[j]);
      if (!v || *v < 0 || *v > 1) return false;
    }
  }
  return true;
}

void mutual_knn(Outcome& out) {
  tf::Tokenizer tok;
  const auto corpus = tf::generate_corpus(fixture::small_spec(4), 13);
  std::vector<tf::InstructionSample> train, probe;
  for (const auto& s : corpus) {
    if (s.subtask == "align") continue;
    (s.split == tf::Split::Test ? probe : train).push_back(s);
  }
  probe.resize(std::min<std::size_t>(probe.size(), 24));
  auto backbone = OmniModel::for_tokenizer(fixture::tiny_config(9), tok);
  TrainConfig pre;
  pre.max_steps = 150;
  pre.batch_size = 8;
  pre.lr = 3e-3;
  pretrain(backbone, train, tok, pre);

  TrainConfig c;
  c.max_steps = 120;
  c.batch_size = 8;
  c.lr = 5e-3;
  c.early_stop_patience = 0;
  const std::vector<std::string> subtasks{"edit", "atoms", "grow", "caption"};
  const auto ladder = alignment::default_ladder(subtasks);
  const auto rep = alignment::task_scaling_study(backbone, ladder, train, probe, tok, c, 5);
  const std::size_t m = rep.labels.size();
  double asym = 0, lo = 1, hi = 0, diag = 1;
  for (std::size_t i = 0; i < m; ++i) {
    diag = std::min(diag, rep.at(i, i));
    for (std::size_t j = 0; j < m; ++j) {
      asym = std::max(asym, std::abs(rep.at(i, j) - rep.at(j, i)));
      lo = std::min(lo, rep.at(i, j));
      hi = std::max(hi, rep.at(i, j));
    }
  }
  const auto csv = alignment::heatmap_csv(rep);
  out.detail << m << " models, k=" << rep.k << ", diag min " << fmt(diag) << ", max asym " << fmt(asym, 3)
             << ", range [" << fmt(lo, 4) << ", " << fmt(hi, 4) << "]";
  out.require(m == 3, "three models");
  out.require(diag == 1.0, "self score 1");
  out.require(asym <= 1e-12, "symmetry");
  out.require(lo >= 0 && hi <= 1, "bounds");
  out.require(heatmap_schema_ok(csv, rep.labels), "heatmap CSV schema");
}

void end_to_end(Outcome& out) {
  using clock = std::chrono::steady_clock;
  const RunConfig cfg = RunConfig::defaults();
  const auto t0 = clock::now();
  const auto splits = build_splits(cfg);
  auto first = run_training(cfg, splits, TrainRunOptions{});
  const auto recs = run_predictions(first.model, cfg, splits.test);
  const double elapsed = std::chrono::duration<double>(clock::now() - t0).count();

  const auto rows = metrics::summarize(recs);
  double edit_em = -1, atoms_mae = 1e9, valid_sum = 0, valid_n = 0;
  for (const auto& r : rows) {
    if (r.subtask == "edit") edit_em = r.exact;
    if (r.subtask == "atoms" && r.regression.mae) atoms_mae = *r.regression.mae;
    if (r.molecule) {
      valid_sum += r.validity * static_cast<double>(r.count);
      valid_n += static_cast<double>(r.count);
    }
  }
  const double validity = valid_n > 0 ? valid_sum / valid_n : 0;
  std::size_t n_samples = 0;
  for (const auto& [k, v] : cfg.data.counts) n_samples += k == "align" ? 0 : static_cast<std::size_t>(v);

  const auto t1 = clock::now();
  const auto second = run_training(cfg, splits, TrainRunOptions{});
  const double rerun = std::chrono::duration<double>(clock::now() - t1).count();
  const bool identical = first.final_checkpoint == second.final_checkpoint;

  out.detail << n_samples << " samples; edit EM " << fmt(edit_em, 4) << ", atoms MAE " << fmt(atoms_mae, 4)
             << ", validity " << fmt(validity, 4) << ", run+eval " << fmt(elapsed, 4) << " s, rerun "
             << fmt(rerun, 4) << " s, checkpoints " << (identical ? "identical" : "DIFFER");
  out.require(edit_em >= 0.90, "edit exact match >= 0.90");
  out.require(atoms_mae <= 0.5, "atoms MAE <= 0.5");
  out.require(validity >= 0.99, "validity >= 0.99");
  out.require(elapsed <= 900, "run within 15 min");
  out.require(identical, "identical checkpoints");
}

void metric_oracles(Outcome& out) {
  Rng rng(9);
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string a, b;
    for (std::uint64_t k = rng.below(20); k > 0; --k) a += static_cast<char>('a' + rng.below(5));
    for (std::uint64_t k = rng.below(20); k > 0; --k) b += static_cast<char>('a' + rng.below(5));
    mismatches += metrics::levenshtein(a, b, false) != oracle::levenshtein(a, b);
  }
  const double b2 = metrics::bleu("a b c", "a b c d", 2, false);
  const std::vector<double> p{1, 2}, r{2, 4};
  const auto rep = metrics::regression_metrics(p, r);
  out.detail << "levenshtein mismatches " << mismatches << "/1000, bleu2 " << fmt(b2, 10) << " (want "
             << fmt(std::exp(-1.0 / 3.0), 10) << "), r2 " << (rep.r2 ? fmt(*rep.r2, 17) : "NA");
  out.require(mismatches == 0, "levenshtein oracle");
  out.require(std::abs(b2 - std::exp(-1.0 / 3.0)) <= 1e-4, "bleu2 hand case");
  out.require(rep.r2 && *rep.r2 == -1.5, "r2 hand case");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "gal-gamma-range", 1, gamma_range},
      {2, "finite-difference-gradients", 30, gradient_checks},
      {3, "moge-init-identity", 5, moge_identity},
      {4, "aux-loss", 5, aux_loss_checks},
      {5, "freezing", 60, freezing},
      {6, "decoding-validity", 10, decoding},
      {7, "mutual-knn", 1200, mutual_knn},
      {8, "end-to-end", 1e9, end_to_end},  // time bound checked inside
      {9, "metric-oracles", 10, metric_oracles},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::stoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (s > c.budget_s) o.require(false, "time budget " + fmt(c.budget_s) + " s");
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << " (" << fmt(s, 4) << " s): "
              << o.detail.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
