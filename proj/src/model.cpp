#include "omnimol/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "omnimol/errors.hpp"

namespace omnimol {

namespace ts = omnimol::tselfies;

namespace {

constexpr std::size_t kHistogramDim = 12;

Tensor normal_tensor(Shape shape, double std, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.mutable_data()) x = std * rng.normal();
  return t;
}

void add_adapter(std::vector<NamedParam>& out, const std::string& prefix, const GalAdapter& g) {
  out.push_back({prefix + ".A", g.a(), ParamGroup::Adapter});
  out.push_back({prefix + ".B", g.b(), ParamGroup::Adapter});
  out.push_back({prefix + ".alpha", g.alpha(), ParamGroup::Adapter});
  out.push_back({prefix + ".p", g.p(), ParamGroup::Adapter});
  out.push_back({prefix + ".beta", g.beta(), ParamGroup::Adapter});
}

bool group_trainable(ParamGroup g, TrainMode m) {
  switch (m) {
    case TrainMode::Frozen: return false;
    case TrainMode::Pretrain: return g == ParamGroup::Backbone;
    case TrainMode::Stage1: return g == ParamGroup::Projector;
    case TrainMode::Stage2: return g != ParamGroup::Backbone;
  }
  return false;
}

std::array<double, kHistogramDim> graph_histogram(const ts::MoleculeGraph& g) {
  std::array<double, kHistogramDim> h{};
  for (std::size_t i = 0; i < g.atoms.size(); ++i) {
    h[static_cast<std::size_t>(g.atoms[i].element)] += 1.0;
    const int deg = std::min(g.degree(static_cast<int>(i)), 4);
    h[4 + static_cast<std::size_t>(deg)] += 1.0;
  }
  const ts::Descriptor d = ts::descriptor(g);
  h[9] = d.ring_count;
  h[10] = d.atom_count;
  for (const auto& b : g.bonds) h[11] += b.order;
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::size_t ModelConfig::l_moge() const {
  const double raw = std::ceil(l_moge_fraction * static_cast<double>(n_layers) - 1e-9);
  return static_cast<std::size_t>(std::max(1.0, raw));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw UsageError("model config: " + m); };
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) fail("sizes must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (vocab_size == 0) fail("vocab_size must be set from the tokenizer");
  if (max_seq == 0) fail("max_seq must be positive");
  if (gal_rank == 0 || gal_rank > std::min(d_model, d_ff)) fail("gal_rank out of range");
  if (n_routed == 0 || top_e == 0 || top_e > n_routed) fail("need n_routed >= top_e >= 1");
  if (!(l_moge_fraction > 0.0) || l_moge_fraction > 1.0) fail("l_moge_fraction must be in (0, 1]");
  if (graph_dim == 0 || graph_tokens == 0) fail("graph sizes must be positive");
  const std::size_t l = l_moge();
  if (l < 1 || l > n_layers) fail("l_moge outside [1, L]");
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Adapter: return "adapter";
    case ParamGroup::Router: return "router";
    case ParamGroup::Projector: return "projector";
  }
  return "?";
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Frozen: return "frozen";
    case TrainMode::Pretrain: return "pretrain";
    case TrainMode::Stage1: return "stage1";
    case TrainMode::Stage2: return "stage2";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph side

GraphFeatures toy_graph_encode(const ts::MoleculeGraph& g, const ModelConfig& cfg) {
  const auto hist = graph_histogram(g);
  Rng rng(cfg.seed ^ 0x67726170685F656EULL);
  std::vector<double> proj(cfg.graph_dim * kHistogramDim);
  for (double& x : proj) x = rng.uniform(-1.0, 1.0);
  std::array<double, kHistogramDim> scaled{};
  for (std::size_t k = 0; k < kHistogramDim; ++k) scaled[k] = std::log1p(hist[k]);

  std::vector<double> values(cfg.graph_tokens * cfg.graph_dim);
  for (std::size_t k = 0; k < cfg.graph_dim; ++k) {
    double z = 0.0;
    for (std::size_t h = 0; h < kHistogramDim; ++h) z += proj[k * kHistogramDim + h] * scaled[h];
    for (std::size_t i = 0; i < cfg.graph_tokens; ++i) {
      const double phase = 0.5 * std::sin(static_cast<double>((i + 1) * (k + 1)));
      values[i * cfg.graph_dim + k] = std::tanh(z + phase);
    }
  }
  GraphFeatures f;
  f.values = Tensor::from_data({cfg.graph_tokens, cfg.graph_dim}, std::move(values));
  std::uint64_t digest = 0xCBF29CE484222325ULL;
  for (double x : hist) {
    digest ^= static_cast<std::uint64_t>(x);
    digest *= 0x100000001B3ULL;
  }
  f.digest = digest;
  return f;
}

// ---------------------------------------------------------------------------
// Construction

OmniModel::OmniModel(const ModelConfig& cfg, TokenId pad_id, TokenId graph_id,
                     std::vector<TokenId> segment_breaks)
    : cfg_(cfg), pad_id_(pad_id), graph_id_(graph_id), breaks_(std::move(segment_breaks)) {
  cfg_.validate();
  is_break_.assign(cfg_.vocab_size, 0);
  for (TokenId id : breaks_) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw UsageError("OmniModel: segment break id " + std::to_string(id) + " outside the vocabulary");
    }
    is_break_[static_cast<std::size_t>(id)] = 1;
  }
  Rng root(cfg_.seed);
  Rng backbone_rng = root.split();
  Rng adapter_rng = root.split();
  Rng projector_rng = root.split();

  const std::size_t d = cfg_.d_model;
  const double std_in = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  tok_emb_ = normal_tensor({cfg_.vocab_size, d}, std_in, backbone_rng);
  pos_emb_ = normal_tensor({cfg_.max_seq, d}, std_in, backbone_rng);
  seg_emb_ = normal_tensor({cfg_.max_seq, d}, std_in, backbone_rng);
  final_norm_ = Tensor::full({d}, 1.0);

  const std::size_t l_moge = cfg_.l_moge();
  for (std::size_t l = 1; l <= cfg_.n_layers; ++l) {
    Layer layer;
    layer.attn.norm = Tensor::full({d}, 1.0);
    layer.attn.wq = normal_tensor({d, d}, std_in, backbone_rng);
    layer.attn.wk = normal_tensor({d, d}, std_in, backbone_rng);
    layer.attn.wv = normal_tensor({d, d}, std_in, backbone_rng);
    layer.attn.wo = normal_tensor({d, d}, std_out, backbone_rng);
    layer.ffn_norm = Tensor::full({d}, 1.0);
    layer.ffn.up = normal_tensor({cfg_.d_ff, d}, std_in, backbone_rng);
    layer.ffn.down = normal_tensor({d, cfg_.d_ff}, std_out, backbone_rng);

    layer.attn.q = GalAdapter(d, d, cfg_.gal_rank, adapter_rng);
    layer.attn.k = GalAdapter(d, d, cfg_.gal_rank, adapter_rng);
    layer.attn.v = GalAdapter(d, d, cfg_.gal_rank, adapter_rng);
    layer.attn.o = GalAdapter(d, d, cfg_.gal_rank, adapter_rng);
    layer.uses_moge = l >= l_moge;
    if (layer.uses_moge) {
      layer.moge = MogeLayer::upcycle(layer.ffn, cfg_.n_routed, cfg_.top_e, cfg_.gal_rank, adapter_rng);
    } else {
      layer.ffn_up = GalAdapter(d, cfg_.d_ff, cfg_.gal_rank, adapter_rng);
      layer.ffn_down = GalAdapter(cfg_.d_ff, d, cfg_.gal_rank, adapter_rng);
    }
    layers_.push_back(std::move(layer));
  }

  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.graph_dim));
  proj_w_ = Tensor::uniform({d, cfg_.graph_dim}, -bound, bound, projector_rng);
  proj_b_ = Tensor::zeros({d});

  const auto moge_count = static_cast<std::size_t>(
      std::count_if(layers_.begin(), layers_.end(), [](const Layer& x) { return x.uses_moge; }));
  if (moge_count != cfg_.moge_layer_count()) {
    throw UsageError("OmniModel: MoGE layer count does not match the configured layout");
  }
  set_mode(TrainMode::Frozen);
}

OmniModel OmniModel::for_tokenizer(ModelConfig cfg, const taskforge::Tokenizer& tokenizer) {
  cfg.vocab_size = tokenizer.size();
  return OmniModel(cfg, tokenizer.pad_id(), tokenizer.graph_id(), tokenizer.structural_ids());
}

std::vector<NamedParam> OmniModel::named_parameters() const {
  std::vector<NamedParam> out;
  out.push_back({"tok_emb", tok_emb_, ParamGroup::Backbone});
  out.push_back({"pos_emb", pos_emb_, ParamGroup::Backbone});
  out.push_back({"seg_emb", seg_emb_, ParamGroup::Backbone});
  out.push_back({"final_norm", final_norm_, ParamGroup::Backbone});
  out.push_back({"projector.w", proj_w_, ParamGroup::Projector});
  out.push_back({"projector.b", proj_b_, ParamGroup::Projector});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", layer.attn.norm, ParamGroup::Backbone});
    out.push_back({p + "wq", layer.attn.wq, ParamGroup::Backbone});
    out.push_back({p + "wk", layer.attn.wk, ParamGroup::Backbone});
    out.push_back({p + "wv", layer.attn.wv, ParamGroup::Backbone});
    out.push_back({p + "wo", layer.attn.wo, ParamGroup::Backbone});
    add_adapter(out, p + "gal_q", layer.attn.q);
    add_adapter(out, p + "gal_k", layer.attn.k);
    add_adapter(out, p + "gal_v", layer.attn.v);
    add_adapter(out, p + "gal_o", layer.attn.o);
    out.push_back({p + "ffn_norm", layer.ffn_norm, ParamGroup::Backbone});
    out.push_back({p + "ffn.up", layer.ffn.up, ParamGroup::Backbone});
    out.push_back({p + "ffn.down", layer.ffn.down, ParamGroup::Backbone});
    if (layer.uses_moge) {
      out.push_back({p + "moge.router", layer.moge.router(), ParamGroup::Router});
      add_adapter(out, p + "moge.shared.gal_up", layer.moge.shared_expert().gal_up);
      add_adapter(out, p + "moge.shared.gal_down", layer.moge.shared_expert().gal_down);
      for (std::size_t j = 0; j < layer.moge.n_routed(); ++j) {
        const auto& e = layer.moge.routed_experts()[j];
        const std::string ep = p + "moge.expert" + std::to_string(j);
        add_adapter(out, ep + ".gal_up", e.gal_up);
        add_adapter(out, ep + ".gal_down", e.gal_down);
      }
    } else {
      add_adapter(out, p + "gal_up", layer.ffn_up);
      add_adapter(out, p + "gal_down", layer.ffn_down);
    }
  }
  return out;
}

std::vector<Tensor> OmniModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (auto& np : named_parameters()) {
    if (np.tensor.requires_grad()) out.push_back(np.tensor);
  }
  return out;
}

void OmniModel::set_mode(TrainMode mode) {
  mode_ = mode;
  for (auto& np : named_parameters()) {
    Tensor t = np.tensor;
    t.set_requires_grad(group_trainable(np.group, mode));
  }
  check_partition();
}

void OmniModel::check_partition() const {
  const auto params = named_parameters();
  std::set<std::string> names;
  std::set<const detail::Node*> nodes;
  std::size_t trainable = 0, frozen = 0;
  for (const auto& np : params) {
    if (!names.insert(np.name).second) throw UsageError("duplicate parameter name " + np.name);
    if (!nodes.insert(np.tensor.node().get()).second) {
      throw UsageError("parameter " + np.name + " is registered twice");
    }
    const bool on = np.tensor.requires_grad();
    if (on != group_trainable(np.group, mode_)) {
      throw UsageError("parameter " + np.name + " violates the " + to_string(mode_) + " freezing contract");
    }
    (on ? trainable : frozen) += 1;
  }
  if (trainable + frozen != params.size()) throw UsageError("parameter partition is not exhaustive");
}

void OmniModel::copy_parameters_from(const OmniModel& other) {
  const auto src = other.named_parameters();
  auto dst = named_parameters();
  if (src.size() != dst.size()) throw DimensionError("copy_parameters_from: layouts differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw DimensionError("copy_parameters_from: parameter " + dst[i].name + " differs");
    }
    auto out = dst[i].tensor.mutable_data();
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), out.begin());
  }
}

void OmniModel::clip_adapters() {
  for (auto& layer : layers_) {
    for (GalAdapter* g : {&layer.attn.q, &layer.attn.k, &layer.attn.v, &layer.attn.o}) g->clip();
    if (layer.uses_moge) {
      layer.moge.shared_expert().gal_up.clip();
      layer.moge.shared_expert().gal_down.clip();
      for (auto& e : layer.moge.routed_experts()) {
        e.gal_up.clip();
        e.gal_down.clip();
      }
    } else {
      layer.ffn_up.clip();
      layer.ffn_down.clip();
    }
  }
}

std::vector<std::vector<double>> OmniModel::adapter_scales() const {
  std::vector<std::vector<double>> out;
  for (const auto& layer : layers_) {
    std::vector<double> g;
    for (const GalAdapter* a : {&layer.attn.q, &layer.attn.k, &layer.attn.v, &layer.attn.o}) {
      g.push_back(a->scaling_value());
    }
    if (layer.uses_moge) {
      g.push_back(layer.moge.shared_expert().gal_up.scaling_value());
      g.push_back(layer.moge.shared_expert().gal_down.scaling_value());
      for (const auto& e : layer.moge.routed_experts()) {
        g.push_back(e.gal_up.scaling_value());
        g.push_back(e.gal_down.scaling_value());
      }
    } else {
      g.push_back(layer.ffn_up.scaling_value());
      g.push_back(layer.ffn_down.scaling_value());
    }
    out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward

Tensor OmniModel::project(const Tensor& graph_features) const {
  if (graph_features.cols() != cfg_.graph_dim) {
    throw DimensionError("project: expected graph features with " + std::to_string(cfg_.graph_dim) +
                         " columns, got " + shape_str(graph_features.shape()));
  }
  return add_row(matmul_nt(graph_features, proj_w_), proj_b_);
}

AssembledInputs OmniModel::assemble_inputs(const taskforge::Batch& batch) const {
  const std::size_t B = batch.batch_size, T = batch.seq_len, n = cfg_.graph_tokens;
  if (B == 0 || T == 0) throw UsageError("assemble_inputs: empty batch");

  std::vector<Tensor> sources{embedding(tok_emb_, batch.input_ids)};
  std::vector<Tensor> features;
  std::vector<std::size_t> graph_slot(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    if (!batch.graph_present[b]) continue;
    if (!batch.graphs[b]) throw DataError("assemble_inputs: row flagged with a graph but none given");
    graph_slot[b] = features.size();
    features.push_back(toy_graph_encode(*batch.graphs[b], cfg_).values);
  }
  const std::size_t graph_base = B * T;
  if (!features.empty()) sources.push_back(project(concat_rows(features)));
  const TokenId pad = pad_id_;
  sources.push_back(embedding(tok_emb_, std::span<const TokenId>(&pad, 1)));
  const std::size_t pad_row = graph_base + features.size() * n;
  const Tensor combined = concat_rows(sources);

  std::vector<std::size_t> lengths(B), placeholder(B, T);
  std::size_t seq = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = batch.row_length(b);
    for (std::size_t t = 0; t < len; ++t) {
      if (batch.input_ids[b * T + t] == graph_id_) {
        placeholder[b] = t;
        break;
      }
    }
    if (placeholder[b] < T && !batch.graph_present[b]) {
      throw DataError("assemble_inputs: graph placeholder in row " + std::to_string(b) +
                      " without a graph");
    }
    if (placeholder[b] == T && batch.graph_present[b]) placeholder[b] = T + 1;  // graph unused
    lengths[b] = len + (placeholder[b] < T ? n - 1 : 0);
    seq = std::max(seq, lengths[b]);
  }
  if (seq > cfg_.max_seq) {
    throw InputError("sequence of " + std::to_string(seq) + " positions exceeds max_seq " +
                     std::to_string(cfg_.max_seq));
  }

  AssembledInputs out;
  out.batch = B;
  out.seq = seq;
  out.ids.assign(B * seq, -1);
  out.attn_mask.assign(B * seq, 0.0);
  out.label_mask.assign(B * seq, 0.0);
  std::vector<std::size_t> index(B * seq, pad_row), positions(B * seq), segpos(B * seq);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t tp = 0;
    const std::size_t len = batch.row_length(b);
    std::size_t pos = 0;
    for (std::size_t t = 0; t < len; ++t) {
      if (t == placeholder[b]) {
        for (std::size_t i = 0; i < n; ++i, ++tp) {
          index[b * seq + tp] = graph_base + graph_slot[b] * n + i;
          out.attn_mask[b * seq + tp] = 1.0;
          segpos[b * seq + tp] = tp == 0 ? 0 : ++pos;
        }
        continue;
      }
      const TokenId id = batch.input_ids[b * T + t];
      index[b * seq + tp] = b * T + t;
      out.ids[b * seq + tp] = id;
      out.attn_mask[b * seq + tp] = 1.0;
      out.label_mask[b * seq + tp] = batch.label_mask[b * T + t];
      const bool reset = tp == 0 || (id >= 0 && static_cast<std::size_t>(id) < is_break_.size() &&
                                     is_break_[static_cast<std::size_t>(id)]);
      pos = reset ? 0 : pos + 1;
      segpos[b * seq + tp] = pos;
      ++tp;
    }
    for (; tp < seq; ++tp) segpos[b * seq + tp] = ++pos < cfg_.max_seq ? pos : cfg_.max_seq - 1;
    for (std::size_t t = 0; t < seq; ++t) positions[b * seq + t] = t;
  }
  out.embedded = add(add(gather_rows(combined, index), gather_rows(pos_emb_, positions)),
                     gather_rows(seg_emb_, segpos));
  return out;
}

ForwardResult OmniModel::forward(const AssembledInputs& in, bool keep_layer_outputs) {
  const std::size_t B = in.batch, T = in.seq;
  ForwardResult res;
  Tensor h = in.embedded;
  for (auto& layer : layers_) {
    const Tensor x = rmsnorm(h, layer.attn.norm);
    const Tensor q = layer.attn.q.forward(x, matmul_nt(x, layer.attn.wq));
    const Tensor k = layer.attn.k.forward(x, matmul_nt(x, layer.attn.wk));
    const Tensor v = layer.attn.v.forward(x, matmul_nt(x, layer.attn.wv));
    const Tensor a = causal_attention(q, k, v, B, T, cfg_.n_heads, in.attn_mask);
    h = add(h, layer.attn.o.forward(a, matmul_nt(a, layer.attn.wo)));

    const Tensor y = rmsnorm(h, layer.ffn_norm);
    Tensor f;
    if (layer.uses_moge) {
      f = layer.moge.forward(y, B, T, in.attn_mask);
      res.aux.push_back(layer.moge.last_aux_stats());
    } else {
      const Tensor act = silu(layer.ffn_up.forward(y, matmul_nt(y, layer.ffn.up)));
      f = layer.ffn_down.forward(act, matmul_nt(act, layer.ffn.down));
    }
    h = add(h, f);
    if (keep_layer_outputs) res.layer_outputs.push_back(h);
  }
  res.logits = matmul_nt(rmsnorm(h, final_norm_), tok_emb_);
  return res;
}

GenerateResult OmniModel::generate(std::span<const TokenId> prompt,
                                   const std::optional<ts::MoleculeGraph>& graph,
                                   std::size_t max_new, TokenId eot_id) {
  const bool has_placeholder = std::find(prompt.begin(), prompt.end(), graph_id_) != prompt.end();
  const std::size_t spliced = prompt.size() + (graph && has_placeholder ? cfg_.graph_tokens - 1 : 0);
  if (prompt.empty() || spliced + max_new > cfg_.max_seq) {
    throw UsageError("generate: prompt of " + std::to_string(spliced) + " positions plus " +
                     std::to_string(max_new) + " new tokens exceeds max_seq " +
                     std::to_string(cfg_.max_seq));
  }
  NoGradGuard no_grad;
  GenerateResult out;
  std::vector<TokenId> ids(prompt.begin(), prompt.end());
  const std::size_t vocab = cfg_.vocab_size;
  for (std::size_t step = 0; step < max_new; ++step) {
    taskforge::Batch b;
    b.batch_size = 1;
    b.seq_len = ids.size();
    b.input_ids = ids;
    b.attn_mask.assign(ids.size(), 1.0);
    b.label_mask.assign(ids.size(), 0.0);
    b.graphs = {graph};
    b.graph_present = {static_cast<std::uint8_t>(graph.has_value())};
    b.truncated = {0};
    const ForwardResult r = forward(b);
    const auto logits = r.logits.data();
    const std::size_t last = r.logits.rows() - 1;
    const double* row = logits.data() + last * vocab;
    const auto best = static_cast<TokenId>(std::max_element(row, row + vocab) - row);
    if (best == eot_id) {
      out.finished = true;
      return out;
    }
    out.tokens.push_back(best);
    ids.push_back(best);
  }
  return out;
}

}  // namespace omnimol
