#pragma once

// Toy decoder-only transformer with GAL-wrapped projections, Mixture-of-GAL-
// Experts FFNs in the upper layers and graph-token prefix injection.
//
// Every row gets an absolute position embedding plus a segment position
// embedding whose counter restarts after each structural token of the chat
// template, so the k-th token of a response and of the molecule it is
// derived from share a segment id.
//
// Layer l (1-based) computes
//   h' = h + MHA(norm(h))                    (q, k, v, o each GAL-wrapped)
//   h  = h' + FFN(norm(h'))                  for l <  l_moge (GAL-wrapped)
//   h  = h' + MoGE(norm(h'))                 for l >= l_moge
// with l_moge = ceil(l_moge_fraction * L).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omnimol/gal.hpp"
#include "omnimol/moge.hpp"
#include "omnimol/taskforge.hpp"
#include "omnimol/tensor.hpp"
#include "omnimol/tselfies.hpp"

namespace omnimol {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;  // taken from the tokenizer
  std::size_t max_seq = 128;
  std::size_t gal_rank = 8;
  std::size_t n_routed = 2;
  std::size_t top_e = 2;
  double l_moge_fraction = 0.25;
  std::size_t graph_dim = 16;
  std::size_t graph_tokens = 4;
  std::uint64_t seed = 0;

  /// First (1-based) layer that carries a MoGE block.
  std::size_t l_moge() const;
  std::size_t moge_layer_count() const { return n_layers - l_moge() + 1; }
  /// Throws UsageError on inconsistent values.
  void validate() const;
};

enum class ParamGroup { Backbone, Adapter, Router, Projector };
std::string to_string(ParamGroup g);

/// Which parameter groups receive gradients.
enum class TrainMode { Frozen, Pretrain, Stage1, Stage2 };
std::string to_string(TrainMode m);

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

struct GraphFeatures {
  Tensor values;  // [graph_tokens x graph_dim]
  std::uint64_t digest = 0;
};

/// Histogram-based stand-in for a graph encoder: element counts, degree
/// histogram, ring and atom counts, pushed through a fixed random
/// projection (seeded from the config) with a per-row phase.
GraphFeatures toy_graph_encode(const tselfies::MoleculeGraph& g, const ModelConfig& cfg);

struct AssembledInputs {
  std::size_t batch = 0;
  std::size_t seq = 0;
  Tensor embedded;                 // [batch*seq x d_model], positions added
  std::vector<TokenId> ids;        // -1 at graph rows and padding
  std::vector<double> attn_mask;
  std::vector<double> label_mask;
};

struct ForwardResult {
  Tensor logits;                        // [batch*seq x vocab]
  std::vector<AuxLossStats> aux;        // one per MoGE layer
  std::vector<Tensor> layer_outputs;    // filled when requested
};

struct GenerateResult {
  std::vector<TokenId> tokens;  // generated ids, without the final eot
  bool finished = false;        // false when the budget ran out first
};

class OmniModel {
 public:
  /// Positions restart at every id in `segment_breaks`; with none given
  /// they are absolute.
  OmniModel(const ModelConfig& cfg, TokenId pad_id, TokenId graph_id,
            std::vector<TokenId> segment_breaks = {});
  /// Model wired to a tokenizer: vocab size, pad, graph and break ids.
  static OmniModel for_tokenizer(ModelConfig cfg, const taskforge::Tokenizer& tokenizer);

  OmniModel(const OmniModel&) = delete;
  OmniModel& operator=(const OmniModel&) = delete;
  OmniModel(OmniModel&&) = default;
  OmniModel& operator=(OmniModel&&) = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  TokenId pad_id() const noexcept { return pad_id_; }
  TokenId graph_id() const noexcept { return graph_id_; }
  const std::vector<TokenId>& segment_breaks() const noexcept { return breaks_; }

  std::vector<NamedParam> named_parameters() const;
  std::vector<Tensor> trainable_parameters() const;
  void set_mode(TrainMode mode);
  TrainMode mode() const noexcept { return mode_; }
  /// Throws UsageError if the frozen/trainable split is not a partition.
  void check_partition() const;

  /// Copies every parameter value from a model with the same layout.
  void copy_parameters_from(const OmniModel& other);

  /// Clips the scaling scalars of every adapter.
  void clip_adapters();
  /// γ of every adapter, grouped by layer.
  std::vector<std::vector<double>> adapter_scales() const;

  Tensor project(const Tensor& graph_features) const;
  AssembledInputs assemble_inputs(const taskforge::Batch& batch) const;
  ForwardResult forward(const AssembledInputs& in, bool keep_layer_outputs = false);
  ForwardResult forward(const taskforge::Batch& batch, bool keep_layer_outputs = false) {
    return forward(assemble_inputs(batch), keep_layer_outputs);
  }

  /// Greedy decoding from prompt ids (optionally with a graph). Throws
  /// UsageError when prompt + budget exceeds max_seq.
  GenerateResult generate(std::span<const TokenId> prompt,
                          const std::optional<tselfies::MoleculeGraph>& graph,
                          std::size_t max_new, TokenId eot_id);

  // Direct access for tests and the alignment probe.
  struct Attention {
    Tensor norm, wq, wk, wv, wo;
    GalAdapter q, k, v, o;
  };
  struct Layer {
    Attention attn;
    Tensor ffn_norm;
    FfnWeights ffn;
    bool uses_moge = false;
    GalAdapter ffn_up, ffn_down;  // dense layers only
    MogeLayer moge;               // MoGE layers only
  };
  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  Tensor& token_embedding() noexcept { return tok_emb_; }
  Tensor& projector_weight() noexcept { return proj_w_; }
  Tensor& projector_bias() noexcept { return proj_b_; }

 private:
  ModelConfig cfg_;
  TokenId pad_id_;
  TokenId graph_id_;
  std::vector<TokenId> breaks_;
  std::vector<std::uint8_t> is_break_;
  TrainMode mode_ = TrainMode::Frozen;
  Tensor tok_emb_, pos_emb_, seg_emb_, final_norm_;
  Tensor proj_w_, proj_b_;
  std::vector<Layer> layers_;
};

}  // namespace omnimol
