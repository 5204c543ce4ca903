#pragma once

// Mixture-of-GAL-Experts: one always-on shared expert plus N routed experts,
// every one of them the same frozen FFN made distinct only by its own pair
// of GAL adapters. Tokens pick their top-E routed experts from a softmax
// router; a sequence-level load-balancing loss discourages collapse.

#include <cstddef>
#include <span>
#include <vector>

#include "omnimol/gal.hpp"
#include "omnimol/rng.hpp"
#include "omnimol/tensor.hpp"

namespace omnimol {

/// Frozen two-matrix SiLU FFN: down · silu(up · x). The handles are shared
/// between every expert upcycled from the same layer.
struct FfnWeights {
  Tensor up;    // [d_ff x d]
  Tensor down;  // [d x d_ff]
};

Tensor ffn_forward(const FfnWeights& w, const Tensor& x);

struct Expert {
  FfnWeights base;
  GalAdapter gal_up;
  GalAdapter gal_down;

  /// `base_up` is x·upᵀ, shared by all experts of a layer.
  Tensor forward(const Tensor& x, const Tensor& base_up) const;
  Tensor forward(const Tensor& x) const;
};

struct Routing {
  std::vector<std::size_t> indices;  // [rows x top_e]
  Tensor gates;                      // [rows x n], zero where not selected
  Tensor scores;                     // [rows x n], softmax over experts
};

struct AuxLossStats {
  std::size_t batch = 0;
  std::size_t n_experts = 0;
  std::size_t top_e = 0;
  std::vector<std::size_t> selection_counts;  // [batch x n]
  Tensor mean_scores;                         // [batch x n], differentiable
  std::vector<std::size_t> tokens_per_row;
};

class MogeLayer {
 public:
  MogeLayer() = default;

  /// Builds 1 shared + n_routed experts on top of `base` with fresh
  /// zero-initialised adapters and a Kaiming-uniform router.
  static MogeLayer upcycle(const FfnWeights& base, std::size_t n_routed, std::size_t top_e,
                           std::size_t rank, Rng& rng, GalConstants constants = {});

  /// h is [batch*seq x d]; padded positions (mask 0) are routed but
  /// excluded from the statistics.
  Routing route(const Tensor& h) const;
  AuxLossStats collect_stats(const Routing& routing, std::size_t batch, std::size_t seq,
                             std::span<const double> attn_mask) const;

  /// shared(h) + Σ_selected gate·routed(h). Records the aux statistics of
  /// this call in last_aux_stats().
  Tensor forward(const Tensor& h, std::size_t batch, std::size_t seq,
                 std::span<const double> attn_mask);

  const AuxLossStats& last_aux_stats() const noexcept { return stats_; }
  const Routing& last_routing() const noexcept { return routing_; }

  std::size_t n_routed() const noexcept { return routed_.size(); }
  std::size_t top_e() const noexcept { return top_e_; }
  Tensor& router() noexcept { return router_; }
  const Tensor& router() const noexcept { return router_; }
  Expert& shared_expert() noexcept { return shared_; }
  const Expert& shared_expert() const noexcept { return shared_; }
  std::vector<Expert>& routed_experts() noexcept { return routed_; }
  const std::vector<Expert>& routed_experts() const noexcept { return routed_; }

 private:
  Tensor router_;  // [n x d]
  Expert shared_;
  std::vector<Expert> routed_;
  std::size_t top_e_ = 1;
  AuxLossStats stats_;
  Routing routing_;
};

/// (1/B) Σ_i Σ_j C_ij·s̄_ij with C_ij = N/(T_i·E)·count_ij. Counts are
/// constants; the gradient flows through s̄ only.
Tensor aux_loss(const AuxLossStats& stats);

}  // namespace omnimol
