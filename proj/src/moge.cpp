#include "omnimol/moge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "omnimol/errors.hpp"

namespace omnimol {

Tensor ffn_forward(const FfnWeights& w, const Tensor& x) {
  return matmul_nt(silu(matmul_nt(x, w.up)), w.down);
}

Tensor Expert::forward(const Tensor& x, const Tensor& base_up) const {
  const Tensor act = silu(gal_up.forward(x, base_up));
  return gal_down.forward(act, matmul_nt(act, base.down));
}

Tensor Expert::forward(const Tensor& x) const { return forward(x, matmul_nt(x, base.up)); }

MogeLayer MogeLayer::upcycle(const FfnWeights& base, std::size_t n_routed, std::size_t top_e,
                             std::size_t rank, Rng& rng, GalConstants constants) {
  if (n_routed == 0 || top_e == 0 || top_e > n_routed) {
    throw UsageError("upcycle: need n_routed >= top_e >= 1, got n_routed=" +
                     std::to_string(n_routed) + " top_e=" + std::to_string(top_e));
  }
  const std::size_t d = base.up.shape()[1];
  const std::size_t d_ff = base.up.shape()[0];
  auto make_expert = [&]() {
    Expert e;
    e.base = base;
    e.gal_up = GalAdapter(d, d_ff, rank, rng, constants);
    e.gal_down = GalAdapter(d_ff, d, rank, rng, constants);
    return e;
  };
  MogeLayer layer;
  layer.top_e_ = top_e;
  layer.shared_ = make_expert();
  for (std::size_t i = 0; i < n_routed; ++i) layer.routed_.push_back(make_expert());
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  layer.router_ = Tensor::uniform({n_routed, d}, -bound, bound, rng, true);
  return layer;
}

Routing MogeLayer::route(const Tensor& h) const {
  Routing r;
  r.scores = softmax(matmul_nt(h, router_), -1);
  const std::size_t m = h.rows(), n = routed_.size();
  const auto s = r.scores.data();
  r.indices.resize(m * top_e_);
  std::vector<std::size_t> ids(n);
  for (std::size_t row = 0; row < m; ++row) {
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(top_e_), ids.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = s[row * n + a], sb = s[row * n + b];
                        return sa != sb ? sa > sb : a < b;
                      });
    std::copy_n(ids.begin(), top_e_, r.indices.begin() + static_cast<std::ptrdiff_t>(row * top_e_));
  }
  r.gates = topk_gates(r.scores, r.indices, top_e_);
  return r;
}

AuxLossStats MogeLayer::collect_stats(const Routing& routing, std::size_t batch, std::size_t seq,
                                      std::span<const double> attn_mask) const {
  const std::size_t n = routed_.size();
  if (attn_mask.size() != batch * seq || routing.scores.rows() != batch * seq) {
    throw DimensionError("collect_stats: routing/mask do not match batch x seq");
  }
  AuxLossStats st;
  st.batch = batch;
  st.n_experts = n;
  st.top_e = top_e_;
  st.selection_counts.assign(batch * n, 0);
  st.tokens_per_row.assign(batch, 0);
  std::vector<double> pool(batch * batch * seq, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      if (attn_mask[b * seq + t] == 0.0) continue;
      ++st.tokens_per_row[b];
      for (std::size_t k = 0; k < top_e_; ++k) {
        ++st.selection_counts[b * n + routing.indices[(b * seq + t) * top_e_ + k]];
      }
    }
    const double tb = static_cast<double>(st.tokens_per_row[b]);
    if (tb == 0.0) continue;
    for (std::size_t t = 0; t < seq; ++t) {
      if (attn_mask[b * seq + t] != 0.0) pool[b * batch * seq + b * seq + t] = 1.0 / tb;
    }
  }
  st.mean_scores = matmul(Tensor::from_data({batch, batch * seq}, std::move(pool)), routing.scores);
  return st;
}

Tensor MogeLayer::forward(const Tensor& h, std::size_t batch, std::size_t seq,
                          std::span<const double> attn_mask) {
  const Tensor base_up = matmul_nt(h, shared_.base.up);
  const Tensor shared_out = shared_.forward(h, base_up);
  Tensor out = shared_out;
  routing_ = route(h);
  stats_ = collect_stats(routing_, batch, seq, attn_mask);
  const std::size_t m = h.rows();
  const bool shared_plain = shared_.gal_up.is_identity() && shared_.gal_down.is_identity();
  for (std::size_t j = 0; j < routed_.size(); ++j) {
    bool used = false;
    for (std::size_t r = 0; r < m * top_e_ && !used; ++r) used = routing_.indices[r] == j;
    if (!used) continue;
    const Expert& e = routed_[j];
    // Untouched experts compute exactly what the shared one does.
    const Tensor y = shared_plain && e.gal_up.is_identity() && e.gal_down.is_identity()
                         ? shared_out
                         : e.forward(h, base_up);
    out = add(out, mul_col(y, routing_.gates, j));
  }
  return out;
}

Tensor aux_loss(const AuxLossStats& stats) {
  const std::size_t b = stats.batch, n = stats.n_experts;
  if (!stats.mean_scores.defined() || stats.mean_scores.rows() != b ||
      stats.mean_scores.cols() != n || stats.selection_counts.size() != b * n ||
      stats.tokens_per_row.size() != b) {
    throw DimensionError("aux_loss: statistics have inconsistent shapes");
  }
  std::vector<double> c(b * n, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const double t = static_cast<double>(stats.tokens_per_row[i]);
    if (t == 0.0) continue;
    const double k = static_cast<double>(n) / (t * static_cast<double>(stats.top_e));
    for (std::size_t j = 0; j < n; ++j) {
      c[i * n + j] = k * static_cast<double>(stats.selection_counts[i * n + j]);
    }
  }
  const Tensor weights = Tensor::from_data({b, n}, std::move(c));
  return scale(sum(mul(weights, stats.mean_scores)), 1.0 / static_cast<double>(b));
}

}  // namespace omnimol
