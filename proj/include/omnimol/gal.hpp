#pragma once

#include <cstddef>

#include "omnimol/rng.hpp"
#include "omnimol/tensor.hpp"

namespace omnimol {

/// Initial values and clip half-widths of the learnable scaling factor.
struct GalConstants {
  double alpha0 = 16.0;
  double p0 = 0.5;
  double beta0 = 0.0;
  double eps = 0.05;    // alpha and beta half-width
  double delta = 0.01;  // p half-width
};

/// Gradient Adaptive LoRA: a low-rank update ΔW = γ·B·A whose scale
/// γ = α / r^p + β is itself learnable. α, p and β are projected back into
/// boxes around their initial values after every optimizer step, which
/// bounds how far γ (and with it the gradient amplitude reaching A and B)
/// can drift.
class GalAdapter {
 public:
  GalAdapter() = default;
  /// A ~ U(-1/√d_in, 1/√d_in), B = 0. Throws UsageError unless
  /// 1 <= rank <= min(d_in, d_out).
  GalAdapter(std::size_t d_in, std::size_t d_out, std::size_t rank, Rng& rng,
             GalConstants constants = {});

  std::size_t rank() const noexcept { return rank_; }
  std::size_t d_in() const noexcept { return d_in_; }
  std::size_t d_out() const noexcept { return d_out_; }
  const GalConstants& constants() const noexcept { return constants_; }

  Tensor& a() noexcept { return a_; }
  Tensor& b() noexcept { return b_; }
  Tensor& alpha() noexcept { return alpha_; }
  Tensor& p() noexcept { return p_; }
  Tensor& beta() noexcept { return beta_; }
  const Tensor& a() const noexcept { return a_; }
  const Tensor& b() const noexcept { return b_; }
  const Tensor& alpha() const noexcept { return alpha_; }
  const Tensor& p() const noexcept { return p_; }
  const Tensor& beta() const noexcept { return beta_; }

  /// Differentiable γ = α·exp(-p·ln r) + β.
  Tensor scaling_factor() const;
  double scaling_value() const;

  /// w0x + γ·(x·Aᵀ)·Bᵀ. `w0x` is the frozen projection of the same input.
  Tensor forward(const Tensor& x, const Tensor& w0x) const;
  /// True when forward() would return w0x untouched: nothing will be
  /// recorded for this adapter and B is still zero.
  bool is_identity() const;

  /// Projects α, p, β into their boxes. Idempotent.
  void clip();

  void set_trainable(bool on);

 private:
  std::size_t d_in_ = 0, d_out_ = 0, rank_ = 0;
  GalConstants constants_;
  Tensor a_, b_, alpha_, p_, beta_;
};

}  // namespace omnimol
