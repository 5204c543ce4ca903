#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Ops record their inputs
// and an adjoint closure on the output node whenever grad mode is on and at
// least one input requires grad; `backward()` walks that graph in reverse
// topological order and then releases it. Leaves with requires_grad=false
// never receive a gradient buffer, which is what the model relies on to
// keep frozen weights frozen.
//
// Activations are 2-D [rows x cols] almost everywhere; the few ops that
// accept an axis work on arbitrary rank.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "omnimol/rng.hpp"

namespace omnimol {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty == absent
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;
  /// Product of all extents but the last (1 for a scalar).
  std::size_t rows() const;
  /// Last extent (1 for a scalar).
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// New leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;
  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  // Internal: used by ops.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar loss into every reachable
/// leaf that requires grad, then releases the recorded graph. A loss that
/// does not depend on any trainable leaf is a no-op.
void backward(const Tensor& loss);

bool grad_enabled() noexcept;

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept;
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ for a [m x k], b [n x k]; the natural form for x·Wᵀ.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Broadcasts a [n] bias over the rows of a [m x n] tensor.
Tensor add_row(const Tensor& a, const Tensor& bias);
/// Multiplies every element by a single-element tensor.
Tensor mul_scalar(const Tensor& a, const Tensor& s);

Tensor exp(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softmax(const Tensor& a, int axis = -1);
/// x / sqrt(mean(x²) + eps) along `axis`, times `weight` when defined.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, int axis = -1, double eps = 1e-6);

Tensor embedding(const Tensor& table, std::span<const TokenId> ids);
/// Mean token cross entropy over rows whose mask is non-zero. Targets are
/// only range-checked on those rows.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     std::span<const double> mask);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> index);
Tensor concat_rows(std::span<const Tensor> parts);
/// x [m x d] scaled row-wise by column `col` of g [m x n].
Tensor mul_col(const Tensor& x, const Tensor& g, std::size_t col);
/// Dense [m x n] gate matrix: the selected scores of each row (indices is
/// m x e, row-major) divided by their row sum; zero elsewhere.
Tensor topk_gates(const Tensor& scores, std::span<const std::size_t> indices, std::size_t e);

/// Multi-head scaled dot-product attention over a [batch*seq x d] layout
/// with a causal mask and a key padding mask (non-zero == real token).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq, std::size_t heads, std::span<const double> key_mask);

}  // namespace omnimol
