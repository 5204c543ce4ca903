#include "omnimol/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "omnimol/errors.hpp"

namespace omnimol {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

// Wires `out` into the graph when any input requires grad.
bool record(const NodePtr& out, std::initializer_list<const Tensor*> inputs,
            std::function<void(detail::Node&)> fn) {
  if (!g_grad_enabled) return false;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->node()->requires_grad;
  if (!any) return false;
  out->requires_grad = true;
  for (const Tensor* t : inputs) out->parents.push_back(t->node());
  out->backward = std::move(fn);
  return true;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
}

void require_2d(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
  const int rank = static_cast<int>(shape.size());
  if (rank == 0) throw InputError(std::string(op) + ": scalar has no axis");
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) {
    throw InputError(std::string(op) + ": invalid axis " + std::to_string(axis) + " for rank " +
                     std::to_string(rank));
  }
  AxisSplit s{1, shape[static_cast<std::size_t>(ax)], 1};
  for (int i = 0; i < ax; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < rank; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  const std::size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_data: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  auto node = make_node({}, {value});
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.node_->value) x = rng.uniform(lo, hi);
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  if (s.empty()) return 1;
  return shape_numel(s) / s.back();
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  return s.empty() ? 1 : s.back();
}

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on a tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw UsageError("grad() on a tensor without gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return Tensor(make_node(node_->shape, node_->value));
}

// ---------------------------------------------------------------------------
// Tape

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() noexcept : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  const NodePtr& root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (detail::Node* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  auto out = make_node({m, n}, std::vector<double>(m * n));
  MapMatrix(out->value.data(), m, n).noalias() =
      ConstMapMatrix(a.data().data(), m, k) * ConstMapMatrix(b.data().data(), k, n);
  record(out, {&a, &b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMapMatrix dc(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MapMatrix(pa.ensure_grad().data(), m, k).noalias() +=
          dc * ConstMapMatrix(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MapMatrix(pb.ensure_grad().data(), k, n).noalias() +=
          ConstMapMatrix(pa.value.data(), m, k).transpose() * dc;
    }
  });
  return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "ᵀ");
  }
  auto out = make_node({m, n}, std::vector<double>(m * n));
  MapMatrix(out->value.data(), m, n).noalias() =
      ConstMapMatrix(a.data().data(), m, k) * ConstMapMatrix(b.data().data(), n, k).transpose();
  record(out, {&a, &b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMapMatrix dc(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MapMatrix(pa.ensure_grad().data(), m, k).noalias() +=
          dc * ConstMapMatrix(pb.value.data(), n, k);
    }
    if (pb.requires_grad) {
      MapMatrix(pb.ensure_grad().data(), n, k).noalias() +=
          dc.transpose() * ConstMapMatrix(pa.value.data(), m, k);
    }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] + y[i];
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a, &b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] * y[i];
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a, &b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
  return Tensor(out);
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x *= factor;
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a}, [factor](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
  return Tensor(out);
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_row");
  require_defined(bias, "add_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (bias.numel() != n || bias.ndim() != 1) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " vs rows of " +
                         shape_str(a.shape()));
  }
  std::vector<double> v(a.data().begin(), a.data().end());
  const auto bv = bias.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) v[r * n + c] += bv[c];
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a, &bias}, [m, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
    }
  });
  return Tensor(out);
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require_defined(a, "mul_scalar");
  require_defined(s, "mul_scalar");
  if (s.numel() != 1) throw DimensionError("mul_scalar: factor must hold one element");
  const double k = s.item();
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x *= k;
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a, &s}, [k](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * self.grad[i];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.value[i];
      ps.ensure_grad()[0] += acc;
    }
  });
  return Tensor(out);
}

Tensor exp(const Tensor& a) {
  require_defined(a, "exp");
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x = std::exp(x);
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
  return Tensor(out);
}

Tensor silu(const Tensor& a) {
  require_defined(a, "silu");
  const auto x = a.data();
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] / (1.0 + std::exp(-x[i]));
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-p.value[i]));
      g[i] += self.grad[i] * s * (1.0 + p.value[i] * (1.0 - s));
    }
  });
  return Tensor(out);
}

Tensor softmax(const Tensor& a, int axis) {
  require_defined(a, "softmax");
  const AxisSplit s = split_axis(a.shape(), axis, "softmax");
  const auto x = a.data();
  std::vector<double> v(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(x[base + j * s.inner] - mx);
        v[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) v[base + j * s.inner] /= z;
    }
  }
  auto out = make_node(a.shape(), std::move(v));
  record(out, {&a}, [s](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          dot += self.grad[i] * self.value[i];
        }
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
    }
  });
  return Tensor(out);
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, int axis, double eps) {
  require_defined(x, "rmsnorm");
  if (!(eps > 0.0)) throw InputError("rmsnorm: eps must be positive");
  const AxisSplit s = split_axis(x.shape(), axis, "rmsnorm");
  const bool weighted = weight.defined();
  if (weighted && weight.numel() != s.n) {
    throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) + " vs axis extent " +
                         std::to_string(s.n));
  }
  const auto xv = x.data();
  std::vector<double> v(xv.size());
  std::vector<double> inv_rms(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double ms = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) ms += xv[base + j * s.inner] * xv[base + j * s.inner];
      const double r = 1.0 / std::sqrt(ms / static_cast<double>(s.n) + eps);
      inv_rms[o * s.inner + in] = r;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double w = weighted ? weight.data()[j] : 1.0;
        v[base + j * s.inner] = xv[base + j * s.inner] * r * w;
      }
    }
  }
  auto out = make_node(x.shape(), std::move(v));
  auto fn = [s, weighted, inv_rms = std::move(inv_rms)](detail::Node& self) {
    auto& px = *self.parents[0];
    detail::Node* pw = weighted ? self.parents[1].get() : nullptr;
    const double inv_n = 1.0 / static_cast<double>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        const double r = inv_rms[o * s.inner + in];
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          const double w = pw ? pw->value[j] : 1.0;
          dot += self.grad[i] * w * px.value[i];
        }
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t i = base + j * s.inner;
            const double w = pw ? pw->value[j] : 1.0;
            g[i] += r * w * self.grad[i] - px.value[i] * r * r * r * inv_n * dot;
          }
        }
        if (pw && pw->requires_grad) {
          auto& g = pw->ensure_grad();
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t i = base + j * s.inner;
            g[j] += self.grad[i] * px.value[i] * r;
          }
        }
      }
    }
  };
  if (weighted) {
    record(out, {&x, &weight}, std::move(fn));
  } else {
    record(out, {&x}, std::move(fn));
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Lookup, losses, reductions

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_2d(table, "embedding");
  const std::size_t vocab = table.shape()[0];
  std::vector<std::size_t> index(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    index[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, index);
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     std::span<const double> mask) {
  require_2d(logits, "cross_entropy");
  const std::size_t m = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != m || mask.size() != m) {
    throw DimensionError("cross_entropy: targets/mask length must equal logits rows");
  }
  double weight = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (mask[r] == 0.0) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw InputError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    weight += mask[r];
  }
  if (weight == 0.0) throw UsageError("cross_entropy: mask selects no positions");

  const auto x = logits.data();
  std::vector<double> probs(m * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (mask[r] == 0.0) continue;
    const double* row = x.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
    const double log_z = mx + std::log(z);
    total += mask[r] * (log_z - row[targets[r]]);
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] = std::exp(row[c] - log_z);
  }
  auto out = make_node({}, {total / weight});
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<double> msk(mask.begin(), mask.end());
  record(out, {&logits},
         [m, vocab, weight, probs = std::move(probs), tgt = std::move(tgt),
          msk = std::move(msk)](detail::Node& self) {
           auto& g = self.parents[0]->ensure_grad();
           const double up = self.grad[0] / weight;
           for (std::size_t r = 0; r < m; ++r) {
             if (msk[r] == 0.0) continue;
             const double k = up * msk[r];
             for (std::size_t c = 0; c < vocab; ++c) g[r * vocab + c] += k * probs[r * vocab + c];
             g[r * vocab + static_cast<std::size_t>(tgt[r])] -= k;
           }
         });
  return Tensor(out);
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double x : a.data()) s += x;
  auto out = make_node({}, {s});
  record(out, {&a}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (double& x : g) x += self.grad[0];
  });
  return Tensor(out);
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> index) {
  require_2d(src, "gather_rows");
  const std::size_t m = src.shape()[0], d = src.shape()[1];
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  for (std::size_t i : index) {
    if (i >= m) throw InputError("gather_rows: row " + std::to_string(i) + " out of range");
  }
  std::vector<double> v(index.size() * d);
  const auto x = src.data();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(x.data() + index[r] * d, d, v.data() + r * d);
  auto out = make_node({index.size(), d}, std::move(v));
  std::vector<std::size_t> idx(index.begin(), index.end());
  record(out, {&src}, [d, idx = std::move(idx)](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) g[idx[r] * d + c] += self.grad[r * d + c];
  });
  return Tensor(out);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().cols();
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != d) throw DimensionError("concat_rows: column extents differ");
    m += p.rows();
  }
  std::vector<double> v;
  v.reserve(m * d);
  for (const Tensor& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  auto out = make_node({m, d}, std::move(v));
  if (grad_enabled() && std::any_of(parts.begin(), parts.end(),
                                    [](const Tensor& p) { return p.requires_grad(); })) {
    out->requires_grad = true;
    for (const Tensor& p : parts) out->parents.push_back(p.node());
    out->backward = [](detail::Node& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const std::size_t n = p->value.size();
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    };
  }
  return Tensor(out);
}

Tensor mul_col(const Tensor& x, const Tensor& g, std::size_t col) {
  require_2d(x, "mul_col");
  require_2d(g, "mul_col");
  const std::size_t m = x.shape()[0], d = x.shape()[1], n = g.shape()[1];
  if (g.shape()[0] != m) throw DimensionError("mul_col: row extents differ");
  if (col >= n) throw InputError("mul_col: column out of range");
  std::vector<double> v(x.data().begin(), x.data().end());
  const auto gv = g.data();
  for (std::size_t r = 0; r < m; ++r) {
    const double k = gv[r * n + col];
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] *= k;
  }
  auto out = make_node(x.shape(), std::move(v));
  record(out, {&x, &g}, [m, d, n, col](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    if (px.requires_grad) {
      auto& gx = px.ensure_grad();
      for (std::size_t r = 0; r < m; ++r) {
        const double k = pg.value[r * n + col];
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += k * self.grad[r * d + c];
      }
    }
    if (pg.requires_grad) {
      auto& gg = pg.ensure_grad();
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += self.grad[r * d + c] * px.value[r * d + c];
        gg[r * n + col] += acc;
      }
    }
  });
  return Tensor(out);
}

Tensor topk_gates(const Tensor& scores, std::span<const std::size_t> indices, std::size_t e) {
  require_2d(scores, "topk_gates");
  const std::size_t m = scores.shape()[0], n = scores.shape()[1];
  if (e == 0 || e > n || indices.size() != m * e) {
    throw DimensionError("topk_gates: indices must be rows x e with 1 <= e <= n");
  }
  const auto s = scores.data();
  std::vector<double> v(m * n, 0.0);
  std::vector<double> z(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < e; ++j) {
      const std::size_t c = indices[r * e + j];
      if (c >= n) throw InputError("topk_gates: expert index out of range");
      z[r] += s[r * n + c];
    }
    for (std::size_t j = 0; j < e; ++j) {
      const std::size_t c = indices[r * e + j];
      v[r * n + c] = s[r * n + c] / z[r];
    }
  }
  auto out = make_node({m, n}, std::move(v));
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  record(out, {&scores}, [m, n, e, idx = std::move(idx), z = std::move(z)](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < e; ++j) {
        const std::size_t c = idx[r * e + j];
        dot += self.grad[r * n + c] * p.value[r * n + c];
      }
      for (std::size_t j = 0; j < e; ++j) {
        const std::size_t c = idx[r * e + j];
        g[r * n + c] += self.grad[r * n + c] / z[r] - dot / (z[r] * z[r]);
      }
    }
  });
  return Tensor(out);
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq, std::size_t heads, std::span<const double> key_mask) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  require_2d(q, "causal_attention");
  const std::size_t d = q.shape()[1];
  if (q.shape()[0] != batch * seq) throw DimensionError("causal_attention: rows != batch*seq");
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: d not divisible by heads");
  if (key_mask.size() != batch * seq) throw DimensionError("causal_attention: key mask length");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qv = q.data(), kv = k.data(), vv = v.data();

  // probs[(b*heads + h)*seq*seq + t*seq + u]
  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> out_v(batch * seq * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t t = 0; t < seq; ++t) {
        const double* qt = qv.data() + (b * seq + t) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t u = 0; u <= t; ++u) {
          if (key_mask[b * seq + u] == 0.0) continue;
          const double* ku = kv.data() + (b * seq + u) * d + h * dh;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qt[c] * ku[c];
          p[t * seq + u] = dot * inv_sqrt;
          mx = std::max(mx, dot * inv_sqrt);
        }
        if (mx == -INFINITY) continue;
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          if (key_mask[b * seq + u] == 0.0) continue;
          p[t * seq + u] = std::exp(p[t * seq + u] - mx);
          z += p[t * seq + u];
        }
        double* ot = out_v.data() + (b * seq + t) * d + h * dh;
        for (std::size_t u = 0; u <= t; ++u) {
          if (key_mask[b * seq + u] == 0.0) continue;
          p[t * seq + u] /= z;
          const double w = p[t * seq + u];
          const double* vu = vv.data() + (b * seq + u) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) ot[c] += w * vu[c];
        }
      }
    }
  }
  auto out = make_node(q.shape(), std::move(out_v));
  record(out, {&q, &k, &v},
         [batch, seq, heads, d, dh, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
           auto& pq = *self.parents[0];
           auto& pk = *self.parents[1];
           auto& pv = *self.parents[2];
           std::vector<double> zero;
           double* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
           double* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
           double* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
           std::vector<double> dp(seq);
           for (std::size_t b = 0; b < batch; ++b) {
             for (std::size_t h = 0; h < heads; ++h) {
               const double* p = probs.data() + (b * heads + h) * seq * seq;
               for (std::size_t t = 0; t < seq; ++t) {
                 const double* go = self.grad.data() + (b * seq + t) * d + h * dh;
                 double dot = 0.0;
                 for (std::size_t u = 0; u <= t; ++u) {
                   const double w = p[t * seq + u];
                   if (w == 0.0) {
                     dp[u] = 0.0;
                     continue;
                   }
                   const double* vu = pv.value.data() + (b * seq + u) * d + h * dh;
                   double acc = 0.0;
                   for (std::size_t c = 0; c < dh; ++c) acc += go[c] * vu[c];
                   dp[u] = acc;
                   dot += w * acc;
                   if (gv) {
                     double* gvu = gv + (b * seq + u) * d + h * dh;
                     for (std::size_t c = 0; c < dh; ++c) gvu[c] += w * go[c];
                   }
                 }
                 const double* qt = pq.value.data() + (b * seq + t) * d + h * dh;
                 for (std::size_t u = 0; u <= t; ++u) {
                   const double w = p[t * seq + u];
                   if (w == 0.0) continue;
                   const double ds = w * (dp[u] - dot) * inv_sqrt;
                   const double* ku = pk.value.data() + (b * seq + u) * d + h * dh;
                   if (gq) {
                     double* gqt = gq + (b * seq + t) * d + h * dh;
                     for (std::size_t c = 0; c < dh; ++c) gqt[c] += ds * ku[c];
                   }
                   if (gk) {
                     double* gku = gk + (b * seq + u) * d + h * dh;
                     for (std::size_t c = 0; c < dh; ++c) gku[c] += ds * qt[c];
                   }
                 }
               }
             }
           }
         });
  return Tensor(out);
}

}  // namespace omnimol
