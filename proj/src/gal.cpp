#include "omnimol/gal.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "omnimol/errors.hpp"

namespace omnimol {

GalAdapter::GalAdapter(std::size_t d_in, std::size_t d_out, std::size_t rank, Rng& rng,
                       GalConstants constants)
    : d_in_(d_in), d_out_(d_out), rank_(rank), constants_(constants) {
  if (rank == 0 || rank > std::min(d_in, d_out)) {
    throw UsageError("GalAdapter: rank " + std::to_string(rank) + " must lie in [1, " +
                     std::to_string(std::min(d_in, d_out)) + "]");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  a_ = Tensor::uniform({rank, d_in}, -bound, bound, rng, true);
  b_ = Tensor::zeros({d_out, rank}, true);
  alpha_ = Tensor::scalar(constants.alpha0, true);
  p_ = Tensor::scalar(constants.p0, true);
  beta_ = Tensor::scalar(constants.beta0, true);
}

Tensor GalAdapter::scaling_factor() const {
  const double log_r = std::log(static_cast<double>(rank_));
  return add(mul(alpha_, exp(scale(p_, -log_r))), beta_);
}

double GalAdapter::scaling_value() const {
  return alpha_.item() / std::pow(static_cast<double>(rank_), p_.item()) + beta_.item();
}

Tensor GalAdapter::forward(const Tensor& x, const Tensor& w0x) const {
  if (x.cols() != d_in_ || w0x.cols() != d_out_ || x.rows() != w0x.rows()) {
    throw DimensionError("GalAdapter::forward: expected [m x " + std::to_string(d_in_) +
                         "] and [m x " + std::to_string(d_out_) + "], got " +
                         shape_str(x.shape()) + " and " + shape_str(w0x.shape()));
  }
  if (is_identity()) return w0x;
  const Tensor low = matmul_nt(matmul_nt(x, a_), b_);
  return add(w0x, mul_scalar(low, scaling_factor()));
}

bool GalAdapter::is_identity() const {
  const bool trainable =
      a_.requires_grad() || b_.requires_grad() || alpha_.requires_grad() || p_.requires_grad() ||
      beta_.requires_grad();
  if (trainable && grad_enabled()) return false;
  const auto bv = b_.data();
  return std::all_of(bv.begin(), bv.end(), [](double v) { return v == 0.0; });
}

void GalAdapter::clip() {
  auto box = [](Tensor& t, double centre, double half) {
    double& v = t.mutable_data()[0];
    v = std::clamp(v, centre - half, centre + half);
  };
  box(alpha_, constants_.alpha0, constants_.eps);
  box(p_, constants_.p0, constants_.delta);
  box(beta_, constants_.beta0, constants_.eps);
}

void GalAdapter::set_trainable(bool on) {
  for (Tensor* t : {&a_, &b_, &alpha_, &p_, &beta_}) t->set_requires_grad(on);
}

}  // namespace omnimol
