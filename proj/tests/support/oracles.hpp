#pragma once

// Slow, obviously-correct reference implementations used by the tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "omnimol/tensor.hpp"
#include "omnimol/tselfies.hpp"

namespace oracle {

/// Central differences of a scalar function with respect to every element
/// of `t` (values are perturbed in place and restored).
inline std::vector<double> numeric_grad(omnimol::Tensor t, const std::function<double()>& f,
                                        double h = 1e-6) {
  auto v = t.mutable_data();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double up = f();
    v[i] = saved - h;
    const double down = f();
    v[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a-b|| / max(||a||, ||b||, floor), Euclidean norms over all elements.
inline double rel_err(const std::vector<double>& a, std::span<const double> b, double floor = 1e-12) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Full-matrix Wagner-Fischer.
template <typename Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1,
                          d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
  }
  return d[a.size()][b.size()];
}

/// Tries every atom permutation.
inline bool isomorphic(const omnimol::tselfies::MoleculeGraph& x,
                       const omnimol::tselfies::MoleculeGraph& y) {
  const std::size_t n = x.atoms.size();
  if (n != y.atoms.size() || x.bonds.size() != y.bonds.size()) return false;
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  do {
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      ok = x.atoms[i].element == y.atoms[static_cast<std::size_t>(perm[i])].element;
    }
    for (std::size_t i = 0; i < n && ok; ++i) {
      for (std::size_t j = i + 1; j < n && ok; ++j) {
        ok = x.bond_between(static_cast<int>(i), static_cast<int>(j)) ==
             y.bond_between(perm[i], perm[j]);
      }
    }
    if (ok) return true;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return false;
}

/// k nearest other rows by squared Euclidean distance, ties to lower index.
inline std::vector<std::vector<std::size_t>> knn(const std::vector<std::vector<double>>& rows,
                                                 std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (j == i) continue;
      double s = 0;
      for (std::size_t c = 0; c < rows[i].size(); ++c) s += (rows[i][c] - rows[j][c]) * (rows[i][c] - rows[j][c]);
      d.emplace_back(s, j);
    }
    std::sort(d.begin(), d.end());
    std::vector<std::size_t> idx;
    for (std::size_t m = 0; m < k; ++m) idx.push_back(d[m].second);
    std::sort(idx.begin(), idx.end());
    out.push_back(idx);
  }
  return out;
}

/// Masked next-token NLL computed with explicit loops.
inline double lm_loss(std::span<const double> logits, std::size_t vocab,
                      const std::vector<omnimol::TokenId>& ids, const std::vector<double>& label_mask,
                      std::size_t batch, std::size_t seq) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t + 1 < seq; ++t) {
      const std::size_t tgt = b * seq + t + 1;
      if (label_mask[tgt] == 0.0) continue;
      const double* row = logits.data() + (b * seq + t) * vocab;
      double mx = row[0];
      for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
      double z = 0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
      total += -(row[static_cast<std::size_t>(ids[tgt])] - mx - std::log(z));
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace oracle
