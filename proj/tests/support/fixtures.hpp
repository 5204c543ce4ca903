#pragma once

#include <vector>

#include "omnimol/model.hpp"
#include "omnimol/taskforge.hpp"

namespace fixture {

/// d=16, L=2 model small enough for finite differences.
inline omnimol::ModelConfig tiny_config(std::uint64_t seed = 0) {
  omnimol::ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq = 96;
  c.gal_rank = 4;
  c.n_routed = 2;
  c.top_e = 2;
  c.graph_dim = 16;
  c.graph_tokens = 4;
  c.seed = seed;
  return c;
}

inline omnimol::taskforge::CorpusSpec small_spec(int scale = 1) {
  omnimol::taskforge::CorpusSpec s;
  s.counts = {{"edit", 30 * scale},    {"grow", 15 * scale},   {"weight", 15 * scale},
              {"atoms", 20 * scale},   {"caption", 20 * scale}, {"design", 4},
              {"align", 20 * scale}};
  s.max_atoms = 6;
  return s;
}

/// Sets every adapter B to small random values so A, α, p and β matter.
inline void perturb_adapters(omnimol::OmniModel& m, std::uint64_t seed, double scale = 0.05) {
  omnimol::Rng rng(seed);
  for (const auto& np : m.named_parameters()) {
    if (np.name.size() >= 2 && np.name.compare(np.name.size() - 2, 2, ".B") == 0) {
      omnimol::Tensor t = np.tensor;
      for (auto& v : t.mutable_data()) v = rng.uniform(-scale, scale);
    }
  }
}

}  // namespace fixture
