#include "omnimol/tselfies.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <tuple>

#include "omnimol/errors.hpp"

namespace omnimol::tselfies {

namespace {

std::vector<Token> build_alphabet() {
  std::vector<Token> a;
  auto atom = [&](const char* sym, Element e, int order) {
    a.push_back(Token{TokenKind::Atom, sym, e, order, 0});
  };
  atom("[C]", Element::C, 1);
  atom("[N]", Element::N, 1);
  atom("[O]", Element::O, 1);
  atom("[F]", Element::F, 1);
  atom("[=C]", Element::C, 2);
  atom("[=N]", Element::N, 2);
  atom("[=O]", Element::O, 2);
  atom("[#C]", Element::C, 3);
  a.push_back(Token{TokenKind::Branch, "[Branch1]", Element::C, 1, 0});
  a.push_back(Token{TokenKind::Ring, "[Ring1]", Element::C, 1, 0});
  for (int i = 0; i <= 9; ++i) {
    a.push_back(Token{TokenKind::Index, "[I" + std::to_string(i) + "]", Element::C, 1, i});
  }
  return a;
}

const Token* atom_token(Element e, int order) {
  for (const Token& t : alphabet()) {
    if (t.kind == TokenKind::Atom && t.element == e && t.bond_order == order) return &t;
  }
  return nullptr;
}

const Token& index_token(int n) { return alphabet()[10 + static_cast<std::size_t>(n)]; }

class Deriver {
 public:
  explicit Deriver(std::span<const Token> tokens) : tokens_(tokens) {}

  MoleculeGraph run() {
    derive(0, tokens_.size(), -1);
    return std::move(g_);
  }

 private:
  int remaining(int atom) const {
    return max_valence(g_.atoms[static_cast<std::size_t>(atom)].element) -
           g_.atoms[static_cast<std::size_t>(atom)].used_valence;
  }

  void bond(int a, int b, int order) {
    g_.bonds.push_back(Bond{a, b, order});
    g_.atoms[static_cast<std::size_t>(a)].used_valence += order;
    g_.atoms[static_cast<std::size_t>(b)].used_valence += order;
  }

  // Returns the new current atom.
  int add_atom(const Token& t, int current) {
    if (current < 0) {
      g_.atoms.push_back(Atom{t.element, 0});
      return static_cast<int>(g_.atoms.size()) - 1;
    }
    const int rem = remaining(current);
    if (rem == 0) return current;
    g_.atoms.push_back(Atom{t.element, 0});
    const int added = static_cast<int>(g_.atoms.size()) - 1;
    bond(current, added, std::min(t.bond_order, rem));
    return added;
  }

  void derive(std::size_t i, std::size_t end, int current) {
    while (i < end) {
      const Token& t = tokens_[i];
      const bool indexed = i + 1 < end && tokens_[i + 1].kind == TokenKind::Index;
      switch (t.kind) {
        case TokenKind::Atom:
          current = add_atom(t, current);
          ++i;
          break;
        case TokenKind::Branch: {
          if (!indexed) {
            ++i;
            break;
          }
          const std::size_t begin = i + 2;
          const std::size_t stop = std::min(end, begin + static_cast<std::size_t>(tokens_[i + 1].index));
          if (current >= 0) derive(begin, stop, current);
          i = stop;
          break;
        }
        case TokenKind::Ring: {
          if (!indexed) {
            ++i;
            break;
          }
          const int target = current - (tokens_[i + 1].index + 1);
          if (current >= 0 && target >= 0 && g_.bond_between(current, target) == 0 &&
              remaining(current) > 0 && remaining(target) > 0) {
            bond(current, target, 1);
          }
          i += 2;
          break;
        }
        case TokenKind::Index:
          ++i;
          break;
      }
    }
  }

  std::span<const Token> tokens_;
  MoleculeGraph g_;
};

// ---------------------------------------------------------------------------
// Canonical labelling: colour refinement + individualisation, keeping the
// smallest serialisation over all leaves of the search tree.

struct Adjacency {
  // neighbours[i] = (neighbour, bond order)
  std::vector<std::vector<std::pair<int, int>>> neighbours;

  explicit Adjacency(const MoleculeGraph& g) : neighbours(g.atoms.size()) {
    for (const Bond& b : g.bonds) {
      neighbours[static_cast<std::size_t>(b.a)].emplace_back(b.b, b.order);
      neighbours[static_cast<std::size_t>(b.b)].emplace_back(b.a, b.order);
    }
  }
};

using Colors = std::vector<int>;

// Dense re-ranking by signature; signature starts with the old colour so
// cells only ever split and keep their relative order.
void refine(const MoleculeGraph& g, const Adjacency& adj, Colors& colors) {
  const std::size_t n = g.atoms.size();
  std::size_t classes = std::set<int>(colors.begin(), colors.end()).size();
  while (true) {
    std::vector<std::pair<std::vector<int>, std::size_t>> sig(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::pair<int, int>> env;
      for (auto [j, order] : adj.neighbours[i]) env.emplace_back(order, colors[static_cast<std::size_t>(j)]);
      std::sort(env.begin(), env.end());
      std::vector<int> s{colors[i]};
      for (auto [o, c] : env) {
        s.push_back(o);
        s.push_back(c);
      }
      sig[i] = {std::move(s), i};
    }
    std::sort(sig.begin(), sig.end());
    Colors next(n);
    int color = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k > 0 && sig[k].first != sig[k - 1].first) ++color;
      next[sig[k].second] = color;
    }
    const std::size_t next_classes = static_cast<std::size_t>(color) + 1;
    colors = std::move(next);
    if (next_classes == classes) break;
    classes = next_classes;
  }
}

std::string symbol_for(Element e, int order) {
  const Token* t = atom_token(e, order);
  return t ? t->symbol : std::string();
}

// Serialises one connected labelled graph from `root`. Fails (nullopt) when
// the grammar cannot express the chosen spanning tree: a branch longer than
// nine tokens, a ring closure more than ten atoms back or of order > 1, or
// an incoming bond order with no matching atom token.
std::optional<std::string> serialize_from(const MoleculeGraph& g, const Adjacency& adj,
                                          const std::vector<int>& rank, int root, bool strict) {
  const std::size_t n = g.atoms.size();
  std::vector<int> parent(n, -1), parent_order(n, 1);
  std::vector<bool> visited(n, false);
  std::vector<std::vector<int>> children(n);
  std::vector<std::vector<std::pair<int, int>>> back(n);  // (ancestor, order)

  std::function<void(int)> dfs = [&](int u) {
    visited[static_cast<std::size_t>(u)] = true;
    auto nbrs = adj.neighbours[static_cast<std::size_t>(u)];
    std::sort(nbrs.begin(), nbrs.end(), [&](const auto& x, const auto& y) {
      if (x.second != y.second) return x.second > y.second;
      return rank[static_cast<std::size_t>(x.first)] < rank[static_cast<std::size_t>(y.first)];
    });
    for (auto [w, order] : nbrs) {
      const auto wi = static_cast<std::size_t>(w);
      if (!visited[wi]) {
        parent[wi] = u;
        parent_order[wi] = order;
        children[static_cast<std::size_t>(u)].push_back(w);
        dfs(w);
      } else if (w != parent[static_cast<std::size_t>(u)] &&
                 std::none_of(back[wi].begin(), back[wi].end(),
                              [u](const auto& e) { return e.first == u; })) {
        back[static_cast<std::size_t>(u)].emplace_back(w, order);
      }
    }
  };
  dfs(root);
  if (std::count(visited.begin(), visited.end(), true) != static_cast<long>(n)) return std::nullopt;

  std::vector<int> size(n, 0);
  std::function<int(int)> measure = [&](int u) {
    const auto ui = static_cast<std::size_t>(u);
    int s = 1 + 2 * static_cast<int>(back[ui].size());
    for (int c : children[ui]) s += measure(c);
    s += 2 * std::max(0, static_cast<int>(children[ui].size()) - 1);
    size[ui] = s;
    return s;
  };
  measure(root);
  for (auto& ch : children) {
    std::sort(ch.begin(), ch.end(), [&](int a, int b) {
      const auto ai = static_cast<std::size_t>(a), bi = static_cast<std::size_t>(b);
      if (size[ai] != size[bi]) return size[ai] < size[bi];
      return rank[ai] < rank[bi];
    });
  }

  std::vector<int> pos(n, -1);
  int counter = 0;
  std::string out;
  bool ok = true;
  std::function<void(int)> emit = [&](int u) {
    const auto ui = static_cast<std::size_t>(u);
    pos[ui] = counter++;
    const int incoming = parent[ui] < 0 ? 1 : parent_order[ui];
    std::string sym = symbol_for(g.atoms[ui].element, incoming);
    if (sym.empty()) {
      ok = false;
      sym = symbol_for(g.atoms[ui].element, 1);
    }
    out += sym;
    auto rings = back[ui];
    std::sort(rings.begin(), rings.end(), [&](const auto& x, const auto& y) {
      return pos[static_cast<std::size_t>(x.first)] > pos[static_cast<std::size_t>(y.first)];
    });
    for (auto [w, order] : rings) {
      int dist = pos[ui] - pos[static_cast<std::size_t>(w)] - 1;
      if (order != 1 || dist > 9) ok = false;
      dist = std::clamp(dist, 0, 9);
      out += "[Ring1]" + index_token(dist).symbol;
    }
    const auto& ch = children[ui];
    for (std::size_t k = 0; k < ch.size(); ++k) {
      if (k + 1 < ch.size()) {
        int len = size[static_cast<std::size_t>(ch[k])];
        if (len > 9) ok = false;
        out += "[Branch1]" + index_token(std::min(len, 9)).symbol;
      }
      emit(ch[k]);
    }
  };
  emit(root);
  if (!ok && strict) return std::nullopt;
  return out;
}

std::optional<std::string> serialize_leaf(const MoleculeGraph& g, const Adjacency& adj,
                                          const Colors& colors, bool strict) {
  std::vector<int> order(g.atoms.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return colors[static_cast<std::size_t>(a)] < colors[static_cast<std::size_t>(b)];
  });
  for (int root : order) {
    if (auto s = serialize_from(g, adj, colors, root, strict)) return s;
  }
  return std::nullopt;
}

void search(const MoleculeGraph& g, const Adjacency& adj, Colors colors, bool strict,
            std::optional<std::string>& best) {
  refine(g, adj, colors);
  const std::size_t n = colors.size();
  std::map<int, std::vector<int>> cells;
  for (std::size_t i = 0; i < n; ++i) cells[colors[i]].push_back(static_cast<int>(i));
  auto target = std::find_if(cells.begin(), cells.end(),
                             [](const auto& c) { return c.second.size() > 1; });
  if (target == cells.end()) {
    auto s = serialize_leaf(g, adj, colors, strict);
    if (s && (!best || *s < *best)) best = std::move(s);
    return;
  }
  for (int v : target->second) {
    Colors next(n);
    for (std::size_t i = 0; i < n; ++i) next[i] = 2 * colors[i] + 1;
    next[static_cast<std::size_t>(v)] = 2 * colors[static_cast<std::size_t>(v)];
    search(g, adj, std::move(next), strict, best);
  }
}

std::string canonicalize_connected(const MoleculeGraph& g) {
  if (g.atoms.empty()) return {};
  const Adjacency adj(g);
  Colors init(g.atoms.size());
  std::vector<std::pair<int, int>> keys(g.atoms.size());
  for (std::size_t i = 0; i < g.atoms.size(); ++i) {
    keys[i] = {static_cast<int>(g.atoms[i].element), g.degree(static_cast<int>(i))};
  }
  auto sorted = keys;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (std::size_t i = 0; i < g.atoms.size(); ++i) {
    init[i] = static_cast<int>(std::lower_bound(sorted.begin(), sorted.end(), keys[i]) - sorted.begin());
  }
  std::optional<std::string> best;
  search(g, adj, init, /*strict=*/true, best);
  if (!best) search(g, adj, init, /*strict=*/false, best);
  return best.value_or(std::string());
}

std::vector<MoleculeGraph> components(const MoleculeGraph& g) {
  const std::size_t n = g.atoms.size();
  std::vector<int> comp(n, -1);
  const Adjacency adj(g);
  int count = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    std::vector<int> stack{static_cast<int>(s)};
    comp[s] = count;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (auto [w, o] : adj.neighbours[static_cast<std::size_t>(u)]) {
        if (comp[static_cast<std::size_t>(w)] < 0) {
          comp[static_cast<std::size_t>(w)] = count;
          stack.push_back(w);
        }
      }
    }
    ++count;
  }
  std::vector<MoleculeGraph> parts(static_cast<std::size_t>(count));
  std::vector<int> local(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = parts[static_cast<std::size_t>(comp[i])];
    local[i] = static_cast<int>(p.atoms.size());
    p.atoms.push_back(g.atoms[i]);
  }
  for (const Bond& b : g.bonds) {
    parts[static_cast<std::size_t>(comp[static_cast<std::size_t>(b.a)])].bonds.push_back(
        Bond{local[static_cast<std::size_t>(b.a)], local[static_cast<std::size_t>(b.b)], b.order});
  }
  return parts;
}

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t combine(std::uint64_t h, std::uint64_t v) noexcept {
  return mix64(h ^ (v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2)));
}

}  // namespace

int max_valence(Element e) noexcept {
  switch (e) {
    case Element::C: return 4;
    case Element::N: return 3;
    case Element::O: return 2;
    case Element::F: return 1;
  }
  return 0;
}

double atomic_mass(Element e) noexcept {
  switch (e) {
    case Element::C: return 12.011;
    case Element::N: return 14.007;
    case Element::O: return 15.999;
    case Element::F: return 18.998;
  }
  return 0.0;
}

char element_letter(Element e) noexcept {
  static constexpr char letters[] = {'C', 'N', 'O', 'F'};
  return letters[static_cast<int>(e)];
}

const std::vector<Token>& alphabet() {
  static const std::vector<Token> a = build_alphabet();
  return a;
}

std::optional<Token> lookup(std::string_view symbol) {
  for (const Token& t : alphabet()) {
    if (t.symbol == symbol) return t;
  }
  return std::nullopt;
}

std::optional<std::vector<Token>> try_tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '[') return std::nullopt;
    const std::size_t close = text.find(']', i);
    if (close == std::string_view::npos) return std::nullopt;
    auto t = lookup(text.substr(i, close - i + 1));
    if (!t) return std::nullopt;
    out.push_back(std::move(*t));
    i = close + 1;
  }
  return out;
}

std::vector<Token> tokenize(std::string_view text) {
  std::size_t i = 0;
  std::vector<Token> out;
  while (i < text.size()) {
    const std::size_t close = text[i] == '[' ? text.find(']', i) : std::string_view::npos;
    if (close == std::string_view::npos) {
      throw LexicalError("unknown molecule token at character " + std::to_string(i) + " of \"" +
                         std::string(text) + "\"");
    }
    auto t = lookup(text.substr(i, close - i + 1));
    if (!t) {
      throw LexicalError("unknown molecule token " + std::string(text.substr(i, close - i + 1)));
    }
    out.push_back(std::move(*t));
    i = close + 1;
  }
  return out;
}

std::string join(std::span<const Token> tokens) {
  std::string s;
  for (const Token& t : tokens) s += t.symbol;
  return s;
}

int MoleculeGraph::degree(int atom) const {
  int d = 0;
  for (const Bond& b : bonds) d += (b.a == atom) + (b.b == atom);
  return d;
}

int MoleculeGraph::bond_between(int a, int b) const {
  for (const Bond& bond : bonds) {
    if ((bond.a == a && bond.b == b) || (bond.a == b && bond.b == a)) return bond.order;
  }
  return 0;
}

bool MoleculeGraph::valid() const {
  const int n = static_cast<int>(atoms.size());
  std::vector<int> used(atoms.size(), 0);
  std::set<std::pair<int, int>> pairs;
  for (const Bond& b : bonds) {
    if (b.a < 0 || b.b < 0 || b.a >= n || b.b >= n || b.a == b.b || b.order < 1) return false;
    if (!pairs.insert({std::min(b.a, b.b), std::max(b.a, b.b)}).second) return false;
    used[static_cast<std::size_t>(b.a)] += b.order;
    used[static_cast<std::size_t>(b.b)] += b.order;
  }
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    if (used[i] != atoms[i].used_valence || used[i] > max_valence(atoms[i].element)) return false;
  }
  return true;
}

MoleculeGraph decode(std::span<const Token> tokens) { return Deriver(tokens).run(); }

MoleculeGraph decode(std::string_view text) {
  const auto tokens = tokenize(text);
  return decode(tokens);
}

std::string canonicalize(const MoleculeGraph& g) {
  auto parts = components(g);
  if (parts.size() <= 1) return canonicalize_connected(g);
  // Disconnected input (never produced by decode): canonical pieces in
  // sorted order. The concatenation does not decode back to the same graph.
  std::vector<std::string> pieces;
  for (const auto& p : parts) pieces.push_back(canonicalize_connected(p));
  std::sort(pieces.begin(), pieces.end());
  std::string out;
  for (const auto& p : pieces) out += p;
  return out;
}

Fingerprint morgan_fingerprint(const MoleculeGraph& g, int radius) {
  if (radius < 0 || radius > 4) throw InputError("morgan_fingerprint: radius must be in [0, 4]");
  const Adjacency adj(g);
  const std::size_t n = g.atoms.size();
  std::vector<std::uint64_t> h(n);
  Fingerprint fp;
  fp.radius = radius;
  for (std::size_t i = 0; i < n; ++i) {
    h[i] = combine(combine(0x6D6F7267616E3031ULL, static_cast<std::uint64_t>(g.atoms[i].element)),
                   static_cast<std::uint64_t>(adj.neighbours[i].size()));
    fp.bits.insert(h[i]);
  }
  for (int round = 1; round <= radius; ++round) {
    std::vector<std::uint64_t> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::pair<std::uint64_t, std::uint64_t>> env;
      for (auto [j, order] : adj.neighbours[i]) {
        env.emplace_back(static_cast<std::uint64_t>(order), h[static_cast<std::size_t>(j)]);
      }
      std::sort(env.begin(), env.end());
      std::uint64_t x = h[i];
      for (auto [o, nh] : env) x = combine(combine(x, o), nh);
      next[i] = x;
      fp.bits.insert(x);
    }
    h = std::move(next);
  }
  return fp;
}

double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (a.radius != b.radius) throw UsageError("tanimoto: fingerprints have different radii");
  if (a.bits.empty() && b.bits.empty()) return 1.0;
  std::size_t common = 0;
  for (std::uint64_t x : a.bits) common += b.bits.count(x);
  const std::size_t uni = a.bits.size() + b.bits.size() - common;
  return static_cast<double>(common) / static_cast<double>(uni);
}

Descriptor descriptor(const MoleculeGraph& g) {
  Descriptor d;
  d.atom_count = static_cast<int>(g.atoms.size());
  const int comps = static_cast<int>(components(g).size());
  d.ring_count = static_cast<int>(g.bonds.size()) - d.atom_count + comps;
  for (const Atom& a : g.atoms) d.weight += atomic_mass(a.element);
  return d;
}

std::string format_weight(double weight) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", weight);
  return buf;
}

}  // namespace omnimol::tselfies
