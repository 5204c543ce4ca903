#pragma once

// A miniature SELFIES-style molecular string grammar.
//
// Alphabet: eight atom tokens ([C] [N] [O] [F] [=C] [=N] [=O] [#C]), one
// branch token ([Branch1]), one ring token ([Ring1]) and ten index tokens
// ([I0]..[I9]). Every token sequence over this alphabet decodes to a graph
// that satisfies the valence table; that totality is the property the rest
// of the project leans on.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace omnimol::tselfies {

enum class TokenKind { Atom, Branch, Ring, Index };

enum class Element : std::uint8_t { C = 0, N = 1, O = 2, F = 3 };

inline constexpr int kElementCount = 4;

int max_valence(Element e) noexcept;
double atomic_mass(Element e) noexcept;
char element_letter(Element e) noexcept;

struct Token {
  TokenKind kind;
  std::string symbol;
  Element element = Element::C;  // Atom
  int bond_order = 1;            // Atom: incoming bond order
  int index = 0;                 // Index: 0..9

  bool operator==(const Token& o) const { return symbol == o.symbol; }
};

/// The closed alphabet, in a fixed order (atoms, branch, ring, indices).
const std::vector<Token>& alphabet();

/// Looks up a single bracketed symbol such as "[=O]".
std::optional<Token> lookup(std::string_view symbol);

/// Splits concatenated bracket tokens. Throws LexicalError on anything that
/// is not an alphabet symbol.
std::vector<Token> tokenize(std::string_view text);

/// Same as tokenize() but reports failure instead of throwing.
std::optional<std::vector<Token>> try_tokenize(std::string_view text);

std::string join(std::span<const Token> tokens);

struct Atom {
  Element element;
  int used_valence = 0;
};

struct Bond {
  int a;
  int b;
  int order;
};

struct MoleculeGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;

  std::size_t atom_count() const noexcept { return atoms.size(); }
  int degree(int atom) const;
  /// Bond order between two atoms, 0 when not bonded.
  int bond_between(int a, int b) const;
  /// Checks the valence and bond-list invariants.
  bool valid() const;
};

/// Total derivation: always returns a valid graph, possibly empty.
MoleculeGraph decode(std::span<const Token> tokens);
MoleculeGraph decode(std::string_view text);

/// Canonical token string; isomorphic graphs map to the same string and the
/// string decodes back to an isomorphic graph.
std::string canonicalize(const MoleculeGraph& g);

struct Fingerprint {
  int radius = 0;
  std::set<std::uint64_t> bits;
};

Fingerprint morgan_fingerprint(const MoleculeGraph& g, int radius);

/// |a∩b| / |a∪b|, 1.0 when both are empty. Radii must match.
double tanimoto(const Fingerprint& a, const Fingerprint& b);

struct Descriptor {
  int atom_count = 0;
  int ring_count = 0;
  double weight = 0.0;
};

Descriptor descriptor(const MoleculeGraph& g);

/// Weight rendered with two decimals, e.g. "40.02".
std::string format_weight(double weight);

}  // namespace omnimol::tselfies
