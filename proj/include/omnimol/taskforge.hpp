#pragma once

// Synthetic molecular instruction corpus: generation with computable ground
// truth, chat-template rendering, tokenization, right-padded batching and
// train/test leakage removal.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "omnimol/tensor.hpp"
#include "omnimol/tselfies.hpp"

namespace omnimol::taskforge {

enum class TaskCategory { Mol2Mol, Mol2Text, Mol2Num, Text2Mol };
enum class Split { Train, Val, Test };

std::string to_string(TaskCategory c);
std::string to_string(Split s);
TaskCategory parse_category(std::string_view s);
Split parse_split(std::string_view s);

/// Built-in subtasks. "align" is the graph-only captioning set used for
/// projector alignment; it carries a molecule for its graph but never shows
/// the molecule string.
inline const std::vector<std::string>& subtask_names() {
  static const std::vector<std::string> names{"edit", "grow",    "weight", "atoms",
                                              "caption", "design", "align"};
  return names;
}
TaskCategory category_of(std::string_view subtask);
/// Subtasks whose responses are molecules.
bool produces_molecule(std::string_view subtask);

struct InstructionSample {
  TaskCategory task = TaskCategory::Mol2Mol;
  std::string subtask;
  std::string instruction;
  std::vector<std::string> molecules;
  std::optional<tselfies::MoleculeGraph> graph;
  std::string response;
  Split split = Split::Train;
};

struct CorpusSpec {
  std::map<std::string, int> counts;
  double test_fraction = 0.1;
  double val_fraction = 0.1;
  int min_atoms = 2;
  int max_atoms = 8;
  /// Largest atom count requested by the design subtask.
  int max_design_atoms = 12;
};

/// Deterministic in (spec, seed). Subtasks that cannot supply the requested
/// number of distinct samples (design has only max_design_atoms of them)
/// return as many as exist.
std::vector<InstructionSample> generate_corpus(const CorpusSpec& spec, std::uint64_t seed);

/// Ground-truth rules, exposed for tests and the CLI.
std::string edit_rule(std::string_view molecule);
std::string grow_rule(std::string_view molecule);
std::string caption_text(int atoms, int rings);
std::string instruction_prefix(std::string_view subtask);

inline constexpr std::string_view kSystemPrompt =
    " A chat between a curious user and an artificial intelligence assistant. The assistant "
    "gives helpful, detailed, and polite answers to the user's questions.";
inline constexpr std::string_view kBeginOfText = "<|begin_of_text|>";
inline constexpr std::string_view kStartHeader = "<|start_header_id|>";
inline constexpr std::string_view kEndHeader = "<|end_header_id|>";
inline constexpr std::string_view kEot = "<|eot_id|>";
inline constexpr std::string_view kGraphToken = "<graph_token>";
inline constexpr std::string_view kPadToken = "<|finetune_right_pad_id|>";

/// Everything up to and including the assistant header.
std::string render_prompt(const InstructionSample& sample);
/// Prompt + response + end-of-turn.
std::string render_chat(const InstructionSample& sample);

/// Greedy longest-match tokenizer over a closed vocabulary: chat special
/// tokens, the system prompt and instruction templates as phrase tokens,
/// every molecule token, and single printable ASCII characters.
class Tokenizer {
 public:
  Tokenizer();

  /// Throws DataError on characters outside the vocabulary.
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t size() const noexcept { return vocab_.size(); }
  TokenId id(std::string_view piece) const;
  const std::string& piece(TokenId id) const;

  TokenId pad_id() const noexcept { return pad_; }
  TokenId eot_id() const noexcept { return eot_; }
  TokenId graph_id() const noexcept { return graph_; }
  /// Structural ids: chat specials, role words and phrase tokens. Molecule
  /// tokens and single characters are not structural.
  std::vector<TokenId> structural_ids() const;

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  // first byte -> candidate ids, longest piece first
  std::vector<std::vector<TokenId>> by_first_;
  TokenId pad_ = 0, eot_ = 0, graph_ = 0;
  std::size_t n_structural_ = 0;
};

struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> input_ids;   // batch_size * seq_len, row-major
  std::vector<double> attn_mask;    // 1 on real tokens
  std::vector<double> label_mask;   // 1 on response tokens
  std::vector<std::optional<tselfies::MoleculeGraph>> graphs;
  std::vector<std::uint8_t> graph_present;
  std::vector<std::uint8_t> truncated;

  std::size_t row_length(std::size_t row) const;
};

/// Right-padded batch. Rows longer than max_len lose response tokens from
/// the tail and are flagged; a row whose prompt alone exceeds max_len is a
/// DataError. Empty input is a UsageError.
Batch collate(std::span<const InstructionSample> samples, const Tokenizer& tokenizer,
              std::size_t max_len);

/// Token ids of the prompt only (for generation).
std::vector<TokenId> encode_prompt(const InstructionSample& sample, const Tokenizer& tokenizer);

struct LeakageReport {
  std::size_t scanned = 0;
  std::vector<std::string> removed_keys;
};

/// Identity of a sample for leakage purposes: subtask plus the canonical
/// forms of its input molecules, or plus the instruction when it has none.
std::string leakage_key(const InstructionSample& sample);

std::vector<InstructionSample> leakage_scan(std::span<const InstructionSample> train,
                                            std::span<const InstructionSample> tests,
                                            LeakageReport& report);

std::vector<InstructionSample> filter_split(std::span<const InstructionSample> samples, Split split);

// Line-delimited JSON records.
std::string to_record(const InstructionSample& sample);
InstructionSample from_record(std::string_view line);
void write_corpus(const std::string& path, std::span<const InstructionSample> samples);
std::vector<InstructionSample> read_corpus(const std::string& path);

/// Histogram table (quantity,bin,count) of atom count, ring count and
/// weight over the distinct input molecules of a corpus.
std::string corpus_stats_csv(std::span<const InstructionSample> samples);

}  // namespace omnimol::taskforge
