#pragma once

// Scores for generated responses: exact match, edit distance, BLEU,
// validity, Morgan/Tanimoto similarity, MAE and R².

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace omnimol::metrics {

/// Molecule strings split into alphabet tokens when they tokenize, text on
/// whitespace.
std::vector<std::string> bleu_units(std::string_view text, bool molecule);

/// Canonical-graph equality for molecules, plain equality otherwise. A
/// molecule prediction that does not tokenize never matches.
bool exact_match(std::string_view pred, std::string_view ref, bool molecule);

std::size_t levenshtein(std::span<const std::string> a, std::span<const std::string> b);
/// Token-level for molecules that tokenize, character-level otherwise.
std::size_t levenshtein(std::string_view pred, std::string_view ref, bool molecule);

/// Modified n-gram precisions 1..max_n, geometric mean without smoothing,
/// brevity penalty exp(1 - |ref|/|pred|) when pred is shorter.
double bleu(std::span<const std::string> pred, std::span<const std::string> ref, int max_n);
double bleu(std::string_view pred, std::string_view ref, int max_n, bool molecule);

bool validity(std::string_view pred);
double validity_rate(std::span<const std::string> preds);

/// Tanimoto over Morgan fingerprints; 0 when either side does not tokenize.
double fingerprint_similarity(std::string_view pred, std::string_view ref, int radius = 2);

struct RegressionReport {
  std::size_t total = 0;
  std::size_t parsed = 0;
  std::optional<double> mae;  // empty when nothing parsed
  std::optional<double> r2;   // empty when nothing parsed or the refs are constant
  double valid_percent() const {
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(parsed) / static_cast<double>(total);
  }
};

/// Strict decimal parse of a whole response; nullopt on anything else.
std::optional<double> parse_number(std::string_view text);
RegressionReport regression_metrics(std::span<const double> preds, std::span<const double> refs);
/// Unparseable predictions count as failures and are left out of MAE/R².
RegressionReport regression_metrics(std::span<const std::string> preds,
                                    std::span<const double> refs);

struct EvalRecord {
  std::string task;
  std::string subtask;
  std::string prediction;
  std::string reference;
};

struct TaskSummary {
  std::string task;
  std::string subtask;
  std::size_t count = 0;
  bool molecule = false;
  bool numeric = false;
  double exact = 0.0;
  double bleu2 = 0.0;
  double bleu4 = 0.0;
  double levenshtein = 0.0;
  double morgan = 0.0;
  double validity = 0.0;
  RegressionReport regression;
};

/// One summary per subtask, in first-seen order.
std::vector<TaskSummary> summarize(std::span<const EvalRecord> records);
/// task,subtask,n,exact,bleu2,bleu4,levenshtein,morgan,validity,mae,valid_pct,r2
std::string summary_csv(std::span<const TaskSummary> rows);

std::string to_record(const EvalRecord& r);
EvalRecord eval_record_from_json(std::string_view line);
void write_predictions(const std::string& path, std::span<const EvalRecord> records);
std::vector<EvalRecord> read_predictions(const std::string& path);

}  // namespace omnimol::metrics
