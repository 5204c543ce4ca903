#include "omnimol/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "omnimol/errors.hpp"
#include "omnimol/tselfies.hpp"

namespace omnimol::metrics {

namespace ts = omnimol::tselfies;

namespace {

std::optional<std::vector<std::string>> molecule_tokens(std::string_view text) {
  const auto toks = ts::try_tokenize(text);
  if (!toks) return std::nullopt;
  std::vector<std::string> out;
  out.reserve(toks->size());
  for (const auto& t : *toks) out.push_back(t.symbol);
  return out;
}

std::vector<std::string> characters(std::string_view text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  for (char c : text) out.emplace_back(1, c);
  return out;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << std::fixed << v;
  return ss.str();
}

}  // namespace

std::vector<std::string> bleu_units(std::string_view text, bool molecule) {
  if (molecule) {
    if (auto toks = molecule_tokens(text)) return *toks;
  }
  std::vector<std::string> out;
  std::istringstream ss{std::string(text)};
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

bool exact_match(std::string_view pred, std::string_view ref, bool molecule) {
  if (!molecule) return pred == ref;
  const auto p = ts::try_tokenize(pred);
  const auto r = ts::try_tokenize(ref);
  if (!p || !r) return false;
  return ts::canonicalize(ts::decode(*p)) == ts::canonicalize(ts::decode(*r));
}

std::size_t levenshtein(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::size_t levenshtein(std::string_view pred, std::string_view ref, bool molecule) {
  if (molecule) {
    auto p = molecule_tokens(pred);
    auto r = molecule_tokens(ref);
    if (p && r) return levenshtein(*p, *r);
  }
  return levenshtein(characters(pred), characters(ref));
}

double bleu(std::span<const std::string> pred, std::span<const std::string> ref, int max_n) {
  if (max_n < 1) throw UsageError("bleu: max_n must be >= 1");
  if (pred.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto un = static_cast<std::size_t>(n);
    if (pred.size() < un) return 0.0;
    std::map<std::vector<std::string>, std::size_t> ref_counts;
    if (ref.size() >= un) {
      for (std::size_t i = 0; i + un <= ref.size(); ++i) {
        ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + un)];
      }
    }
    std::map<std::vector<std::string>, std::size_t> pred_counts;
    for (std::size_t i = 0; i + un <= pred.size(); ++i) {
      ++pred_counts[std::vector<std::string>(pred.begin() + i, pred.begin() + i + un)];
    }
    std::size_t clipped = 0;
    for (const auto& [gram, c] : pred_counts) {
      const auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0) return 0.0;
    const double total = static_cast<double>(pred.size() - un + 1);
    log_sum += std::log(static_cast<double>(clipped) / total);
  }
  const double geo = std::exp(log_sum / max_n);
  const double lp = static_cast<double>(pred.size()), lr = static_cast<double>(ref.size());
  const double bp = lp < lr ? std::exp(1.0 - lr / lp) : 1.0;
  return geo * bp;
}

double bleu(std::string_view pred, std::string_view ref, int max_n, bool molecule) {
  return bleu(bleu_units(pred, molecule), bleu_units(ref, molecule), max_n);
}

bool validity(std::string_view pred) { return ts::try_tokenize(pred).has_value(); }

double validity_rate(std::span<const std::string> preds) {
  if (preds.empty()) return 0.0;
  const auto ok = std::count_if(preds.begin(), preds.end(), [](const auto& p) { return validity(p); });
  return static_cast<double>(ok) / static_cast<double>(preds.size());
}

double fingerprint_similarity(std::string_view pred, std::string_view ref, int radius) {
  const auto p = ts::try_tokenize(pred);
  const auto r = ts::try_tokenize(ref);
  if (!p || !r) return 0.0;
  return ts::tanimoto(ts::morgan_fingerprint(ts::decode(*p), radius),
                      ts::morgan_fingerprint(ts::decode(*r), radius));
}

std::optional<double> parse_number(std::string_view text) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
  if (text.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

RegressionReport regression_metrics(std::span<const double> preds, std::span<const double> refs) {
  if (preds.size() != refs.size()) throw DimensionError("regression_metrics: length mismatch");
  RegressionReport rep;
  rep.total = preds.size();
  rep.parsed = preds.size();
  if (preds.empty()) return rep;
  double abs_sum = 0.0, ref_mean = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    abs_sum += std::abs(preds[i] - refs[i]);
    ref_mean += refs[i];
  }
  const double n = static_cast<double>(preds.size());
  ref_mean /= n;
  rep.mae = abs_sum / n;
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ss_res += (preds[i] - refs[i]) * (preds[i] - refs[i]);
    ss_tot += (refs[i] - ref_mean) * (refs[i] - ref_mean);
  }
  if (ss_tot > 0.0) rep.r2 = 1.0 - ss_res / ss_tot;
  return rep;
}

RegressionReport regression_metrics(std::span<const std::string> preds,
                                    std::span<const double> refs) {
  if (preds.size() != refs.size()) throw DimensionError("regression_metrics: length mismatch");
  std::vector<double> p, r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (auto v = parse_number(preds[i])) {
      p.push_back(*v);
      r.push_back(refs[i]);
    }
  }
  RegressionReport rep = regression_metrics(p, r);
  rep.total = preds.size();
  return rep;
}

std::vector<TaskSummary> summarize(std::span<const EvalRecord> records) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const EvalRecord*>> groups;
  for (const auto& r : records) {
    auto& g = groups[r.subtask];
    if (g.empty()) order.push_back(r.subtask);
    g.push_back(&r);
  }
  std::vector<TaskSummary> out;
  for (const auto& name : order) {
    const auto& g = groups[name];
    TaskSummary s;
    s.task = g.front()->task;
    s.subtask = name;
    s.count = g.size();
    s.molecule = s.task == "Mol2Mol" || s.task == "Text2Mol";
    s.numeric = s.task == "Mol2Num";
    const double n = static_cast<double>(g.size());
    std::vector<std::string> preds;
    std::vector<double> refs;
    for (const auto* r : g) {
      s.exact += exact_match(r->prediction, r->reference, s.molecule) ? 1.0 : 0.0;
      s.bleu2 += bleu(r->prediction, r->reference, 2, s.molecule);
      s.bleu4 += bleu(r->prediction, r->reference, 4, s.molecule);
      s.levenshtein += static_cast<double>(levenshtein(r->prediction, r->reference, s.molecule));
      if (s.molecule) {
        s.morgan += fingerprint_similarity(r->prediction, r->reference);
        s.validity += validity(r->prediction) ? 1.0 : 0.0;
      }
      if (s.numeric) {
        preds.push_back(r->prediction);
        const auto v = parse_number(r->reference);
        if (!v) throw DataError("summarize: non-numeric reference for " + name);
        refs.push_back(*v);
      }
    }
    s.exact /= n;
    s.bleu2 /= n;
    s.bleu4 /= n;
    s.levenshtein /= n;
    s.morgan /= n;
    s.validity /= n;
    if (s.numeric) s.regression = regression_metrics(preds, refs);
    out.push_back(std::move(s));
  }
  return out;
}

std::string summary_csv(std::span<const TaskSummary> rows) {
  std::string out = "task,subtask,n,exact,bleu2,bleu4,levenshtein,morgan,validity,mae,valid_pct,r2\n";
  for (const auto& s : rows) {
    out += s.task + "," + s.subtask + "," + std::to_string(s.count) + "," + fmt(s.exact) + "," +
           fmt(s.bleu2) + "," + fmt(s.bleu4) + "," + fmt(s.levenshtein) + ",";
    out += s.molecule ? fmt(s.morgan) + "," + fmt(s.validity) : std::string(",");
    out += ",";
    if (s.numeric) {
      out += (s.regression.mae ? fmt(*s.regression.mae) : std::string("NA")) + "," +
             fmt(s.regression.valid_percent()) + "," +
             (s.regression.r2 ? fmt(*s.regression.r2) : std::string("NA"));
    } else {
      out += ",,";
    }
    out += "\n";
  }
  return out;
}

std::string to_record(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["subtask"] = r.subtask;
  j["prediction"] = r.prediction;
  j["reference"] = r.reference;
  return j.dump();
}

EvalRecord eval_record_from_json(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
    EvalRecord r;
    r.task = j.at("task").get<std::string>();
    r.subtask = j.value("subtask", r.task);
    r.prediction = j.at("prediction").get<std::string>();
    r.reference = j.at("reference").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad prediction record: ") + e.what());
  }
}

void write_predictions(const std::string& path, std::span<const EvalRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& r : records) out << to_record(r) << '\n';
}

std::vector<EvalRecord> read_predictions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<EvalRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(eval_record_from_json(line));
  }
  return out;
}

}  // namespace omnimol::metrics
