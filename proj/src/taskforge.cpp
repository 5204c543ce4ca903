#include "omnimol/taskforge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "omnimol/errors.hpp"
#include "omnimol/rng.hpp"

namespace omnimol::taskforge {

namespace ts = omnimol::tselfies;

namespace {

struct SubtaskInfo {
  const char* name;
  TaskCategory category;
  const char* prefix;
  bool molecule_output;
};

const std::vector<SubtaskInfo>& subtask_table() {
  static const std::vector<SubtaskInfo> table{
      {"edit", TaskCategory::Mol2Mol,
       "Replace every oxygen atom of this molecule with a nitrogen atom and give the resulting "
       "SELFIES. The molecule SELFIES sequence is: ",
       true},
      {"grow", TaskCategory::Mol2Mol,
       "Extend this molecule by appending two carbon atoms to the end of its SELFIES. The "
       "molecule SELFIES sequence is: ",
       true},
      {"weight", TaskCategory::Mol2Num,
       "Please provide me with the Molecular Weight value of this molecule. Respond with the "
       "numerical value only. The molecule SELFIES sequence is: ",
       false},
      {"atoms", TaskCategory::Mol2Num,
       "How many heavy atoms does this molecule contain? Respond with the numerical value only. "
       "The molecule SELFIES sequence is: ",
       false},
      {"caption", TaskCategory::Mol2Text,
       "Could you give me a brief overview of this molecule? The molecule SELFIES sequence is: ",
       false},
      {"design", TaskCategory::Text2Mol,
       "Give me a molecule that satisfies the conditions outlined in the description: ", true},
      {"align", TaskCategory::Mol2Text, "Describe the molecule represented by this graph.", false},
  };
  return table;
}

const SubtaskInfo& info(std::string_view subtask) {
  for (const auto& s : subtask_table()) {
    if (subtask == s.name) return s;
  }
  throw DataError("unknown subtask \"" + std::string(subtask) + "\"");
}

constexpr std::string_view kCaptionHead = "This molecule contains ";
constexpr std::string_view kCaptionMid = " atoms and ";
constexpr std::string_view kCaptionTail = " rings.";

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  Rng r(seed ^ (a * 0xA24BAED4963EE407ULL) ^ (b * 0x9FB21C651E98DF25ULL));
  r.next();
  return r.next();
}

// Random token string biased towards small organic-looking chains.
std::vector<ts::Token> random_tokens(Rng& rng, int target_atoms) {
  static const std::vector<std::pair<const char*, double>> atoms{
      {"[C]", 0.46}, {"[N]", 0.14}, {"[O]", 0.22}, {"[F]", 0.05},
      {"[=C]", 0.05}, {"[=N]", 0.02}, {"[=O]", 0.05}, {"[#C]", 0.01}};
  auto pick_atom = [&]() {
    double u = rng.uniform();
    for (const auto& [sym, w] : atoms) {
      if (u < w) return *ts::lookup(sym);
      u -= w;
    }
    return *ts::lookup("[C]");
  };
  std::vector<ts::Token> out{pick_atom()};
  int placed = 1;
  while (placed < target_atoms) {
    const double u = rng.uniform();
    if (u < 0.10 && placed + 2 <= target_atoms) {
      const int len = 1 + static_cast<int>(rng.below(2));
      out.push_back(*ts::lookup("[Branch1]"));
      out.push_back(*ts::lookup("[I" + std::to_string(len) + "]"));
      for (int k = 0; k < len; ++k) out.push_back(pick_atom());
      placed += len;
    } else if (u < 0.15 && placed >= 3) {
      const int back = 1 + static_cast<int>(rng.below(4));
      out.push_back(*ts::lookup("[Ring1]"));
      out.push_back(*ts::lookup("[I" + std::to_string(back) + "]"));
    } else {
      out.push_back(pick_atom());
      ++placed;
    }
  }
  return out;
}

InstructionSample make_sample(std::string_view subtask, const std::string& molecule) {
  const SubtaskInfo& si = info(subtask);
  InstructionSample s;
  s.task = si.category;
  s.subtask = si.name;
  const ts::MoleculeGraph g = ts::decode(molecule);
  const ts::Descriptor d = ts::descriptor(g);
  s.molecules = {molecule};
  s.graph = g;
  s.instruction = std::string(si.prefix) + molecule;
  const std::string name = si.name;
  if (name == "edit") {
    s.response = edit_rule(molecule);
  } else if (name == "grow") {
    s.response = grow_rule(molecule);
  } else if (name == "weight") {
    s.response = ts::format_weight(d.weight);
  } else if (name == "atoms") {
    s.response = std::to_string(d.atom_count);
  } else if (name == "caption") {
    s.response = caption_text(d.atom_count, d.ring_count);
  } else if (name == "align") {
    s.instruction = si.prefix;
    s.response = caption_text(d.atom_count, d.ring_count);
  }
  return s;
}

InstructionSample make_design(int atoms) {
  InstructionSample s;
  s.task = TaskCategory::Text2Mol;
  s.subtask = "design";
  s.instruction = std::string(info("design").prefix) + caption_text(atoms, 0);
  std::string chain;
  for (int i = 0; i < atoms; ++i) chain += "[C]";
  s.response = ts::canonicalize(ts::decode(chain));
  return s;
}

}  // namespace

std::string to_string(TaskCategory c) {
  switch (c) {
    case TaskCategory::Mol2Mol: return "Mol2Mol";
    case TaskCategory::Mol2Text: return "Mol2Text";
    case TaskCategory::Mol2Num: return "Mol2Num";
    case TaskCategory::Text2Mol: return "Text2Mol";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

TaskCategory parse_category(std::string_view s) {
  for (TaskCategory c : {TaskCategory::Mol2Mol, TaskCategory::Mol2Text, TaskCategory::Mol2Num,
                         TaskCategory::Text2Mol}) {
    if (to_string(c) == s) return c;
  }
  throw DataError("unknown task category \"" + std::string(s) + "\"");
}

Split parse_split(std::string_view s) {
  for (Split x : {Split::Train, Split::Val, Split::Test}) {
    if (to_string(x) == s) return x;
  }
  throw DataError("unknown split \"" + std::string(s) + "\"");
}

TaskCategory category_of(std::string_view subtask) { return info(subtask).category; }

bool produces_molecule(std::string_view subtask) { return info(subtask).molecule_output; }

std::string instruction_prefix(std::string_view subtask) { return info(subtask).prefix; }

std::string edit_rule(std::string_view molecule) {
  auto tokens = ts::tokenize(molecule);
  for (auto& t : tokens) {
    if (t.symbol == "[O]") t = *ts::lookup("[N]");
  }
  return ts::join(tokens);
}

std::string grow_rule(std::string_view molecule) { return std::string(molecule) + "[C][C]"; }

std::string caption_text(int atoms, int rings) {
  return std::string(kCaptionHead) + std::to_string(atoms) + std::string(kCaptionMid) +
         std::to_string(rings) + std::string(kCaptionTail);
}

std::vector<InstructionSample> generate_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  std::vector<InstructionSample> corpus;
  const auto& names = subtask_names();
  for (const auto& [key, count] : spec.counts) info(key);
  if (spec.min_atoms < 1 || spec.max_atoms < spec.min_atoms) {
    throw UsageError("generate_corpus: invalid atom range");
  }
  for (std::size_t sub = 0; sub < names.size(); ++sub) {
    const std::string& name = names[sub];
    auto it = spec.counts.find(name);
    const int want = it == spec.counts.end() ? 0 : it->second;
    if (want < 0) throw UsageError("generate_corpus: negative count for " + name);
    if (want == 0) continue;

    std::vector<InstructionSample> part;
    std::set<std::string> seen;
    if (name == "design") {
      Rng rng(derive_seed(seed, sub, 0));
      std::vector<int> sizes;
      for (int a = 1; a <= spec.max_design_atoms; ++a) sizes.push_back(a);
      for (std::size_t i = sizes.size(); i > 1; --i) std::swap(sizes[i - 1], sizes[rng.below(i)]);
      for (int a : sizes) {
        if (static_cast<int>(part.size()) >= want) break;
        part.push_back(make_design(a));
      }
    } else {
      const std::uint64_t max_attempts = 200ULL * static_cast<std::uint64_t>(want) + 1000;
      for (std::uint64_t attempt = 0;
           attempt < max_attempts && static_cast<int>(part.size()) < want; ++attempt) {
        Rng rng(derive_seed(seed, sub, attempt + 1));
        const int target = spec.min_atoms +
                           static_cast<int>(rng.below(static_cast<std::uint64_t>(
                               spec.max_atoms - spec.min_atoms + 1)));
        const auto tokens = random_tokens(rng, target);
        const ts::MoleculeGraph g = ts::decode(tokens);
        if (static_cast<int>(g.atom_count()) < spec.min_atoms ||
            static_cast<int>(g.atom_count()) > spec.max_atoms) {
          continue;
        }
        const std::string canon = ts::canonicalize(g);
        if (!seen.insert(canon).second) continue;
        part.push_back(make_sample(name, canon));
      }
    }

    Rng split_rng(derive_seed(seed, sub, 0xFFFF));
    std::vector<std::size_t> order(part.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split_rng.below(i)]);
    const auto n = part.size();
    const std::size_t n_test =
        name == "align" ? 0 : static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(n)));
    const std::size_t n_val = name == "align" ? 0
                                              : static_cast<std::size_t>(std::lround(
                                                    spec.val_fraction * static_cast<double>(n - n_test)));
    for (std::size_t k = 0; k < n; ++k) {
      auto& s = part[order[k]];
      s.split = k < n_test ? Split::Test : (k < n_test + n_val ? Split::Val : Split::Train);
    }
    corpus.insert(corpus.end(), std::make_move_iterator(part.begin()),
                  std::make_move_iterator(part.end()));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Chat template

std::string render_prompt(const InstructionSample& sample) {
  std::string out;
  out += kBeginOfText;
  out += kStartHeader;
  out += "system";
  out += kEndHeader;
  out += "\n\n";
  out += kSystemPrompt;
  out += kEot;
  out += kStartHeader;
  out += "user";
  out += kEndHeader;
  out += "\n\n";
  if (sample.graph) {
    out += kGraphToken;
    out += "\n";
  }
  out += sample.instruction;
  out += kEot;
  out += kStartHeader;
  out += "assistant";
  out += kEndHeader;
  out += "\n\n";
  return out;
}

std::string render_chat(const InstructionSample& sample) {
  return render_prompt(sample) + sample.response + std::string(kEot);
}

// ---------------------------------------------------------------------------
// Tokenizer

Tokenizer::Tokenizer() {
  auto add = [&](std::string piece) {
    if (index_.count(piece)) return;
    index_.emplace(piece, static_cast<TokenId>(vocab_.size()));
    vocab_.push_back(std::move(piece));
  };
  add(std::string(kPadToken));
  for (auto sv : {kBeginOfText, kStartHeader, kEndHeader, kEot, kGraphToken}) add(std::string(sv));
  add("system");
  add("user");
  add("assistant");
  add("\n\n");
  add(std::string(kSystemPrompt));
  for (const auto& s : subtask_table()) add(s.prefix);
  add(std::string(kCaptionHead));
  add(std::string(kCaptionMid));
  add(std::string(kCaptionTail));
  n_structural_ = vocab_.size();
  for (const auto& t : ts::alphabet()) add(t.symbol);
  add("\n");
  for (int c = 32; c <= 126; ++c) add(std::string(1, static_cast<char>(c)));

  pad_ = index_.at(std::string(kPadToken));
  eot_ = index_.at(std::string(kEot));
  graph_ = index_.at(std::string(kGraphToken));

  by_first_.assign(256, {});
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (static_cast<TokenId>(i) == pad_) continue;
    by_first_[static_cast<unsigned char>(vocab_[i][0])].push_back(static_cast<TokenId>(i));
  }
  for (auto& bucket : by_first_) {
    std::stable_sort(bucket.begin(), bucket.end(), [&](TokenId a, TokenId b) {
      return vocab_[static_cast<std::size_t>(a)].size() > vocab_[static_cast<std::size_t>(b)].size();
    });
  }
}

std::vector<TokenId> Tokenizer::structural_ids() const {
  std::vector<TokenId> out(n_structural_);
  for (std::size_t i = 0; i < n_structural_; ++i) out[i] = static_cast<TokenId>(i);
  return out;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto& bucket = by_first_[static_cast<unsigned char>(text[i])];
    bool matched = false;
    for (TokenId id : bucket) {
      const std::string& p = vocab_[static_cast<std::size_t>(id)];
      if (text.compare(i, p.size(), p) == 0) {
        ids.push_back(id);
        i += p.size();
        matched = true;
        break;
      }
    }
    if (!matched) {
      throw DataError("tokenizer: no vocabulary entry at byte " + std::to_string(i));
    }
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += piece(id);
  return out;
}

TokenId Tokenizer::id(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end()) throw DataError("tokenizer: \"" + std::string(piece) + "\" not in vocabulary");
  return it->second;
}

const std::string& Tokenizer::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw InputError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
  }
  return vocab_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------
// Batching

std::size_t Batch::row_length(std::size_t row) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq_len; ++t) n += attn_mask[row * seq_len + t] != 0.0;
  return n;
}

std::vector<TokenId> encode_prompt(const InstructionSample& sample, const Tokenizer& tokenizer) {
  return tokenizer.encode(render_prompt(sample));
}

Batch collate(std::span<const InstructionSample> samples, const Tokenizer& tokenizer,
              std::size_t max_len) {
  if (samples.empty()) throw UsageError("collate: no samples");
  struct Row {
    std::vector<TokenId> ids;
    std::size_t label_begin;
    bool truncated;
  };
  std::vector<Row> rows;
  rows.reserve(samples.size());
  std::size_t longest = 0;
  for (const auto& s : samples) {
    const auto prompt = tokenizer.encode(render_prompt(s));
    auto ids = tokenizer.encode(render_chat(s));
    // The chat rendering extends the prompt rendering, and the assistant
    // header ends in a phrase boundary, so the prompt ids are a prefix.
    if (ids.size() < prompt.size() || !std::equal(prompt.begin(), prompt.end(), ids.begin())) {
      throw DataError("collate: prompt is not a token prefix of the rendered chat");
    }
    bool cut = false;
    if (prompt.size() >= max_len) {
      throw DataError("collate: prompt of " + std::to_string(prompt.size()) +
                      " tokens leaves no room for a response within max_len " +
                      std::to_string(max_len));
    }
    if (ids.size() > max_len) {
      ids.resize(max_len);
      cut = true;
    }
    longest = std::max(longest, ids.size());
    rows.push_back(Row{std::move(ids), prompt.size(), cut});
  }
  Batch b;
  b.batch_size = rows.size();
  b.seq_len = longest;
  b.input_ids.assign(b.batch_size * b.seq_len, tokenizer.pad_id());
  b.attn_mask.assign(b.batch_size * b.seq_len, 0.0);
  b.label_mask.assign(b.batch_size * b.seq_len, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t t = 0; t < rows[r].ids.size(); ++t) {
      b.input_ids[r * b.seq_len + t] = rows[r].ids[t];
      b.attn_mask[r * b.seq_len + t] = 1.0;
      if (t >= rows[r].label_begin) b.label_mask[r * b.seq_len + t] = 1.0;
    }
    b.graphs.push_back(samples[r].graph);
    b.graph_present.push_back(samples[r].graph.has_value() ? 1 : 0);
    b.truncated.push_back(rows[r].truncated ? 1 : 0);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Leakage

std::string leakage_key(const InstructionSample& sample) {
  std::string key = sample.subtask + "|";
  if (sample.molecules.empty()) return key + "text:" + sample.instruction;
  std::vector<std::string> canon;
  for (const auto& m : sample.molecules) {
    auto tokens = ts::try_tokenize(m);
    canon.push_back(tokens ? ts::canonicalize(ts::decode(*tokens)) : "raw:" + m);
  }
  std::sort(canon.begin(), canon.end());
  for (const auto& c : canon) key += c + ";";
  return key;
}

std::vector<InstructionSample> leakage_scan(std::span<const InstructionSample> train,
                                            std::span<const InstructionSample> tests,
                                            LeakageReport& report) {
  std::set<std::string> test_keys;
  for (const auto& s : tests) test_keys.insert(leakage_key(s));
  std::vector<InstructionSample> kept;
  report.scanned += train.size();
  for (const auto& s : train) {
    std::string key = leakage_key(s);
    if (test_keys.count(key)) {
      report.removed_keys.push_back(std::move(key));
    } else {
      kept.push_back(s);
    }
  }
  return kept;
}

std::vector<InstructionSample> filter_split(std::span<const InstructionSample> samples, Split split) {
  std::vector<InstructionSample> out;
  for (const auto& s : samples) {
    if (s.split == split) out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

std::string to_record(const InstructionSample& sample) {
  nlohmann::ordered_json j;
  j["task"] = to_string(sample.task);
  j["subtask"] = sample.subtask;
  j["instruction"] = sample.instruction;
  j["molecules"] = sample.molecules;
  j["response"] = sample.response;
  j["split"] = to_string(sample.split);
  return j.dump();
}

InstructionSample from_record(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("corpus record is not valid JSON: ") + e.what());
  }
  InstructionSample s;
  try {
    s.task = parse_category(j.at("task").get<std::string>());
    s.subtask = j.at("subtask").get<std::string>();
    info(s.subtask);
    s.instruction = j.at("instruction").get<std::string>();
    s.molecules = j.at("molecules").get<std::vector<std::string>>();
    s.response = j.at("response").get<std::string>();
    s.split = parse_split(j.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus record has missing or mistyped fields: ") + e.what());
  }
  if (s.instruction.empty()) throw DataError("corpus record has an empty instruction");
  if (s.task == TaskCategory::Text2Mol && !s.molecules.empty()) {
    throw DataError("Text2Mol record carries input molecules");
  }
  if (!s.molecules.empty()) {
    auto tokens = ts::try_tokenize(s.molecules.front());
    if (!tokens) throw DataError("corpus record molecule is not a valid token string");
    s.graph = ts::decode(*tokens);
  }
  return s;
}

void write_corpus(const std::string& path, std::span<const InstructionSample> samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  for (const auto& s : samples) out << to_record(s) << '\n';
  if (!out) throw DataError("failed writing " + path);
}

std::vector<InstructionSample> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path);
  std::vector<InstructionSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(from_record(line));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string corpus_stats_csv(std::span<const InstructionSample> samples) {
  std::set<std::string> molecules;
  for (const auto& s : samples) {
    for (const auto& m : s.molecules) molecules.insert(m);
  }
  std::map<int, int> atoms, rings;
  std::map<int, int> weights;  // 10-unit bins
  for (const auto& m : molecules) {
    const auto d = ts::descriptor(ts::decode(m));
    ++atoms[d.atom_count];
    ++rings[d.ring_count];
    ++weights[static_cast<int>(std::floor(d.weight / 10.0)) * 10];
  }
  std::string out = "quantity,bin,count\n";
  for (auto [k, v] : atoms) out += "atom_count," + std::to_string(k) + "," + std::to_string(v) + "\n";
  for (auto [k, v] : rings) out += "ring_count," + std::to_string(k) + "," + std::to_string(v) + "\n";
  for (auto [k, v] : weights) {
    out += "weight," + std::to_string(k) + "-" + std::to_string(k + 10) + "," + std::to_string(v) + "\n";
  }
  return out;
}

}  // namespace omnimol::taskforge
