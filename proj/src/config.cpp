#include "omnimol/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "omnimol/errors.hpp"

namespace omnimol {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

/// Reads known keys out of one JSON object, rejecting everything else.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: section '" + name_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + name_ + "." + key + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + name_ + "." + key + "' has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_model(const json& j, ModelConfig& m) {
  Section s(j, "model");
  s.get("d_model", m.d_model);
  s.get("n_layers", m.n_layers);
  s.get("n_heads", m.n_heads);
  s.get("d_ff", m.d_ff);
  s.get("max_seq", m.max_seq);
  s.get("gal_rank", m.gal_rank);
  s.get("n_routed", m.n_routed);
  s.get("top_e", m.top_e);
  s.get("l_moge_fraction", m.l_moge_fraction);
  s.get("graph_dim", m.graph_dim);
  s.get("graph_tokens", m.graph_tokens);
}

ordered_json write_model(const ModelConfig& m) {
  ordered_json j;
  j["d_model"] = m.d_model;
  j["n_layers"] = m.n_layers;
  j["n_heads"] = m.n_heads;
  j["d_ff"] = m.d_ff;
  j["max_seq"] = m.max_seq;
  j["gal_rank"] = m.gal_rank;
  j["n_routed"] = m.n_routed;
  j["top_e"] = m.top_e;
  j["l_moge_fraction"] = m.l_moge_fraction;
  j["graph_dim"] = m.graph_dim;
  j["graph_tokens"] = m.graph_tokens;
  return j;
}

void read_train(const json& j, const std::string& name, TrainConfig& t) {
  Section s(j, name);
  s.get("lr", t.lr);
  s.get("epochs", t.epochs);
  s.get("max_steps", t.max_steps);
  s.get("warmup_ratio", t.warmup_ratio);
  s.get("batch_size", t.batch_size);
  s.get("grad_accum", t.grad_accum);
  s.get("lambda_aux", t.lambda_aux);
  s.get("early_stop_patience", t.early_stop_patience);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("adam_eps", t.adam_eps);
}

ordered_json write_train(const TrainConfig& t) {
  ordered_json j;
  j["lr"] = t.lr;
  j["epochs"] = t.epochs;
  j["max_steps"] = t.max_steps;
  j["warmup_ratio"] = t.warmup_ratio;
  j["batch_size"] = t.batch_size;
  j["grad_accum"] = t.grad_accum;
  j["lambda_aux"] = t.lambda_aux;
  j["early_stop_patience"] = t.early_stop_patience;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  return j;
}

void read_data(const json& j, taskforge::CorpusSpec& d, std::map<std::string, int>& pre) {
  Section s(j, "data");
  s.get("counts", d.counts);
  s.get("pretrain_counts", pre);
  s.get("test_fraction", d.test_fraction);
  s.get("val_fraction", d.val_fraction);
  s.get("min_atoms", d.min_atoms);
  s.get("max_atoms", d.max_atoms);
  s.get("max_design_atoms", d.max_design_atoms);
}

ordered_json write_counts(const std::map<std::string, int>& m) {
  ordered_json counts = ordered_json::object();
  for (const auto& name : taskforge::subtask_names()) {
    if (auto it = m.find(name); it != m.end()) counts[name] = it->second;
  }
  for (const auto& [k, v] : m) {
    if (!counts.contains(k)) counts[k] = v;
  }
  return counts;
}

ordered_json write_data(const taskforge::CorpusSpec& d, const std::map<std::string, int>& pre) {
  ordered_json j;
  j["counts"] = write_counts(d.counts);
  j["pretrain_counts"] = write_counts(pre);
  j["test_fraction"] = d.test_fraction;
  j["val_fraction"] = d.val_fraction;
  j["min_atoms"] = d.min_atoms;
  j["max_atoms"] = d.max_atoms;
  j["max_design_atoms"] = d.max_design_atoms;
  return j;
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.pretrain.lr = 3e-3;
  c.pretrain.max_steps = 1200;
  c.pretrain.warmup_ratio = 0.05;
  c.pretrain.lambda_aux = 0.0;
  c.pretrain.early_stop_patience = 0;
  c.stage1.lr = 1e-3;
  c.stage1.epochs = 2;
  c.stage1.lambda_aux = 0.0;
  c.stage1.early_stop_patience = 0;
  c.data.counts = {{"edit", 600}, {"grow", 300},    {"weight", 300}, {"atoms", 400},
                   {"caption", 388}, {"design", 12}, {"align", 400}};
  c.pretrain_counts = {{"edit", 2400}, {"grow", 1200},   {"weight", 1200},
                       {"atoms", 1600}, {"caption", 1600}, {"design", 12}};
  c.align.train.epochs = 3;
  c.align.train.lr = 1e-3;
  c.align.train.early_stop_patience = 0;
  return c;
}

void RunConfig::validate() const {
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = taskforge::Tokenizer().size();
  try {
    m.validate();
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
  pretrain.validate();
  stage1.validate();
  stage2.validate();
  align.train.validate();
  for (const auto* counts : {&data.counts, &pretrain_counts}) {
    for (const auto& [name, n] : *counts) {
      const auto& names = taskforge::subtask_names();
      if (std::find(names.begin(), names.end(), name) == names.end()) {
        throw ConfigError("config: unknown subtask '" + name + "' in data counts");
      }
      if (n < 0) throw ConfigError("config: negative count for '" + name + "'");
    }
  }
  if (data.min_atoms < 1 || data.max_atoms < data.min_atoms) throw ConfigError("config: bad atom range");
  if (data.test_fraction < 0 || data.val_fraction < 0 || data.test_fraction + data.val_fraction >= 1) {
    throw ConfigError("config: split fractions must be >= 0 and sum below 1");
  }
  if (eval.split != "train" && eval.split != "val" && eval.split != "test") {
    throw ConfigError("config: eval.split must be train, val or test");
  }
  if (eval.max_new_tokens == 0) throw ConfigError("config: eval.max_new_tokens must be positive");
  if (align.k == 0) throw ConfigError("config: align.k must be positive");
  if (align.probe_size < 2) throw ConfigError("config: align.probe_size must be >= 2");
  if (align.subtasks.empty()) throw ConfigError("config: align.subtasks is empty");
}

RunConfig parse_run_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  RunConfig c = RunConfig::defaults();
  {
    Section root(j, "config");
    root.get("seed", c.seed);
    if (auto* s = root.child("model")) read_model(*s, c.model);
    if (auto* s = root.child("pretrain")) read_train(*s, "pretrain", c.pretrain);
    if (auto* s = root.child("stage1")) read_train(*s, "stage1", c.stage1);
    if (auto* s = root.child("train")) read_train(*s, "train", c.stage2);
    if (auto* s = root.child("data")) read_data(*s, c.data, c.pretrain_counts);
    if (auto* s = root.child("eval")) {
      Section e(*s, "eval");
      e.get("split", c.eval.split);
      e.get("max_new_tokens", c.eval.max_new_tokens);
      e.get("subtasks", c.eval.subtasks);
    }
    if (auto* s = root.child("align")) {
      Section a(*s, "align");
      a.get("subtasks", c.align.subtasks);
      a.get("k", c.align.k);
      a.get("probe_size", c.align.probe_size);
      if (auto* t = a.child("train")) read_train(*t, "align.train", c.align.train);
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["model"] = write_model(c.model);
  j["pretrain"] = write_train(c.pretrain);
  j["stage1"] = write_train(c.stage1);
  j["train"] = write_train(c.stage2);
  j["data"] = write_data(c.data, c.pretrain_counts);
  ordered_json e;
  e["split"] = c.eval.split;
  e["max_new_tokens"] = c.eval.max_new_tokens;
  e["subtasks"] = c.eval.subtasks;
  j["eval"] = e;
  ordered_json a;
  a["subtasks"] = c.align.subtasks;
  a["k"] = c.align.k;
  a["probe_size"] = c.align.probe_size;
  a["train"] = write_train(c.align.train);
  j["align"] = a;
  return j.dump(2) + "\n";
}

}  // namespace omnimol
