#include "omnimol/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "omnimol/errors.hpp"

namespace omnimol {

namespace tf = omnimol::taskforge;

namespace {

constexpr std::uint64_t kPretrainSalt = 0x7072657472616E31ULL;

const char* stage_name(int i) {
  static const char* names[] = {"pretrain", "stage1", "stage2"};
  return names[i];
}

ModelConfig seeded_model(const RunConfig& cfg) {
  ModelConfig m = cfg.model;
  m.seed = cfg.seed;
  return m;
}

TrainConfig seeded(TrainConfig t, std::uint64_t seed) {
  t.seed = seed;
  return t;
}

}  // namespace

CorpusSplits build_splits(const RunConfig& cfg, std::vector<tf::InstructionSample> corpus) {
  CorpusSplits out;
  std::vector<tf::InstructionSample> train, val;
  for (auto& s : corpus) {
    if (s.subtask == "align") {
      out.align.push_back(std::move(s));
      continue;
    }
    switch (s.split) {
      case tf::Split::Train: train.push_back(std::move(s)); break;
      case tf::Split::Val: val.push_back(std::move(s)); break;
      case tf::Split::Test: out.test.push_back(std::move(s)); break;
    }
  }
  out.train = tf::leakage_scan(train, out.test, out.leakage);
  tf::LeakageReport val_report;
  out.val = tf::leakage_scan(val, out.test, val_report);
  out.leakage.scanned += val_report.scanned;
  out.leakage.removed_keys.insert(out.leakage.removed_keys.end(), val_report.removed_keys.begin(),
                                  val_report.removed_keys.end());
  if (cfg.pretrain_counts.empty()) {
    out.pretrain = out.train;
  } else {
    tf::CorpusSpec spec = cfg.data;
    spec.counts = cfg.pretrain_counts;
    spec.test_fraction = 0.0;
    spec.val_fraction = 0.0;
    auto drawn = tf::generate_corpus(spec, cfg.seed ^ kPretrainSalt);
    std::vector<tf::InstructionSample> held = out.test;
    held.insert(held.end(), out.val.begin(), out.val.end());
    tf::LeakageReport rep;
    out.pretrain = tf::leakage_scan(drawn, held, rep);
  }
  return out;
}

CorpusSplits build_splits(const RunConfig& cfg) {
  return build_splits(cfg, tf::generate_corpus(cfg.data, cfg.seed));
}

StageSelection parse_stage(std::string_view s) {
  if (s == "1") return StageSelection::One;
  if (s == "2") return StageSelection::Two;
  if (s == "both") return StageSelection::Both;
  throw ConfigError("--stage must be 1, 2 or both");
}

OmniModel model_from_checkpoint(const Checkpoint& ck) {
  RunConfig stored;
  try {
    stored = parse_run_config(ck.config_json);
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint carries an unreadable config: ") + e.what(), 0);
  }
  tf::Tokenizer tok;
  OmniModel model = OmniModel::for_tokenizer(seeded_model(stored), tok);
  restore(model, ck);
  return model;
}

TrainRunResult run_training(const RunConfig& cfg, const CorpusSplits& splits,
                            const TrainRunOptions& opts) {
  const tf::Tokenizer tok;
  const std::string config_json = dump_run_config(cfg);
  TrainRunResult res{OmniModel::for_tokenizer(seeded_model(cfg), tok), {}, {}, {}};
  OmniModel& model = res.model;

  bool run[3] = {true, opts.stages != StageSelection::Two, opts.stages != StageSelection::One};
  int resume_stage = -1;
  std::optional<Checkpoint> resume_ck;
  if (opts.resume) {
    resume_ck = load_checkpoint(*opts.resume);
    const Checkpoint& ck = *resume_ck;
    if (ck.config_json != config_json) {
      throw ConfigError("--resume: checkpoint was written with a different config");
    }
    restore(model, ck);
    std::string tag = ck.stage;
    const bool done = tag.size() > 5 && tag.substr(tag.size() - 5) == ":done";
    if (done) tag.resize(tag.size() - 5);
    int idx = -1;
    for (int i = 0; i < 3; ++i) {
      if (tag == stage_name(i)) idx = i;
    }
    if (idx < 0) throw IntegrityError("checkpoint has unknown stage tag " + ck.stage, 0);
    for (int i = 0; i < idx; ++i) run[i] = false;
    if (done) {
      run[idx] = false;
    } else {
      resume_stage = idx;
    }
    res.final_stage = ck.stage;
    res.final_checkpoint = serialize_checkpoint(ck);
  }

  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);
  auto ckpt_path = [&](const std::string& name) {
    return (std::filesystem::path(opts.out_dir) / (name + ".ckpt")).string();
  };

  for (int i = 0; i < 3; ++i) {
    if (!run[i]) continue;
    const std::string name = stage_name(i);
    const TrainConfig& base = i == 0 ? cfg.pretrain : i == 1 ? cfg.stage1 : cfg.stage2;
    StageHooks hooks;
    hooks.log = opts.log;
    Adam resume_opt(base.beta1, base.beta2, base.adam_eps);
    if (i == resume_stage) {
      resume_opt.restore(resume_ck->adam_steps, resume_ck->adam_state);
      hooks.resume_from = &resume_ck->progress;
      hooks.resume_optimizer = &resume_opt;
    }
    if (!opts.out_dir.empty()) {
      hooks.on_epoch = [&, name](const StageProgress& p, const Adam& opt) {
        save_checkpoint(ckpt_path(name), snapshot(model, config_json, name, p, &opt));
      };
    }
    StageResult r;
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(i);
    if (i == 0) {
      r = pretrain(model, splits.pretrain, tok, seeded(cfg.pretrain, seed), hooks);
    } else if (i == 1) {
      r = train_stage1(model, splits.align, {}, tok, seeded(cfg.stage1, seed), hooks);
    } else {
      r = train_stage2(model, splits.train, splits.val, tok, seeded(cfg.stage2, seed), hooks);
    }
    StageProgress done;
    done.step = r.steps;
    done.epoch = r.epochs_run;
    const Checkpoint ck = snapshot(model, config_json, name + ":done", done, nullptr);
    res.final_checkpoint = serialize_checkpoint(ck);
    res.final_stage = ck.stage;
    if (!opts.out_dir.empty()) write_text(ckpt_path(name), res.final_checkpoint);
    res.stages.push_back(std::move(r));
  }
  if (res.final_checkpoint.empty()) {
    res.final_checkpoint = serialize_checkpoint(snapshot(model, config_json, "init", {}, nullptr));
    res.final_stage = "init";
  }
  if (!opts.out_dir.empty()) write_text(ckpt_path("final"), res.final_checkpoint);
  return res;
}

std::vector<metrics::EvalRecord> run_predictions(OmniModel& model, const RunConfig& cfg,
                                                 std::span<const tf::InstructionSample> samples) {
  std::vector<tf::InstructionSample> chosen;
  for (const auto& s : samples) {
    if (!cfg.eval.subtasks.empty() &&
        std::find(cfg.eval.subtasks.begin(), cfg.eval.subtasks.end(), s.subtask) ==
            cfg.eval.subtasks.end()) {
      continue;
    }
    chosen.push_back(s);
  }
  const tf::Tokenizer tok;
  const auto preds = predict(model, chosen, tok, cfg.eval.max_new_tokens);
  std::vector<metrics::EvalRecord> out;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    out.push_back({tf::to_string(chosen[i].task), chosen[i].subtask, preds[i], chosen[i].response});
  }
  return out;
}

std::string manifest_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["tool"] = "omnimol";
  j["version"] = kVersion;
  j["command"] = m.command;
  j["seed"] = m.seed;
  j["config_digest"] = fnv1a(m.config_json);
  j["config"] = nlohmann::ordered_json::parse(m.config_json);
  auto digests = [](const auto& v) {
    nlohmann::ordered_json o = nlohmann::ordered_json::object();
    for (const auto& [k, d] : v) o[k] = d;
    return o;
  };
  j["inputs"] = digests(m.inputs);
  j["outputs"] = digests(m.outputs);
  return j.dump(2) + "\n";
}

void write_text(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("failed writing " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace omnimol
