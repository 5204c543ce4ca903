// omnimol: forge corpora, train, evaluate and run the alignment study.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <json.hpp>

#include "omnimol/alignment.hpp"
#include "omnimol/config.hpp"
#include "omnimol/errors.hpp"
#include "omnimol/metrics.hpp"
#include "omnimol/pipeline.hpp"
#include "omnimol/taskforge.hpp"
#include "omnimol/training.hpp"

namespace fs = std::filesystem;
namespace tf = omnimol::taskforge;
using namespace omnimol;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kIntegrity = 4 };

RunConfig load(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig cfg = path.empty() ? RunConfig::defaults() : load_run_config(path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

std::string path_in(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::vector<tf::InstructionSample> corpus_for(const RunConfig& cfg, const std::string& corpus) {
  return corpus.empty() ? tf::generate_corpus(cfg.data, cfg.seed) : tf::read_corpus(corpus);
}

void write_manifest(const std::string& dir, Manifest m) {
  write_text(path_in(dir, "manifest.json"), manifest_json(m));
}

int cmd_forge(const RunConfig& cfg, const std::string& out) {
  fs::create_directories(out);
  const auto corpus = tf::generate_corpus(cfg.data, cfg.seed);
  const std::string corpus_path = path_in(out, "corpus.jsonl");
  tf::write_corpus(corpus_path, corpus);
  const std::string stats = tf::corpus_stats_csv(corpus);
  write_text(path_in(out, "stats.csv"), stats);
  const CorpusSplits splits = build_splits(cfg, corpus);
  nlohmann::ordered_json leak;
  leak["scanned"] = splits.leakage.scanned;
  leak["removed"] = splits.leakage.removed_keys;
  write_text(path_in(out, "leakage.json"), leak.dump(2) + "\n");
  write_manifest(out, {"forge", dump_run_config(cfg), cfg.seed, {},
                       {{"corpus.jsonl", fnv1a(read_text(corpus_path))}, {"stats.csv", fnv1a(stats)}}});
  std::cout << "wrote " << corpus.size() << " samples to " << corpus_path << "\n";
  return kOk;
}

int cmd_train(const RunConfig& cfg, const std::string& stage, const std::string& resume,
              const std::string& corpus, const std::string& out) {
  fs::create_directories(out);
  const CorpusSplits splits = build_splits(cfg, corpus_for(cfg, corpus));
  std::ofstream log(path_in(out, "train_log.jsonl"), std::ios::binary | std::ios::trunc);
  TrainRunOptions opts;
  opts.stages = parse_stage(stage);
  opts.out_dir = out;
  opts.log = &log;
  if (!resume.empty()) opts.resume = resume;
  const TrainRunResult res = run_training(cfg, splits, opts);
  Manifest m{"train --stage " + stage, dump_run_config(cfg), cfg.seed, {}, {}};
  if (!corpus.empty()) m.inputs.emplace_back(corpus, fnv1a(read_text(corpus)));
  if (!resume.empty()) m.inputs.emplace_back(resume, fnv1a(read_text(resume)));
  m.outputs.emplace_back("final.ckpt", fnv1a(res.final_checkpoint));
  write_manifest(out, m);
  std::cout << "final checkpoint " << path_in(out, "final.ckpt") << " (" << res.final_stage
            << ", digest " << fnv1a(res.final_checkpoint) << ")\n";
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& predictions,
             const std::string& corpus, const std::string& split, const std::string& out) {
  if (ckpt.empty() == predictions.empty()) {
    throw ConfigError("eval needs exactly one of --ckpt or --predictions");
  }
  fs::create_directories(out);
  std::vector<metrics::EvalRecord> records;
  Manifest m{"eval", dump_run_config(cfg), cfg.seed, {}, {}};
  if (!ckpt.empty()) {
    const Checkpoint ck = load_checkpoint(ckpt);
    OmniModel model = model_from_checkpoint(ck);
    const CorpusSplits splits = build_splits(cfg, corpus_for(cfg, corpus));
    const std::string which = split.empty() ? cfg.eval.split : split;
    const auto& samples = which == "test" ? splits.test : which == "val" ? splits.val : splits.train;
    records = run_predictions(model, cfg, samples);
    metrics::write_predictions(path_in(out, "predictions.jsonl"), records);
    m.inputs.emplace_back(ckpt, fnv1a(read_text(ckpt)));
  } else {
    records = metrics::read_predictions(predictions);
    m.inputs.emplace_back(predictions, fnv1a(read_text(predictions)));
  }
  const std::string csv = metrics::summary_csv(metrics::summarize(records));
  write_text(path_in(out, "metrics.csv"), csv);
  m.outputs.emplace_back("metrics.csv", fnv1a(csv));
  write_manifest(out, m);
  std::cout << csv;
  return kOk;
}

int cmd_align(const RunConfig& cfg, const std::string& ckpt, const std::string& out) {
  fs::create_directories(out);
  const tf::Tokenizer tok;
  const CorpusSplits splits = build_splits(cfg);
  Manifest m{"align", dump_run_config(cfg), cfg.seed, {}, {}};
  std::optional<OmniModel> backbone;
  if (!ckpt.empty()) {
    backbone.emplace(model_from_checkpoint(load_checkpoint(ckpt)));
    m.inputs.emplace_back(ckpt, fnv1a(read_text(ckpt)));
  } else {
    TrainRunOptions opts;
    opts.stages = StageSelection::One;
    backbone.emplace(std::move(run_training(cfg, splits, opts).model));
  }
  std::vector<tf::InstructionSample> probe(
      splits.test.begin(),
      splits.test.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.align.probe_size, splits.test.size())));
  TrainConfig t = cfg.align.train;
  t.seed = cfg.seed;
  const auto ladder = alignment::default_ladder(cfg.align.subtasks);
  const auto report =
      alignment::task_scaling_study(*backbone, ladder, splits.train, probe, tok, t, cfg.align.k);
  const std::string csv = alignment::heatmap_csv(report);
  write_text(path_in(out, "heatmap.csv"), csv);
  write_text(path_in(out, "alignment.json"), alignment::report_json(report));
  m.outputs.emplace_back("heatmap.csv", fnv1a(csv));
  write_manifest(out, m);
  std::cout << csv;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task molecular instruction tuning on a toy decoder"};
  app.require_subcommand(1);
  std::string config;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config, "Run configuration (JSON)");
  app.add_option("--seed", seed, "Override the config seed");

  auto* print = app.add_subcommand("print-config", "Print the effective configuration");

  std::string out = "out";
  auto* forge = app.add_subcommand("forge", "Generate the synthetic corpus");
  forge->add_option("--out", out, "Output directory");

  std::string stage = "both", resume, corpus;
  auto* train = app.add_subcommand("train", "Pretrain the backbone and run the tuning stages");
  train->add_option("--stage", stage, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}));
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--corpus", corpus, "Corpus JSONL (default: regenerate from the config)");
  train->add_option("--out", out, "Output directory");

  std::string ckpt, predictions, split;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint or a prediction file");
  eval->add_option("--ckpt", ckpt, "Checkpoint to generate predictions with");
  eval->add_option("--predictions", predictions, "Prediction records (JSONL)");
  eval->add_option("--corpus", corpus, "Corpus JSONL (default: regenerate from the config)");
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", out, "Output directory");

  auto* align = app.add_subcommand("align", "Task-count alignment heatmap");
  align->add_option("--ckpt", ckpt, "Pretrained backbone checkpoint");
  align->add_option("--out", out, "Output directory");

  for (auto* sub : {print, forge, train, eval, align}) {
    sub->add_option("--config", config, "Run configuration (JSON)");
    sub->add_option("--seed", seed, "Override the config seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const RunConfig cfg = load(config, seed);
    if (*print) {
      std::cout << dump_run_config(cfg);
      return kOk;
    }
    if (*forge) return cmd_forge(cfg, out);
    if (*train) return cmd_train(cfg, stage, resume, corpus, out);
    if (*eval) return cmd_eval(cfg, ckpt, predictions, corpus, split, out);
    if (*align) return cmd_align(cfg, ckpt, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return kIntegrity;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const LexicalError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const InputError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
