#include "omnimol/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "omnimol/errors.hpp"

namespace omnimol {

namespace tf = omnimol::taskforge;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must lie in [0, 1)");
  if (epochs <= 0 && max_steps == 0) fail("need epochs > 0 or max_steps > 0");
  if (batch_size == 0 || grad_accum == 0) fail("batch_size and grad_accum must be positive");
  if (lambda_aux < 0.0) fail("lambda_aux must be >= 0");
  if (early_stop_patience < 0) fail("early_stop_patience must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
}

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio) {
  return static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup, double peak) {
  if (warmup > 0 && step <= warmup) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (step >= total_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor lm_loss(const Tensor& logits, const AssembledInputs& in) {
  const std::size_t B = in.batch, T = in.seq;
  if (logits.rows() != B * T) throw DimensionError("lm_loss: logits do not match the inputs");
  std::vector<TokenId> targets(B * T, 0);
  std::vector<double> mask(B * T, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t + 1 < T; ++t) {
      const std::size_t next = b * T + t + 1;
      if (in.label_mask[next] == 0.0) continue;
      targets[b * T + t] = in.ids[next];
      mask[b * T + t] = 1.0;
    }
  }
  return cross_entropy(logits, targets, mask);
}

Tensor total_loss(const Tensor& lm, const std::vector<AuxLossStats>& aux, double lambda) {
  if (aux.empty() || lambda == 0.0) return lm;
  Tensor acc = aux_loss(aux.front());
  for (std::size_t i = 1; i < aux.size(); ++i) acc = add(acc, aux_loss(aux[i]));
  return add(lm, scale(acc, lambda / static_cast<double>(aux.size())));
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(std::span<const NamedParam> params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& np : params) {
    if (!np.tensor.requires_grad() || !np.tensor.has_grad()) continue;
    Tensor t = np.tensor;
    const auto g = t.grad();
    auto& st = state_[np.name];
    if (st.m.empty()) {
      st.m.assign(g.size(), 0.0);
      st.v.assign(g.size(), 0.0);
    }
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
      st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Logging

std::string to_json_line(const LogRecord& r) {
  nlohmann::ordered_json j;
  j["stage"] = r.stage;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["lm_loss"] = r.lm_loss;
  j["aux_loss"] = r.aux_loss;
  j["lambda_aux"] = r.lambda_aux;
  auto g = nlohmann::ordered_json::array();
  for (const auto& [lo, hi] : r.gamma) g.push_back({lo, hi});
  j["gamma_min_max"] = g;
  return j.dump();
}

namespace {

std::vector<std::pair<double, double>> gamma_ranges(const OmniModel& model) {
  std::vector<std::pair<double, double>> out;
  for (const auto& layer : model.adapter_scales()) {
    const auto [lo, hi] = std::minmax_element(layer.begin(), layer.end());
    out.emplace_back(*lo, *hi);
  }
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

void zero_grads(std::span<const NamedParam> params) {
  for (const auto& np : params) {
    Tensor t = np.tensor;
    t.zero_grad();
  }
}

}  // namespace

std::size_t collate_limit(const ModelConfig& cfg) { return cfg.max_seq - (cfg.graph_tokens - 1); }

double evaluate_loss(OmniModel& model, std::span<const tf::InstructionSample> samples,
                     const tf::Tokenizer& tokenizer, std::size_t batch_size) {
  if (samples.empty()) throw UsageError("evaluate_loss: no samples");
  NoGradGuard no_grad;
  double total = 0.0, weight = 0.0;
  const std::size_t limit = collate_limit(model.config());
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const auto chunk = samples.subspan(start, std::min(batch_size, samples.size() - start));
    const AssembledInputs in = model.assemble_inputs(tf::collate(chunk, tokenizer, limit));
    double labelled = 0.0;
    for (std::size_t b = 0; b < in.batch; ++b) {
      for (std::size_t t = 1; t < in.seq; ++t) labelled += in.label_mask[b * in.seq + t];
    }
    if (labelled == 0.0) continue;
    const ForwardResult r = model.forward(in);
    total += lm_loss(r.logits, in).item() * labelled;
    weight += labelled;
  }
  if (weight == 0.0) throw UsageError("evaluate_loss: no labelled tokens");
  return total / weight;
}

StageResult train_stage(OmniModel& model, TrainMode mode, const std::string& tag,
                        std::span<const tf::InstructionSample> train,
                        std::span<const tf::InstructionSample> val, const tf::Tokenizer& tokenizer,
                        const TrainConfig& cfg, const StageHooks& hooks) {
  cfg.validate();
  if (train.empty()) throw DataError("train_stage " + tag + ": empty training set");
  model.set_mode(mode);
  const auto params = model.named_parameters();
  std::vector<NamedParam> trainable;
  for (const auto& np : params) {
    if (np.tensor.requires_grad()) trainable.push_back(np);
  }

  const std::size_t per_step = cfg.batch_size * cfg.grad_accum;
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, train.size() / per_step);
  const std::size_t total =
      cfg.max_steps > 0 ? cfg.max_steps : steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  const std::size_t warm = warmup_steps(total, cfg.warmup_ratio);
  const std::size_t limit = collate_limit(model.config());

  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  StageProgress prog;
  if (hooks.resume_from) prog = *hooks.resume_from;
  if (hooks.resume_optimizer) opt = *hooks.resume_optimizer;

  StageResult res;
  Rng data_rng(cfg.seed ^ fnv1a(tag));
  std::size_t step = 0;
  bool stop = false;
  for (int epoch = 0; !stop; ++epoch) {
    if (cfg.max_steps == 0 && epoch >= cfg.epochs) break;
    Rng epoch_rng = data_rng.split();
    const auto order = shuffled(train.size(), epoch_rng);
    const bool replay = epoch < prog.epoch;
    for (std::size_t s = 0; s < steps_per_epoch && step < total; ++s) {
      ++step;
      if (replay || step <= prog.step) continue;
      double lm_acc = 0.0, aux_acc = 0.0;
      for (std::size_t micro = 0; micro < cfg.grad_accum; ++micro) {
        std::vector<tf::InstructionSample> rows;
        rows.reserve(cfg.batch_size);
        const std::size_t base = (s * cfg.grad_accum + micro) * cfg.batch_size;
        for (std::size_t i = 0; i < cfg.batch_size; ++i) rows.push_back(train[order[(base + i) % train.size()]]);
        const AssembledInputs in = model.assemble_inputs(tf::collate(rows, tokenizer, limit));
        const ForwardResult r = model.forward(in);
        const Tensor lm = lm_loss(r.logits, in);
        const Tensor loss = total_loss(lm, r.aux, cfg.lambda_aux);
        double aux_mean = 0.0;
        for (const auto& a : r.aux) aux_mean += aux_loss(a).item();
        if (!r.aux.empty()) aux_mean /= static_cast<double>(r.aux.size());
        lm_acc += lm.item();
        aux_acc += aux_mean;
        backward(cfg.grad_accum == 1 ? loss : scale(loss, 1.0 / static_cast<double>(cfg.grad_accum)));
      }
      const double lr = lr_at(step, total, warm, cfg.lr);
      opt.step(trainable, lr);
      zero_grads(trainable);
      model.clip_adapters();

      LogRecord rec;
      rec.stage = tag;
      rec.step = step;
      rec.lr = lr;
      rec.lm_loss = lm_acc / static_cast<double>(cfg.grad_accum);
      rec.aux_loss = aux_acc / static_cast<double>(cfg.grad_accum);
      rec.lambda_aux = cfg.lambda_aux;
      rec.gamma = gamma_ranges(model);
      if (hooks.log) *hooks.log << to_json_line(rec) << '\n';
      res.log.push_back(std::move(rec));
      prog.step = step;
    }
    if (replay) continue;
    res.epochs_run += 1;
    prog.epoch = epoch + 1;
    if (!val.empty() && cfg.early_stop_patience > 0) {
      const double v = evaluate_loss(model, val, tokenizer, cfg.batch_size);
      res.val_losses.push_back(v);
      if (!prog.has_best || v < prog.best_val) {
        prog.best_val = v;
        prog.has_best = true;
        prog.bad_evals = 0;
      } else if (++prog.bad_evals >= cfg.early_stop_patience) {
        res.early_stopped = true;
        stop = true;
      }
    }
    if (step >= total) stop = true;
    if (hooks.on_epoch) hooks.on_epoch(prog, opt);
  }
  res.steps = prog.step;
  model.set_mode(TrainMode::Frozen);
  return res;
}

StageResult pretrain(OmniModel& model, std::span<const tf::InstructionSample> train,
                     const tf::Tokenizer& tokenizer, const TrainConfig& cfg,
                     const StageHooks& hooks) {
  return train_stage(model, TrainMode::Pretrain, "pretrain", train, {}, tokenizer, cfg, hooks);
}

StageResult train_stage1(OmniModel& model, std::span<const tf::InstructionSample> align,
                         std::span<const tf::InstructionSample> val,
                         const tf::Tokenizer& tokenizer, const TrainConfig& cfg,
                         const StageHooks& hooks) {
  TrainConfig c = cfg;
  c.lambda_aux = 0.0;
  return train_stage(model, TrainMode::Stage1, "stage1", align, val, tokenizer, c, hooks);
}

StageResult train_stage2(OmniModel& model, std::span<const tf::InstructionSample> train,
                         std::span<const tf::InstructionSample> val,
                         const tf::Tokenizer& tokenizer, const TrainConfig& cfg,
                         const StageHooks& hooks) {
  return train_stage(model, TrainMode::Stage2, "stage2", train, val, tokenizer, cfg, hooks);
}

std::vector<std::string> predict(OmniModel& model, std::span<const tf::InstructionSample> samples,
                                 const tf::Tokenizer& tokenizer, std::size_t max_new) {
  std::vector<std::string> out;
  out.reserve(samples.size());
  const auto& cfg = model.config();
  for (const auto& s : samples) {
    const auto prompt = tf::encode_prompt(s, tokenizer);
    const std::size_t used = prompt.size() + (s.graph ? cfg.graph_tokens - 1 : 0);
    if (used >= cfg.max_seq) throw DataError("predict: prompt does not fit into max_seq");
    const std::size_t budget = std::min(max_new, cfg.max_seq - used);
    const GenerateResult g = model.generate(prompt, s.graph, budget, tokenizer.eot_id());
    out.push_back(tokenizer.decode(g.tokens));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little endian):
//   "OMCK" u32 version
//   str config_json, str stage
//   u64 step, i64 epoch, f64 best_val, i64 bad_evals, u8 has_best
//   u64 n_params, then per param: str name, u64 ndim, u64 dims..., f64 values...
//   u64 adam_steps, u64 n_states, then per state: str name, u64 n, f64 m..., f64 v...
//   u64 fnv1a of everything before it
// where str is u64 length followed by the bytes.

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'O', 'M', 'C', 'K'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::size_t offset() const { return pos_; }
  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw IntegrityError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8(what)) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8(what)) << (8 * i);
    return v;
  }
  std::int64_t i64(const char* what) { return static_cast<std::int64_t>(u64(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  /// Length prefix checked against the remaining bytes before allocating.
  std::uint64_t count(std::size_t elem, const char* what) {
    const std::size_t at = pos_;
    const std::uint64_t n = u64(what);
    if (elem > 0 && n > (in_.size() - pos_) / elem) {
      throw IntegrityError(std::string("implausible length for ") + what, at);
    }
    return n;
  }
  std::string str(const char* what) {
    const auto n = count(1, what);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void expect_magic() {
    need(4, "magic");
    if (std::memcmp(in_.data(), kMagic, 4) != 0) throw IntegrityError("bad checkpoint magic", 0);
    pos_ = 4;
  }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(ck.config_json);
  w.str(ck.stage);
  w.u64(ck.progress.step);
  w.i64(ck.progress.epoch);
  w.f64(ck.progress.best_val);
  w.i64(ck.progress.bad_evals);
  w.u8(ck.progress.has_best ? 1 : 0);
  w.u64(ck.params.size());
  for (const auto& [name, rec] : ck.params) {
    w.str(name);
    w.u64(rec.first.size());
    for (std::size_t d : rec.first) w.u64(d);
    for (double v : rec.second) w.f64(v);
  }
  w.u64(ck.adam_steps);
  w.u64(ck.adam_state.size());
  for (const auto& [name, mo] : ck.adam_state) {
    w.str(name);
    w.u64(mo.m.size());
    for (double v : mo.m) w.f64(v);
    for (double v : mo.v) w.f64(v);
  }
  w.u64(fnv1a(w.bytes()));
  return std::move(w.bytes());
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 12) throw IntegrityError("checkpoint truncated", bytes.size());
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes.substr(body));
  const std::uint64_t stored = tail.u64("checksum");
  Reader r(bytes.substr(0, body));
  r.expect_magic();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  Checkpoint ck;
  ck.config_json = r.str("config");
  ck.stage = r.str("stage");
  ck.progress.step = r.u64("step");
  ck.progress.epoch = static_cast<int>(r.i64("epoch"));
  ck.progress.best_val = r.f64("best_val");
  ck.progress.bad_evals = static_cast<int>(r.i64("bad_evals"));
  ck.progress.has_best = r.u8("has_best") != 0;
  const auto n_params = r.count(8, "parameter count");
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = r.str("parameter name");
    const auto ndim = r.count(8, "parameter rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint64_t d = 0; d < ndim; ++d) {
      const std::size_t at = r.offset();
      shape.push_back(r.u64("parameter dims"));
      if (shape.back() > body || (shape.back() > 0 && numel > body / shape.back())) {
        throw IntegrityError("implausible parameter shape for " + name, at);
      }
      numel *= shape.back();
    }
    const std::size_t at = r.offset();
    r.need(numel * 8, "parameter values");
    std::vector<double> vals(numel);
    for (double& v : vals) v = r.f64("parameter values");
    if (!ck.params.emplace(name, std::make_pair(shape, std::move(vals))).second) {
      throw IntegrityError("duplicate parameter record " + name, at);
    }
  }
  ck.adam_steps = r.u64("optimizer step");
  const auto n_states = r.count(8, "optimizer state count");
  for (std::uint64_t i = 0; i < n_states; ++i) {
    std::string name = r.str("optimizer state name");
    const auto n = r.count(16, "optimizer state size");
    Adam::Moments mo;
    mo.m.resize(n);
    mo.v.resize(n);
    for (double& v : mo.m) v = r.f64("optimizer m");
    for (double& v : mo.v) v = r.f64("optimizer v");
    ck.adam_state.emplace(std::move(name), std::move(mo));
  }
  if (r.offset() != body) throw IntegrityError("trailing bytes before checksum", r.offset());
  if (fnv1a(bytes.substr(0, body)) != stored) throw IntegrityError("checksum mismatch", body);
  return ck;
}

Checkpoint snapshot(const OmniModel& model, const std::string& config_json,
                    const std::string& stage, const StageProgress& progress, const Adam* optimizer) {
  Checkpoint ck;
  ck.config_json = config_json;
  ck.stage = stage;
  ck.progress = progress;
  for (const auto& np : model.named_parameters()) {
    const auto d = np.tensor.data();
    ck.params.emplace(np.name, std::make_pair(np.tensor.shape(), std::vector<double>(d.begin(), d.end())));
  }
  if (optimizer) {
    ck.adam_steps = optimizer->steps();
    ck.adam_state = optimizer->state();
  }
  return ck;
}

void restore(OmniModel& model, const Checkpoint& ck) {
  auto params = model.named_parameters();
  if (params.size() != ck.params.size()) {
    throw IntegrityError("checkpoint holds " + std::to_string(ck.params.size()) +
                             " parameters, model has " + std::to_string(params.size()),
                         0);
  }
  for (auto& np : params) {
    const auto it = ck.params.find(np.name);
    if (it == ck.params.end()) throw IntegrityError("checkpoint lacks parameter " + np.name, 0);
    if (it->second.first != np.tensor.shape()) {
      throw IntegrityError("checkpoint shape mismatch for " + np.name, 0);
    }
    auto dst = np.tensor.mutable_data();
    std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace omnimol
