#include "cdd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include <json.hpp>

#include "cdd/errors.hpp"
#include "cdd/loss.hpp"

namespace cdd {

namespace {

constexpr double kDefaultCdcdLambda = 5e-5;

std::string stream_label(Phase p) { return "trainer." + to_string(p); }

std::vector<NamedTensor> trainable_named(const Denoiser& model) {
  std::vector<NamedTensor> out;
  for (auto& nt : model.parameters())
    if (nt.tensor.requires_grad()) out.push_back(std::move(nt));
  return out;
}

std::string batch_dump(std::span<const TokenSequence> x0s, std::span<const int> conds,
                       std::uint64_t step, int epoch) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["conds"] = std::vector<int>(conds.begin(), conds.end());
  auto& toks = j["tokens"] = nlohmann::ordered_json::array();
  for (const auto& s : x0s) toks.push_back(s.tokens);
  return j.dump();
}

}  // namespace

std::string to_string(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::finetune_lora: return "finetune_lora";
    case Phase::finetune_lora_cdcd: return "finetune_lora_cdcd";
  }
  return "?";
}

Phase parse_phase(const std::string& s) {
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune_lora") return Phase::finetune_lora;
  if (s == "finetune_lora_cdcd") return Phase::finetune_lora_cdcd;
  throw ConfigError("train: unknown phase '" + s + "'");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw ConfigError("train: unknown lr_schedule '" + s + "' (constant or cosine)");
}

double TrainConfig::lr() const {
  if (learning_rate) return *learning_rate;
  return phase == Phase::pretrain ? 3e-4 : 1e-3;
}

void TrainConfig::validate(int d_model) const {
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr() >= 0.0) || !std::isfinite(lr())) throw ConfigError("train: learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train: lambda must be >= 0");
  if (lambda > 0.0 && phase != Phase::finetune_lora_cdcd) {
    throw ConfigError("train: lambda > 0 is only valid in phase finetune_lora_cdcd");
  }
  if (phase == Phase::finetune_lora_cdcd) {
    if (!(lambda > 0.0)) throw ConfigError("train: finetune_lora_cdcd needs lambda > 0");
    if (N < 1) throw ConfigError("train: finetune_lora_cdcd needs N >= 1");
  }
  if (phase != Phase::pretrain) {
    if (!lora) throw ConfigError("train: fine-tuning phases need a lora config");
    lora->validate(d_model);
  }
  if (clamp_negative && !(clamp_max > 0.0)) throw ConfigError("train: clamp_max must be > 0");
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["phase"] = to_string(phase);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = lr();
  j["lr_schedule"] = to_string(lr_schedule);
  j["weight_decay"] = weight_decay;
  j["lambda"] = lambda;
  j["N"] = N;
  j["seed"] = seed;
  if (lora) {
    j["lora"] = {{"r", lora->r}, {"alpha", lora->alpha}, {"targets", to_string(lora->targets)}};
  } else {
    j["lora"] = nullptr;
  }
  j["clamp_negative"] = clamp_negative;
  j["clamp_max"] = clamp_max;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.phase = parse_phase(j.at("phase"));
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.learning_rate = j.at("learning_rate").get<double>();
    c.lr_schedule = parse_lr_schedule(j.at("lr_schedule"));
    c.weight_decay = j.at("weight_decay");
    c.lambda = j.at("lambda");
    c.N = j.at("N");
    c.seed = j.at("seed");
    if (!j.at("lora").is_null()) {
      LoraConfig l;
      l.r = j["lora"].at("r");
      l.alpha = j["lora"].at("alpha");
      l.targets = parse_lora_targets(j["lora"].at("targets"));
      c.lora = l;
    }
    c.clamp_negative = j.at("clamp_negative");
    c.clamp_max = j.at("clamp_max");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train: malformed config record: ") + e.what());
  }
  return c;
}

std::string step_log_header() { return "step,epoch,t_mean,positive_vb,negative_vb_mean,total"; }

std::string step_log_row(const StepLog& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%d,%.17g,%.17g,%.17g,%.17g",
                static_cast<unsigned long long>(s.step), s.epoch, s.t_mean, s.positive_vb,
                s.negative_vb_mean, s.total);
  return buf;
}

Trainer::Trainer(const TrainConfig& cfg, Denoiser model, const NoiseSchedule& s)
    : cfg_(cfg), schedule_(s), model_(std::move(model)),
      rng_(Rng::derive(cfg.seed, stream_label(cfg.phase))) {
  cfg_.validate(model_.config().d_model);
  if (model_.config().K != s.K() || model_.config().T != s.T()) {
    throw ConfigError("train: model (K, T) does not match the schedule");
  }
}

Trainer::Trainer(const TrainConfig& cfg, const DenoiserConfig& model_cfg,
                 const NoiseSchedule& s)
    : Trainer(cfg, [&] {
        Rng init = Rng::derive(cfg.seed, "trainer.init");
        return Denoiser(model_cfg, init);
      }(), s) {
  if (cfg.phase != Phase::pretrain) {
    throw ConfigError("train: phase " + to_string(cfg.phase) + " needs a base checkpoint");
  }
  build_optimizer();
}

Trainer Trainer::finetune(const TrainConfig& cfg, const Checkpoint& base,
                          const DenoiserConfig& expected, const NoiseSchedule& s,
                          std::optional<BaseRef> base_ref) {
  if (cfg.phase == Phase::pretrain) {
    throw ConfigError("finetune: phase must be finetune_lora or finetune_lora_cdcd");
  }
  if (base.config_hash() != config_hash(expected)) {
    throw ConfigError("finetune: base checkpoint architecture " + base.config_hash().substr(0, 12) +
                      " does not match the configured model " +
                      config_hash(expected).substr(0, 12));
  }
  if (base.lora) throw ConfigError("finetune: base checkpoint already carries adapters");
  const ScheduleConfig& bs = base.schedule;
  if (bs.K != s.K() || bs.T != s.T() ||
      bs.terminal_mask_mass != s.config().terminal_mask_mass ||
      bs.terminal_uniform_mass != s.config().terminal_uniform_mass) {
    throw ConfigError("finetune: base checkpoint was trained with a different noise schedule");
  }
  cfg.validate(expected.d_model);
  Denoiser model = restore_model(base);
  Rng lora_rng = Rng::derive(cfg.seed, "trainer.lora");
  model.attach_lora(*cfg.lora, lora_rng);
  Trainer tr(cfg, std::move(model), s);
  tr.base_ref_ = std::move(base_ref);
  tr.build_optimizer();
  return tr;
}

Trainer Trainer::resume(const Checkpoint& ckpt, const NoiseSchedule& s) {
  const TrainConfig cfg = TrainConfig::from_json(ckpt.train_config_json);
  Trainer tr(cfg, restore_model(ckpt), s);
  tr.build_optimizer();
  if (ckpt.optimizer.size() != 2 * tr.trainable_.size()) {
    throw IoError("resume: optimizer state does not match the trainable set");
  }
  for (std::size_t i = 0; i < tr.trainable_.size(); ++i) {
    const StoredTensor& m = ckpt.optimizer[2 * i];
    const StoredTensor& v = ckpt.optimizer[2 * i + 1];
    const std::string& name = tr.trainable_[i].name;
    if (m.name != "m/" + name || v.name != "v/" + name ||
        m.values.size() != tr.trainable_[i].tensor.numel() ||
        v.values.size() != m.values.size()) {
      throw IoError("resume: optimizer section mismatch at '" + name + "'");
    }
    tr.opt_->first_moment(i) = m.values;
    tr.opt_->second_moment(i) = v.values;
  }
  tr.opt_->set_steps(ckpt.optimizer_steps);
  tr.rng_.load_state(ckpt.rng_state);
  tr.epoch_ = ckpt.epoch;
  tr.step_ = ckpt.step;
  tr.base_ref_ = ckpt.base_ref;
  return tr;
}

void Trainer::build_optimizer() {
  trainable_ = trainable_named(model_);
  std::vector<Tensor> params;
  for (const auto& nt : trainable_) params.push_back(nt.tensor);
  AdamWConfig oc;
  oc.lr = cfg_.lr();
  oc.weight_decay = cfg_.weight_decay;
  opt_ = std::make_unique<AdamW>(std::move(params), oc);
}

double Trainer::lr_at(std::uint64_t step, std::size_t n) const {
  if (cfg_.lr_schedule == LrSchedule::constant) return cfg_.lr();
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  const double total = static_cast<double>(cfg_.epochs) * static_cast<double>((n + bs - 1) / bs);
  if (total <= 0.0) return cfg_.lr();
  const double u = std::min(1.0, static_cast<double>(step) / total);
  return cfg_.lr() * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

EpochStats Trainer::run_epoch(const Dataset& data) {
  if (data.size() == 0) throw UsageError("train: empty dataset");
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng_.below(i)]);

  ContrastiveOptions opts;
  opts.lambda = cfg_.phase == Phase::finetune_lora_cdcd ? cfg_.lambda : 0.0;
  opts.negatives = cfg_.N;
  opts.clamp_negative = cfg_.clamp_negative;
  opts.clamp_max = cfg_.clamp_max;

  ++epoch_;
  EpochStats stats;
  stats.epoch = epoch_;
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    std::vector<TokenSequence> x0s;
    std::vector<int> conds;
    for (std::size_t i = start; i < end; ++i) {
      x0s.push_back(data.records[order[i]].seq);
      conds.push_back(data.records[order[i]].cond);
    }
    Tape tape;
    opt_->set_lr(lr_at(step_, n));
    LossBreakdown loss = batch_loss(tape, model_, schedule_, x0s, conds, opts, rng_);
    if (!std::isfinite(loss.total)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step_ + 1),
                         batch_dump(x0s, conds, step_ + 1, epoch_));
    }
    tape.backward(loss.objective);
    try {
      opt_->step();
    } catch (const NumericError& e) {
      throw NumericError(e.what(), batch_dump(x0s, conds, step_ + 1, epoch_));
    }
    opt_->zero_grad();
    ++step_;
    log_.push_back({step_, epoch_, loss.mean_step, loss.positive_vb, loss.negative_vb_mean,
                    loss.total});
    ++stats.steps;
    stats.positive_vb += loss.positive_vb;
    stats.negative_vb_mean += loss.negative_vb_mean;
    stats.total += loss.total;
  }
  const auto k = static_cast<double>(stats.steps);
  stats.positive_vb /= k;
  stats.negative_vb_mean /= k;
  stats.total /= k;
  return stats;
}

std::vector<EpochStats> Trainer::train(const Dataset& data,
                                       const std::function<void(const EpochStats&)>& on_epoch,
                                       std::optional<int> stop_at) {
  const int last = stop_at ? std::min(*stop_at, cfg_.epochs) : cfg_.epochs;
  std::vector<EpochStats> out;
  while (epoch_ < last) {
    out.push_back(run_epoch(data));
    if (on_epoch) on_epoch(out.back());
  }
  return out;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.model_config = model_.config();
  c.schedule = schedule_.config();
  c.lora = model_.lora_config();
  c.base = store(model_.base_parameters());
  c.adapters = store(model_.lora_parameters());
  for (std::size_t i = 0; i < trainable_.size(); ++i) {
    const Shape& shape = trainable_[i].tensor.shape();
    c.optimizer.push_back({"m/" + trainable_[i].name, shape, opt_->first_moment(i)});
    c.optimizer.push_back({"v/" + trainable_[i].name, shape, opt_->second_moment(i)});
  }
  c.optimizer_steps = opt_->steps();
  c.epoch = epoch_;
  c.step = step_;
  c.rng_state = rng_.save_state();
  c.train_config_json = cfg_.to_json();
  c.base_ref = base_ref_;
  return c;
}

Dataset sample_model(const X0Predictor& model, const NoiseSchedule& s, int C,
                     std::size_t D, std::size_t n_per_condition, Rng& rng,
                     std::size_t batch, GenerationStats* stats) {
  if (batch == 0) throw UsageError("sample_model: batch must be >= 1");
  Dataset out;
  std::vector<int> conds;
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n_per_condition; ++i) conds.push_back(c);
  std::vector<double> entropy_sum(static_cast<std::size_t>(s.T()), 0.0);
  for (std::size_t start = 0; start < conds.size(); start += batch) {
    const std::size_t end = std::min(conds.size(), start + batch);
    const std::span<const int> chunk(conds.data() + start, end - start);
    GenerationResult r = generate(model, s, chunk, D, rng);
    for (std::size_t i = 0; i < r.sequences.size(); ++i) {
      out.records.push_back({chunk[i], std::move(r.sequences[i]), Split::val});
    }
    if (stats) {
      stats->residual_masks += r.stats.residual_masks;
      for (std::size_t k = 0; k < entropy_sum.size(); ++k)
        entropy_sum[k] += r.stats.entropy_trace[k] * static_cast<double>(chunk.size());
    }
  }
  if (stats) {
    stats->entropy_trace.clear();
    for (double e : entropy_sum) stats->entropy_trace.push_back(e / static_cast<double>(conds.size()));
  }
  return out;
}

MetricReport evaluate_model(const X0Predictor& model, const NoiseSchedule& s,
                            const SyntheticTask& task, std::size_t n_per_condition,
                            std::uint64_t seed) {
  Rng gen_rng = Rng::derive(seed, "eval.generate");
  Rng ref_rng = Rng::derive(seed, "eval.reference");
  const Dataset gen = sample_model(model, s, task.C, static_cast<std::size_t>(task.D),
                                   n_per_condition, gen_rng);
  const Dataset ref = sample_per_condition(task, n_per_condition, ref_rng, Split::val);
  return oracle_report(task, gen, ref, mix_seed(seed, "eval.metrics"));
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const Checkpoint& base,
                                      const SyntheticTask& target, const NoiseSchedule& s) {
  Rng data_rng = Rng::derive(cfg.seed, "ablation.data");
  const Dataset train = sample_dataset(target, cfg.n_train, data_rng);
  std::vector<AblationRow> rows;

  const Denoiser base_model = restore_model(base);
  rows.push_back({"base", evaluate_model(base_model, s, target, cfg.n_per_condition, cfg.seed),
                  std::nullopt, {}});

  const std::pair<const char*, Phase> variants[] = {{"+LoRA", Phase::finetune_lora},
                                                    {"+LoRA+CDCD", Phase::finetune_lora_cdcd}};
  for (const auto& [label, phase] : variants) {
    TrainConfig tc = cfg.finetune;
    tc.phase = phase;
    if (phase == Phase::finetune_lora) {
      tc.lambda = 0.0;
    } else if (!(tc.lambda > 0.0)) {
      tc.lambda = kDefaultCdcdLambda;
    }
    if (!tc.lora) tc.lora = LoraConfig{};
    Trainer tr = Trainer::finetune(tc, base, base.model_config, s, cfg.base_ref);
    tr.train(train);
    rows.push_back({label,
                    evaluate_model(tr.model(), s, target, cfg.n_per_condition, cfg.seed),
                    tr.checkpoint(), tr.log()});
  }
  return rows;
}

}  // namespace cdd
