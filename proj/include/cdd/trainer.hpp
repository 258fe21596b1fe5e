#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdd/checkpoint.hpp"
#include "cdd/datagen.hpp"
#include "cdd/denoiser.hpp"
#include "cdd/metrics.hpp"
#include "cdd/optimizer.hpp"
#include "cdd/rng.hpp"
#include "cdd/schedule.hpp"

namespace cdd {

enum class Phase { pretrain, finetune_lora, finetune_lora_cdcd };
// Learning rate over the planned run: fixed, or cosine from lr() to 0 over
// epochs * ceil(n / batch_size) steps.
enum class LrSchedule { constant, cosine };

std::string to_string(Phase p);
Phase parse_phase(const std::string& s);
std::string to_string(LrSchedule s);
LrSchedule parse_lr_schedule(const std::string& s);

struct TrainConfig {
  Phase phase = Phase::pretrain;
  int epochs = 20;
  int batch_size = 32;
  std::optional<double> learning_rate;  // unset selects the phase default
  LrSchedule lr_schedule = LrSchedule::constant;
  double weight_decay = 0.0;
  double lambda = 0.0;
  int N = 10;
  std::uint64_t seed = 0;
  std::optional<LoraConfig> lora;
  bool clamp_negative = false;
  double clamp_max = 1e3;

  // 3e-4 for pretraining, 1e-3 for adapter fine-tuning unless set.
  double lr() const;
  void validate(int d_model) const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct StepLog {
  std::uint64_t step = 0;
  int epoch = 0;
  double t_mean = 0.0;
  double positive_vb = 0.0;
  double negative_vb_mean = 0.0;
  double total = 0.0;
};

std::string step_log_header();
std::string step_log_row(const StepLog& s);

struct EpochStats {
  int epoch = 0;
  std::size_t steps = 0;
  double positive_vb = 0.0;
  double negative_vb_mean = 0.0;
  double total = 0.0;
};

// Single-process optimizer loop. All randomness (data order, steps,
// corruption, negatives) comes from one stream whose state is part of the
// checkpoint, so a resumed run continues bit-identically.
class Trainer {
 public:
  // Fresh pretraining with a model initialized from the run seed.
  Trainer(const TrainConfig& cfg, const DenoiserConfig& model_cfg, const NoiseSchedule& s);

  // Adapter fine-tuning on top of a base checkpoint. Refuses (ConfigError)
  // when the checkpoint architecture hash differs from `expected`.
  static Trainer finetune(const TrainConfig& cfg, const Checkpoint& base,
                          const DenoiserConfig& expected, const NoiseSchedule& s,
                          std::optional<BaseRef> base_ref = std::nullopt);

  // Continues from a checkpoint written by checkpoint().
  static Trainer resume(const Checkpoint& ckpt, const NoiseSchedule& s);

  EpochStats run_epoch(const Dataset& data);
  // Runs epochs until `epoch()` reaches cfg.epochs, or `stop_at` when given
  // (an interrupted run that keeps the planned learning-rate schedule).
  std::vector<EpochStats> train(const Dataset& data,
                                const std::function<void(const EpochStats&)>& on_epoch = {},
                                std::optional<int> stop_at = std::nullopt);

  Checkpoint checkpoint() const;

  const Denoiser& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  TrainConfig& config() { return cfg_; }
  int epoch() const { return epoch_; }
  std::uint64_t steps() const { return step_; }
  const std::vector<StepLog>& log() const { return log_; }

 private:
  Trainer(const TrainConfig& cfg, Denoiser model, const NoiseSchedule& s);
  void build_optimizer();
  double lr_at(std::uint64_t step, std::size_t n) const;

  TrainConfig cfg_;
  NoiseSchedule schedule_;
  Denoiser model_;
  std::vector<NamedTensor> trainable_;
  std::unique_ptr<AdamW> opt_;
  Rng rng_;
  int epoch_ = 0;
  std::uint64_t step_ = 0;
  std::vector<StepLog> log_;
  std::optional<BaseRef> base_ref_;
};

// n_per_condition samples for each condition from the reverse chain,
// generated in batches of at most `batch`.
Dataset sample_model(const X0Predictor& model, const NoiseSchedule& s, int C,
                     std::size_t D, std::size_t n_per_condition, Rng& rng,
                     std::size_t batch = 512, GenerationStats* stats = nullptr);

// Generates from `model` and scores it against fresh reference samples of
// `task`; both draws use streams derived from `seed`.
MetricReport evaluate_model(const X0Predictor& model, const NoiseSchedule& s,
                            const SyntheticTask& task, std::size_t n_per_condition,
                            std::uint64_t seed);

struct AblationConfig {
  TrainConfig finetune;  // phase is overridden per row
  std::size_t n_train = 2000;
  std::size_t n_per_condition = 500;
  std::uint64_t seed = 0;
  std::optional<BaseRef> base_ref;  // recorded in the fine-tuned checkpoints
};

struct AblationRow {
  std::string label;
  MetricReport report;
  std::optional<Checkpoint> checkpoint;  // absent for the base row
  std::vector<StepLog> log;
};

// Base / +LoRA / +LoRA+CDCD on `target` starting from `base`.
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const Checkpoint& base,
                                      const SyntheticTask& target, const NoiseSchedule& s);

}  // namespace cdd
