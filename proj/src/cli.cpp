#include "cdd/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdd/checkpoint.hpp"
#include "cdd/config.hpp"
#include "cdd/datagen.hpp"
#include "cdd/errors.hpp"
#include "cdd/hash.hpp"
#include "cdd/io.hpp"
#include "cdd/metrics.hpp"
#include "cdd/trainer.hpp"
#include "cdd/verify/suites.hpp"

#ifndef CDD_VERSION
#define CDD_VERSION "0.1.0-unknown"
#endif

namespace cdd::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

const char* version() { return CDD_VERSION; }

namespace {

class VerificationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  bool verbose = false;

  std::string resume;
  std::optional<int> stop_after;
  std::string base;
  bool ablation = false;
  std::string checkpoint;
  std::optional<std::size_t> n;
  std::optional<int> cond;
  std::string samples;
};

struct Context {
  std::string command;
  ConfigMap map;
  RunConfig rc;
  fs::path out;
  bool verbose = false;
  std::ostream& out_stream;
  std::ostream& log;
};

void write_text(const fs::path& p, const std::string& s) { write_file(p, s); }

std::string epoch_csv(const std::vector<EpochStats>& epochs) {
  std::string s = "epoch,steps,positive_vb,negative_vb_mean,total\n";
  char buf[256];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%zu,%.17g,%.17g,%.17g\n", e.epoch, e.steps, e.positive_vb,
                  e.negative_vb_mean, e.total);
    s += buf;
  }
  return s;
}

std::string step_csv(const std::vector<StepLog>& log) {
  std::string s = step_log_header() + "\n";
  for (const auto& r : log) s += step_log_row(r) + "\n";
  return s;
}

// Accepts either a checkpoint directory or a run directory holding one.
fs::path checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "manifest.json")) return p;
  if (fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
  throw IoError("no checkpoint found at " + p.string());
}

void check_task_shape(const SyntheticTask& task, const RunConfig& rc) {
  if (task.K != rc.task.K || task.D != rc.task.D || task.C != rc.task.C) {
    throw ConfigError("task (C=" + std::to_string(task.C) + ", K=" + std::to_string(task.K) +
                      ", D=" + std::to_string(task.D) + ") does not match the configuration");
  }
}

// The task a checkpoint was trained on: task.json next to the checkpoint
// when present, otherwise the configured task.
SyntheticTask task_for_checkpoint(const fs::path& ckpt_dir, const RunConfig& rc) {
  const fs::path sibling = ckpt_dir.parent_path() / "task.json";
  if (fs::exists(sibling)) return task_from_json(read_file(sibling));
  return make_task(rc.task, rc.seed);
}

struct TrainingData {
  SyntheticTask task;
  Dataset train;
};

TrainingData pretrain_data(const RunConfig& rc) {
  TrainingData d;
  if (!rc.data_dir.empty()) {
    const fs::path dir = rc.data_dir;
    d.task = task_from_json(read_file(dir / "task.json"));
    d.train = dataset_from_jsonl(read_file(dir / "train.jsonl"));
  } else {
    d.task = make_task(rc.task, rc.seed);
    Rng rng = Rng::derive(rc.seed, "data.train");
    d.train = sample_dataset(d.task, rc.n_train, rng, Split::train);
  }
  check_task_shape(d.task, rc);
  validate_dataset(d.task, d.train);
  return d;
}

void cmd_gen_data(Context& ctx) {
  const RunConfig& rc = ctx.rc;
  const SyntheticTask task = make_task(rc.task, rc.seed);
  Rng train_rng = Rng::derive(rc.seed, "data.train");
  Rng val_rng = Rng::derive(rc.seed, "data.val");
  const Dataset train = sample_dataset(task, rc.n_train, train_rng, Split::train);
  const Dataset val = sample_dataset(task, rc.n_val, val_rng, Split::val);
  write_text(ctx.out / "task.json", task_to_json(task));
  write_text(ctx.out / "train.jsonl", dataset_to_jsonl(train));
  write_text(ctx.out / "val.jsonl", dataset_to_jsonl(val));
  ctx.out_stream << "gen-data: " << train.size() << " train, " << val.size() << " val records in "
                 << ctx.out.string() << "\n";
}

void report_epoch(Context& ctx, const EpochStats& e) {
  if (!ctx.verbose) return;
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch %d  steps %zu  positive_vb %.5f  total %.5f\n", e.epoch,
                e.steps, e.positive_vb, e.total);
  ctx.log << buf << std::flush;
}

void cmd_pretrain(Context& ctx, const Options& opt) {
  const RunConfig& rc = ctx.rc;
  const NoiseSchedule s = NoiseSchedule::build(rc.schedule);
  const TrainingData data = pretrain_data(rc);

  std::optional<Trainer> tr;
  if (!opt.resume.empty()) {
    const Checkpoint ck = load_checkpoint(checkpoint_dir(opt.resume));
    if (ck.config_hash() != config_hash(rc.model)) {
      throw ConfigError("pretrain --resume: checkpoint architecture does not match the configured model");
    }
    tr.emplace(Trainer::resume(ck, s));
    if (tr->config().phase != Phase::pretrain) {
      throw ConfigError("pretrain --resume: checkpoint is from phase " + to_string(tr->config().phase));
    }
    if (tr->config().seed != rc.seed) {
      throw ConfigError("pretrain --resume: checkpoint seed differs from the run seed");
    }
    if (rc.pretrain.epochs < tr->epoch()) {
      throw ConfigError("pretrain --resume: train.epochs is below the checkpoint epoch " +
                        std::to_string(tr->epoch()));
    }
    tr->config().epochs = rc.pretrain.epochs;
  } else {
    tr.emplace(rc.pretrain, rc.model, s);
  }

  const auto epochs = tr->train(
      data.train, [&](const EpochStats& e) { report_epoch(ctx, e); }, opt.stop_after);
  save_checkpoint(ctx.out / "checkpoint", tr->checkpoint());
  write_text(ctx.out / "task.json", task_to_json(data.task));
  write_text(ctx.out / "train_log.csv", step_csv(tr->log()));
  write_text(ctx.out / "epochs.csv", epoch_csv(epochs));
  ctx.out_stream << "pretrain: epoch " << tr->epoch() << ", " << tr->steps() << " steps, checkpoint "
                 << (ctx.out / "checkpoint").string() << "\n";
}

void cmd_finetune(Context& ctx, const Options& opt) {
  const RunConfig& rc = ctx.rc;
  const std::string base_arg = opt.base.empty() ? rc.base_checkpoint : opt.base;
  if (base_arg.empty()) {
    throw ConfigError("finetune: no base checkpoint (set finetune.base_checkpoint or pass --base)");
  }
  const fs::path base_dir = checkpoint_dir(base_arg);
  const Checkpoint base = load_checkpoint(base_dir);
  const NoiseSchedule s = NoiseSchedule::build(rc.schedule);
  const SyntheticTask task = task_for_checkpoint(base_dir, rc);
  check_task_shape(task, rc);
  Rng shift_rng = Rng::derive(rc.seed, "finetune.shift");
  const SyntheticTask target = shift_task(task, shift_rng, rc.shift_weight, rc.task.concentration);
  const BaseRef ref{base_dir.string(), sha256_hex(read_file(base_dir / "base.bin"))};
  write_text(ctx.out / "task.json", task_to_json(target));

  if (opt.ablation) {
    AblationConfig ac;
    ac.finetune = rc.finetune;
    ac.n_train = rc.finetune_n_train;
    ac.n_per_condition = rc.eval_n_per_condition;
    ac.seed = rc.seed;
    ac.base_ref = ref;
    if (base.config_hash() != config_hash(rc.model)) {
      throw ConfigError("finetune: base checkpoint architecture does not match the configured model");
    }
    const auto rows = run_ablation(ac, base, target, s);
    const fs::path dir = ctx.out / "ablation";
    std::vector<std::pair<std::string, MetricReport>> table;
    std::string csv = "label," + MetricReport::csv_header() + "\n";
    const char* slugs[] = {"base", "lora", "lora_cdcd"};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const fs::path row_dir = dir / slugs[i];
      ensure_directory(row_dir);
      write_text(row_dir / "report.json", rows[i].report.to_json());
      if (rows[i].checkpoint) {
        save_checkpoint(row_dir / "checkpoint", *rows[i].checkpoint);
        write_text(row_dir / "train_log.csv", step_csv(rows[i].log));
      }
      table.emplace_back(rows[i].label, rows[i].report);
      csv += rows[i].report.csv_row(rows[i].label) + "\n";
    }
    const std::string text = format_table(table);
    write_text(dir / "table.txt", text);
    write_text(dir / "reports.csv", csv);
    ctx.out_stream << text;
    return;
  }

  const Dataset data = [&] {
    Rng rng = Rng::derive(rc.seed, "finetune.data");
    return sample_dataset(target, rc.finetune_n_train, rng, Split::train);
  }();
  Trainer tr = Trainer::finetune(rc.finetune, base, rc.model, s, ref);
  const auto epochs = tr.train(data, [&](const EpochStats& e) { report_epoch(ctx, e); });
  save_checkpoint(ctx.out / "checkpoint", tr.checkpoint());
  write_text(ctx.out / "train_log.csv", step_csv(tr.log()));
  write_text(ctx.out / "epochs.csv", epoch_csv(epochs));
  ctx.out_stream << "finetune (" << to_string(rc.finetune.phase) << "): epoch " << tr.epoch()
                 << ", " << tr.steps() << " steps, checkpoint "
                 << (ctx.out / "checkpoint").string() << "\n";
}

struct LoadedModel {
  fs::path dir;
  Checkpoint ckpt;
  Denoiser model;
  NoiseSchedule schedule;
};

LoadedModel load_model(const Options& opt) {
  if (opt.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const fs::path dir = checkpoint_dir(opt.checkpoint);
  Checkpoint ck = load_checkpoint(dir);
  Denoiser model = restore_model(ck);
  NoiseSchedule s = NoiseSchedule::build(ck.schedule);
  return {dir, std::move(ck), std::move(model), std::move(s)};
}

void cmd_sample(Context& ctx, const Options& opt) {
  const RunConfig& rc = ctx.rc;
  const LoadedModel lm = load_model(opt);
  const int C = lm.ckpt.model_config.n_conditions;
  const auto D = static_cast<std::size_t>(lm.ckpt.model_config.D);
  const std::size_t n = opt.n ? *opt.n : rc.sample_n;
  const int fixed = opt.cond ? *opt.cond : rc.sample_cond;
  if (n == 0) throw ConfigError("sample: n must be >= 1");
  if (fixed >= C || fixed < -1) {
    throw ConfigError("sample: cond must be -1 or in [0, " + std::to_string(C) + ")");
  }

  std::vector<int> conds(n);
  for (std::size_t i = 0; i < n; ++i) conds[i] = fixed >= 0 ? fixed : static_cast<int>(i % C);

  Rng rng = Rng::derive(rc.seed, "sample");
  constexpr std::size_t kBatch = 512;
  Dataset out;
  std::string stats;
  for (std::size_t lo = 0; lo < n; lo += kBatch) {
    const std::size_t hi = std::min(n, lo + kBatch);
    const std::span<const int> bc(conds.data() + lo, hi - lo);
    GenerationResult g = generate(lm.model, lm.schedule, bc, D, rng);
    for (std::size_t i = 0; i < g.sequences.size(); ++i) {
      out.records.push_back({bc[i], std::move(g.sequences[i]), Split::val});
    }
    stats += g.stats.to_jsonl();
  }
  write_text(ctx.out / "samples.jsonl", dataset_to_jsonl(out));
  write_text(ctx.out / "generation_stats.jsonl", stats);
  ctx.out_stream << "sample: " << out.size() << " sequences in "
                 << (ctx.out / "samples.jsonl").string() << "\n";
}

void cmd_eval(Context& ctx, const Options& opt) {
  const RunConfig& rc = ctx.rc;
  const LoadedModel lm = load_model(opt);
  const SyntheticTask task = task_for_checkpoint(lm.dir, rc);
  if (task.K != lm.ckpt.model_config.K || task.D != lm.ckpt.model_config.D ||
      task.C != lm.ckpt.model_config.n_conditions) {
    throw ConfigError("eval: task shape does not match the checkpoint model");
  }
  MetricReport report;
  if (!opt.samples.empty()) {
    const Dataset gen = dataset_from_jsonl(read_file(opt.samples));
    validate_dataset(task, gen);
    Rng ref_rng = Rng::derive(rc.seed, "eval.reference");
    const Dataset ref = sample_per_condition(task, rc.eval_n_per_condition, ref_rng, Split::val);
    report = oracle_report(task, gen, ref, mix_seed(rc.seed, "eval.metrics"));
  } else {
    report = evaluate_model(lm.model, lm.schedule, task, rc.eval_n_per_condition, rc.seed);
  }
  write_text(ctx.out / "report.json", report.to_json());
  write_text(ctx.out / "report.csv",
             "label," + MetricReport::csv_header() + "\n" + report.csv_row("model") + "\n");
  ctx.out_stream << format_table({{"model", report}});
  if (!report.notice.empty()) ctx.out_stream << "notice: " << report.notice << "\n";
}

void cmd_verify(Context& ctx) {
  std::size_t passed = 0;
  Json results = Json::array();
  const auto all = verify::run_all([&](const verify::CheckResult& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, " value=%.3g tol=%.3g (%.2fs)", r.value, r.tolerance, r.seconds);
    ctx.out_stream << (r.passed ? "PASS " : "FAIL ") << r.suite << ": " << r.name << buf;
    if (!r.passed && !r.detail.empty()) ctx.out_stream << " " << r.detail;
    ctx.out_stream << "\n" << std::flush;
  });
  for (const auto& r : all) {
    if (r.passed) ++passed;
    // Timings are left out so the file is reproducible.
    results.push_back(Json{{"suite", r.suite},
                           {"name", r.name},
                           {"passed", r.passed},
                           {"value", r.timing ? Json(nullptr) : Json(r.value)},
                           {"tolerance", r.tolerance},
                           {"detail", r.detail}});
  }
  write_text(ctx.out / "verify.json", results.dump(2) + "\n");
  ctx.out_stream << "verify: " << passed << "/" << all.size() << " checks passed\n";
  if (passed != all.size()) {
    throw VerificationFailed(std::to_string(all.size() - passed) + " of " +
                             std::to_string(all.size()) + " checks failed");
  }
}

void cmd_dump_schedule(Context& ctx) {
  const NoiseSchedule s = NoiseSchedule::build(ctx.rc.schedule);
  write_text(ctx.out / "schedule.csv", s.to_csv());
  ctx.out_stream << "dump-schedule: " << (ctx.out / "schedule.csv").string() << "\n";
}

std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Failure {
  int code;
  std::string cls;
  std::string message;
};

Failure classify(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const VerificationFailed& x) {
    return {1, "verification", x.what()};
  } catch (const ConfigError& x) {
    return {2, "config", x.what()};
  } catch (const UsageError& x) {
    return {2, "config", x.what()};
  } catch (const NumericError& x) {
    std::string m = x.what();
    if (!x.detail().empty()) m += " batch=" + x.detail();
    return {3, "numeric", m};
  } catch (const IoError& x) {
    return {4, "io", x.what()};
  } catch (const fs::filesystem_error& x) {
    return {4, "io", x.what()};
  } catch (const std::exception& x) {
    return {3, "internal", x.what()};
  }
}

void print_failure(std::ostream& err, const Failure& f) {
  err << Json{{"error", f.cls}, {"exit", f.code}, {"message", f.message}}.dump() << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options opt;
  CLI::App app{"Conditional discrete diffusion toolkit"};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--config", opt.config_path, "YAML config file")->check(CLI::ExistingFile);
  app.add_option("--set", opt.overrides, "Override one config key (key=value), repeatable");
  app.add_option("--out", opt.out, "Output directory")->capture_default_str();
  app.add_option("--seed", opt.seed, "Root seed; overrides the config");
  app.add_flag("--verbose", opt.verbose, "Progress on stderr");

  app.add_subcommand("gen-data", "Write task.json, train.jsonl and val.jsonl");
  auto* pre = app.add_subcommand("pretrain", "Train the base denoiser");
  pre->add_option("--resume", opt.resume, "Continue from a checkpoint or run directory");
  pre->add_option("--stop-after", opt.stop_after,
                  "Stop after this epoch, keeping the planned learning-rate schedule");
  auto* fin = app.add_subcommand("finetune", "LoRA fine-tuning on the shifted task");
  fin->add_option("--base", opt.base, "Base checkpoint or run directory");
  fin->add_flag("--ablation", opt.ablation, "Base / +LoRA / +LoRA+CDCD comparison");
  auto* smp = app.add_subcommand("sample", "Draw sequences from a checkpoint");
  smp->add_option("--checkpoint", opt.checkpoint, "Checkpoint or run directory")->required();
  smp->add_option("--n", opt.n, "Number of sequences");
  smp->add_option("--cond", opt.cond, "Fixed condition, -1 for round robin");
  auto* ev = app.add_subcommand("eval", "Score a checkpoint against its task");
  ev->add_option("--checkpoint", opt.checkpoint, "Checkpoint or run directory")->required();
  ev->add_option("--samples", opt.samples, "Score this JSONL instead of fresh samples");
  app.add_subcommand("verify", "Run the oracle and property suites");
  app.add_subcommand("dump-schedule", "Write the noise schedule as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_failure(err, {2, "usage", e.what()});
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  const fs::path out_dir = opt.out;
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  std::optional<ConfigMap> snapshot;
  std::optional<Failure> failure;

  try {
    ConfigMap map = opt.config_path.empty() ? ConfigMap() : ConfigMap::from_file(opt.config_path);
    for (const auto& o : opt.overrides) map.apply_override(o);
    if (opt.seed) map.set("seed", std::to_string(*opt.seed));
    snapshot = map;
    Context ctx{command, map, resolve(map), out_dir, opt.verbose, out, err};
    ensure_directory(out_dir);
    write_text(out_dir / "config.yaml", map.to_yaml());
    if (command == "gen-data") cmd_gen_data(ctx);
    else if (command == "pretrain") cmd_pretrain(ctx, opt);
    else if (command == "finetune") cmd_finetune(ctx, opt);
    else if (command == "sample") cmd_sample(ctx, opt);
    else if (command == "eval") cmd_eval(ctx, opt);
    else if (command == "verify") cmd_verify(ctx);
    else if (command == "dump-schedule") cmd_dump_schedule(ctx);
  } catch (...) {
    failure = classify(std::current_exception());
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Json manifest;
  manifest["command"] = command;
  manifest["version"] = version();
  manifest["seed"] = snapshot ? Json(snapshot->get_u64("seed")) : Json(nullptr);
  manifest["config"] = snapshot ? Json::parse(snapshot->to_json()) : Json(nullptr);
  manifest["status"] = failure ? failure->cls : "ok";
  manifest["exit_code"] = failure ? failure->code : 0;
  manifest["started_utc"] = started;
  manifest["wall_time_seconds"] = wall;
  try {
    if (fs::is_directory(out_dir) || !failure) {
      ensure_directory(out_dir);
      write_text(out_dir / "run_manifest.json", manifest.dump(2) + "\n");
    }
  } catch (...) {
    if (!failure) failure = classify(std::current_exception());
  }

  if (failure) {
    print_failure(err, *failure);
    return failure->code;
  }
  return 0;
}

}  // namespace cdd::cli
