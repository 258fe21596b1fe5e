// End-to-end acceptance driver. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
// usage: acceptance <cdd executable> <configs dir> <work dir> [criterion ... | trend]
//
// `trend` checks the loss trajectory of the criterion 8 run instead.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdd/hash.hpp"
#include "cdd/io.hpp"
#include "cdd/verify/suites.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using cdd::verify::Results;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Env {
  fs::path exe;
  fs::path configs;
  fs::path work;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

// Runs the CLI with stdout/stderr captured to <log>; returns the exit code.
int cli(const Env& env, const std::vector<std::string>& args, const fs::path& log) {
  std::string cmd = quote(env.exe.string());
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " > " + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string log_tail(const fs::path& log) {
  try {
    std::string s = cdd::read_file(log);
    if (s.size() > 400) s = s.substr(s.size() - 400);
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  } catch (...) {
    return "(no log)";
  }
}

Outcome from_suites(const std::vector<Results>& suites, double runtime_limit = 0.0) {
  std::size_t total = 0, passed = 0;
  double slowest = 0.0;
  std::string first_failure;
  for (const auto& results : suites) {
    for (const auto& r : results) {
      ++total;
      slowest = std::max(slowest, r.seconds);
      if (r.passed) {
        ++passed;
      } else if (first_failure.empty()) {
        first_failure = r.suite + ": " + r.name + " value=" + fmt("%.3g", r.value) +
                        " tol=" + fmt("%.3g", r.tolerance) + " " + r.detail;
      }
    }
  }
  Outcome o;
  o.pass = total > 0 && passed == total;
  o.detail = std::to_string(passed) + "/" + std::to_string(total) + " checks, slowest suite " +
             fmt("%.2fs", slowest);
  if (runtime_limit > 0.0 && slowest >= runtime_limit) {
    o.pass = false;
    o.detail += " exceeds " + fmt("%.0fs", runtime_limit);
  }
  if (!first_failure.empty()) o.detail += "; first failure: " + first_failure;
  return o;
}

// ---- criterion 8 and 9 share the toy pretraining run ----

fs::path toy_pretrain_dir(const Env& env) { return env.work / "toy" / "pretrain"; }

Outcome toy_end_to_end(const Env& env) {
  const fs::path cfg = env.configs / "toy.yaml";
  const fs::path pre = toy_pretrain_dir(env);
  const fs::path ev = env.work / "toy" / "eval";
  fs::remove_all(env.work / "toy");
  fs::create_directories(env.work / "toy");
  const auto t0 = std::chrono::steady_clock::now();
  if (int rc = cli(env, {"pretrain", "--config", cfg.string(), "--out", pre.string()},
                   env.work / "toy" / "pretrain.log");
      rc != 0) {
    return {false, "pretrain exit " + std::to_string(rc) + ": " + log_tail(env.work / "toy" / "pretrain.log")};
  }
  if (int rc = cli(env,
                   {"eval", "--config", cfg.string(), "--checkpoint", pre.string(), "--out", ev.string()},
                   env.work / "toy" / "eval.log");
      rc != 0) {
    return {false, "eval exit " + std::to_string(rc) + ": " + log_tail(env.work / "toy" / "eval.log")};
  }
  const double wall = seconds_since(t0);
  const json r = json::parse(cdd::read_file(ev / "report.json"));
  const double acc = r.at("cond_accuracy");
  double max_tv = 0.0;
  std::string tvs;
  for (const auto& v : r.at("per_condition_tv")) {
    max_tv = std::max(max_tv, v.get<double>());
    tvs += (tvs.empty() ? "" : ",") + fmt("%.4f", v.get<double>());
  }
  Outcome o;
  o.pass = r.at("tv_available").get<bool>() && acc >= 0.90 && max_tv <= 0.15 && wall <= 600.0;
  o.detail = "accuracy " + fmt("%.4f", acc) + " (>= 0.90), per-condition TV [" + tvs +
             "] (<= 0.15), runtime " + fmt("%.0fs", wall) + " (<= 600s)";
  return o;
}

Outcome ablation_harness(const Env& env) {
  const fs::path cfg = env.configs / "toy.yaml";
  fs::path base = toy_pretrain_dir(env);
  const fs::path out = env.work / "ablation";
  fs::remove_all(out);
  fs::create_directories(env.work);
  std::vector<std::string> overrides = {"--set", "eval.n_per_condition=2000"};
  if (!fs::exists(base / "checkpoint" / "manifest.json")) {
    // Criterion 8 was not run; train a short base model here.
    base = env.work / "ablation_base";
    if (int rc = cli(env,
                     {"pretrain", "--config", cfg.string(), "--out", base.string(), "--set",
                      "train.epochs=5"},
                     env.work / "ablation_base.log");
        rc != 0) {
      return {false, "base pretrain exit " + std::to_string(rc)};
    }
  }
  std::vector<std::string> args = {"finetune", "--ablation", "--config", cfg.string(),
                                   "--base", base.string(), "--out", out.string()};
  args.insert(args.end(), overrides.begin(), overrides.end());
  const auto t0 = std::chrono::steady_clock::now();
  if (int rc = cli(env, args, env.work / "ablation.log"); rc != 0) {
    return {false, "finetune --ablation exit " + std::to_string(rc) + ": " + log_tail(env.work / "ablation.log")};
  }
  const double wall = seconds_since(t0);

  std::vector<std::string> problems;
  const std::string base_sha = cdd::sha256_hex(cdd::read_file(base / "checkpoint" / "base.bin"));
  const char* slugs[] = {"base", "lora", "lora_cdcd"};
  const char* labels[] = {"base", "+LoRA", "+LoRA+CDCD"};
  const double lambdas[] = {0.0, 0.0, 5e-5};
  for (int i = 0; i < 3; ++i) {
    const fs::path row = out / "ablation" / slugs[i];
    if (!fs::exists(row / "report.json")) {
      problems.push_back(std::string("missing report for ") + slugs[i]);
      continue;
    }
    const json r = json::parse(cdd::read_file(row / "report.json"));
    for (const char* key : {"fid", "kid_mean", "isc_mean", "kl", "cond_accuracy", "per_condition_tv"})
      if (!r.contains(key)) problems.push_back(std::string(slugs[i]) + " report lacks " + key);
    if (i == 0) continue;
    if (!fs::exists(row / "checkpoint" / "manifest.json")) {
      problems.push_back(std::string("no archived checkpoint manifest for ") + slugs[i]);
      continue;
    }
    const json m = json::parse(cdd::read_file(row / "checkpoint" / "manifest.json"));
    if (!m.contains("base_ref") || m["base_ref"]["sha256"] != base_sha)
      problems.push_back(std::string(slugs[i]) + " base_ref does not point at the base weights");
    const json& tc = m.at("train_config");
    if (tc.at("lambda").get<double>() != lambdas[i] || tc.at("seed") != 1)
      problems.push_back(std::string(slugs[i]) + " train config has unexpected lambda or seed");
    if (m.at("lora").is_null()) problems.push_back(std::string(slugs[i]) + " has no adapters");
  }
  const std::string table = fs::exists(out / "ablation" / "table.txt")
                                ? cdd::read_file(out / "ablation" / "table.txt")
                                : std::string();
  std::size_t pos = 0;
  for (const char* label : labels) {
    const std::size_t at = table.find(std::string("\n") + label + " ", pos);
    if (at == std::string::npos) {
      problems.push_back(std::string("table row missing or out of order: ") + label);
      break;
    }
    pos = at + 1;
  }
  const std::string csv = fs::exists(out / "ablation" / "reports.csv")
                              ? cdd::read_file(out / "ablation" / "reports.csv")
                              : std::string();
  if (std::count(csv.begin(), csv.end(), '\n') != 4) problems.push_back("reports.csv does not have 3 rows");
  const json run = json::parse(cdd::read_file(out / "run_manifest.json"));
  if (run.at("seed") != 1 || run.at("status") != "ok" || !run.contains("version"))
    problems.push_back("run manifest incomplete");

  Outcome o;
  o.pass = problems.empty();
  o.detail = "three rows base / +LoRA / +LoRA+CDCD with reports, archived checkpoints and manifests in " +
             fmt("%.0fs", wall);
  if (!problems.empty()) o.detail = problems.front() + " (" + std::to_string(problems.size()) + " problems)";
  return o;
}

// Epoch-mean positive bound of the toy run: lower at epoch 20 than at
// epoch 1, and its 10-epoch moving average never rises by more than 1%.
Outcome toy_loss_trend(const Env& env) {
  const fs::path csv = toy_pretrain_dir(env) / "epochs.csv";
  if (!fs::exists(csv)) return {false, "no epoch log; run criterion 8 first"};
  std::istringstream in(cdd::read_file(csv));
  std::string line;
  std::getline(in, line);
  std::vector<double> pos;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    pos.push_back(std::stod(cells.at(2)));
  }
  if (pos.size() < 20) return {false, "fewer than 20 epochs logged"};
  constexpr std::size_t w = 10;
  double worst_rise = -1.0;
  double prev = -1.0;
  for (std::size_t e = w; e <= pos.size(); ++e) {
    double ma = 0.0;
    for (std::size_t i = e - w; i < e; ++i) ma += pos[i] / w;
    if (prev > 0.0) worst_rise = std::max(worst_rise, ma / prev - 1.0);
    prev = ma;
  }
  Outcome o;
  o.pass = pos[19] < pos[0] && worst_rise <= 0.01;
  o.detail = "epoch 1 " + fmt("%.4f", pos[0]) + ", epoch 20 " + fmt("%.4f", pos[19]) +
             ", largest moving-average rise " + fmt("%+.4f", worst_rise * 100.0) + "% (<= 1%)";
  return o;
}

// ---- criterion 11 ----

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    std::string bytes = cdd::read_file(e.path());
    if (e.path().filename() == "run_manifest.json") {
      json m = json::parse(bytes);
      m.erase("started_utc");
      m.erase("wall_time_seconds");
      bytes = m.dump();
    }
    files[rel] = std::move(bytes);
  }
  return files;
}

std::string compare_dirs(const fs::path& a, const fs::path& b) {
  const auto fa = snapshot(a), fb = snapshot(b);
  if (fa.size() != fb.size()) return "file sets differ";
  for (const auto& [name, bytes] : fa) {
    const auto it = fb.find(name);
    if (it == fb.end()) return "missing " + name;
    if (it->second != bytes) return "bytes differ in " + name;
  }
  return {};
}

Outcome reproducibility(const Env& env) {
  const fs::path root = env.work / "repro";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cfg = (env.configs / "tiny.yaml").string();
  const fs::path shared = root / "shared_pretrain";
  if (cli(env, {"pretrain", "--config", cfg, "--out", shared.string()}, root / "shared.log") != 0) {
    return {false, "shared pretrain failed: " + log_tail(root / "shared.log")};
  }

  struct Command {
    std::string name;
    std::vector<std::string> args;
  };
  const std::vector<Command> commands = {
      {"gen-data", {"gen-data"}},
      {"dump-schedule", {"dump-schedule"}},
      {"pretrain", {"pretrain"}},
      {"sample", {"sample", "--checkpoint", shared.string(), "--n", "50"}},
      {"eval", {"eval", "--checkpoint", shared.string()}},
      {"finetune", {"finetune", "--base", shared.string()}},
      {"finetune-ablation", {"finetune", "--ablation", "--base", shared.string()}},
      {"verify", {"verify"}},
  };
  std::vector<std::string> problems;
  for (const auto& c : commands) {
    for (const char* run : {"a", "b"}) {
      const fs::path out = root / c.name / run;
      std::vector<std::string> args = c.args;
      args.insert(args.end(), {"--config", cfg, "--out", out.string()});
      if (int rc = cli(env, args, root / (c.name + "_" + run + ".log")); rc != 0) {
        problems.push_back(c.name + " exit " + std::to_string(rc));
      }
    }
    if (const std::string d = compare_dirs(root / c.name / "a", root / c.name / "b"); !d.empty()) {
      problems.push_back(c.name + ": " + d);
    }
  }

  // Interrupted after 2 of 4 epochs, then resumed, against an uninterrupted run.
  const fs::path full = root / "resume_full", part = root / "resume_part", rest = root / "resume_rest";
  bool ok = cli(env, {"pretrain", "--config", cfg, "--out", full.string()}, root / "full.log") == 0 &&
            cli(env, {"pretrain", "--config", cfg, "--out", part.string(), "--stop-after", "2"},
                root / "part.log") == 0 &&
            cli(env, {"pretrain", "--config", cfg, "--out", rest.string(), "--resume", part.string()},
                root / "rest.log") == 0;
  if (!ok) {
    problems.push_back("resume runs failed");
  } else {
    for (const char* f : {"base.bin", "optimizer.bin", "manifest.json"}) {
      if (cdd::read_file(full / "checkpoint" / f) != cdd::read_file(rest / "checkpoint" / f)) {
        problems.push_back(std::string("resumed checkpoint differs in ") + f);
      }
    }
    // The resumed log must equal the tail of the uninterrupted log.
    const std::string full_log = cdd::read_file(full / "train_log.csv");
    const std::string rest_log = cdd::read_file(rest / "train_log.csv");
    const std::string rest_rows = rest_log.substr(rest_log.find('\n') + 1);
    if (rest_rows.empty() || full_log.size() < rest_rows.size() ||
        full_log.compare(full_log.size() - rest_rows.size(), rest_rows.size(), rest_rows) != 0) {
      problems.push_back("resumed step log differs from the uninterrupted tail");
    }
  }

  Outcome o;
  o.pass = problems.empty();
  o.detail = std::to_string(commands.size()) +
             " commands byte-identical across repeated runs; 2+2 epoch resume matches 4 epochs bit for bit";
  if (!problems.empty()) {
    o.detail = problems.front();
    for (std::size_t i = 1; i < problems.size(); ++i) o.detail += "; " + problems[i];
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 4) {
    std::fprintf(stderr, "usage: %s <cdd executable> <configs dir> <work dir> [criterion ...]\n", argv[0]);
    return 2;
  }
  const Env env{fs::absolute(argv[1]), fs::absolute(argv[2]), fs::absolute(argv[3])};
  fs::create_directories(env.work);
  if (argc == 5 && std::string(argv[4]) == "trend") {
    const Outcome o = toy_loss_trend(env);
    std::printf("%s property (toy loss trend): %s\n", o.pass ? "PASS" : "FAIL", o.detail.c_str());
    return o.pass ? 0 : 1;
  }
  std::set<int> only;
  for (int i = 4; i < argc; ++i) only.insert(std::atoi(argv[i]));

  using namespace cdd::verify;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"schedule oracle", [] { return from_suites({schedule_suite()}, 5.0); }},
      {"posterior oracle", [] { return from_suites({posterior_suite()}, 5.0); }},
      {"oracle-chain fidelity", [] { return from_suites({oracle_chain_suite(100000, 7)}, 120.0); }},
      {"gradient integrity", [] { return from_suites({gradient_suite()}, 120.0); }},
      {"LoRA contracts", [] { return from_suites({lora_suite()}); }},
      {"contrastive loss algebra and operating point",
       [] { return from_suites({loss_algebra_suite(), operating_point_suite(50)}); }},
      {"estimator unbiasedness", [] { return from_suites({estimator_suite(100000)}); }},
      {"toy end-to-end", [&] { return toy_end_to_end(env); }},
      {"ablation harness", [&] { return ablation_harness(env); }},
      {"metric formulas", [] { return from_suites({metric_suite()}); }},
      {"reproducibility", [&] { return reproducibility(env); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id,
                criteria[i].first.c_str(), o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("acceptance: %d failed\n", failed);
  return failed == 0 ? 0 : 1;
}
