#include <doctest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdd/cli.hpp"
#include "cdd/io.hpp"
#include "fixtures.hpp"

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kTiny = {
    "task.C=2",         "task.K=4",         "task.D=3",          "task.min_condition_tv=0.2",
    "schedule.T=4",     "model.d_model=8",  "model.n_layers=1",  "model.n_heads=2",
    "model.d_cond=4",   "data.n_train=64",  "data.n_val=16",     "train.epochs=1",
    "lora.r=2",         "finetune.epochs=1", "finetune.n_train=32", "eval.n_per_condition=40"};

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args, bool tiny = true) {
  std::vector<std::string> full{"cdd"};
  full.insert(full.end(), args.begin(), args.end());
  if (tiny)
    for (const auto& kv : kTiny) {
      full.push_back("--set");
      full.push_back(kv);
    }
  std::vector<const char*> argv;
  for (const auto& a : full) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cdd::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json error_line(const Result& r) { return nlohmann::json::parse(r.err); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("dump-schedule writes csv and a manifest") {
    const auto dir = fixtures::scratch("cli_schedule");
    const Result r = invoke({"dump-schedule", "--out", dir.string()});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "schedule.csv"));
    const auto m = nlohmann::json::parse(cdd::read_file(dir / "run_manifest.json"));
    CHECK(m["command"] == "dump-schedule");
    CHECK(m["status"] == "ok");
    CHECK(m.contains("version"));
    CHECK(m.contains("wall_time_seconds"));
    CHECK(m["config"]["schedule"]["T"] == 4);
  }

  TEST_CASE("bad configuration exits 2 with one parsable line") {
    const auto dir = fixtures::scratch("cli_badcfg");
    const Result r = invoke({"dump-schedule", "--out", dir.string(), "--set", "schedule.bogus=1"});
    CHECK(r.code == 2);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
    CHECK(error_line(r)["error"] == "config");
  }

  TEST_CASE("unknown flag is a usage error") {
    const Result r = invoke({"dump-schedule", "--frobnicate"}, false);
    CHECK(r.code == 2);
    CHECK(error_line(r)["error"] == "usage");
  }

  TEST_CASE("missing checkpoint exits 4") {
    const auto dir = fixtures::scratch("cli_missing");
    const Result r = invoke({"sample", "--out", dir.string(), "--checkpoint", (dir / "nothing").string()});
    CHECK(r.code == 4);
    CHECK(error_line(r)["error"] == "io");
    CHECK(fs::exists(dir / "run_manifest.json"));
  }

  TEST_CASE("gen-data, pretrain, sample, eval and finetune chain") {
    const auto root = fixtures::scratch("cli_chain");
    const auto data = root / "data", pre = root / "pre", smp = root / "sample", ev = root / "eval",
               ft = root / "ft";
    REQUIRE(invoke({"gen-data", "--out", data.string()}).code == 0);
    CHECK(fs::exists(data / "train.jsonl"));

    REQUIRE(invoke({"pretrain", "--out", pre.string(), "--set", "data.dir=" + data.string()}).code == 0);
    CHECK(fs::exists(pre / "checkpoint" / "manifest.json"));
    CHECK(fs::exists(pre / "train_log.csv"));

    const Result s = invoke({"sample", "--out", smp.string(), "--checkpoint", pre.string(), "--n", "10"});
    REQUIRE(s.code == 0);
    const std::string jsonl = cdd::read_file(smp / "samples.jsonl");
    CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 10);
    CHECK(fs::exists(smp / "generation_stats.jsonl"));

    const Result e = invoke({"eval", "--out", ev.string(), "--checkpoint", pre.string()});
    REQUIRE(e.code == 0);
    CHECK(fs::exists(ev / "report.json"));

    REQUIRE(invoke({"finetune", "--out", ft.string(), "--base", pre.string()}).code == 0);
    const auto m = nlohmann::json::parse(cdd::read_file(ft / "checkpoint" / "manifest.json"));
    CHECK(m["lora"]["r"] == 2);
  }
}
