#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cdd/datagen.hpp"
#include "cdd/errors.hpp"

using namespace cdd;

namespace {

TaskConfig small_task() {
  TaskConfig c;
  c.C = 3;
  c.K = 4;
  c.D = 3;
  c.min_condition_tv = 0.2;
  return c;
}

}  // namespace

TEST_SUITE("datagen") {
  TEST_CASE("property: every table row is a distribution") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const SyntheticTask task = make_task(small_task(), seed);
      for (const auto& spec : task.conditions) {
        CHECK(std::abs(std::accumulate(spec.initial.begin(), spec.initial.end(), 0.0) - 1.0) < 1e-12);
        for (int r = 0; r < task.K; ++r) {
          double s = 0;
          for (int c = 0; c < task.K; ++c) s += spec.transition[static_cast<std::size_t>(r * task.K + c)];
          CHECK(std::abs(s - 1.0) < 1e-12);
        }
      }
      for (int c = 0; c < task.C; ++c) {
        const auto p = oracle_distribution(task, c);
        CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("task generation is seed-deterministic") {
    CHECK(task_to_json(make_task(small_task(), 4)) == task_to_json(make_task(small_task(), 4)));
    CHECK(task_to_json(make_task(small_task(), 4)) != task_to_json(make_task(small_task(), 5)));
  }

  TEST_CASE("unreachable separation is a config error") {
    TaskConfig c = small_task();
    c.concentration = 0.0;
    c.min_condition_tv = 0.99;
    CHECK_THROWS_AS(make_task(c, 1), ConfigError);
  }

  TEST_CASE("task json round-trips") {
    const SyntheticTask a = make_task(small_task(), 7);
    const SyntheticTask b = task_from_json(task_to_json(a));
    CHECK(task_to_json(b) == task_to_json(a));
    CHECK_THROWS_AS(task_from_json("{\"schema_version\": 99}"), ConfigError);
  }

  TEST_CASE("dataset jsonl round-trips and validates") {
    const SyntheticTask task = make_task(small_task(), 8);
    Rng rng(1);
    const Dataset d = sample_dataset(task, 50, rng);
    const Dataset back = dataset_from_jsonl(dataset_to_jsonl(d));
    REQUIRE(back.size() == 50);
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(back.records[i].cond == d.records[i].cond);
      CHECK(back.records[i].seq.tokens == d.records[i].seq.tokens);
    }
    validate_dataset(task, back);
    Dataset bad = back;
    bad.records[3].seq.tokens[0] = task.K;
    CHECK_THROWS_AS(validate_dataset(task, bad), ConfigError);
    bad = back;
    bad.records[0].cond = task.C;
    CHECK_THROWS_AS(validate_dataset(task, bad), ConfigError);
  }

  TEST_CASE("sequence index round-trips") {
    for (std::size_t i = 0; i < 64; ++i) {
      const auto seq = sequence_from_index(i, 4, 3);
      CHECK(sequence_index(seq, 4) == i);
    }
    CHECK(sequence_index(std::vector<int>{1, 0, 0}, 4) == 16);
  }

  TEST_CASE("shift moves the task and weight 0 keeps it") {
    const SyntheticTask task = make_task(small_task(), 9);
    Rng r1(2), r2(2);
    const SyntheticTask same = shift_task(task, r1, 0.0);
    const SyntheticTask moved = shift_task(task, r2, 0.5);
    CHECK(task_to_json(same) == task_to_json(task));
    CHECK(task_to_json(moved) != task_to_json(task));
  }

  TEST_CASE("oracle belief is one-hot on clean input and a distribution otherwise") {
    const SyntheticTask task = make_task(small_task(), 10);
    ScheduleConfig sc;
    sc.K = 4;
    sc.T = 5;
    const NoiseSchedule s = NoiseSchedule::build(sc);
    const OracleDenoiser oracle(task, s);
    const auto clean = oracle.belief(TokenSequence{{0, 1, 2}, 0}, 0, 1);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) CHECK(clean.row(i)[k] == (static_cast<int>(k) == static_cast<int>(i) ? 1.0 : 0.0));
    const auto noisy = oracle.belief(TokenSequence{{4, 1, 4}, 3}, 3, 2);
    noisy.validate(1e-12);
  }

  TEST_CASE("empty samples are a usage error") {
    const SyntheticTask task = make_task(small_task(), 11);
    Rng rng(3);
    CHECK_THROWS_AS(sample_dataset(task, 0, rng), UsageError);
  }
}
