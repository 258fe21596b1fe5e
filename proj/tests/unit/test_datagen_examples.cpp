#include <doctest.h>

#include <cmath>
#include <vector>

#include "cdd/datagen.hpp"

using namespace cdd;

TEST_SUITE("datagen") {
  TEST_CASE("a point-mass task always emits the same sequence") {
    // hand-built chain 2 -> 0 -> 3 -> 1, every row a point mass
    SyntheticTask task;
    task.C = 1;
    task.K = 4;
    task.D = 4;
    MarkovSpec m{{0, 0, 1, 0}, std::vector<double>(16, 0.0)};
    const int next[4] = {3, 0, 0, 1};
    for (int r = 0; r < 4; ++r) m.transition[static_cast<std::size_t>(r * 4 + next[r])] = 1.0;
    task.conditions = {m};
    task.validate();
    Rng rng(52);
    const Dataset d = sample_dataset(task, 200, rng);
    for (const Record& r : d.records) CHECK(r.seq.tokens == std::vector<int>{2, 0, 3, 1});
    CHECK(sequence_probability(task, 0, d.records[0].seq.tokens) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("single position distribution is the initial distribution") {
    TaskConfig tc;
    tc.C = 3;
    tc.K = 5;
    tc.D = 1;
    tc.min_condition_tv = 0.1;
    const SyntheticTask task = make_task(tc, 53);
    for (int c = 0; c < 3; ++c) {
      const auto p = oracle_distribution(task, c);
      REQUIRE(p.size() == 5);
      for (std::size_t k = 0; k < 5; ++k) CHECK(p[k] == task.conditions[static_cast<std::size_t>(c)].initial[k]);
    }
  }

  TEST_CASE("property: shifted tables stay row-stochastic") {
    TaskConfig tc;
    tc.C = 2;
    tc.K = 6;
    tc.D = 3;
    tc.min_condition_tv = 0.2;
    const SyntheticTask task = make_task(tc, 54);
    Rng rng(55);
    for (double w : {0.0, 0.1, 0.5, 0.9, 1.0}) {
      const SyntheticTask s = shift_task(task, rng, w, 0.7);
      for (const MarkovSpec& m : s.conditions) {
        double z = 0;
        for (double v : m.initial) {
          CHECK(v >= 0.0);
          z += v;
        }
        CHECK(std::abs(z - 1.0) < 1e-12);
        for (std::size_t r = 0; r < 6; ++r) {
          double zr = 0;
          for (std::size_t k = 0; k < 6; ++k) zr += m.transition[r * 6 + k];
          CHECK(std::abs(zr - 1.0) < 1e-12);
        }
      }
    }
  }
}
