#include <doctest.h>

#include <cmath>

#include "cdd/datagen.hpp"
#include "cdd/diffusion.hpp"
#include "cdd/errors.hpp"
#include "cdd/verify/oracles.hpp"

using namespace cdd;

TEST_SUITE("diffusion") {
  TEST_CASE("forward sample at t = 0 is the input") {
    const NoiseSchedule s = NoiseSchedule::build({});
    Rng rng(1);
    const TokenSequence x0{{1, 2, 3, 4}, 0};
    CHECK(forward_sample(s, x0, 0, rng).tokens == x0.tokens);
  }

  TEST_CASE("forward sample frequencies follow the closed-form marginal") {
    const NoiseSchedule s = NoiseSchedule::build({});
    Rng rng(2);
    const TokenSequence x0{{3}, 0};
    std::vector<double> hits(9, 0.0);
    const int n = 40000;
    for (int i = 0; i < n; ++i) hits[static_cast<std::size_t>(forward_sample(s, x0, 6, rng).tokens[0])] += 1.0 / n;
    const auto m = s.marginal_distribution(3, 6);
    for (std::size_t j = 0; j < 9; ++j) CHECK(std::abs(hits[j] - m[j]) < 4 * std::sqrt(m[j] / n) + 1e-3);
  }

  TEST_CASE("shared uniforms give coupled corruptions") {
    const NoiseSchedule s = NoiseSchedule::build({});
    const std::vector<double> u{0.99, 0.01, 0.5, 0.2};
    const TokenSequence a{{0, 1, 2, 3}, 0};
    const TokenSequence b{{3, 2, 1, 0}, 0};
    const auto xa = forward_sample_with(s, a, 10, u);
    const auto xb = forward_sample_with(s, b, 10, u);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK((xa.tokens[i] == s.mask()) == (xb.tokens[i] == s.mask()));
  }

  TEST_CASE("property: posteriors are distributions and match enumeration") {
    ScheduleConfig c;
    c.K = 4;
    c.T = 6;
    const NoiseSchedule s = NoiseSchedule::build(c);
    for (int t = 2; t <= c.T; ++t)
      for (int xt = 0; xt <= c.K; ++xt)
        for (int x0 = 0; x0 < c.K; ++x0) {
          if (s.marginal_prob(xt, x0, t) == 0.0) {
            CHECK_THROWS_AS(posterior(s, xt, x0, t), DegeneratePairError);
            continue;
          }
          const auto p = posterior(s, xt, x0, t);
          const auto ref = oracle::posterior(c, xt, x0, t);
          double sum = 0;
          for (std::size_t j = 0; j < p.size(); ++j) {
            CHECK(std::abs(p[j] - ref[j]) < 1e-10);
            sum += p[j];
          }
          CHECK(std::abs(sum - 1.0) < 1e-10);
        }
  }

  TEST_CASE("generation returns real tokens of the requested length") {
    TaskConfig tc;
    tc.K = 4;
    tc.D = 3;
    tc.C = 2;
    tc.min_condition_tv = 0.1;
    const SyntheticTask task = make_task(tc, 3);
    ScheduleConfig sc;
    sc.K = 4;
    sc.T = 5;
    const NoiseSchedule s = NoiseSchedule::build(sc);
    const OracleDenoiser oracle(task, s);
    Rng rng(4);
    const std::vector<int> conds{0, 1, 1, 0, 1};
    const auto g = generate(oracle, s, conds, 3, rng);
    REQUIRE(g.sequences.size() == conds.size());
    for (const auto& seq : g.sequences) {
      CHECK(seq.size() == 3);
      for (int tok : seq.tokens) CHECK((tok >= 0 && tok < 4));
    }
    CHECK(g.stats.entropy_trace.size() == 5);
  }

  TEST_CASE("generation is deterministic for a fixed stream") {
    TaskConfig tc;
    tc.K = 4;
    tc.D = 2;
    tc.C = 2;
    tc.min_condition_tv = 0.1;
    const SyntheticTask task = make_task(tc, 5);
    ScheduleConfig sc;
    sc.K = 4;
    sc.T = 4;
    const NoiseSchedule s = NoiseSchedule::build(sc);
    const OracleDenoiser oracle(task, s);
    const std::vector<int> conds{0, 1, 0, 1};
    Rng a(9), b(9);
    CHECK(generate(oracle, s, conds, 2, a).sequences == generate(oracle, s, conds, 2, b).sequences);
  }
}
