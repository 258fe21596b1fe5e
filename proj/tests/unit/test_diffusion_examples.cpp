#include <doctest.h>

#include <cmath>

#include "cdd/datagen.hpp"
#include "cdd/diffusion.hpp"
#include "cdd/verify/oracles.hpp"

using namespace cdd;

TEST_SUITE("diffusion") {
  TEST_CASE("terminal mask frequency at K=4, T=10") {
    ScheduleConfig c;
    c.K = 4;
    const NoiseSchedule s = NoiseSchedule::build(c);
    Rng rng(21);
    int masked = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) masked += forward_sample(s, TokenSequence{{1}, 0}, 10, rng).tokens[0] == 4;
    CHECK(std::abs(masked / static_cast<double>(n) - 0.9) < 0.01);
  }

  TEST_CASE("posterior at t = 1 is one-hot on x0") {
    const NoiseSchedule s = NoiseSchedule::build({});
    for (int xt = 0; xt <= 8; ++xt)
      for (int x0 = 0; x0 < 8; ++x0) {
        if (s.marginal_prob(xt, x0, 1) == 0.0) continue;
        const auto p = posterior(s, xt, x0, 1);
        for (int j = 0; j <= 8; ++j) CHECK(std::abs(p[static_cast<std::size_t>(j)] - (j == x0 ? 1.0 : 0.0)) < 1e-12);
      }
  }

  TEST_CASE("mixture posterior: one-hot, uniform and random beliefs") {
    ScheduleConfig c;
    c.K = 4;
    c.T = 6;
    const NoiseSchedule s = NoiseSchedule::build(c);
    Rng rng(22);
    for (int t = 2; t <= 6; ++t)
      for (int xt = 0; xt <= 4; ++xt) {
        const TokenSequence seq{{xt}, t};
        for (int x0 = 0; x0 < 4; ++x0) {
          if (s.marginal_prob(xt, x0, t) == 0.0) continue;
          CategoricalField onehot(1, 4);
          onehot.row(0)[static_cast<std::size_t>(x0)] = 1.0;
          const auto mix = posterior_from_x0_prediction(s, seq, onehot, t);
          const auto ref = posterior(s, xt, x0, t);
          for (std::size_t j = 0; j < 5; ++j) CHECK(mix.row(0)[j] == ref[j]);
        }
        CategoricalField uniform(1, 4);
        for (double& v : uniform.probs) v = 0.25;
        const auto mix = posterior_from_x0_prediction(s, seq, uniform, t);
        std::vector<double> hand(5, 0.0);
        double valid = 0;
        for (int x0 = 0; x0 < 4; ++x0) {
          if (s.marginal_prob(xt, x0, t) == 0.0) continue;
          valid += 1;
          const auto row = oracle::posterior(c, xt, x0, t);
          for (std::size_t j = 0; j < 5; ++j) hand[j] += row[j];
        }
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(mix.row(0)[j] - hand[j] / valid) < 1e-12);

        CategoricalField random(1, 4);
        for (double& v : random.probs) v = rng.uniform() + 1e-3;
        double z = 0;
        for (double v : random.probs) z += v;
        for (double& v : random.probs) v /= z;
        posterior_from_x0_prediction(s, seq, random, t).validate(1e-9);
      }
  }

  TEST_CASE("T = 1 chain with the oracle recovers its x0 belief") {
    TaskConfig tc;
    tc.C = 2;
    tc.K = 4;
    tc.D = 1;
    tc.min_condition_tv = 0.1;
    const SyntheticTask task = make_task(tc, 23);
    ScheduleConfig sc;
    sc.K = 4;
    sc.T = 1;
    const NoiseSchedule s = NoiseSchedule::build(sc);
    const OracleDenoiser oracle(task, s);
    const Prior prior = s.prior();
    std::vector<double> expected(4, 0.0);
    for (int x1 = 0; x1 <= 4; ++x1) {
      const auto b = oracle.belief(TokenSequence{{x1}, 1}, 1, 0);
      for (std::size_t k = 0; k < 4; ++k) expected[k] += prior.probs[static_cast<std::size_t>(x1)] * b.row(0)[k];
    }
    const std::size_t n = 40000;
    const std::vector<int> conds(n, 0);
    Rng rng(24);
    const auto g = generate(oracle, s, conds, 1, rng);
    std::vector<double> freq(4, 0.0);
    for (const auto& seq : g.sequences) freq[static_cast<std::size_t>(seq.tokens[0])] += 1.0 / n;
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(std::abs(freq[k] - expected[k]) <= 4.0 * std::sqrt(expected[k] * (1 - expected[k]) / n) + 1e-12);
  }
}
