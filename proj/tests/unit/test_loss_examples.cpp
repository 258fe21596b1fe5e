#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "cdd/loss.hpp"
#include "cdd/verify/oracles.hpp"
#include "fixtures.hpp"

using namespace cdd;

TEST_SUITE("cdcd_loss") {
  TEST_CASE("kl of a point mass against a fair coin is log 2") {
    const std::vector<double> p{1.0, 0.0}, q{0.5, 0.5};
    CHECK(std::abs(kl_categorical(p, q) - std::log(2.0)) < 1e-15);
  }

  TEST_CASE("kl matches the oracle on random pairs") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> p(6), q(6);
      double zp = 0, zq = 0;
      for (std::size_t i = 0; i < 6; ++i) {
        zp += p[i] = rng.uniform() + 1e-3;
        zq += q[i] = rng.uniform() + 1e-3;
      }
      for (std::size_t i = 0; i < 6; ++i) {
        p[i] /= zp;
        q[i] /= zq;
      }
      CHECK(std::abs(kl_categorical(p, q) - oracle::kl(p, q)) < 1e-12);
    }
  }

  TEST_CASE("true x0 probabilities give zero bound terms past t = 1") {
    const NoiseSchedule s = NoiseSchedule::build(fixtures::tiny_schedule());
    Rng rng(42);
    CorruptedBatch batch;
    std::vector<double> probs;
    for (int t = 2; t <= 4; ++t) {
      const TokenSequence x0{{0, 3, 1}, 0};
      std::vector<double> u(3);
      for (double& v : u) v = rng.uniform();
      batch.push(s, x0, 0, t, u);
      for (int tok : x0.tokens)
        for (int k = 0; k < 4; ++k) probs.push_back(k == tok ? 1.0 : 0.0);
    }
    Tape tape(false);
    const Tensor b = sequence_bounds(tape, s, Tensor::from({probs.size() / 4, 4}, probs), batch);
    for (double v : b.data()) CHECK(std::abs(v) < 1e-9);
  }

  TEST_CASE("prior term is positive and the same for every clean sequence") {
    const NoiseSchedule s = NoiseSchedule::build(fixtures::tiny_schedule());
    const double ref = prior_kl(s, TokenSequence{{0, 0, 0}, 0});
    CHECK(ref > 0.0);
    for (const auto& toks : std::vector<std::vector<int>>{{1, 2, 3}, {3, 3, 0}, {2, 1, 2}})
      CHECK(std::abs(prior_kl(s, TokenSequence{toks, 0}) - ref) < 1e-12);
  }

  TEST_CASE("negatives of [1,2,3] are non-identity permutations") {
    Rng rng(43);
    const TokenSequence x0{{1, 2, 3}, 0};
    const NegativeSet neg = make_negatives(x0, 2, rng);
    REQUIRE(neg.sequences.size() == 2);
    CHECK_FALSE(neg.degenerate);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(neg.sequences[i] != x0);
      auto sorted = neg.sequences[i].tokens;
      std::sort(sorted.begin(), sorted.end());
      CHECK(sorted == x0.tokens);
      for (std::size_t d = 0; d < 3; ++d)
        CHECK(neg.sequences[i].tokens[d] == x0.tokens[neg.permutations[i][d]]);
    }
  }

  TEST_CASE("property: negatives are uniform over the non-identity permutations") {
    Rng rng(44);
    const TokenSequence x0{{0, 1, 2}, 0};
    std::map<std::vector<int>, int> counts;
    const int n = 10000;
    for (int i = 0; i < n; ++i) ++counts[make_negatives(x0, 1, rng).sequences[0].tokens];
    REQUIRE(counts.size() == 5);
    double chi2 = 0;
    const double e = n / 5.0;
    for (const auto& [_, c] : counts) chi2 += (c - e) * (c - e) / e;
    // 4 degrees of freedom, p = 0.001 critical value
    CHECK(chi2 < 18.47);
  }

  TEST_CASE("degenerate single position gives (1 - lambda) times the positive") {
    ScheduleConfig sc = fixtures::tiny_schedule();
    DenoiserConfig mc = fixtures::tiny_model();
    mc.D = 1;
    const NoiseSchedule s = NoiseSchedule::build(sc);
    Rng init(45);
    const Denoiser m(mc, init);
    const TokenSequence x0{{2}, 0};
    Rng a(46);
    Tape ta(false);
    const LossBreakdown r = total_loss(ta, m, s, x0, 0, 0.3, 1, 3, a);
    CHECK(r.degenerate_negatives == 1);
    CHECK(std::abs(r.total - 0.7 * r.positive_vb) < 1e-12);
  }

  TEST_CASE("lambda 5e-5 with ten negatives subtracts 5e-6 of their sum") {
    const NoiseSchedule s = NoiseSchedule::build(fixtures::tiny_schedule());
    Rng init(47);
    const Denoiser m(fixtures::tiny_model(), init);
    Rng rng(48);
    Tape tape(false);
    const LossBreakdown r = total_loss(tape, m, s, TokenSequence{{0, 1, 2}, 0}, 1, 5e-5, 10, 2, rng);
    CHECK(std::abs(r.total - (r.positive_vb - 5e-6 * 10.0 * r.negative_vb_mean)) < 1e-12);
    CHECK(std::abs(r.objective.item() - r.total) < 1e-12);
  }
}
