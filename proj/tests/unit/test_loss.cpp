#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cdd/errors.hpp"
#include "cdd/loss.hpp"

using namespace cdd;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.K = 4;
  c.T = 4;
  c.D = 4;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_cond = 4;
  c.n_conditions = 2;
  return c;
}

ScheduleConfig tiny_schedule() {
  ScheduleConfig s;
  s.K = 4;
  s.T = 4;
  return s;
}

}  // namespace

TEST_SUITE("cdcd_loss") {
  TEST_CASE("kl of identical distributions is zero and 0 log 0 is dropped") {
    const std::vector<double> p{0.0, 0.5, 0.5};
    CHECK(kl_categorical(p, p) == 0.0);
    const std::vector<double> q{0.2, 0.4, 0.4};
    CHECK(kl_categorical(p, q) == doctest::Approx(std::log(0.5 / 0.4)));
  }

  TEST_CASE("negatives are shuffles of the positive that differ from it") {
    Rng rng(1);
    const TokenSequence x0{{0, 1, 2, 3}, 0};
    const NegativeSet ns = make_negatives(x0, 10, rng);
    REQUIRE(ns.sequences.size() == 10);
    CHECK_FALSE(ns.degenerate);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(ns.sequences[i] != x0);
      auto a = ns.sequences[i].tokens, b = x0.tokens;
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
      for (std::size_t j = 0; j < 4; ++j) CHECK(ns.sequences[i].tokens[j] == x0.tokens[ns.permutations[i][j]]);
    }
  }

  TEST_CASE("a constant sequence yields degenerate negatives") {
    Rng rng(2);
    const NegativeSet ns = make_negatives(TokenSequence{{2, 2, 2}, 0}, 3, rng);
    CHECK(ns.degenerate);
  }

  TEST_CASE("lambda = 0 reduces to the positive bound exactly") {
    Rng init(3);
    const Denoiser m(tiny(), init);
    const NoiseSchedule s = NoiseSchedule::build(tiny_schedule());
    const TokenSequence x0{{0, 1, 2, 3}, 0};
    for (int t = 1; t <= 4; ++t) {
      Rng a(10 + static_cast<std::uint64_t>(t));
      Tape tape(false);
      const LossBreakdown l = total_loss(tape, m, s, x0, 1, 0.0, 5, t, a);
      CHECK(l.total == l.positive_vb);
    }
  }

  TEST_CASE("property: total is affine in lambda for fixed draws") {
    Rng init(4);
    const Denoiser m(tiny(), init);
    const NoiseSchedule s = NoiseSchedule::build(tiny_schedule());
    const TokenSequence x0{{3, 1, 0, 2}, 0};
    Rng seeds(5);
    for (int trial = 0; trial < 10; ++trial) {
      const std::uint64_t seed = seeds.next_u64();
      const int t = 1 + static_cast<int>(seeds.below(4));
      const double lam = seeds.uniform();
      auto eval = [&](double l) {
        Rng r(seed);
        Tape tape(false);
        return total_loss(tape, m, s, x0, 0, l, 4, t, r);
      };
      const LossBreakdown at0 = eval(0.0), atl = eval(lam);
      CHECK(std::abs(atl.total - (at0.positive_vb - lam * atl.negative_vb_mean)) <= 1e-12);
      CHECK(atl.positive_vb == at0.positive_vb);
    }
  }

  TEST_CASE("per-step terms are non-negative") {
    Rng init(6);
    const Denoiser m(tiny(), init);
    const NoiseSchedule s = NoiseSchedule::build(tiny_schedule());
    Rng rng(7);
    CorruptedBatch b;
    for (int t = 1; t <= 4; ++t) {
      std::vector<double> u(4);
      for (auto& x : u) x = rng.uniform();
      b.push(s, TokenSequence{{1, 0, 3, 3}, 0}, 0, t, u);
    }
    Tape tape(false);
    const Tensor terms = sequence_bounds(tape, m, s, b);
    for (std::size_t i = 0; i < terms.numel(); ++i) CHECK(terms.at(i) >= -1e-12);
    CHECK(prior_kl(s, TokenSequence{{1, 0, 3, 3}, 0}) >= 0.0);
  }

  TEST_CASE("sampled steps are uniform on [1, T]") {
    const NoiseSchedule s = NoiseSchedule::build(tiny_schedule());
    Rng rng(8);
    std::vector<int> hits(5, 0);
    for (int i = 0; i < 8000; ++i) ++hits[static_cast<std::size_t>(sample_step(s, rng))];
    CHECK(hits[0] == 0);
    for (int t = 1; t <= 4; ++t) CHECK(std::abs(hits[static_cast<std::size_t>(t)] - 2000) < 200);
  }
}
