#include <doctest.h>

#include <cmath>

#include "cdd/errors.hpp"
#include "cdd/metrics.hpp"

using namespace cdd;

namespace {

FeatureSet gaussian(std::size_t n, std::size_t d, double shift, Rng& rng) {
  FeatureSet f(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) f.row(i)[j] = rng.normal() + (j == 0 ? shift : 0.0);
  return f;
}

FeatureSet reversed(const FeatureSet& a) {
  FeatureSet b(a.n, a.d);
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t j = 0; j < a.d; ++j) b.row(i)[j] = a.row(a.n - 1 - i)[j];
  return b;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("fid is zero on identical sets, symmetric and order-invariant") {
    Rng rng(1);
    const FeatureSet a = gaussian(300, 4, 0.0, rng), b = gaussian(300, 4, 0.5, rng);
    CHECK(fid(a, a) <= 1e-8);
    CHECK(std::abs(fid(a, b) - fid(b, a)) < 1e-8);
    CHECK(fid(a, b) == fid(reversed(a), b));
    CHECK_THROWS_AS(fid(FeatureSet(1, 4), a), UsageError);
  }

  TEST_CASE("kid and inception score do not depend on row order") {
    Rng rng(2);
    const FeatureSet a = gaussian(200, 3, 0.0, rng), b = gaussian(200, 3, 0.3, rng);
    const MeanStd k1 = kid(a, b, 5), k2 = kid(reversed(a), b, 5);
    CHECK(k1.mean == k2.mean);
    CHECK(k1.std == k2.std);
    CHECK_THROWS_AS(kid(FeatureSet(10, 3), b), UsageError);
  }

  TEST_CASE("property: inception score stays in [1, C]") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      ClassPosteriors p;
      p.n = 40;
      p.classes = 2 + rng.below(6);
      p.probs.resize(p.n * p.classes);
      for (std::size_t i = 0; i < p.n; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < p.classes; ++c) s += p.probs[i * p.classes + c] = std::pow(rng.uniform(), 4.0);
        for (std::size_t c = 0; c < p.classes; ++c) p.probs[i * p.classes + c] /= s;
      }
      const MeanStd is = inception_score(p, 0, 4);
      CHECK(is.mean >= 1.0 - 1e-12);
      CHECK(is.mean <= static_cast<double>(p.classes) + 1e-12);
    }
  }

  TEST_CASE("total variation basics") {
    const std::vector<double> p{0.5, 0.5, 0.0}, q{0.0, 0.5, 0.5};
    CHECK(total_variation(p, p) == 0.0);
    CHECK(total_variation(p, q) == doctest::Approx(0.5));
    CHECK(total_variation(p, q) == total_variation(q, p));
  }

  TEST_CASE("kl metric of identical posteriors is zero") {
    ClassPosteriors p;
    p.n = 2;
    p.classes = 2;
    p.probs = {0.9, 0.1, 0.3, 0.7};
    CHECK(std::abs(kl_metric(p, p)) < 1e-15);
  }

  TEST_CASE("features are unit length and have the documented width") {
    const std::vector<TokenSequence> seqs{{{0, 1, 1}, 0}, {{2, 2, 2}, 0}};
    const FeatureSet f = sequence_features(seqs, 3);
    CHECK(f.d == 3 + 9);
    for (std::size_t i = 0; i < 2; ++i) {
      double s = 0;
      for (double v : f.row(i)) s += v * v;
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  TEST_CASE("report on exact samples is accurate and serializes") {
    TaskConfig tc;
    tc.C = 2;
    tc.K = 3;
    tc.D = 2;
    tc.min_condition_tv = 0.2;
    const SyntheticTask task = make_task(tc, 4);
    Rng g(5), r(6);
    const Dataset gen = sample_per_condition(task, 3000, g);
    const Dataset ref = sample_per_condition(task, 3000, r);
    const MetricReport rep = oracle_report(task, gen, ref, 1);
    REQUIRE(rep.tv_available);
    REQUIRE(rep.per_condition_tv.size() == 2);
    CHECK(rep.mean_tv() < 0.05);
    CHECK(rep.fid < 0.01);
    const std::string j = rep.to_json();
    CHECK(j.find("\"per_condition_tv\"") != std::string::npos);
    const std::string table = format_table({{"exact", rep}});
    CHECK(table.find("exact") != std::string::npos);
  }
}
