#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cdd/datagen.hpp"

namespace cdd {

// n feature vectors of dimension d, row-major.
struct FeatureSet {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> values;

  FeatureSet() = default;
  FeatureSet(std::size_t rows, std::size_t dim) : n(rows), d(dim), values(rows * dim, 0.0) {}
  std::span<const double> row(std::size_t i) const { return {values.data() + i * d, d}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * d, d}; }
};

// Rows of class probabilities, one per sample.
struct ClassPosteriors {
  std::size_t n = 0;
  std::size_t classes = 0;
  std::vector<double> probs;

  std::span<const double> row(std::size_t i) const {
    return {probs.data() + i * classes, classes};
  }
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Unigram histogram (K) followed by bigram histogram (K * K), each as
// frequencies, then the whole vector scaled to unit L2 norm.
FeatureSet sequence_features(std::span<const TokenSequence> seqs, int K);

// Frechet distance between Gaussian fits. Usage error when either set has
// fewer than 2 rows or the dimensions differ.
double fid(const FeatureSet& a, const FeatureSet& b);

// Unbiased MMD^2 with kernel (x.y / d + 1)^3 over `subsets` disjoint subset
// pairs. Rows are sorted, then shuffled with `seed`, so the result does not
// depend on input order. Needs 2 * subsets rows in each set.
MeanStd kid(const FeatureSet& a, const FeatureSet& b, std::uint64_t seed = 0,
            std::size_t subsets = 10);

// exp(mean KL(p(y|x) || p(y))) per split, mean and population std across
// splits. Same ordering rule as kid.
MeanStd inception_score(const ClassPosteriors& p, std::uint64_t seed = 0,
                        std::size_t splits = 10);

// KL(mean gen posterior || mean ref posterior).
double kl_metric(const ClassPosteriors& gen, const ClassPosteriors& ref);

// Exact p(c | x) under a uniform condition prior. A sequence impossible under
// every condition gets the uniform row.
ClassPosteriors bayes_posteriors(const SyntheticTask& task,
                                 std::span<const TokenSequence> seqs);

// Total variation between two distributions over the same support.
double total_variation(std::span<const double> p, std::span<const double> q);

struct MetricReport {
  double fid = 0.0;
  double kid_mean = 0.0;
  double kid_std = 0.0;
  double isc_mean = 0.0;
  double isc_std = 0.0;
  double kl = 0.0;
  double cond_accuracy = 0.0;
  std::vector<double> per_condition_tv;
  bool tv_available = false;
  std::string notice;
  std::size_t n = 0;

  double mean_tv() const;
  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

// Fidelity of generated records against the task. `reference` supplies the
// real samples for the feature and posterior metrics.
MetricReport oracle_report(const SyntheticTask& task, const Dataset& generated,
                           const Dataset& reference, std::uint64_t seed = 0);

// Fixed-width table, one row per labelled report.
std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace cdd
