#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "cdd/diffusion.hpp"
#include "cdd/rng.hpp"
#include "cdd/schedule.hpp"

namespace cdd {

// First-order Markov chain over K tokens.
struct MarkovSpec {
  std::vector<double> initial;     // K
  std::vector<double> transition;  // K x K, row = previous token
};

struct TaskConfig {
  int C = 4;
  int K = 8;
  int D = 4;
  // Mass placed on one randomly chosen token in every initial/transition row;
  // the remainder is a flat-Dirichlet draw.
  double concentration = 0.9;
  // Required minimum pairwise TV between condition distributions, checked by
  // enumeration when K^D is within the oracle guard.
  double min_condition_tv = 0.3;

  void validate() const;
};

struct SyntheticTask {
  int C = 0;
  int K = 0;
  int D = 0;
  std::uint64_t seed = 0;
  std::vector<MarkovSpec> conditions;

  void validate() const;
};

inline constexpr std::size_t kOracleGuard = 1'000'000;

SyntheticTask make_task(const TaskConfig& cfg, std::uint64_t seed);

// Mixes every table with a fresh random draw:
// (1 - weight) * original + weight * fresh.
SyntheticTask shift_task(const SyntheticTask& task, Rng& rng, double weight = 0.5,
                         double concentration = 0.9);

enum class Split { train, val };

struct Record {
  int cond = 0;
  TokenSequence seq;
  Split split = Split::train;
};

struct Dataset {
  std::vector<Record> records;

  std::size_t size() const { return records.size(); }
};

// ConfigError unless every record has a valid condition, length D and only
// real tokens.
void validate_dataset(const SyntheticTask& task, const Dataset& data);

// n i.i.d. records with conditions drawn uniformly.
Dataset sample_dataset(const SyntheticTask& task, std::size_t n, Rng& rng,
                       Split split = Split::train);
// n records for each condition, in condition order.
Dataset sample_per_condition(const SyntheticTask& task, std::size_t n_per_condition,
                             Rng& rng, Split split = Split::train);

double sequence_probability(const SyntheticTask& task, int cond,
                            std::span<const int> tokens);

// Exact probability of every sequence, indexed by base-K number with the
// first position most significant. Requires K^D <= kOracleGuard.
std::vector<double> oracle_distribution(const SyntheticTask& task, int cond);
std::size_t sequence_index(std::span<const int> tokens, int K);
std::vector<int> sequence_from_index(std::size_t index, int K, int D);

// Exact p(x0_i | x_t, y) per position by Bayes enumeration over the task's
// joint distribution and the closed-form corruption marginals.
class OracleDenoiser : public X0Predictor {
 public:
  OracleDenoiser(const SyntheticTask& task, const NoiseSchedule& schedule);

  int num_tokens() const override { return task_.K; }
  std::vector<CategoricalField> predict(std::span<const TokenSequence> xt, int t,
                                        std::span<const int> conds) const override;
  // Also valid at t = 0 (uncorrupted input).
  CategoricalField belief(const TokenSequence& xt, int t, int cond) const;

 private:
  SyntheticTask task_;
  NoiseSchedule schedule_;
  std::vector<std::vector<double>> tables_;  // per condition
  mutable std::mutex mu_;
  mutable std::map<std::vector<int>, CategoricalField> cache_;
};

std::string task_to_json(const SyntheticTask& task);
SyntheticTask task_from_json(const std::string& text);

std::string dataset_to_jsonl(const Dataset& data);
Dataset dataset_from_jsonl(const std::string& text);

}  // namespace cdd
