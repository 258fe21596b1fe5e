#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cdd/rng.hpp"
#include "cdd/schedule.hpp"

namespace cdd {

struct TokenSequence {
  std::vector<int> tokens;
  int t = 0;  // diffusion step this state belongs to

  std::size_t size() const { return tokens.size(); }
  bool operator==(const TokenSequence&) const = default;
};

// One probability vector per sequence position, stored row-major.
struct CategoricalField {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> probs;

  CategoricalField() = default;
  CategoricalField(std::size_t r, std::size_t c)
      : rows(r), cols(c), probs(r * c, 0.0) {}

  std::span<double> row(std::size_t i) { return {probs.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const {
    return {probs.data() + i * cols, cols};
  }
  // Throws UsageError unless every row is a distribution within tol.
  void validate(double tol = 1e-9) const;
};

// Anything that maps a corrupted batch to clean-token beliefs p(x0 | x_t, y):
// the trained network and the exact task oracle both implement this.
class X0Predictor {
 public:
  virtual ~X0Predictor() = default;
  virtual int num_tokens() const = 0;
  // One K-column field per input sequence.
  virtual std::vector<CategoricalField> predict(
      std::span<const TokenSequence> xt, int t,
      std::span<const int> conds) const = 0;
};

// Each position corrupted independently from q(x_t | x_0).
TokenSequence forward_sample(const NoiseSchedule& s, const TokenSequence& seq0,
                             int t, Rng& rng);
// Same, with one caller-supplied uniform per position (inverse CDF). Shared
// uniforms give coupled corruptions of different clean sequences.
TokenSequence forward_sample_with(const NoiseSchedule& s,
                                  const TokenSequence& seq0, int t,
                                  std::span<const double> uniforms);

// q(x_{t-1} | x_t, x_0) over K + 1 states.
std::vector<double> posterior(const NoiseSchedule& s, int xt, int x0, int t);

// Row-major K x (K+1) block whose row x0 is posterior(xt, x0, t); rows for
// pairs with q(x_t | x_0) = 0 are left zero.
std::vector<double> posterior_block(const NoiseSchedule& s, int xt, int t);

CategoricalField posterior_from_x0_prediction(const NoiseSchedule& s,
                                              const TokenSequence& xt,
                                              const CategoricalField& x0_dist,
                                              int t);

struct GenerationStats {
  std::size_t residual_masks = 0;
  // Mean row entropy (nats) of p(x_{t-1} | x_t) for t = T..1.
  std::vector<double> entropy_trace;

  std::string to_jsonl() const;
};

struct GenerationResult {
  std::vector<TokenSequence> sequences;
  GenerationStats stats;
};

// Reverse chain for a batch of conditions, sequences of length D.
GenerationResult generate(const X0Predictor& model, const NoiseSchedule& s,
                          std::span<const int> conds, std::size_t D, Rng& rng);

TokenSequence generate_one(const X0Predictor& model, const NoiseSchedule& s,
                           int cond, std::size_t D, Rng& rng,
                           GenerationStats* stats = nullptr);

}  // namespace cdd
