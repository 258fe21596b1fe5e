#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cdd/denoiser.hpp"
#include "cdd/diffusion.hpp"
#include "cdd/rng.hpp"
#include "cdd/schedule.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

// KL(p || q) with q clamped at 1e-12 and 0 log 0 := 0.
double kl_categorical(std::span<const double> p, std::span<const double> q);

struct NegativeSet {
  std::vector<TokenSequence> sequences;
  std::vector<std::vector<std::size_t>> permutations;  // negative[i] = x0[perm[i]]
  // Set when a negative could not be made different from x0 (D = 1 or a
  // constant sequence).
  bool degenerate = false;
};

// N uniform position shuffles of x0, each resampled (up to 100 times) until
// it differs from x0.
NegativeSet make_negatives(const TokenSequence& x0, int N, Rng& rng);

// Corrupted copies of clean sequences, ready for the denoiser.
struct CorruptedBatch {
  std::vector<TokenSequence> clean;
  std::vector<TokenSequence> noisy;
  std::vector<int> steps;
  std::vector<int> conds;

  std::size_t size() const { return clean.size(); }
  void push(const NoiseSchedule& s, const TokenSequence& x0, int cond, int t,
            std::span<const double> uniforms);
  DenoiserBatch denoiser_batch() const;
};

// Model reverse kernel p(x_{t-1} | x_t) = sum_x0 q(x_{t-1} | x_t, x0) p(x0 | x_t)
// for every row of `x0_probs` [n, K]; returns [n, K + 1].
Tensor model_posterior(Tape& tape, const NoiseSchedule& s, const Tensor& x0_probs,
                       std::span<const int> xt, std::span<const int> row_steps);

// Per-sequence bound term: at t = 1 the reconstruction term
// -log p(x0 | x1, y); at t > 1 the KL between the true and model posteriors,
// summed over positions. Returns [batch].
Tensor sequence_bounds(Tape& tape, const NoiseSchedule& s, const Tensor& x0_probs,
                       const CorruptedBatch& batch);
Tensor sequence_bounds(Tape& tape, const Denoiser& model, const NoiseSchedule& s,
                       const CorruptedBatch& batch);

// Parameter-free terminal term: sum over positions of KL(q(x_T | x0) || p(x_T)).
double prior_kl(const NoiseSchedule& s, const TokenSequence& x0);

// Uniform step on [1, T].
int sample_step(const NoiseSchedule& s, Rng& rng);

struct VbEstimate {
  int t = 0;
  Tensor value;             // scalar, on the tape
  double prior_term = 0.0;  // L_T, reported separately
};

VbEstimate variational_bound(Tape& tape, const Denoiser& model,
                             const NoiseSchedule& s, const TokenSequence& x0,
                             int cond, int t, Rng& rng);

struct ContrastiveOptions {
  double lambda = 0.0;
  int negatives = 0;
  bool clamp_negative = false;
  double clamp_max = 1e3;
};

struct LossBreakdown {
  double positive_vb = 0.0;
  double negative_vb_mean = 0.0;
  double total = 0.0;
  double prior_term = 0.0;  // mean L_T over the batch
  double mean_step = 0.0;
  std::size_t degenerate_negatives = 0;
  Tensor objective;  // scalar tensor equal to `total`
};

// Contrastive objective for one example at step t: positive bound
// minus lambda / N times the sum of the negatives' bounds. Negatives reuse
// the positive's step and per-position corruption uniforms.
LossBreakdown total_loss(Tape& tape, const Denoiser& model, const NoiseSchedule& s,
                         const TokenSequence& x0, int cond, double lambda, int N,
                         int t, Rng& rng);

// Batch mean of the contrastive objective with a fresh uniform step per
// example.
LossBreakdown batch_loss(Tape& tape, const Denoiser& model, const NoiseSchedule& s,
                         std::span<const TokenSequence> x0s,
                         std::span<const int> conds, const ContrastiveOptions& opts,
                         Rng& rng);

}  // namespace cdd
