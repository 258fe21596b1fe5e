#include "cdd/loss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "cdd/errors.hpp"

namespace cdd {

double kl_categorical(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw UsageError("kl_categorical: support mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) {
      throw UsageError("kl_categorical: negative probability");
    }
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], 1e-12)));
  }
  return kl;
}

NegativeSet make_negatives(const TokenSequence& x0, int N, Rng& rng) {
  if (N < 0) throw UsageError("make_negatives: N must be non-negative");
  NegativeSet set;
  const std::size_t D = x0.size();
  for (int j = 0; j < N; ++j) {
    std::vector<std::size_t> perm(D);
    TokenSequence neg = x0;
    bool differs = false;
    for (int attempt = 0; attempt < 100 && D > 1; ++attempt) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      for (std::size_t i = D - 1; i > 0; --i) {
        std::swap(perm[i], perm[rng.below(i + 1)]);
      }
      for (std::size_t i = 0; i < D; ++i) neg.tokens[i] = x0.tokens[perm[i]];
      if (neg.tokens != x0.tokens) {
        differs = true;
        break;
      }
    }
    if (D <= 1) std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (!differs) set.degenerate = true;
    set.sequences.push_back(std::move(neg));
    set.permutations.push_back(std::move(perm));
  }
  return set;
}

void CorruptedBatch::push(const NoiseSchedule& s, const TokenSequence& x0,
                          int cond, int t, std::span<const double> uniforms) {
  clean.push_back(x0);
  noisy.push_back(forward_sample_with(s, x0, t, uniforms));
  steps.push_back(t);
  conds.push_back(cond);
}

DenoiserBatch CorruptedBatch::denoiser_batch() const {
  DenoiserBatch b;
  for (std::size_t i = 0; i < size(); ++i) {
    b.tokens.insert(b.tokens.end(), noisy[i].tokens.begin(), noisy[i].tokens.end());
  }
  b.steps = steps;
  b.conds = conds;
  return b;
}

Tensor model_posterior(Tape& tape, const NoiseSchedule& s, const Tensor& x0_probs,
                       std::span<const int> xt, std::span<const int> row_steps) {
  const auto K = static_cast<std::size_t>(s.K());
  const auto S = static_cast<std::size_t>(s.states());
  if (x0_probs.rank() != 2 || x0_probs.dim(1) != K || x0_probs.dim(0) != xt.size() ||
      row_steps.size() != xt.size()) {
    throw ConfigError("model_posterior: predictions " +
                      shape_string(x0_probs.shape()) + " do not match " +
                      std::to_string(xt.size()) + " rows of " +
                      std::to_string(K) + " tokens");
  }
  // One K x (K+1) block per distinct (x_t, t).
  std::vector<std::vector<double>> cache(S * static_cast<std::size_t>(s.T() + 1));
  auto mats = std::make_shared<std::vector<double>>(xt.size() * K * S);
  for (std::size_t i = 0; i < xt.size(); ++i) {
    auto& block = cache[static_cast<std::size_t>(row_steps[i]) * S +
                        static_cast<std::size_t>(xt[i])];
    if (block.empty()) block = posterior_block(s, xt[i], row_steps[i]);
    std::copy(block.begin(), block.end(), mats->begin() + static_cast<long>(i * K * S));
  }
  Tensor mixed = ops::mix_rows(tape, x0_probs, std::move(mats), S);
  return ops::normalize_rows(tape, mixed);
}

Tensor sequence_bounds(Tape& tape, const NoiseSchedule& s, const Tensor& x0_probs,
                       const CorruptedBatch& batch) {
  const std::size_t B = batch.size();
  if (B == 0) throw UsageError("sequence_bounds: empty batch");
  const std::size_t D = batch.clean.front().size();
  const auto S = static_cast<std::size_t>(s.states());
  std::vector<int> xt, steps, x0;
  xt.reserve(B * D);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < D; ++i) {
      xt.push_back(batch.noisy[b].tokens[i]);
      x0.push_back(batch.clean[b].tokens[i]);
      steps.push_back(batch.steps[b]);
    }
  }
  Tensor model = model_posterior(tape, s, x0_probs, xt, steps);
  std::vector<double> target(xt.size() * S);
  for (std::size_t i = 0; i < xt.size(); ++i) {
    const auto q = posterior(s, xt[i], x0[i], steps[i]);
    std::copy(q.begin(), q.end(), target.begin() + static_cast<long>(i * S));
  }
  Tensor target_t = Tensor::from({xt.size(), S}, std::move(target));
  return ops::segment_sum(tape, ops::kl_rows(tape, target_t, model), D);
}

Tensor sequence_bounds(Tape& tape, const Denoiser& model, const NoiseSchedule& s,
                       const CorruptedBatch& batch) {
  if (model.config().K != s.K() || model.config().T != s.T()) {
    throw ConfigError("loss: model (K, T) does not match the schedule");
  }
  Tensor probs = model.forward(tape, batch.denoiser_batch());
  return sequence_bounds(tape, s, probs, batch);
}

double prior_kl(const NoiseSchedule& s, const TokenSequence& x0) {
  const Prior prior = s.prior();
  double total = 0.0;
  for (int tok : x0.tokens) {
    total += kl_categorical(s.marginal_distribution(tok, s.T()), prior.probs);
  }
  return total;
}

int sample_step(const NoiseSchedule& s, Rng& rng) {
  return 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T())));
}

VbEstimate variational_bound(Tape& tape, const Denoiser& model,
                             const NoiseSchedule& s, const TokenSequence& x0,
                             int cond, int t, Rng& rng) {
  std::vector<double> u(x0.size());
  for (double& v : u) v = rng.uniform();
  CorruptedBatch batch;
  batch.push(s, x0, cond, t, u);
  Tensor per_seq = sequence_bounds(tape, model, s, batch);
  return {t, ops::sum(tape, per_seq), prior_kl(s, x0)};
}

namespace {

struct ExamplePlan {
  std::size_t first = 0;  // index of the positive in the corrupted batch
  int negatives = 0;
};

LossBreakdown combine(Tape& tape, const Tensor& per_seq,
                      const std::vector<ExamplePlan>& plan,
                      const ContrastiveOptions& opts) {
  const double inv_b = 1.0 / static_cast<double>(plan.size());
  std::vector<double> w(per_seq.numel(), 0.0);
  double clamp_const = 0.0;
  LossBreakdown out;
  for (const ExamplePlan& ex : plan) {
    w[ex.first] = inv_b;
    out.positive_vb += per_seq.at(ex.first) * inv_b;
    if (ex.negatives == 0) continue;
    const double neg_w = -opts.lambda / ex.negatives * inv_b;
    double neg_sum = 0.0;
    for (int j = 1; j <= ex.negatives; ++j) {
      const std::size_t idx = ex.first + static_cast<std::size_t>(j);
      const double v = per_seq.at(idx);
      neg_sum += v;
      if (opts.clamp_negative && v > opts.clamp_max) {
        clamp_const += neg_w * opts.clamp_max;
      } else {
        w[idx] = neg_w;
      }
    }
    out.negative_vb_mean += neg_sum / ex.negatives * inv_b;
  }
  Tensor obj = ops::weighted_sum(tape, per_seq, w);
  if (clamp_const != 0.0) obj = ops::add(tape, obj, Tensor::scalar(clamp_const));
  out.objective = obj;
  out.total = obj.item();
  return out;
}

}  // namespace

LossBreakdown total_loss(Tape& tape, const Denoiser& model, const NoiseSchedule& s,
                         const TokenSequence& x0, int cond, double lambda, int N,
                         int t, Rng& rng) {
  if (lambda < 0.0) throw UsageError("total_loss: lambda must be >= 0");
  std::vector<double> u(x0.size());
  for (double& v : u) v = rng.uniform();
  const NegativeSet negs = make_negatives(x0, N, rng);
  CorruptedBatch batch;
  batch.push(s, x0, cond, t, u);
  for (const auto& neg : negs.sequences) batch.push(s, neg, cond, t, u);
  Tensor per_seq = sequence_bounds(tape, model, s, batch);
  ContrastiveOptions opts;
  opts.lambda = lambda;
  opts.negatives = N;
  LossBreakdown out = combine(tape, per_seq, {{0, N}}, opts);
  out.prior_term = prior_kl(s, x0);
  out.mean_step = t;
  out.degenerate_negatives = negs.degenerate ? 1 : 0;
  return out;
}

LossBreakdown batch_loss(Tape& tape, const Denoiser& model, const NoiseSchedule& s,
                         std::span<const TokenSequence> x0s,
                         std::span<const int> conds, const ContrastiveOptions& opts,
                         Rng& rng) {
  if (x0s.empty() || x0s.size() != conds.size()) {
    throw UsageError("batch_loss: need matching, non-empty sequences and conditions");
  }
  if (opts.lambda < 0.0) throw UsageError("batch_loss: lambda must be >= 0");
  const int N = opts.lambda > 0.0 ? opts.negatives : 0;
  CorruptedBatch batch;
  std::vector<ExamplePlan> plan;
  double prior_sum = 0.0, step_sum = 0.0;
  std::size_t degenerate = 0;
  for (std::size_t b = 0; b < x0s.size(); ++b) {
    const int t = sample_step(s, rng);
    std::vector<double> u(x0s[b].size());
    for (double& v : u) v = rng.uniform();
    plan.push_back({batch.size(), N});
    batch.push(s, x0s[b], conds[b], t, u);
    if (N > 0) {
      const NegativeSet negs = make_negatives(x0s[b], N, rng);
      degenerate += negs.degenerate ? 1 : 0;
      for (const auto& neg : negs.sequences) batch.push(s, neg, conds[b], t, u);
    }
    prior_sum += prior_kl(s, x0s[b]);
    step_sum += t;
  }
  Tensor per_seq = sequence_bounds(tape, model, s, batch);
  LossBreakdown out = combine(tape, per_seq, plan, opts);
  out.prior_term = prior_sum / static_cast<double>(x0s.size());
  out.mean_step = step_sum / static_cast<double>(x0s.size());
  out.degenerate_negatives = degenerate;
  return out;
}

}  // namespace cdd
