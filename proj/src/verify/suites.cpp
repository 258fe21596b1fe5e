#include "cdd/verify/suites.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "cdd/datagen.hpp"
#include "cdd/denoiser.hpp"
#include "cdd/diffusion.hpp"
#include "cdd/errors.hpp"
#include "cdd/loss.hpp"
#include "cdd/metrics.hpp"
#include "cdd/schedule.hpp"
#include "cdd/trainer.hpp"
#include "cdd/verify/oracles.hpp"

namespace cdd::verify {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

CheckResult timing(CheckResult c) {
  c.timing = true;
  return c;
}

CheckResult at_most(std::string suite, std::string name, double value, double tol,
                    std::string detail = {}) {
  return {std::move(suite), std::move(name), value <= tol, value, tol, std::move(detail), 0.0};
}

CheckResult holds(std::string suite, std::string name, bool ok, std::string detail = {}) {
  return {std::move(suite), std::move(name), ok, ok ? 1.0 : 0.0, 1.0, std::move(detail), 0.0};
}

ScheduleConfig schedule_config(int K, int T) {
  ScheduleConfig c;
  c.K = K;
  c.T = T;
  return c;
}

DenoiserConfig small_model(int K, int T, int D, int C, int d_model, int layers, int heads) {
  DenoiserConfig m;
  m.K = K;
  m.T = T;
  m.D = D;
  m.n_conditions = C;
  m.d_model = d_model;
  m.n_layers = layers;
  m.n_heads = heads;
  m.d_cond = std::max(4, d_model / 2);
  return m;
}

void randomize(const std::vector<NamedTensor>& tensors, Rng& rng, double std) {
  for (const NamedTensor& nt : tensors) {
    Tensor t = nt.tensor;
    for (double& v : t.data()) v = rng.normal(0.0, std);
  }
}

DenoiserBatch random_batch(const DenoiserConfig& c, std::size_t n, Rng& rng) {
  DenoiserBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    for (int p = 0; p < c.D; ++p)
      b.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c.K + 1))));
    b.steps.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.T))));
    b.conds.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c.n_conditions))));
  }
  return b;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> forward_values(const Denoiser& model, const DenoiserBatch& b) {
  Tape tape(false);
  const Tensor out = model.forward(tape, b);
  return {out.data().begin(), out.data().end()};
}

std::vector<TokenSequence> random_sequences(int K, int D, std::size_t n, Rng& rng) {
  std::vector<TokenSequence> out(n);
  for (auto& s : out) {
    s.tokens.resize(static_cast<std::size_t>(D));
    for (int& t : s.tokens) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
  }
  return out;
}

constexpr int kGridK[] = {2, 4, 8};
constexpr int kGridT[] = {1, 4, 10};

}  // namespace

Results schedule_suite() {
  const auto t0 = Clock::now();
  double marg_err = 0.0, col_err = 0.0, step_err = 0.0;
  for (int K : kGridK) {
    for (int T : kGridT) {
      const ScheduleConfig cfg = schedule_config(K, T);
      const NoiseSchedule s = NoiseSchedule::build(cfg);
      const auto S = static_cast<std::size_t>(K + 1);
      for (int t = 0; t <= T; ++t) {
        const oracle::Matrix prod = oracle::cumulative_matrix(cfg, t);
        for (int x0 = 0; x0 < K; ++x0) {
          const auto closed = s.marginal_distribution(x0, t);
          for (std::size_t m = 0; m < S; ++m)
            marg_err = std::max(marg_err, std::abs(closed[m] - prod[m][static_cast<std::size_t>(x0)]));
        }
        if (t == 0) continue;
        const auto q = s.transition_matrix(t);
        const oracle::Matrix ref = oracle::step_matrix(cfg, t);
        for (std::size_t n = 0; n < S; ++n) {
          double col = 0.0;
          for (std::size_t m = 0; m < S; ++m) {
            col += q[m * S + n];
            step_err = std::max(step_err, std::abs(q[m * S + n] - ref[m][n]));
          }
          col_err = std::max(col_err, std::abs(col - 1.0));
        }
      }
    }
  }
  const double secs = since(t0);
  Results r;
  r.push_back(at_most("schedule", "closed-form marginals vs matrix products", marg_err, 1e-10));
  r.push_back(at_most("schedule", "transition columns sum to one", col_err, 1e-12));
  r.push_back(at_most("schedule", "transition matrix vs reference", step_err, 1e-12));

  const NoiseSchedule s = NoiseSchedule::build(schedule_config(4, 10));
  r.push_back(at_most("schedule", "alpha_bar_T for K=4, T=10", std::abs(s.alpha_bar(10) - 1e-4), 1e-12));
  r.push_back(at_most("schedule", "gamma_bar_T for K=4, T=10", std::abs(s.gamma_bar(10) - 0.9), 1e-12));
  r.push_back(at_most("schedule", "prior raw mass equals 1 - alpha_bar_T",
                      std::abs(s.prior().raw_sum - (1.0 - s.alpha_bar(10))), 1e-12));
  r.push_back(timing(at_most("schedule", "runtime (s)", secs, 5.0)));
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results posterior_suite() {
  const auto t0 = Clock::now();
  double err = 0.0, sum_err = 0.0;
  std::size_t pairs = 0, mismatched_support = 0;
  for (int K : kGridK) {
    for (int T : kGridT) {
      const ScheduleConfig cfg = schedule_config(K, T);
      const NoiseSchedule s = NoiseSchedule::build(cfg);
      for (int t = 1; t <= T; ++t) {
        const oracle::Matrix qbar = oracle::cumulative_matrix(cfg, t);
        for (int xt = 0; xt <= K; ++xt) {
          for (int x0 = 0; x0 < K; ++x0) {
            const bool possible = qbar[static_cast<std::size_t>(xt)][static_cast<std::size_t>(x0)] > 0.0;
            std::vector<double> got;
            try {
              got = posterior(s, xt, x0, t);
            } catch (const DegeneratePairError&) {
              mismatched_support += possible ? 1 : 0;
              continue;
            }
            if (!possible) {
              ++mismatched_support;
              continue;
            }
            const auto ref = oracle::posterior(cfg, xt, x0, t);
            double total = 0.0;
            for (std::size_t i = 0; i < got.size(); ++i) {
              err = std::max(err, std::abs(got[i] - ref[i]));
              total += got[i];
            }
            sum_err = std::max(sum_err, std::abs(total - 1.0));
            ++pairs;
          }
        }
      }
    }
  }
  const double secs = since(t0);
  Results r;
  r.push_back(at_most("posterior", "closed form vs enumeration", err, 1e-10,
                      std::to_string(pairs) + " (x_t, x_0, t) triples"));
  r.push_back(at_most("posterior", "rows sum to one", sum_err, 1e-10));
  r.push_back(holds("posterior", "degenerate pairs agree with the oracle", mismatched_support == 0));

  // Masked observation late in the chain.
  const ScheduleConfig cfg = schedule_config(4, 10);
  const NoiseSchedule s = NoiseSchedule::build(cfg);
  const auto got = posterior(s, 4, 2, 9);
  const auto ref = oracle::posterior(cfg, 4, 2, 9);
  r.push_back(at_most("posterior", "masked x_t at t = 9 vs enumeration", max_abs_diff(got, ref),
                      1e-10, fmt("mask %.4f, x0 %.4f", got[4], got[2])));
  r.push_back(timing(at_most("posterior", "runtime (s)", secs, 5.0)));
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results oracle_chain_suite(std::size_t samples_per_condition, std::uint64_t seed) {
  const auto t0 = Clock::now();
  TaskConfig tc;
  tc.K = 4;
  tc.D = 2;
  const SyntheticTask task = make_task(tc, seed);
  const NoiseSchedule s = NoiseSchedule::build(schedule_config(4, 8));
  const OracleDenoiser oracle_model(task, s);
  Rng rng = Rng::derive(seed, "verify.oracle_chain");
  const Dataset gen = sample_model(oracle_model, s, task.C, 2, samples_per_condition, rng, 4096);
  double worst = 0.0;
  std::string detail;
  for (int c = 0; c < task.C; ++c) {
    std::vector<double> emp(16, 0.0);
    for (const Record& rec : gen.records)
      if (rec.cond == c) emp[sequence_index(rec.seq.tokens, 4)] += 1.0 / samples_per_condition;
    const double tv = total_variation(emp, oracle_distribution(task, c));
    worst = std::max(worst, tv);
    detail += (c ? ", " : "per-condition TV ") + fmt("%.4f", tv);
  }
  const double secs = since(t0);
  Results r;
  r.push_back(at_most("oracle-chain", "max TV vs exact distribution", worst, 0.02, detail));
  r.push_back(timing(at_most("oracle-chain", "runtime (s)", secs, 120.0)));
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results gradient_suite() {
  const auto t0 = Clock::now();
  Results r;
  {
    const DenoiserConfig mc = small_model(8, 10, 4, 4, 32, 2, 4);
    Rng rng(11);
    Denoiser model(mc, rng);
    LoraConfig lc;
    lc.r = 4;
    lc.alpha = 8.0;
    model.attach_lora(lc, rng);
    randomize(model.lora_parameters(), rng, 0.1);
    const NoiseSchedule s = NoiseSchedule::build(schedule_config(8, 10));
    Rng data(12);
    const auto x0s = random_sequences(8, 4, 3, data);
    const std::vector<int> conds = {0, 2, 3};
    ContrastiveOptions opts;
    opts.lambda = 0.5;
    opts.negatives = 3;
    auto f = [&](Tape& tape) {
      Rng draw(13);
      return batch_loss(tape, model, s, x0s, conds, opts, draw).objective;
    };
    const auto rep = finite_diff_check(f, model.trainable(), 1e-5, 1e-4);
    r.push_back(at_most("gradient", "adapted model, contrastive loss: max relative error",
                        rep.max_rel_error, 1e-4,
                        std::to_string(rep.checked) + " scalars, mean " +
                            fmt("%.3g", rep.mean_rel_error)));
  }
  {
    const DenoiserConfig mc = small_model(4, 4, 3, 2, 8, 1, 2);
    Rng rng(21);
    Denoiser model(mc, rng);
    randomize(model.base_parameters(), rng, 0.3);
    const NoiseSchedule s = NoiseSchedule::build(schedule_config(4, 4));
    Rng data(22);
    const auto x0s = random_sequences(4, 3, 2, data);
    const std::vector<int> conds = {0, 1};
    ContrastiveOptions opts;
    auto f = [&](Tape& tape) {
      Rng draw(23);
      return batch_loss(tape, model, s, x0s, conds, opts, draw).objective;
    };
    const auto rep = finite_diff_check(f, model.trainable(), 1e-5, 1e-4);
    r.push_back(at_most("gradient", "full model, bound: max relative error", rep.max_rel_error,
                        1e-4, std::to_string(rep.checked) + " scalars"));
  }
  const double secs = since(t0);
  r.push_back(timing(at_most("gradient", "runtime (s)", secs, 120.0)));
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results lora_suite() {
  const auto t0 = Clock::now();
  Results r;
  const DenoiserConfig mc = small_model(8, 10, 4, 4, 32, 2, 4);
  Rng rng(31);
  const Denoiser base(mc, rng);
  Rng in_rng(32);
  const DenoiserBatch inputs = random_batch(mc, 100, in_rng);
  const auto before = forward_values(base, inputs);

  Denoiser adapted = base;
  adapted.attach_lora(LoraConfig{}, rng);
  r.push_back(at_most("lora", "attach leaves outputs unchanged",
                      max_abs_diff(before, forward_values(adapted, inputs)), 1e-12));

  randomize(adapted.lora_parameters(), rng, 0.1);
  const auto pre_merge = forward_values(adapted, inputs);
  Denoiser merged = adapted;
  merged.merge_lora();
  r.push_back(at_most("lora", "merge matches adapted outputs on 100 inputs",
                      max_abs_diff(pre_merge, forward_values(merged, inputs)), 1e-10,
                      fmt("adapted differs from base by %.3g", max_abs_diff(pre_merge, before))));

  {
    const NoiseSchedule s = NoiseSchedule::build(schedule_config(8, 10));
    Rng data(33);
    const auto x0s = random_sequences(8, 4, 4, data);
    const std::vector<int> conds = {0, 1, 2, 3};
    ContrastiveOptions opts;
    opts.lambda = 0.1;
    opts.negatives = 2;
    Tape tape;
    Rng draw(34);
    tape.backward(batch_loss(tape, adapted, s, x0s, conds, opts, draw).objective);
    bool base_clean = true, adapters_have = true;
    for (const auto& nt : adapted.base_parameters()) base_clean = base_clean && !nt.tensor.has_grad();
    for (const auto& nt : adapted.lora_parameters()) adapters_have = adapters_have && nt.tensor.has_grad();
    r.push_back(holds("lora", "base parameters receive no gradient", base_clean));
    r.push_back(holds("lora", "every adapter receives a gradient", adapters_have));
  }

  auto count = [&](int d_model, int rank, std::vector<LoraTarget> targets) {
    DenoiserConfig c = mc;
    c.d_model = d_model;
    Rng g(35);
    Denoiser m(c, g);
    LoraConfig lc;
    lc.r = rank;
    lc.targets = std::move(targets);
    m.attach_lora(lc, g);
    return m.count_trainable();
  };
  using LT = LoraTarget;
  const std::vector<std::vector<LT>> target_sets = {
      {LT::q, LT::k}, {LT::q, LT::k, LT::v}, {LT::q, LT::k, LT::v, LT::p}};
  bool formula = true;
  for (int d : {32, 64})
    for (int rank : {4, 8, 16})
      for (const auto& ts : target_sets) {
        if (2 * rank > d) continue;
        const std::size_t expect = static_cast<std::size_t>(mc.n_layers) * ts.size() *
                                   static_cast<std::size_t>(rank) * static_cast<std::size_t>(2 * d);
        formula = formula && count(d, rank, ts) == expect;
      }
  r.push_back(holds("lora", "trainable count equals n_layers * |targets| * r * (d_in + d_out)",
                    formula));
  r.push_back(holds("lora", "d_model=64, 2 layers, r=8, all targets has 8192 parameters",
                    count(64, 8, target_sets[2]) == 8192));
  const double ratio = static_cast<double>(count(64, 8, target_sets[0])) /
                       static_cast<double>(count(64, 4, target_sets[0]));
  r.push_back(at_most("lora", "r 4 -> 8 count ratio is exactly 2", std::abs(ratio - 2.0), 0.0,
                      fmt("published q,k counts 583K -> 1.11M give %.3f", 1110.0 / 583.0)));
  r.push_back(holds("lora", "all four targets at r=4 match q,k at r=8",
                    count(64, 4, target_sets[2]) == count(64, 8, target_sets[0])));
  const double secs = since(t0);
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results loss_algebra_suite() {
  const auto t0 = Clock::now();
  Results r;
  const DenoiserConfig mc = small_model(8, 10, 4, 4, 16, 1, 2);
  Rng rng(41);
  Denoiser model(mc, rng);
  randomize(model.base_parameters(), rng, 0.2);
  const NoiseSchedule s = NoiseSchedule::build(schedule_config(8, 10));
  TokenSequence x0{{1, 5, 2, 7}, 0};
  double worst_exact = 0.0;
  for (int t = 1; t <= 10; ++t) {
    Tape a(false), b(false);
    Rng ra(42), rb(42);
    const double total = total_loss(a, model, s, x0, 2, 0.0, 5, t, ra).total;
    const double plain = variational_bound(b, model, s, x0, 2, t, rb).value.item();
    worst_exact = std::max(worst_exact, std::abs(total - plain));
  }
  r.push_back(at_most("loss", "lambda = 0 equals the plain bound", worst_exact, 0.0));

  double worst_affine = 0.0;
  for (int t = 1; t <= 10; ++t) {
    auto eval = [&](double lambda) {
      Tape tape(false);
      Rng rr(43);
      return total_loss(tape, model, s, x0, 1, lambda, 10, t, rr);
    };
    const LossBreakdown l0 = eval(0.0), l1 = eval(1.0);
    for (double lambda : {5e-5, 0.25, 2.0, 7.5}) {
      const LossBreakdown l = eval(lambda);
      worst_affine = std::max(worst_affine, std::abs(l.total - (l0.total + lambda * (l1.total - l0.total))));
      worst_affine = std::max(worst_affine,
                              std::abs(l.total - (l.positive_vb - lambda * l.negative_vb_mean)));
    }
  }
  r.push_back(at_most("loss", "total is affine in lambda", worst_affine, 1e-12));

  {
    Rng dr(44);
    const auto x0s = random_sequences(8, 4, 6, dr);
    const std::vector<int> conds = {0, 1, 2, 3, 0, 1};
    Tape tape(false);
    Rng draw(45);
    const LossBreakdown l = batch_loss(tape, model, s, x0s, conds, ContrastiveOptions{}, draw);
    r.push_back(at_most("loss", "batch objective at lambda = 0 equals mean positive bound",
                        std::abs(l.total - l.positive_vb), 1e-12));
  }
  const double secs = since(t0);
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results operating_point_suite(int epochs) {
  const auto t0 = Clock::now();
  const SyntheticTask task = make_task(TaskConfig{}, 5);
  const NoiseSchedule s = NoiseSchedule::build(schedule_config(8, 10));
  Rng dr = Rng::derive(5, "verify.operating_point");
  const Dataset base_data = sample_dataset(task, 2000, dr);
  const Dataset data = sample_dataset(task, 256, dr);
  DenoiserConfig mc;
  TrainConfig pre;
  pre.epochs = 2;
  pre.seed = 5;
  Trainer base(pre, mc, s);
  base.train(base_data);

  TrainConfig ft;
  ft.phase = Phase::finetune_lora_cdcd;
  ft.lambda = 5e-5;
  ft.N = 10;
  ft.epochs = epochs;
  ft.seed = 5;
  ft.lora = LoraConfig{};
  Trainer tr = Trainer::finetune(ft, base.checkpoint(), mc, s);
  const auto stats = tr.train(data);
  bool finite = true;
  for (const StepLog& l : tr.log())
    finite = finite && std::isfinite(l.total) && std::isfinite(l.negative_vb_mean);
  const double first = stats.front().positive_vb, last = stats.back().positive_vb;
  Results r;
  r.push_back(holds("operating-point", "every step finite over " + std::to_string(epochs) + " epochs",
                    finite && static_cast<int>(stats.size()) == epochs,
                    std::to_string(tr.log().size()) + " steps"));
  r.push_back(at_most("operating-point", "final/first epoch positive bound", last / first, 1.0,
                      fmt("first %.4f, last %.4f", first, last)));
  const double secs = since(t0);
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results estimator_suite(std::size_t draws) {
  const auto t0 = Clock::now();
  const DenoiserConfig mc = small_model(4, 4, 2, 2, 16, 1, 2);
  Rng rng(51);
  Denoiser model(mc, rng);
  randomize(model.base_parameters(), rng, 0.2);
  const NoiseSchedule s = NoiseSchedule::build(schedule_config(4, 4));
  const std::vector<int> x0 = {1, 3};
  const int cond = 1;
  const double exact = oracle::exhaustive_bound(model, s, x0, cond);

  Rng draw(52);
  double total = 0.0;
  const std::size_t chunk = 5000;
  for (std::size_t done = 0; done < draws; done += chunk) {
    CorruptedBatch batch;
    for (std::size_t i = 0; i < std::min(chunk, draws - done); ++i) {
      const int t = sample_step(s, draw);
      std::vector<double> u(2);
      for (double& v : u) v = draw.uniform();
      batch.push(s, TokenSequence{x0, 0}, cond, t, u);
    }
    Tape tape(false);
    const Tensor terms = sequence_bounds(tape, model, s, batch);
    for (double v : terms.data()) total += v;
  }
  const double estimate = s.T() * total / static_cast<double>(draws);
  const double rel = std::abs(estimate - exact) / std::abs(exact);
  Results r;
  r.push_back(at_most("estimator", "uniform-t estimate vs exhaustive sum (relative)", rel, 0.01,
                      fmt("estimate %.6f, exhaustive %.6f", estimate, exact)));
  const double secs = since(t0);
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results metric_suite() {
  const auto t0 = Clock::now();
  Results r;
  Rng rng(61);
  {
    const auto seqs = random_sequences(8, 4, 500, rng);
    const auto seqs2 = random_sequences(8, 4, 500, rng);
    const FeatureSet a = sequence_features(seqs, 8), b = sequence_features(seqs2, 8);
    r.push_back(at_most("metrics", "fid(a, a)", fid(a, a), 1e-8));
    r.push_back(at_most("metrics", "fid symmetry", std::abs(fid(a, b) - fid(b, a)), 1e-8));
  }
  {
    const std::size_t n = 10000, d = 2;
    FeatureSet a(n, d), b(n, d);
    for (double& v : a.values) v = rng.normal();
    for (double& v : b.values) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) b.values[i * d] += 1.0;
    const double v = fid(a, b);
    r.push_back(at_most("metrics", "unit Gaussians one apart: |fid - 1|", std::abs(v - 1.0), 0.05,
                        fmt("fid %.4f", v)));
  }
  {
    bool ok = true;
    double lo = 1e9, hi = -1e9;
    for (int trial = 0; trial < 200; ++trial) {
      ClassPosteriors p;
      p.classes = 4;
      p.n = 10 + rng.below(90);
      const int mode = trial % 4;
      for (std::size_t i = 0; i < p.n; ++i) {
        std::vector<double> row(4);
        if (mode == 0) {
          row = {0.25, 0.25, 0.25, 0.25};
        } else if (mode == 1) {
          row.assign(4, 0.0);
          row[rng.below(4)] = 1.0;
        } else {
          double z = 0.0;
          for (double& v : row) {
            v = -std::log(1.0 - rng.uniform()) * (mode == 3 ? 1e-3 + rng.uniform() : 1.0);
            z += v;
          }
          for (double& v : row) v /= z;
        }
        p.probs.insert(p.probs.end(), row.begin(), row.end());
      }
      const MeanStd is = inception_score(p, static_cast<std::uint64_t>(trial));
      lo = std::min(lo, is.mean);
      hi = std::max(hi, is.mean);
      ok = ok && is.mean >= 1.0 - 1e-12 && is.mean <= 4.0 + 1e-12;
    }
    r.push_back(holds("metrics", "ISc within [1, C] over 200 posterior sets", ok,
                      fmt("observed range [%.4f, %.4f]", lo, hi)));

    ClassPosteriors p;
    p.classes = 3;
    p.n = 50;
    oracle::Matrix rows;
    for (std::size_t i = 0; i < p.n; ++i) {
      std::vector<double> row(3);
      double z = 0.0;
      for (double& v : row) z += (v = rng.uniform() + 1e-3);
      for (double& v : row) v /= z;
      rows.push_back(row);
      p.probs.insert(p.probs.end(), row.begin(), row.end());
    }
    r.push_back(at_most("metrics", "single-split ISc vs naive",
                        std::abs(inception_score(p, 0, 1).mean - oracle::inception_score(rows)),
                        1e-10));
  }
  {
    ClassPosteriors gen, ref;
    gen.classes = ref.classes = 2;
    gen.n = ref.n = 2;
    gen.probs = {1.0, 0.0, 0.8, 0.2};
    ref.probs = {0.5, 0.5, 0.5, 0.5};
    const double expect = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
    r.push_back(at_most("metrics", "KL of mean posteriors [0.9,0.1] vs [0.5,0.5]",
                        std::abs(kl_metric(gen, ref) - expect), 1e-12));
  }
  {
    const int reps = 100;
    std::vector<double> means;
    for (int rep = 0; rep < reps; ++rep) {
      FeatureSet a(200, 8), b(200, 8);
      for (double& v : a.values) v = rng.normal();
      for (double& v : b.values) v = rng.normal();
      means.push_back(kid(a, b, static_cast<std::uint64_t>(rep)).mean);
    }
    double mu = 0.0, var = 0.0;
    for (double m : means) mu += m / reps;
    for (double m : means) var += (m - mu) * (m - mu) / (reps - 1);
    const double se = std::sqrt(var / reps);
    r.push_back(at_most("metrics", "KID null mean in standard errors", std::abs(mu) / se, 3.0,
                        fmt("mean %.3g, se %.3g", mu, se)));
  }
  {
    FeatureSet a(100, 3), b(100, 3);
    for (std::size_t i = 0; i < 100; ++i) {
      a.values[i * 3] = 1.0;
      b.values[i * 3 + 1] = 1.0;
    }
    const MeanStd k = kid(a, b);
    r.push_back(holds("metrics", "KID separates disjoint point masses",
                      k.mean > 0.0 && k.mean >= 10.0 * k.std, fmt("mean %.4f, std %.3g", k.mean, k.std)));
  }
  const double secs = since(t0);
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results datagen_suite() {
  const auto t0 = Clock::now();
  Results r;
  const SyntheticTask task = make_task(TaskConfig{}, 3);
  double table_err = 0.0;
  for (int c = 0; c < task.C; ++c) {
    const auto t = oracle_distribution(task, c);
    double z = 0.0;
    for (double v : t) z += v;
    table_err = std::max(table_err, std::abs(z - 1.0));
  }
  r.push_back(at_most("datagen", "oracle tables sum to one", table_err, 1e-10));

  TaskConfig small;
  small.K = 4;
  small.D = 2;
  const SyntheticTask t42 = make_task(small, 3);
  {
    const auto t = oracle_distribution(t42, 0);
    double z = 0.0;
    for (double v : t) z += v;
    r.push_back(at_most("datagen", "K=4, D=2 table has 16 entries summing to one",
                        t.size() == 16 ? std::abs(z - 1.0) : 1.0, 1e-12));
  }
  {
    Rng rng(71);
    const std::size_t n = 100000;
    const Dataset d = sample_per_condition(task, n, rng);
    const auto& init = task.conditions[0].initial;
    double worst = 0.0;
    for (int k = 0; k < task.K; ++k) {
      double count = 0.0;
      for (std::size_t i = 0; i < n; ++i) count += d.records[i].seq.tokens[0] == k ? 1.0 : 0.0;
      const double p = init[static_cast<std::size_t>(k)];
      const double sigma = std::sqrt(p * (1.0 - p) / n);
      if (sigma > 0.0) worst = std::max(worst, std::abs(count / n - p) / sigma);
    }
    r.push_back(at_most("datagen", "initial-token frequencies (max sigma deviation)", worst, 3.0));
  }
  {
    Rng rng(72);
    const Dataset d = sample_dataset(task, 5000, rng);
    bool positive = true;
    for (const Record& rec : d.records)
      positive = positive && sequence_probability(task, rec.cond, rec.seq.tokens) > 0.0;
    r.push_back(holds("datagen", "every record has positive probability", positive));

    Rng shift_rng(73);
    const SyntheticTask shifted = shift_task(task, shift_rng);
    double min_tv = 1.0;
    for (int c = 0; c < task.C; ++c)
      min_tv = std::min(min_tv, total_variation(oracle_distribution(task, c),
                                                oracle_distribution(shifted, c)));
    r.push_back(holds("datagen", "shifted task differs by TV > 0.05 per condition", min_tv > 0.05,
                      fmt("min TV %.4f", min_tv)));
  }
  {
    const NoiseSchedule s = NoiseSchedule::build(schedule_config(4, 8));
    const OracleDenoiser od(t42, s);
    const TokenSequence clean{{2, 1}, 0};
    const auto b0 = od.belief(clean, 0, 1);
    const double one_hot_err = std::abs(b0.row(0)[2] - 1.0) + std::abs(b0.row(1)[1] - 1.0);
    r.push_back(at_most("datagen", "oracle belief at t = 0 is one-hot", one_hot_err, 1e-12));

    const TokenSequence masked{{4, 4}, 8};
    const auto bm = od.belief(masked, 8, 1);
    const auto table = oracle_distribution(t42, 1);
    double err = 0.0;
    for (int i = 0; i < 2; ++i)
      for (int a = 0; a < 4; ++a) {
        double marg = 0.0;
        for (std::size_t idx = 0; idx < 16; ++idx)
          if (sequence_from_index(idx, 4, 2)[static_cast<std::size_t>(i)] == a) marg += table[idx];
        err = std::max(err, std::abs(bm.row(static_cast<std::size_t>(i))[static_cast<std::size_t>(a)] - marg));
      }
    r.push_back(at_most("datagen", "fully masked belief equals the x0 marginal", err, 1e-12));
  }
  {
    Rng rng(74);
    const std::size_t n = 100000;
    const Dataset d = sample_per_condition(t42, n, rng);
    double worst = 0.0;
    for (int c = 0; c < t42.C; ++c) {
      std::vector<double> emp(16, 0.0);
      for (const Record& rec : d.records)
        if (rec.cond == c) emp[sequence_index(rec.seq.tokens, 4)] += 1.0 / n;
      worst = std::max(worst, total_variation(emp, oracle_distribution(t42, c)));
    }
    r.push_back(at_most("datagen", "exact samples reach TV < 0.02 at 1e5", worst, 0.02));

    Dataset scrambled = sample_dataset(task, 20000, rng);
    for (Record& rec : scrambled.records) rec.cond = static_cast<int>(rng.below(4));
    const MetricReport rep = oracle_report(task, scrambled, sample_dataset(task, 2000, rng));
    const double p = 0.25, sigma = std::sqrt(p * (1 - p) / 20000.0);
    r.push_back(at_most("datagen", "scrambled conditions give accuracy near 1/C (sigmas)",
                        std::abs(rep.cond_accuracy - p) / sigma, 4.0,
                        fmt("accuracy %.4f", rep.cond_accuracy)));
  }
  const double secs = since(t0);
  for (auto& c : r) c.seconds = secs;
  return r;
}

Results run_all(const std::function<void(const CheckResult&)>& on_result) {
  Results all;
  for (auto suite : {schedule_suite, posterior_suite, gradient_suite, lora_suite,
                     loss_algebra_suite, metric_suite, datagen_suite}) {
    for (auto& c : suite()) {
      if (on_result) on_result(c);
      all.push_back(std::move(c));
    }
  }
  for (auto& c : estimator_suite()) {
    if (on_result) on_result(c);
    all.push_back(std::move(c));
  }
  for (auto& c : oracle_chain_suite()) {
    if (on_result) on_result(c);
    all.push_back(std::move(c));
  }
  return all;
}

}  // namespace cdd::verify
