#include "cdd/verify/oracles.hpp"

#include <cmath>

#include "cdd/loss.hpp"

namespace cdd::oracle {

namespace {

struct Coeffs {
  double alpha, beta, gamma;
};

double abar(const ScheduleConfig& c, int t) {
  const double u = static_cast<double>(t) / c.T;
  return 1.0 - u * (c.terminal_mask_mass + c.terminal_uniform_mass);
}

double gbar(const ScheduleConfig& c, int t) {
  return static_cast<double>(t) / c.T * c.terminal_mask_mass;
}

Coeffs step(const ScheduleConfig& c, int t) {
  Coeffs k{};
  k.alpha = abar(c, t) / abar(c, t - 1);
  k.gamma = 1.0 - (1.0 - gbar(c, t)) / (1.0 - gbar(c, t - 1));
  k.beta = (1.0 - k.alpha - k.gamma) / c.K;
  return k;
}

Matrix identity(int n) {
  Matrix m(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
  return m;
}

}  // namespace

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Matrix c(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i][j] += a[i][p] * b[p][j];
  return c;
}

Matrix step_matrix(const ScheduleConfig& cfg, int t) {
  const Coeffs k = step(cfg, t);
  const int S = cfg.K + 1;
  Matrix q(static_cast<std::size_t>(S), std::vector<double>(static_cast<std::size_t>(S), 0.0));
  for (int from = 0; from < S; ++from) {
    for (int to = 0; to < S; ++to) {
      double v;
      if (from == cfg.K) {
        v = to == cfg.K ? 1.0 : 0.0;
      } else if (to == cfg.K) {
        v = k.gamma;
      } else {
        v = k.beta + (to == from ? k.alpha : 0.0);
      }
      q[static_cast<std::size_t>(to)][static_cast<std::size_t>(from)] = v;
    }
  }
  return q;
}

Matrix cumulative_matrix(const ScheduleConfig& cfg, int t) {
  Matrix acc = identity(cfg.K + 1);
  for (int s = 1; s <= t; ++s) acc = naive_matmul(step_matrix(cfg, s), acc);
  return acc;
}

std::vector<double> posterior(const ScheduleConfig& cfg, int xt, int x0, int t) {
  const Matrix q = step_matrix(cfg, t);
  const Matrix prev = cumulative_matrix(cfg, t - 1);
  const auto S = static_cast<std::size_t>(cfg.K + 1);
  std::vector<double> out(S, 0.0);
  double z = 0.0;
  for (std::size_t p = 0; p < S; ++p) {
    out[p] = q[static_cast<std::size_t>(xt)][p] * prev[p][static_cast<std::size_t>(x0)];
    z += out[p];
  }
  for (double& v : out) v /= z;
  return out;
}

double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

double inception_score(const Matrix& rows) {
  std::vector<double> mean(rows.front().size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) mean[c] += r[c] / static_cast<double>(rows.size());
  double total = 0.0;
  for (const auto& r : rows) total += kl(r, mean);
  return std::exp(total / static_cast<double>(rows.size()));
}

double exhaustive_bound(const Denoiser& model, const NoiseSchedule& s,
                        const std::vector<int>& x0, int cond) {
  const ScheduleConfig& cfg = s.config();
  const auto S = static_cast<std::size_t>(cfg.K + 1);
  const std::size_t D = x0.size();
  std::size_t states = 1;
  for (std::size_t i = 0; i < D; ++i) states *= S;

  CorruptedBatch batch;
  std::vector<double> weight;
  for (int t = 1; t <= cfg.T; ++t) {
    const Matrix qbar = cumulative_matrix(cfg, t);
    for (std::size_t idx = 0; idx < states; ++idx) {
      TokenSequence xt;
      xt.tokens.resize(D);
      std::size_t rem = idx;
      double p = 1.0;
      for (std::size_t i = D; i-- > 0;) {
        xt.tokens[i] = static_cast<int>(rem % S);
        rem /= S;
      }
      for (std::size_t i = 0; i < D; ++i)
        p *= qbar[static_cast<std::size_t>(xt.tokens[i])][static_cast<std::size_t>(x0[i])];
      if (p <= 0.0) continue;
      xt.t = t;
      batch.clean.push_back(TokenSequence{x0, 0});
      batch.noisy.push_back(std::move(xt));
      batch.steps.push_back(t);
      batch.conds.push_back(cond);
      weight.push_back(p);
    }
  }
  Tape tape(false);
  const Tensor terms = sequence_bounds(tape, model, s, batch);
  double total = 0.0;
  for (std::size_t i = 0; i < weight.size(); ++i) total += weight[i] * terms.at(i);
  return total;
}

}  // namespace cdd::oracle
