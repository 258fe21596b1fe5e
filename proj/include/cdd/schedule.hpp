#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace cdd {

struct ScheduleConfig {
  int K = 8;  // real codebook tokens; the mask state has index K
  int T = 10;
  double terminal_mask_mass = 0.9;        // target gamma_bar_T
  double terminal_uniform_mass = 0.0999;  // target K * beta_bar_T

  void validate() const;
};

struct Prior {
  std::vector<double> probs;  // renormalized, K + 1 entries
  double raw_sum = 0.0;       // sum of the unnormalized vector, 1 - alpha_bar_T
  double residual = 0.0;      // alpha_bar_T
};

// Mask-and-replace schedule over K real tokens plus one absorbing mask state.
// Cumulative coefficients are linear in t/T; per-step coefficients are
// recovered from consecutive cumulative values. All arrays are indexed by
// t = 0..T, with the t = 0 entries describing the identity kernel.
class NoiseSchedule {
 public:
  static constexpr int kMaxSteps = 10000;

  static NoiseSchedule build(const ScheduleConfig& cfg);

  int K() const { return K_; }
  int T() const { return T_; }
  int mask() const { return K_; }
  int states() const { return K_ + 1; }
  const ScheduleConfig& config() const { return cfg_; }

  double alpha(int t) const { return alpha_.at(check_step(t, 1)); }
  double beta(int t) const { return beta_.at(check_step(t, 1)); }
  double gamma(int t) const { return gamma_.at(check_step(t, 1)); }
  double alpha_bar(int t) const { return alpha_bar_.at(check_step(t, 0)); }
  double beta_bar(int t) const { return beta_bar_.at(check_step(t, 0)); }
  double gamma_bar(int t) const { return gamma_bar_.at(check_step(t, 0)); }

  // q(x_t = to | x_{t-1} = from), 1 <= t <= T.
  double step_prob(int to, int from, int t) const;
  // q(x_t = to | x_0 = x0) from the closed form, 0 <= t <= T.
  double marginal_prob(int to, int x0, int t) const;

  // Dense (K+1) x (K+1) row-major Q_t; entry (m, n) = q(x_t = m | x_{t-1} = n).
  std::vector<double> transition_matrix(int t) const;
  // Closed-form categorical q(x_t | x_0) over K + 1 states.
  std::vector<double> marginal_distribution(int x0, int t) const;
  Prior prior() const;

  // CSV with header t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar.
  std::string to_csv() const;

 private:
  std::size_t check_step(int t, int lo) const;

  ScheduleConfig cfg_;
  int K_ = 0;
  int T_ = 0;
  std::vector<double> alpha_, beta_, gamma_;
  std::vector<double> alpha_bar_, beta_bar_, gamma_bar_;
};

}  // namespace cdd
