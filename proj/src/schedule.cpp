#include "cdd/schedule.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "cdd/errors.hpp"

namespace cdd {

void ScheduleConfig::validate() const {
  if (K < 2) throw ConfigError("schedule: K must be >= 2");
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (T > NoiseSchedule::kMaxSteps) {
    throw ConfigError("schedule: T exceeds " +
                      std::to_string(NoiseSchedule::kMaxSteps));
  }
  auto in_open_unit = [](double v) { return v > 0.0 && v < 1.0; };
  if (!in_open_unit(terminal_mask_mass)) {
    throw ConfigError("schedule: terminal_mask_mass must lie in (0, 1)");
  }
  if (!in_open_unit(terminal_uniform_mass)) {
    throw ConfigError("schedule: terminal_uniform_mass must lie in (0, 1)");
  }
  if (!(terminal_mask_mass + terminal_uniform_mass < 1.0)) {
    throw ConfigError(
        "schedule: terminal_mask_mass + terminal_uniform_mass must be < 1 "
        "(alpha_bar_T would vanish)");
  }
}

NoiseSchedule NoiseSchedule::build(const ScheduleConfig& cfg) {
  cfg.validate();
  NoiseSchedule s;
  s.cfg_ = cfg;
  s.K_ = cfg.K;
  s.T_ = cfg.T;
  const std::size_t n = static_cast<std::size_t>(cfg.T) + 1;
  s.alpha_.assign(n, 1.0);
  s.beta_.assign(n, 0.0);
  s.gamma_.assign(n, 0.0);
  s.alpha_bar_.assign(n, 1.0);
  s.beta_bar_.assign(n, 0.0);
  s.gamma_bar_.assign(n, 0.0);
  const double K = cfg.K;
  const double corrupt = cfg.terminal_mask_mass + cfg.terminal_uniform_mass;
  for (int t = 1; t <= cfg.T; ++t) {
    const double u = static_cast<double>(t) / cfg.T;
    const auto i = static_cast<std::size_t>(t);
    s.alpha_bar_[i] = 1.0 - u * corrupt;
    s.gamma_bar_[i] = u * cfg.terminal_mask_mass;
    s.beta_bar_[i] = (1.0 - s.alpha_bar_[i] - s.gamma_bar_[i]) / K;
    s.alpha_[i] = s.alpha_bar_[i] / s.alpha_bar_[i - 1];
    s.gamma_[i] = 1.0 - (1.0 - s.gamma_bar_[i]) / (1.0 - s.gamma_bar_[i - 1]);
    // alpha_t + gamma_t <= 1 holds analytically; clamp rounding residue.
    s.beta_[i] = std::max(0.0, (1.0 - s.alpha_[i] - s.gamma_[i]) / K);
  }
  return s;
}

std::size_t NoiseSchedule::check_step(int t, int lo) const {
  if (t < lo || t > T_) {
    throw UsageError("schedule: step " + std::to_string(t) +
                     " outside [" + std::to_string(lo) + ", " +
                     std::to_string(T_) + "]");
  }
  return static_cast<std::size_t>(t);
}

double NoiseSchedule::step_prob(int to, int from, int t) const {
  const std::size_t i = check_step(t, 1);
  if (from == K_) return to == K_ ? 1.0 : 0.0;
  if (to == K_) return gamma_[i];
  return beta_[i] + (to == from ? alpha_[i] : 0.0);
}

double NoiseSchedule::marginal_prob(int to, int x0, int t) const {
  const std::size_t i = check_step(t, 0);
  if (to < 0 || to > K_ || x0 < 0 || x0 > K_) {
    throw UsageError("marginal_prob: state out of range");
  }
  if (x0 == K_) return to == K_ ? 1.0 : 0.0;  // mask is absorbing
  if (to == K_) return gamma_bar_[i];
  return beta_bar_[i] + (to == x0 ? alpha_bar_[i] : 0.0);
}

std::vector<double> NoiseSchedule::transition_matrix(int t) const {
  check_step(t, 1);
  const int S = states();
  std::vector<double> q(static_cast<std::size_t>(S * S));
  for (int m = 0; m < S; ++m)
    for (int n = 0; n < S; ++n)
      q[static_cast<std::size_t>(m * S + n)] = step_prob(m, n, t);
  return q;
}

std::vector<double> NoiseSchedule::marginal_distribution(int x0, int t) const {
  if (x0 < 0 || x0 >= K_) {
    throw UsageError("marginal_distribution: x0 must be a real token, got " +
                     std::to_string(x0));
  }
  check_step(t, 0);
  std::vector<double> v(static_cast<std::size_t>(states()));
  for (int m = 0; m < states(); ++m) {
    v[static_cast<std::size_t>(m)] = marginal_prob(m, x0, t);
  }
  return v;
}

Prior NoiseSchedule::prior() const {
  Prior p;
  const auto T = static_cast<std::size_t>(T_);
  p.probs.assign(static_cast<std::size_t>(K_), beta_bar_[T]);
  p.probs.push_back(gamma_bar_[T]);
  for (double v : p.probs) p.raw_sum += v;
  p.residual = alpha_bar_[T];
  for (double& v : p.probs) v /= p.raw_sum;
  return p;
}

std::string NoiseSchedule::to_csv() const {
  std::ostringstream os;
  os << "t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar\n";
  char buf[512];
  for (int t = 1; t <= T_; ++t) {
    const auto i = static_cast<std::size_t>(t);
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  t, alpha_[i], beta_[i], gamma_[i], alpha_bar_[i],
                  beta_bar_[i], gamma_bar_[i]);
    os << buf;
  }
  return os.str();
}

}  // namespace cdd
