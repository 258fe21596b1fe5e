#include "cdd/optimizer.hpp"

#include <cmath>

#include "cdd/errors.hpp"

namespace cdd {

void AdamWConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer: lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optimizer: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
}

AdamW::AdamW(std::vector<Tensor> params, const AdamWConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    if (g.size() != p.numel()) throw UsageError("optimizer: gradient shape mismatch");
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("optimizer: non-finite gradient in parameter " +
                           std::to_string(i) + " entry " + std::to_string(j));
      }
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i];
    auto w = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool has = p.has_grad();
    const auto g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.clear_grad();
}

}  // namespace cdd
