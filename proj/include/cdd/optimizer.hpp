#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdd/tensor.hpp"

namespace cdd {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

// Adaptive moments with bias correction and decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const AdamWConfig& cfg);

  // Parameters without a gradient are treated as having a zero gradient.
  // Throws NumericError (before touching anything) on a non-finite gradient.
  void step();
  void zero_grad();

  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  std::size_t size() const { return params_.size(); }

  // First and second moments for parameter i.
  std::vector<double>& first_moment(std::size_t i) { return m_.at(i); }
  std::vector<double>& second_moment(std::size_t i) { return v_.at(i); }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }
  void set_steps(std::uint64_t t) { t_ = t; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace cdd
