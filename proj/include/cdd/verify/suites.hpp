#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace cdd::verify {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured quantity
  double tolerance = 0.0;  // bound it was compared against
  std::string detail;
  double seconds = 0.0;
  bool timing = false;  // value is a wall-clock measurement
};

using Results = std::vector<CheckResult>;

// Closed-form marginals against brute-force products and column sums, on
// K in {2, 4, 8} x T in {1, 4, 10}.
Results schedule_suite();
// Closed-form posteriors against enumeration on the same grid.
Results posterior_suite();
// Reverse chain driven by the exact task posterior on (K=4, D=2, T=8).
Results oracle_chain_suite(std::size_t samples_per_condition = 100000, std::uint64_t seed = 7);
// Tape gradients of the full contrastive loss against central differences
// for every trainable scalar of an adapted (d_model=32, n_layers=2, r=4)
// model.
Results gradient_suite();
// Adapter neutrality, merge equivalence, gradient confinement, counts.
Results lora_suite();
// lambda = 0 reduction and affinity in lambda.
Results loss_algebra_suite();
// 50 epochs at lambda = 5e-5, N = 10 on a small toy set.
Results operating_point_suite(int epochs = 50);
// Uniform-t estimator against the exhaustive sum on (K=4, D=2, T=4).
Results estimator_suite(std::size_t draws = 100000);
// FID, KID, ISc and KL formula checks.
Results metric_suite();
// Dataset and oracle-table checks.
Results datagen_suite();

// Everything `verify` runs, in order.
Results run_all(const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace cdd::verify
