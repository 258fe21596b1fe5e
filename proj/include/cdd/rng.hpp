#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace cdd {

// Seeded generator with portable value transforms. The engine is the
// standard 64-bit Mersenne twister; uniform, normal and categorical draws
// are computed here rather than through <random> distributions so that
// streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Named child stream: depends only on (root seed, label), never on how
  // many values other streams consumed.
  static Rng derive(std::uint64_t root_seed, std::string_view label);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();

  // Standard normal via Box-Muller; no cached second value.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);

  // Index drawn from unnormalized non-negative weights.
  std::size_t categorical(std::span<const double> weights);

  // Inverse-CDF lookup for an externally supplied uniform draw u in [0, 1).
  static std::size_t categorical_from_uniform(std::span<const double> weights,
                                              double u);

  std::string save_state() const;
  void load_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::string_view label);

}  // namespace cdd
