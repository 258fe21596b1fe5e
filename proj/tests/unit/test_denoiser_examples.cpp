#include <doctest.h>

#include <cmath>
#include <vector>

#include "cdd/denoiser.hpp"
#include "fixtures.hpp"

using namespace cdd;

namespace {

std::vector<double> values_of(const Denoiser& m, const std::string& name) {
  for (const auto& nt : m.parameters())
    if (nt.name == name) return {nt.tensor.data().begin(), nt.tensor.data().end()};
  FAIL("missing tensor " << name);
  return {};
}

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("permuting condition embedding rows permutes outputs") {
    DenoiserConfig c = fixtures::tiny_model();
    c.n_conditions = 3;
    Rng rng(31);
    const Denoiser m(c, rng);
    Denoiser swapped(m);
    const auto table = values_of(m, "cond_emb");
    const std::vector<int> perm{2, 0, 1};
    std::vector<double> moved = table;  // the trailing null row stays put
    const std::size_t w = static_cast<std::size_t>(c.d_cond);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t j = 0; j < w; ++j) moved[r * w + j] = table[static_cast<std::size_t>(perm[r]) * w + j];
    swapped.assign("cond_emb", moved);
    const TokenSequence xt{{0, 4, 2}, 3};
    for (int cond = 0; cond < 3; ++cond) {
      const auto a = swapped.forward(xt, 3, cond);
      const auto b = m.forward(xt, 3, perm[static_cast<std::size_t>(cond)]);
      for (std::size_t i = 0; i < a.probs.size(); ++i) CHECK(std::abs(a.probs[i] - b.probs[i]) < 1e-12);
    }
  }

  TEST_CASE("frozen base without adapters has nothing to train") {
    Rng rng(32);
    Denoiser m(fixtures::tiny_model(), rng);
    CHECK(m.count_trainable() > 0);
    m.set_base_trainable(false);
    CHECK(m.count_trainable() == 0);
  }

  TEST_CASE("adapter parameter count on q and k at r = 4") {
    DenoiserConfig c = fixtures::tiny_model();
    c.n_layers = 2;
    Rng rng(33);
    Denoiser m(c, rng);
    LoraConfig l;
    l.r = 4;
    l.alpha = 8.0;
    l.targets = {LoraTarget::q, LoraTarget::k};
    m.attach_lora(l, rng);
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    CHECK(m.count_trainable() == 2 * 2 * (d * 4 + 4 * d));
  }

  TEST_CASE("merging zero-initialized adapters leaves the base weights") {
    Rng rng(34);
    Denoiser m(fixtures::tiny_model(), rng);
    const auto before = values_of(m, "blocks.0.attn.v");
    m.attach_lora(LoraConfig{2, 4.0, {LoraTarget::q, LoraTarget::k, LoraTarget::v, LoraTarget::p}}, rng);
    for (double b : values_of(m, "blocks.0.attn.v.lora_b")) CHECK(b == 0.0);
    m.merge_lora();
    CHECK(values_of(m, "blocks.0.attn.v") == before);
    CHECK_FALSE(m.has_lora());
    CHECK(m.count_trainable() == 0);
  }
}
