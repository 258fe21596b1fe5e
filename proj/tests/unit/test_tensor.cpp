#include <doctest.h>

#include <cmath>
#include <memory>

#include "cdd/rng.hpp"
#include "cdd/tensor.hpp"

using namespace cdd;

namespace {

Tensor random_param(Shape shape, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, 0.5);
  Tensor t = Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul matches loops") {
    Rng rng(1);
    Tensor a = random_param({3, 4}, rng), b = random_param({4, 2}, rng);
    Tape tape(false);
    Tensor c = ops::matmul(tape, a, b);
    REQUIRE(c.shape() == Shape{3, 2});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at(i * 4 + k) * b.at(k * 2 + j);
        CHECK(c.at(i * 2 + j) == doctest::Approx(s).epsilon(1e-14));
      }
  }

  TEST_CASE("softmax rows are distributions") {
    Rng rng(2);
    Tensor a = random_param({5, 7}, rng);
    Tape tape(false);
    Tensor p = ops::softmax_rows(tape, a);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(p.at(i * 7 + j) > 0.0);
        s += p.at(i * 7 + j);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  TEST_CASE("backward agrees with central differences on a composite") {
    Rng rng(3);
    Tensor x = random_param({4, 6}, rng), w = random_param({5, 6}, rng);
    Tensor g = random_param({5}, rng), b = random_param({5}, rng);
    const std::vector<int> targets{0, 3, 4, 1};
    auto f = [&](Tape& tape) {
      Tensor h = ops::linear(tape, x, w);
      h = ops::layer_norm(tape, h, g, b);
      h = ops::gelu(tape, h);
      return ops::cross_entropy(tape, h, targets);
    };
    const auto rep = finite_diff_check(f, {x, w, g, b}, 1e-5, 1e-6);
    CHECK(rep.checked == x.numel() + w.numel() + g.numel() + b.numel());
    CHECK(rep.passed);
    CHECK(rep.max_rel_error < 1e-6);
  }

  TEST_CASE("attention gradients agree with central differences") {
    Rng rng(4);
    Tensor q = random_param({6, 4}, rng), k = random_param({6, 4}, rng), v = random_param({6, 4}, rng);
    auto f = [&](Tape& tape) {
      Tensor o = ops::attention(tape, q, k, v, 2, 2);
      return ops::sum(tape, ops::mul(tape, o, o));
    };
    CHECK(finite_diff_check(f, {q, k, v}, 1e-5, 1e-6).passed);
  }

  TEST_CASE("gradients accumulate over two uses") {
    Tensor a = Tensor::from({2}, {1.0, 2.0});
    a.set_requires_grad(true);
    Tape tape;
    Tensor y = ops::sum(tape, ops::add(tape, a, a));
    tape.backward(y);
    REQUIRE(a.has_grad());
    CHECK(a.grad()[0] == 2.0);
    CHECK(a.grad()[1] == 2.0);
  }

  TEST_CASE("a non-recording tape leaves no gradient") {
    Tensor a = Tensor::from({2}, {1.0, 2.0});
    a.set_requires_grad(true);
    Tape tape(false);
    Tensor y = ops::sum(tape, ops::mul(tape, a, a));
    CHECK(y.item() == 5.0);
    CHECK(tape.size() == 0);
  }
}
