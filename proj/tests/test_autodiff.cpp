#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "fms/autodiff.hpp"
#include "gradcheck.hpp"
#include "gradient_cases.hpp"

using fms::ad::Tape;
using fms::ad::Tensor;

TEST_CASE("identity tape returns its leaf") {
  Tape t;
  t.leaf("x");
  const Tensor& out = t.evaluate({{"x", Tensor::vector({1, 2, 3})}});
  CHECK(out == Tensor::vector({1, 2, 3}));
}

TEST_CASE("leaky rectifier uses slope 0.01") {
  Tape t;
  t.leaky_relu(t.leaf("x"));
  const Tensor& out = t.evaluate({{"x", Tensor::vector({-1, 0, 2})}});
  CHECK(out[0] == doctest::Approx(-0.01).epsilon(1e-15));
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 2.0);
}

TEST_CASE("conv1d valid padding matches a hand convolution") {
  // [3,1,4,1,5] (x) [1,0,-1]: 3-4, 1-1, 4-5
  Tape t;
  t.conv1d(t.leaf("x"), t.leaf("w"));
  const Tensor& out = t.evaluate({{"x", Tensor::vector({3, 1, 4, 1, 5})}, {"w", Tensor::vector({1, 0, -1})}});
  CHECK(out == Tensor::vector({-1, 0, -1}));
}

TEST_CASE("backward of simple reductions") {
  SUBCASE("sum") {
    Tape t;
    t.sum(t.leaf("x"));
    t.evaluate({{"x", Tensor::vector({0.5, -1, 2, 7})}});
    t.backward();
    CHECK(t.leaf_grads().at("x") == Tensor::vector({1, 1, 1, 1}));
  }
  SUBCASE("sum of squares accumulates both paths") {
    Tape t;
    auto x = t.leaf("x");
    t.sum(t.mul(x, x));
    t.evaluate({{"x", Tensor::vector({1, 2})}});
    t.backward();
    CHECK(t.leaf_grads().at("x") == Tensor::vector({2, 4}));
  }
}

TEST_CASE("random 20-parameter composite tape passes the finite-difference check") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    Tape t;
    auto w = t.leaf("w");   // 3x4
    auto b = t.leaf("b");   // 4
    auto v = t.leaf("v");   // 4x1
    auto x = t.constant(fms::testing::random_tensor({5, 3}, rng));
    auto h = t.leaky_relu(t.affine(t.matmul(x, w), b));
    auto z = t.matmul(h, v);
    t.sum(t.exp(t.scale(z, 0.3)));
    std::map<std::string, Tensor> leaves{{"w", fms::testing::random_tensor({3, 4}, rng)},
                                         {"b", fms::testing::random_tensor({4}, rng)},
                                         {"v", fms::testing::random_tensor({4, 1}, rng)}};
    auto r = fms::testing::check_gradients(t, leaves, {"w", "b", "v"});
    CHECK(r.coordinates == 20);
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
  }
}

TEST_CASE("every primitive passes the finite-difference check") {
  for (const std::string& p : fms::testing::primitive_names()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto c = fms::testing::make_gradient_case(p, seed);
      auto r = fms::testing::check_gradients(c.tape, c.leaves, c.names);
      INFO(p << " seed " << seed << " worst " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("gp_nlml closed-form cases") {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  {
    Tape t;
    t.gp_nlml(t.leaf("k"), t.leaf("y"));
    const double v = t.evaluate({{"k", Tensor::matrix(2, 2, {1, 0, 0, 1})}, {"y", Tensor::vector({0, 0})}}).item();
    CHECK(std::abs(v - log2pi) < 1e-12);
    CHECK(std::abs(v - 1.837877) < 1e-6);
  }
  {
    Tape t;
    t.gp_nlml(t.leaf("k"), t.leaf("y"));
    const double v = t.evaluate({{"k", Tensor::matrix(1, 1, {1})}, {"y", Tensor::vector({2})}}).item();
    CHECK(std::abs(v - (2.0 + 0.5 * log2pi)) < 1e-12);
    CHECK(std::abs(v - 2.918939) < 1e-6);
  }
}

TEST_CASE("gp_nlml gradient w.r.t. K on random SPD matrices") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    t.gp_nlml(t.leaf("k"), t.leaf("y", false));
    std::map<std::string, Tensor> leaves{{"k", fms::testing::random_spd(4, rng)},
                                         {"y", fms::testing::random_tensor({4}, rng)}};
    auto r = fms::testing::check_gradients(t, leaves, {"k"});
    CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
  }
}

TEST_CASE("gp_nlml is invariant to relabelling the observations") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 6;
    Tensor k = fms::testing::random_spd(n, rng);
    Tensor y = fms::testing::random_tensor({n}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor kp({n, n}), yp({n});
    for (std::size_t i = 0; i < n; ++i) {
      yp[i] = y[perm[i]];
      for (std::size_t j = 0; j < n; ++j) kp.at(i, j) = k.at(perm[i], perm[j]);
    }
    const double a = fms::ad::gp_nlml_value(k.data(), y.data(), n).value;
    const double b = fms::ad::gp_nlml_value(kp.data(), yp.data(), n).value;
    CHECK(std::abs(a - b) <= 1e-9 * std::abs(a));
  }
}

TEST_CASE("gp_nlml reports non positive definite kernels with the attempted jitter") {
  Tensor k = Tensor::matrix(2, 2, {1, 0, 0, -5});
  try {
    fms::ad::gp_nlml_value(k.data(), std::vector<double>{1, 1}, 2);
    FAIL("expected failure");
  } catch (const fms::ad::NotPositiveDefinite& e) {
    CHECK(std::string(e.what()).find("kernel not positive definite") != std::string::npos);
    CHECK(e.jitter() > 0.0);
  }
}

TEST_CASE("jitter rescues a singular but PSD kernel") {
  Tensor k = Tensor::matrix(2, 2, {1, 1, 1, 1});
  auto r = fms::ad::gp_nlml_value(k.data(), std::vector<double>{0.5, 0.5}, 2);
  CHECK(std::isfinite(r.value));
  CHECK(r.jitter > 0.0);
  CHECK(r.jitter <= 1e-2);
}

TEST_CASE("evaluate is deterministic") {
  auto a = fms::testing::make_gradient_case("conv2d", 3);
  auto b = fms::testing::make_gradient_case("conv2d", 3);
  CHECK(a.tape.evaluate(a.leaves) == b.tape.evaluate(b.leaves));
  CHECK(a.tape.evaluate(a.leaves) == a.tape.evaluate(a.leaves));
}

TEST_CASE("shape mismatches name the primitive and shapes") {
  Tape t;
  t.matmul(t.leaf("a"), t.leaf("b"));
  try {
    t.evaluate({{"a", Tensor({2, 3})}, {"b", Tensor({2, 3})}});
    FAIL("expected failure");
  } catch (const fms::ad::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("missing leaves and backward-before-forward fail") {
  Tape t;
  t.sum(t.leaf("x"));
  CHECK_THROWS_AS(t.backward(), std::logic_error);
  CHECK_THROWS_AS(t.evaluate({}), std::invalid_argument);
}

TEST_CASE("Adam with zero gradients leaves parameters unchanged") {
  fms::ad::ParamSet p{{"w", Tensor::vector({0.3, -2.0, 5.0})}};
  const auto before = p;
  fms::ad::AdamState adam;
  for (int i = 0; i < 10; ++i) adam.update(p, {{"w", Tensor({3})}});
  CHECK(p == before);
  CHECK(adam.step == 10);
}

TEST_CASE("Adam moves against the gradient by about lr") {
  fms::ad::ParamSet p{{"w", Tensor::vector({1.0})}};
  fms::ad::AdamState adam;
  adam.update(p, {{"w", Tensor::vector({4.0})}});
  CHECK(p.at("w")[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
}
