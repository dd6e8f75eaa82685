#include <doctest.h>

#include <cmath>
#include <vector>

#include "mlcil/errors.hpp"
#include "mlcil/numgrad.hpp"
#include "mlcil/random.hpp"

using namespace mlcil;
using namespace mlcil::numgrad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Random tensor with no entry near zero, for ops like log.
Tensor positive_tensor(Shape shape, Rng& rng) { return random_tensor(std::move(shape), rng, 0.3, 2.0); }

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(matmul(eye, a) == a);
  CHECK(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})) == Tensor::matrix({{11}}));
  CHECK(matmul(Tensor({2, 2}, 0.0), a) == Tensor({2, 2}, 0.0));
  CHECK_THROWS_AS(matmul(a, Tensor({3, 1}, 1.0)), DimensionError);
}

TEST_CASE("softmax rows examples") {
  const Tensor s = softmax_rows(Tensor::matrix(
      {{0, 0, 0, 0}, {1000, 0, 0, 0}, {std::log(1.0), std::log(2.0), std::log(3.0), -1e300}}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(s.at(0, j) == doctest::Approx(0.25));
  CHECK(s.at(1, 0) == doctest::Approx(1.0));
  CHECK(s.at(1, 1) == doctest::Approx(0.0));
  CHECK(s.all_finite());
  CHECK(s.at(2, 0) == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(s.at(2, 1) == doctest::Approx(2.0 / 6).epsilon(1e-12));
  CHECK(s.at(2, 2) == doctest::Approx(3.0 / 6).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor s = softmax_rows(random_tensor({3, 5}, rng, -50.0, 50.0));
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (double v : s.row(r)) sum += v;
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("cosine examples") {
  const std::vector<double> u{1, 2, 3}, v{-2, 1, 0}, w{-1, -2, -3};
  CHECK(cosine(u, u) == doctest::Approx(1.0));
  CHECK(cosine(u, v) == doctest::Approx(0.0));
  CHECK(cosine(u, w) == doctest::Approx(-1.0));
  const std::vector<double> zero{0, 0, 0};
  CHECK_THROWS_AS(cosine(u, zero), DegenerateVectorError);
  Graph g;
  CHECK_THROWS_AS(l2_normalize(g.parameter(Tensor({3}, 0.0))), DegenerateVectorError);
}

TEST_CASE("backward examples") {
  SUBCASE("sum gives ones") {
    Graph g;
    const Var x = g.parameter(Tensor::vector({0.5, -2.0, 3.0}));
    g.backward(sum(x));
    CHECK(g.grad(x) == Tensor({3}, 1.0));
  }
  SUBCASE("x dot x gives 2x") {
    Graph g;
    const Tensor xv = Tensor::vector({0.5, -2.0, 3.0});
    const Var x = g.parameter(xv);
    g.backward(dot(x, x));
    for (std::size_t i = 0; i < 3; ++i) CHECK(g.grad(x)[i] == 2.0 * xv[i]);
  }
  SUBCASE("constants get zero gradient") {
    Graph g;
    const Var c = g.constant(Tensor::vector({1.0, 2.0}));
    const Var x = g.parameter(Tensor::vector({3.0, 4.0}));
    g.backward(dot(c, x));
    CHECK(g.grad(c) == Tensor({2}, 0.0));
    CHECK(g.grad(x) == Tensor::vector({1.0, 2.0}));
  }
}

TEST_CASE("backward contract errors") {
  Graph g;
  const Var x = g.parameter(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(g.grad(x), ContractError);
  CHECK_THROWS_AS(g.backward(x), ContractError);  // not a scalar
  const Var loss = sum(x);
  g.backward(loss);
  CHECK_THROWS_AS(g.backward(loss), ContractError);  // second pass
  CHECK_THROWS_AS(sum(x), ContractError);             // recording after backward
}

TEST_CASE("finite difference checker sanity") {
  Rng rng(3);
  const Tensor x = random_tensor({4, 3}, rng);
  CHECK(finite_diff_check([](Graph&, Var v) { return sum(v); }, x) < 1e-8);
  CHECK(finite_diff_check([](Graph&, Var v) { return sum(softmax_rows(v)); }, x) < 1e-4);
}

// Each op wrapped into a scalar through a random weighting, so every output
// coordinate contributes to the checked gradient.
TEST_CASE("gradients match central differences over random trials") {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    // n >= 2: with one column softmax and normalization are constant and the
    // relative error of a zero gradient is all roundoff.
    const std::size_t m = 1 + rng.below(3), n = 2 + rng.below(3), k = 1 + rng.below(3);
    const Tensor a = random_tensor({m, n}, rng);
    const Tensor b = random_tensor({n, k}, rng);
    const Tensor c = random_tensor({m, n}, rng);
    const Tensor u = random_tensor({n}, rng);
    const Tensor v = random_tensor({n}, rng);
    const Tensor pos = positive_tensor({m, n}, rng);
    // 4x^3 vanishes near 0, where the central difference is all roundoff.
    Tensor signed_pos = positive_tensor({m, n}, rng);
    for (std::size_t i = 0; i < signed_pos.size(); i += 2) signed_pos[i] = -signed_pos[i];
    const Tensor wmk = random_tensor({m, k}, rng);
    const Tensor wmn = random_tensor({m, n}, rng);
    const Tensor wnm = random_tensor({n, m}, rng);
    const Tensor wn = random_tensor({n}, rng);
    const Tensor wm = random_tensor({m}, rng);

    auto weighted = [](Graph& g, Var out, const Tensor& w) {
      return sum(mul(out, g.constant(w)));
    };
    std::vector<double> errs;
    errs.push_back(finite_diff_check(
        [&](Graph& g, std::span<const Var> in) { return weighted(g, matmul(in[0], in[1]), wmk); },
        {a, b}));
    errs.push_back(finite_diff_check(
        [&](Graph& g, std::span<const Var> in) { return weighted(g, matvec(in[0], in[1]), wm); },
        {a, u}));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, transpose(x), wnm); }, a));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, softmax_rows(scale(x, 3.0)), wmn); }, a));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, mean_rows(x), wn); }, a));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, sum_cols(x), wm); }, a));
    errs.push_back(finite_diff_check(
        [&](Graph& g, std::span<const Var> in) {
          const Var parts[] = {in[0], in[1]};
          Tensor w({2 * m, n});
          for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.1 * static_cast<double>(i % 7) - 0.3;
          return weighted(g, concat_rows(parts), w);
        },
        {a, c}));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, reshape(x, {m * n}), Tensor({m * n}, 0.5)); }, a));
    errs.push_back(finite_diff_check(
        [&](Graph& g, std::span<const Var> in) { return weighted(g, add(in[0], in[1]), wmn); },
        {a, c}));
    errs.push_back(finite_diff_check(
        [&](Graph& g, std::span<const Var> in) { return weighted(g, sub(in[0], in[1]), wmn); },
        {a, c}));
    errs.push_back(finite_diff_check(
        [&](Graph& g, std::span<const Var> in) { return weighted(g, mul(in[0], in[1]), wmn); },
        {a, c}));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, add_scalar(scale(x, -1.5), 0.25), wmn); }, a));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, sigmoid(scale(x, 2.0)), wmn); }, a));
    errs.push_back(finite_diff_check([&](Graph& g, Var x) { return weighted(g, log(x), wmn); }, pos));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, pow_scalar(x, 2.5), wmn); }, pos));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, pow_scalar(x, 4.0), wmn); }, signed_pos));
    // clamp: bounds placed away from the sampled values' neighbourhood
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, clamp(x, -5.0, 5.0), wmn); }, a));
    errs.push_back(finite_diff_check([&](Graph&, Var x) { return mean(x); }, a));
    errs.push_back(finite_diff_check(
        [&](Graph&, std::span<const Var> in) { return dot(in[0], in[1]); }, {u, v}));
    errs.push_back(finite_diff_check(
        [&](Graph& g, Var x) { return weighted(g, l2_normalize(x), wn); }, u));
    errs.push_back(finite_diff_check(
        [&](Graph&, std::span<const Var> in) { return cosine(in[0], in[1]); }, {u, v}));
    for (std::size_t i = 0; i < errs.size(); ++i) {
      const double e = errs[i];
      INFO("op #" << i << " trial " << trial);
      CHECK(e <= 1e-4);
      worst = std::max(worst, e);
    }
  }
  MESSAGE("worst relative error " << worst);
}

TEST_CASE("backward is bit-identical across identical graphs") {
  auto run = [] {
    Rng rng(77);
    Graph g;
    const Var a = g.parameter(random_tensor({3, 4}, rng));
    const Var b = g.constant(random_tensor({4, 4}, rng));
    const Var att = softmax_rows(matmul(a, b));
    g.backward(sum(sigmoid(mean_rows(att))));
    return g.grad(a);
  };
  const Tensor g1 = run(), g2 = run();
  CHECK(g1 == g2);
  CHECK(g1.checksum() == g2.checksum());
}

TEST_CASE("shape errors") {
  Graph g;
  const Var a = g.parameter(Tensor({2, 3}, 1.0));
  const Var b = g.parameter(Tensor({3, 2}, 1.0));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(dot(g.parameter(Tensor({2}, 1.0)), g.parameter(Tensor({3}, 1.0))),
                  DimensionError);
  CHECK_THROWS_AS(log(g.parameter(Tensor::vector({1.0, 0.0}))), ContractError);
}
