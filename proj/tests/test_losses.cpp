#include <doctest.h>

#include <cmath>

#include "mlcil/errors.hpp"
#include "mlcil/losses.hpp"
#include "mlcil/random.hpp"

using namespace mlcil;
using namespace mlcil::losses;
using numgrad::Graph;
using numgrad::Tensor;
using numgrad::Var;

namespace {

// Unit-feature snapshot built by hand; `ctx` empty means no context features.
PromptSnapshot snapshot(std::vector<Tensor> cls, std::vector<Tensor> ctx) {
  PromptSnapshot s;
  for (std::size_t i = 0; i < cls.size(); ++i) s.classes.push_back(i);
  s.class_features = std::move(cls);
  s.context_features = std::move(ctx);
  return s;
}

icp::TextFeatures features(Graph& g, const std::vector<Tensor>& cls,
                           const std::vector<Tensor>& ctx) {
  icp::TextFeatures t;
  for (std::size_t i = 0; i < cls.size(); ++i) {
    t.classes.push_back(i);
    t.class_features.push_back(g.parameter(cls[i]));
  }
  for (const auto& c : ctx) t.context_features.push_back(g.parameter(c));
  return t;
}

double asl_value(double p, std::uint8_t y, LossConfig cfg = {}) {
  const std::vector<std::uint8_t> labels{y};
  return asl(Tensor::vector({p}), labels, cfg);
}

}  // namespace

TEST_CASE("asl tabulated values") {
  CHECK(std::abs(asl_value(0.5, 1) - 0.6931471805599453) <= 1e-6);
  CHECK(std::abs(asl_value(0.5, 1) - 0.6931) <= 1e-4);
  CHECK(std::abs(asl_value(0.5, 0) - std::pow(0.5, 4) * std::log(2.0)) <= 1e-6);
  CHECK(std::abs(asl_value(0.5, 0) - 0.0433) <= 1e-4);
  CHECK(asl_value(1.0 - 1e-12, 1) < 1e-6);
  CHECK(asl_value(1e-12, 0) < 1e-6);
}

TEST_CASE("asl averages over categories") {
  const std::vector<std::uint8_t> labels{1, 0};
  const double v = asl(Tensor::vector({0.5, 0.5}), labels, {});
  CHECK(v == doctest::Approx((std::log(2.0) + std::pow(0.5, 4) * std::log(2.0)) / 2.0));
}

TEST_CASE("asl negative clipping shifts negatives") {
  LossConfig cfg;
  cfg.neg_clip = 0.05;
  const double shifted = 0.45;
  CHECK(asl_value(0.5, 0, cfg) ==
        doctest::Approx(-std::pow(shifted, 4) * std::log(1.0 - shifted)));
  CHECK(asl_value(0.03, 0, cfg) < 1e-6);  // clipped to (almost) zero
}

TEST_CASE("asl monotonicity over a grid") {
  for (double gp : {0.0, 1.0, 2.0}) {
    for (double gn : {0.0, 1.0, 4.0}) {
      LossConfig cfg;
      cfg.gamma_pos = gp;
      cfg.gamma_neg = gn;
      double prev_pos = 1e300, prev_neg = -1e300;
      for (int i = 1; i < 100; ++i) {
        const double p = i / 100.0;
        const double pos = asl_value(p, 1, cfg), neg = asl_value(p, 0, cfg);
        CHECK(pos >= 0.0);
        CHECK(neg >= 0.0);
        CHECK(pos < prev_pos);
        CHECK(neg > prev_neg);
        prev_pos = pos;
        prev_neg = neg;
      }
    }
  }
}

TEST_CASE("asl input errors") {
  const std::vector<std::uint8_t> labels{1, 0};
  CHECK_THROWS_AS(asl(Tensor::vector({1.5, 0.5}), labels, {}), ContractError);
  CHECK_THROWS_AS(asl(Tensor::vector({0.5}), labels, {}), DimensionError);
  LossConfig bad;
  bad.neg_clip = 0.3;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("tpc tabulated values") {
  const Tensor e0 = Tensor::vector({1, 0, 0}), e1 = Tensor::vector({0, 1, 0});
  const Tensor neg0 = Tensor::vector({-1, 0, 0}), neg1 = Tensor::vector({0, -1, 0});
  SUBCASE("unchanged prompts") {
    Graph g;
    const auto cur = features(g, {e0}, {e1});
    CHECK(std::abs(tpc(g, cur, snapshot({e0}, {e1})).value().item()) <= 1e-6);
  }
  SUBCASE("class feature orthogonal, context equal") {
    Graph g;
    const auto cur = features(g, {e1}, {e1});
    CHECK(std::abs(tpc(g, cur, snapshot({e0}, {e1})).value().item() - 1.0) <= 1e-6);
  }
  SUBCASE("both antipodal") {
    Graph g;
    const auto cur = features(g, {neg0}, {neg1});
    CHECK(std::abs(tpc(g, cur, snapshot({e0}, {e1})).value().item() - 4.0) <= 1e-6);
  }
  SUBCASE("mean over old classes") {
    Graph g;
    const auto cur = features(g, {e0, neg0}, {e1, e1});
    // class 0 unchanged (0), class 1: cos(-e0, e1) = 0 and equal context -> 1
    CHECK(tpc(g, cur, snapshot({e0, e1}, {e1, e1})).value().item() == doctest::Approx(0.5));
  }
  SUBCASE("new classes are ignored") {
    Graph g;
    const auto cur = features(g, {e0, neg1}, {e1, neg0});
    CHECK(tpc(g, cur, snapshot({e0}, {e1})).value().item() == doctest::Approx(0.0));
  }
  SUBCASE("without context features") {
    Graph g;
    const auto cur = features(g, {neg0}, {});
    CHECK(tpc(g, cur, snapshot({e0}, {})).value().item() == doctest::Approx(2.0));
  }
  SUBCASE("empty snapshot") {
    Graph g;
    const auto cur = features(g, {e0}, {e1});
    CHECK(tpc(g, cur, PromptSnapshot{}).value().item() == 0.0);
  }
}

TEST_CASE("tpc stays within [0, 4] and its gradient reaches only current features") {
  Rng rng(5);
  auto unit = [&] {
    Tensor t({4});
    for (std::size_t i = 0; i < 4; ++i) t[i] = rng.normal();
    const double n = numgrad::norm(t.data());
    for (std::size_t i = 0; i < 4; ++i) t[i] /= n;
    return t;
  };
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    const auto cur = features(g, {unit(), unit()}, {unit(), unit()});
    const auto snap = snapshot({unit(), unit()}, {unit(), unit()});
    const Var v = tpc(g, cur, snap);
    CHECK(v.value().item() >= 0.0);
    CHECK(v.value().item() <= 4.0);
    g.backward(v);
    CHECK(g.grad(cur.class_features[0]).all_finite());
  }
}

TEST_CASE("total loss reduces to asl") {
  const std::vector<std::uint8_t> labels{1, 0, 0};
  const Tensor p = Tensor::vector({0.7, 0.2, 0.6});
  const Tensor e0 = Tensor::vector({1, 0}), e1 = Tensor::vector({0, 1});
  const double plain = asl(p, labels, {});
  SUBCASE("alpha zero") {
    Graph g;
    LossConfig cfg;
    cfg.alpha = 0.0;
    const auto cur = features(g, {e1}, {e0});
    const Var t = total_loss(g.parameter(p), labels, cur, snapshot({e0}, {e1}), cfg);
    CHECK(t.value().item() == plain);
  }
  SUBCASE("base session") {
    Graph g;
    const auto cur = features(g, {e1}, {e0});
    const Var t = total_loss(g.parameter(p), labels, cur, PromptSnapshot{}, {});
    CHECK(t.value().item() == plain);
  }
  SUBCASE("alpha weights tpc") {
    Graph g;
    LossConfig cfg;
    cfg.alpha = 0.5;
    const auto cur = features(g, {e1}, {e1});
    const Var t = total_loss(g.parameter(p), labels, cur, snapshot({e0}, {e1}), cfg);
    CHECK(t.value().item() == doctest::Approx(plain + 0.5 * 1.0));
  }
}

TEST_CASE("asl gradient matches finite differences") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({5});
    std::vector<std::uint8_t> labels(5);
    for (std::size_t i = 0; i < 5; ++i) {
      // Below about p = 0.2 the negative term's gradient is ~q^4 and the
      // central difference is dominated by roundoff.
      x[i] = rng.uniform(-1.0, 2.5);
      labels[i] = static_cast<std::uint8_t>(rng.below(2));
    }
    LossConfig cfg;
    cfg.gamma_pos = 1.0;
    cfg.neg_clip = 0.05;
    const double err = numgrad::finite_diff_check(
        [&](Graph&, Var v) { return asl(numgrad::sigmoid(v), labels, cfg); }, x);
    CHECK(err <= 1e-4);
  }
}
