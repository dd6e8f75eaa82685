#include <doctest.h>

#include <cmath>
#include <set>

#include "mlcil/errors.hpp"
#include "mlcil/random.hpp"
#include "mlcil/sccr.hpp"
#include "oracles.hpp"

using namespace mlcil;
using namespace mlcil::sccr;
using numgrad::Tensor;

namespace {

std::vector<Tensor> blobs(Rng& rng, std::size_t per_blob, double separation,
                          std::size_t d = 3) {
  std::vector<Tensor> pts;
  for (int b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < per_blob; ++i) {
      Tensor p({d});
      for (std::size_t t = 0; t < d; ++t) p[t] = rng.normal() + (t == 0 ? b * separation : 0.0);
      pts.push_back(p);
    }
  }
  return pts;
}

std::vector<Tensor> random_points(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<Tensor> pts;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor p({d});
    for (std::size_t t = 0; t < d; ++t) p[t] = rng.normal();
    pts.push_back(p);
  }
  return pts;
}

// Small world shared by the buffer tests.
struct World {
  dataio::SyntheticData data;
  encoders::Encoders enc;
  std::vector<Tensor> projected;
  icp::PromptBank bank;

  explicit World(std::uint64_t seed)
      : data(dataio::generate([&] {
          dataio::GeneratorConfig g;
          g.n_classes = 6;
          g.n_train = 60;
          g.n_test = 6;
          g.d_in = 6;
          g.seed = seed;
          return g;
        }())),
        enc([] {
          encoders::EncoderConfig c;
          c.d_in = 6;
          c.d_token = 8;
          c.d_feat = 6;
          return c;
        }()),
        bank(8, [] {
          icp::IcpConfig c;
          c.context_length = 2;
          return c;
        }()) {
    for (const auto& s : data.dataset.samples()) projected.push_back(enc.image_to_text(s.regions));
    std::vector<icp::ClassId> ids;
    for (std::size_t c = 0; c < 6; ++c) ids.push_back(c);
    bank.add_classes(ids, data.dataset.class_names(), 0, 1);
  }

  SessionData session(const std::vector<icp::ClassId>& classes, std::size_t k) const {
    SessionData sd;
    sd.dataset = &data.dataset;
    sd.new_classes = classes;
    sd.session = k;
    sd.projected = &projected;
    const auto& samples = data.dataset.samples();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].split != dataio::Split::kTrain) continue;
      for (auto c : classes) {
        if (samples[i].has_label(c)) {
          sd.train_indices.push_back(i);
          break;
        }
      }
    }
    return sd;
  }
};

}  // namespace

TEST_CASE("class features with one region equal the projected region") {
  World w(3);
  encoders::EncoderConfig ec;
  ec.d_in = 6;
  ec.d_token = 8;
  ec.d_feat = 6;
  ec.n_regions = 1;
  const encoders::Encoders enc(ec);
  const icp::Scorer scorer(w.bank, enc);

  dataio::Sample s{"x", Tensor::matrix(1, 6, {1, 2, 3, 4, 5, 6}), {2}, dataio::Split::kTrain};
  const dataio::Sample* ptr = &s;
  const std::vector<Tensor> proj{enc.image_to_text(s.regions)};
  const auto f = class_features(std::span(&ptr, 1), proj, 2, scorer);
  REQUIRE(f.size() == 1);
  for (std::size_t t = 0; t < 6; ++t) CHECK(f[0][t] == doctest::Approx(proj[0][t]).epsilon(1e-12));

  CHECK_THROWS_AS(class_features(std::span(&ptr, 1), proj, 3, scorer), ContractError);
}

TEST_CASE("kmeans boundary cases") {
  Rng rng(1);
  const auto pts = random_points(rng, 7, 3);
  SUBCASE("one cluster is the mean") {
    const auto cs = kmeans(pts, 1, 4);
    for (std::size_t t = 0; t < 3; ++t) {
      double m = 0.0;
      for (const auto& p : pts) m += p[t];
      CHECK(cs.centroids[0][t] == doctest::Approx(m / 7.0).epsilon(1e-12));
    }
  }
  SUBCASE("one cluster per point has zero error") {
    const auto cs = kmeans(pts, 7, 4);
    CHECK(cs.sse == 0.0);
    CHECK(sum_squared_error(pts, cs) == 0.0);
  }
  SUBCASE("more clusters than points") {
    CHECK(kmeans(pts, 20, 4).size() == 7);
  }
  SUBCASE("coincident points") {
    const std::vector<Tensor> same(4, Tensor::vector({1.0, 1.0}));
    const auto cs = kmeans(same, 3, 2);
    CHECK(cs.size() == 3);
    CHECK(cs.sse == 0.0);
  }
  CHECK_THROWS_AS(kmeans(std::vector<Tensor>{}, 2, 0), ContractError);
  CHECK_THROWS_AS(kmeans(pts, 0, 0), ContractError);
}

TEST_CASE("kmeans error never increases") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto pts = random_points(rng, 3 + rng.below(40), 1 + rng.below(5));
    const auto cs = kmeans(pts, 1 + rng.below(6), rng.next_u64());
    for (std::size_t i = 1; i < cs.sse_history.size(); ++i) {
      const double prev = cs.sse_history[i - 1];
      CHECK(cs.sse_history[i] <= prev + 1e-12 * std::max(1.0, prev));
    }
    CHECK(cs.sse == doctest::Approx(sum_squared_error(pts, cs)));
  }
}

TEST_CASE("kmeans recovers two separated blobs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto pts = blobs(rng, 6, 10.0);
    const auto cs = kmeans(pts, 2, seed);
    const auto want = oracle::best_two_partition(pts);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const int got = cs.assignment[i] == cs.assignment[0] ? 0 : 1;
      CHECK(got == want[i]);
    }
  }
}

TEST_CASE("lowest confidence selection") {
  const std::vector<Member> m{{"a", 0.9}, {"b", 0.1}, {"c", 0.5}};
  const std::vector<std::size_t> all{0, 1, 2};
  CHECK(lowest_k(m, all, 1) == std::vector<std::size_t>{1});
  CHECK(lowest_k(m, all, 2) == std::vector<std::size_t>{1, 2});
  CHECK(lowest_k(m, all, 5) == std::vector<std::size_t>{1, 2, 0});
  CHECK(lowest_k(m, all, 0).empty());

  // ties broken by id
  const std::vector<Member> tied{{"z", 0.3}, {"y", 0.3}, {"x", 0.7}};
  CHECK(lowest_k(tied, all, 1) == std::vector<std::size_t>{1});
}

TEST_CASE("exemplar selection matches the sort oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(30), m = 1 + rng.below(5), k = rng.below(6);
    ClusterSet cs;
    cs.centroids.resize(m);
    std::vector<Member> members;
    for (std::size_t i = 0; i < n; ++i) {
      cs.assignment.push_back(rng.below(m));
      // coarse probabilities force ties
      members.push_back({"s" + std::to_string(rng.below(1000)),
                         static_cast<double>(rng.below(8)) / 8.0});
    }
    CHECK(select_exemplars(cs, members, k) == oracle::select_exemplars(cs, members, k));
  }
}

TEST_CASE("quota selection fills exactly the quota") {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(25), m = 1 + rng.below(5), quota = rng.below(30);
    ClusterSet cs;
    cs.centroids.resize(m);
    std::vector<Member> members;
    for (std::size_t i = 0; i < n; ++i) {
      cs.assignment.push_back(rng.below(m));
      members.push_back({"s" + std::to_string(i), rng.uniform()});
    }
    const auto got = select_with_quota(cs, members, quota);
    CHECK(got.size() == std::min(quota, n));
    CHECK(std::set<std::size_t>(got.begin(), got.end()).size() == got.size());
    // every cluster's share from the base rule is included
    const auto base = select_exemplars(cs, members, quota / m);
    if (quota <= n) {
      for (std::size_t i : base) CHECK(std::find(got.begin(), got.end(), i) != got.end());
    }
  }
}

TEST_CASE("budget quotas") {
  CHECK(Budget{BudgetMode::kPerClass, 20}.quota(7) == 20);
  CHECK(Budget{BudgetMode::kTotal, 12}.quota(3) == 4);
  CHECK(Budget{BudgetMode::kTotal, 12}.quota(5) == 2);
  CHECK(parse_strategy("mean-feature") == Strategy::kMeanFeature);
  CHECK(std::string(strategy_name(Strategy::kSccr)) == "sccr");
  CHECK_THROWS_AS(parse_strategy("greedy"), DataError);
}

TEST_CASE("buffer update with no data is a no-op") {
  World w(5);
  ReplayBuffer buf(Budget{BudgetMode::kPerClass, 3});
  ReplayConfig cfg;
  cfg.budget = buf.budget();
  auto sd = w.session({0, 1}, 0);
  buf = update_buffer(buf, sd, w.bank, w.enc, cfg);
  const ReplayBuffer before = buf;
  sd.train_indices.clear();
  CHECK(update_buffer(buf, sd, w.bank, w.enc, cfg) == before);
  cfg.strategy = Strategy::kNone;
  CHECK(update_buffer(buf, w.session({2}, 1), w.bank, w.enc, cfg) == before);
}

TEST_CASE("buffer respects the budget over random session sequences") {
  World w(6);
  Rng rng(7);
  const auto& samples = w.data.dataset.samples();
  for (int trial = 0; trial < 40; ++trial) {
    ReplayConfig cfg;
    cfg.budget = {rng.below(2) ? BudgetMode::kTotal : BudgetMode::kPerClass,
                  static_cast<std::size_t>(rng.below(12))};
    cfg.clusters = 1 + rng.below(4);
    cfg.strategy = static_cast<Strategy>(rng.below(3));
    cfg.seed = rng.next_u64();

    std::vector<icp::ClassId> order{0, 1, 2, 3, 4, 5};
    rng.shuffle(order);
    ReplayBuffer buf(cfg.budget);
    std::set<icp::ClassId> seen;
    std::size_t pos = 0, session = 0;
    while (pos < order.size()) {
      const std::size_t take = std::min<std::size_t>(1 + rng.below(3), order.size() - pos);
      std::vector<icp::ClassId> cls(order.begin() + pos, order.begin() + pos + take);
      pos += take;
      seen.insert(cls.begin(), cls.end());
      buf = update_buffer(buf, w.session(cls, session++), w.bank, w.enc, cfg);

      CHECK_NOTHROW(buf.check_budget());
      if (cfg.budget.mode == BudgetMode::kTotal) {
        CHECK(buf.total() <= cfg.budget.size);
      }
      std::set<std::string> ids;
      for (const auto* e : buf.all()) {
        CHECK(seen.count(e->class_id) == 1);
        CHECK(samples[w.data.dataset.index_of(e->sample_id)].has_label(e->class_id));
        CHECK(ids.insert(e->sample_id).second);
      }
    }
  }
}

TEST_CASE("sccr entries are the lowest-confidence members of their clusters") {
  World w(8);
  ReplayConfig cfg;
  cfg.budget = {BudgetMode::kPerClass, 4};
  cfg.clusters = 2;
  const auto buf = update_buffer(ReplayBuffer(cfg.budget), w.session({0}, 0), w.bank, w.enc, cfg);
  REQUIRE(buf.count(0) == 4);
  // confidence recorded is the model's probability for the stored class
  const icp::Scorer scorer(w.bank, w.enc);
  for (const auto* e : buf.all()) {
    const auto idx = w.data.dataset.index_of(e->sample_id);
    CHECK(scorer.score_projected(w.projected[idx]).probs[0] == doctest::Approx(e->confidence));
    CHECK(e->cluster_id < 2);
  }
}

TEST_CASE("buffer json round trip") {
  World w(9);
  ReplayConfig cfg;
  cfg.budget = {BudgetMode::kTotal, 7};
  auto buf = update_buffer(ReplayBuffer(cfg.budget), w.session({0, 1}, 0), w.bank, w.enc, cfg);
  buf = update_buffer(buf, w.session({2, 3}, 1), w.bank, w.enc, cfg);
  REQUIRE(buf.total() > 0);
  CHECK(ReplayBuffer::from_json(buf.to_json()) == buf);
  CHECK(ReplayBuffer::from_json(nlohmann::json::parse(buf.to_json().dump())) == buf);

  auto j = buf.to_json();
  j["budget"]["size"] = 1;
  CHECK_THROWS_AS(ReplayBuffer::from_json(j), ContractError);
  j["budget"]["mode"] = "bogus";
  CHECK_THROWS_AS(ReplayBuffer::from_json(j), DataError);
  CHECK_THROWS_AS(ReplayBuffer::from_json(nlohmann::json::object()), DataError);
}
