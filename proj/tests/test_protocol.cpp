#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "mlcil/errors.hpp"
#include "mlcil/protocol.hpp"
#include "mlcil/random.hpp"

using namespace mlcil;
using namespace mlcil::protocol;
using numgrad::Tensor;

namespace {

std::vector<std::string> names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("c" + std::to_string(100 + i));
  return out;
}

std::vector<std::size_t> sizes(const SessionSchedule& s) {
  std::vector<std::size_t> out;
  for (const auto& v : s.sessions) out.push_back(v.size());
  return out;
}

dataio::SyntheticData tiny_data(std::size_t classes, std::uint64_t seed,
                                std::size_t max_labels = 2) {
  dataio::GeneratorConfig g;
  g.n_classes = classes;
  g.n_train = 40;
  g.n_test = 20;
  g.d_in = 6;
  g.max_labels_per_image = max_labels;
  g.seed = seed;
  return dataio::generate(g);
}

encoders::EncoderConfig tiny_encoder() {
  encoders::EncoderConfig c;
  c.d_in = 6;
  c.d_token = 8;
  c.d_feat = 8;
  return c;
}

ProtocolOptions tiny_options() {
  ProtocolOptions o;
  o.icp.context_length = 2;
  o.train.epochs = 3;
  o.train.batch_size = 8;
  o.train.base_lr = o.train.incremental_lr = 0.05;
  o.replay.budget = {sccr::BudgetMode::kPerClass, 3};
  o.replay.clusters = 2;
  return o;
}

}  // namespace

TEST_CASE("class schedules") {
  SUBCASE("base then increments") {
    const auto n = names(20);
    const auto s = make_schedule(n, 10, 2);
    CHECK(sizes(s) == std::vector<std::size_t>{10, 2, 2, 2, 2, 2});
    CHECK(s.sessions[1] == std::vector<ClassId>{10, 11});
    CHECK(s.seen_through(1).size() == 12);
    CHECK(s.session_of(13) == 2);
  }
  SUBCASE("zero base means equal sessions") {
    const auto n = names(80);
    CHECK(sizes(make_schedule(n, 0, 10)) == std::vector<std::size_t>(8, 10));
  }
  SUBCASE("ragged last session") {
    const auto n = names(7);
    CHECK(sizes(make_schedule(n, 3, 3)) == std::vector<std::size_t>{3, 3, 1});
  }
  SUBCASE("joint training is one session") {
    const auto n = names(6);
    CHECK(sizes(make_schedule(n, 6, 0)) == std::vector<std::size_t>{6});
    CHECK(sizes(make_schedule(n, 6, 2)) == std::vector<std::size_t>{6});
  }
  SUBCASE("every class appears once") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t c = 1 + rng.below(30);
      const auto n = names(c);
      const auto s = make_schedule(n, rng.below(c + 1), 1 + rng.below(c));
      std::vector<ClassId> all;
      for (const auto& v : s.sessions) {
        CHECK_FALSE(v.empty());
        all.insert(all.end(), v.begin(), v.end());
      }
      CHECK(all.size() == c);
      CHECK(std::set<ClassId>(all.begin(), all.end()).size() == c);
      CHECK(std::is_sorted(all.begin(), all.end()));
    }
  }
  SUBCASE("explicit lists") {
    const std::vector<std::string> n{"cat", "dog", "person"};
    const auto s = schedule_from_lists(n, {{"person"}, {"dog", "cat"}});
    CHECK(s.sessions[0] == std::vector<ClassId>{2});
    CHECK(s.sessions[1] == std::vector<ClassId>{0, 1});
    CHECK_THROWS(schedule_from_lists(n, {{"person"}, {"dog"}}));
    CHECK_THROWS(schedule_from_lists(n, {{"person", "cat"}, {"dog", "cat"}}));
    CHECK_THROWS(schedule_from_lists(n, {{"person", "cat", "dog", "horse"}}));
  }
  SUBCASE("errors") {
    const auto n = names(6);
    CHECK_THROWS_AS(make_schedule(n, 7, 2), DataError);
    CHECK_THROWS_AS(make_schedule(n, 4, 0), DataError);
    CHECK_THROWS_AS(make_schedule(n, 0, 0), DataError);
  }
}

TEST_CASE("relabeling keeps only labels in scope") {
  // classes: cat=0, dog=1, person=2
  const dataio::Sample s{"img", Tensor({1, 1}, 0.0), {0, 1, 2}, dataio::Split::kTrain};
  const std::vector<ClassId> space{0, 1, 2};
  CHECK(relabel(s, space, std::vector<ClassId>{2}) == std::vector<std::uint8_t>{0, 0, 1});
  CHECK(relabel(s, space, space) == std::vector<std::uint8_t>{1, 1, 1});
  CHECK(relabel(s, space, std::vector<ClassId>{}) == std::vector<std::uint8_t>{0, 0, 0});
  const dataio::Sample only_dog{"d", Tensor({1, 1}, 0.0), {1}, dataio::Split::kTrain};
  CHECK(relabel(only_dog, space, space) == std::vector<std::uint8_t>{0, 1, 0});
}

TEST_CASE("adam updates") {
  SUBCASE("zero gradient without decay leaves parameters unchanged") {
    Adam adam({0.9, 0.999, 1e-8, 0.0});
    Tensor p = Tensor::vector({1.0, -2.0});
    Tensor* ps[] = {&p};
    const Tensor g({2}, 0.0);
    for (int i = 0; i < 10; ++i) adam.step(ps, std::span(&g, 1), 0.1);
    CHECK(p == Tensor::vector({1.0, -2.0}));
    CHECK(adam.steps_taken() == 10);
  }
  SUBCASE("constant gradient moves about lr per step") {
    Adam adam({0.9, 0.999, 1e-8, 0.0});
    Tensor p = Tensor::vector({0.0, 0.0});
    Tensor* ps[] = {&p};
    const Tensor g = Tensor::vector({3.0, -0.5});
    const double lr = 0.01;
    for (int i = 0; i < 50; ++i) {
      const Tensor before = p;
      adam.step(ps, std::span(&g, 1), lr);
      for (std::size_t k = 0; k < 2; ++k) {
        const double delta = std::abs(p[k] - before[k]);
        CHECK(delta <= lr / (1.0 - 0.9));
        CHECK(delta == doctest::Approx(lr).epsilon(1e-5));
      }
    }
    CHECK(p[0] < 0.0);
    CHECK(p[1] > 0.0);
  }
  SUBCASE("decoupled weight decay shrinks parameters") {
    Adam adam({0.9, 0.999, 1e-8, 0.5});
    Tensor p = Tensor::vector({2.0});
    Tensor* ps[] = {&p};
    const Tensor g({1}, 0.0);
    adam.step(ps, std::span(&g, 1), 0.1);
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)));
  }
  SUBCASE("non-finite gradient") {
    Adam adam;
    Tensor p = Tensor::vector({1.0});
    Tensor* ps[] = {&p};
    const Tensor g = Tensor::vector({std::nan("")});
    CHECK_THROWS_AS(adam.step(ps, std::span(&g, 1), 0.1), NumericError);
    CHECK(p[0] == 1.0);
  }
}

TEST_CASE("one-cycle learning rate") {
  const OneCycleSchedule s(1e-2, 100);
  CHECK(s.lr(0) == doctest::Approx(1e-2 / 25.0));
  CHECK(s.lr(s.peak_step()) == doctest::Approx(1e-2));
  CHECK(s.lr(99) == doctest::Approx(1e-2 / 100.0));
  for (std::size_t i = 1; i <= s.peak_step(); ++i) CHECK(s.lr(i) > s.lr(i - 1));
  for (std::size_t i = s.peak_step() + 1; i < 100; ++i) CHECK(s.lr(i) < s.lr(i - 1));
  CHECK(OneCycleSchedule(1.0, 1).lr(0) > 0.0);
}

TEST_CASE("separable two-class data is learned perfectly") {
  const auto data = tiny_data(2, 3, 1);
  const encoders::Encoders enc(tiny_encoder());
  auto opts = tiny_options();
  opts.train.epochs = 20;
  const Context ctx(data.dataset, make_schedule(data.dataset.class_names(), 2, 0), enc, opts);
  const auto rr = run_all(ctx);
  REQUIRE(rr.sessions.size() == 1);
  CHECK(rr.last_accuracy() == 1.0);
}

TEST_CASE("training set construction") {
  const auto data = tiny_data(6, 4);
  const encoders::Encoders enc(tiny_encoder());
  const Context ctx(data.dataset, make_schedule(data.dataset.class_names(), 2, 2), enc,
                    tiny_options());
  auto state = initial_state(ctx);
  auto [s1, rep0] = run_session(ctx, std::move(state), 0);
  REQUIRE(s1.buffer.total() > 0);

  const auto items = build_training_set(ctx, s1, 1);
  const auto& samples = data.dataset.samples();
  std::set<std::size_t> seen_idx;
  const auto space = ctx.schedule().seen_through(1);
  for (const auto& it : items) {
    CHECK(seen_idx.insert(it.sample_index).second);
    const auto& s = samples[it.sample_index];
    CHECK(s.split == dataio::Split::kTrain);
    REQUIRE(it.labels.size() == space.size());
    const bool fresh = s.has_label(2) || s.has_label(3);
    const bool stored = s1.buffer.contains_sample(s.id);
    CHECK((fresh || stored));
    CHECK(it.replayed == stored);
    for (std::size_t j = 0; j < space.size(); ++j) {
      const ClassId c = space[j];
      bool in_scope = fresh && (c == 2 || c == 3);
      for (const auto* e : s1.buffer.all()) {
        if (e->sample_id == s.id && e->class_id == c) in_scope = true;
      }
      CHECK(it.labels[j] == static_cast<std::uint8_t>(in_scope && s.has_label(c)));
    }
  }
  CHECK(std::is_sorted(items.begin(), items.end(), [](const TrainItem& a, const TrainItem& b) {
    return a.sample_index < b.sample_index;
  }));
}

TEST_CASE("sessions are deterministic and evaluate exactly the seen classes") {
  const auto data = tiny_data(6, 5);
  const encoders::Encoders enc(tiny_encoder());
  const Context ctx(data.dataset, make_schedule(data.dataset.class_names(), 2, 2), enc,
                    tiny_options());
  const auto a = run_all(ctx), b = run_all(ctx);
  REQUIRE(a.sessions.size() == 3);
  CHECK(a.sessions == b.sessions);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(a.sessions[s].seen_classes == ctx.schedule().seen_through(s));
    CHECK(a.sessions[s].n_test == data.dataset.indices(dataio::Split::kTest).size());
    for (const auto& ap : a.sessions[s].class_ap) {
      CHECK(ap.class_id <= ctx.schedule().seen_through(s).back());
    }
  }
}

TEST_CASE("old prompts are not modified by later sessions") {
  const auto data = tiny_data(4, 6);
  const encoders::Encoders enc(tiny_encoder());
  auto opts = tiny_options();
  const Context ctx(data.dataset, make_schedule(data.dataset.class_names(), 2, 2), enc, opts);
  auto [s1, r0] = run_session(ctx, initial_state(ctx), 0);
  const auto before = s1.bank.entries();
  auto [s2, r1] = run_session(ctx, std::move(s1), 1);
  // class embeddings are frozen; earlier prompts may move but keep their shape
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& e = s2.bank.entry(before[i].id);
    CHECK(e.class_prompt.class_embedding == before[i].class_prompt.class_embedding);
    CHECK(e.class_prompt.context.shape() == before[i].class_prompt.context.shape());
    CHECK(e.session_added == 0);
  }
  CHECK(s2.bank.size() == 4);
  CHECK(s2.previous.has_value());
}

TEST_CASE("checkpoint round trip") {
  const auto data = tiny_data(4, 7);
  const encoders::Encoders enc(tiny_encoder());
  const Context ctx(data.dataset, make_schedule(data.dataset.class_names(), 2, 2), enc,
                    tiny_options());
  auto [state, report] = run_session(ctx, initial_state(ctx), 0);
  const auto dir = std::filesystem::temp_directory_path() / "mlcil_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, state, report);
  for (const char* f : {"bank.json", "buffer.json", "report.csv", "class_ap.csv"}) {
    CHECK(std::filesystem::exists(dir / f));
  }
  const auto ck = load_checkpoint(dir, ctx, 0);
  CHECK(ck.bank.checksum() == state.bank.checksum());
  CHECK(ck.buffer == state.buffer);
  CHECK(ck.report.map == report.map);
  CHECK(ck.report.class_ap == report.class_ap);
  CHECK(bank_from_json(bank_to_json(state.bank)).checksum() == state.bank.checksum());
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_checkpoint(dir, ctx, 0));
}
