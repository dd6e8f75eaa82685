#include <doctest.h>

#include <cmath>

#include "mlcil/encoders.hpp"
#include "mlcil/errors.hpp"
#include "mlcil/random.hpp"

using namespace mlcil;
using namespace mlcil::encoders;
using numgrad::Tensor;

namespace {

EncoderConfig small_config(std::uint64_t seed = 5) {
  EncoderConfig c;
  c.seed = seed;
  c.d_in = 6;
  c.d_token = 10;
  c.d_feat = 8;
  c.n_regions = 3;
  return c;
}

Tensor random_tensor(numgrad::Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("frozen weights are bounded and seeded") {
  const FrozenLinear a(8, 6, 1), b(8, 6, 1), c(8, 6, 2);
  CHECK(a.weight() == b.weight());
  CHECK_FALSE(a.weight() == c.weight());
  const double bound = 1.0 / std::sqrt(6.0);
  for (double w : a.weight().data()) CHECK(std::abs(w) <= bound);
}

TEST_CASE("image encoder is a deterministic linear map") {
  const Encoders enc(small_config());
  Rng rng(1);
  const Tensor x = random_tensor({3, 6}, rng);
  const Tensor y = random_tensor({3, 6}, rng);
  CHECK(enc.encode_image(x) == enc.encode_image(x));
  CHECK(enc.encode_image(Tensor({3, 6}, 0.0)) == Tensor({3, 8}, 0.0));
  CHECK(enc.project_to_text(Tensor({3, 8}, 0.0)) == Tensor({3, 8}, 0.0));

  Tensor sum = x;
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += y[i];
  const Tensor fx = enc.encode_image(x), fy = enc.encode_image(y), fs = enc.encode_image(sum);
  for (std::size_t i = 0; i < fs.size(); ++i) CHECK(fs[i] == doctest::Approx(fx[i] + fy[i]));

  // plain-loop oracle for the projection
  const Tensor p = enc.project_to_text(fx);
  const Tensor& w = enc.projection_weights().weight();
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t o = 0; o < 8; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 8; ++i) acc += w.at(o, i) * fx.at(r, i);
      CHECK(p.at(r, o) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("different seeds give different encoders") {
  const Encoders a(small_config(1)), b(small_config(2));
  Rng rng(4);
  const Tensor x = random_tensor({3, 6}, rng);
  CHECK_FALSE(a.encode_image(x) == b.encode_image(x));
  CHECK(a.checksum() != b.checksum());
  CHECK(a.checksum() == Encoders(small_config(1)).checksum());
}

TEST_CASE("text features are unit norm") {
  const Encoders enc(small_config());
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.below(20);
    const Tensor f = enc.encode_text(random_tensor({T, 10}, rng));
    CHECK(std::abs(numgrad::norm(f.data()) - 1.0) <= 1e-9);
  }
  const Tensor u = enc.encode_text(random_tensor({4, 10}, rng));
  const Tensor v = enc.encode_text(random_tensor({4, 10}, rng));
  CHECK(std::abs(numgrad::cosine(u.data(), v.data()) - numgrad::dot(u.data(), v.data())) <= 1e-9);
}

TEST_CASE("text encoder mean-pools tokens") {
  const Encoders enc(small_config());
  Rng rng(2);
  const Tensor t = random_tensor({1, 10}, rng);
  Tensor repeated({5, 10});
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 10; ++c) repeated.at(r, c) = t.at(0, c);
  }
  const Tensor a = enc.encode_text(t), b = enc.encode_text(repeated);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("encoder errors") {
  const Encoders enc(small_config());
  CHECK_THROWS_AS(enc.encode_image(Tensor({2, 6}, 1.0)), DimensionError);
  CHECK_THROWS_AS(enc.encode_text(Tensor({2, 9}, 1.0)), DimensionError);
  CHECK_THROWS_AS(enc.encode_text(Tensor({2, 10}, 0.0)), DegenerateVectorError);
  EncoderConfig bad = small_config();
  bad.d_feat = 1;
  CHECK_THROWS_AS(Encoders{bad}, ContractError);
}
