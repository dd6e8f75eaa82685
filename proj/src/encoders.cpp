#include "mlcil/encoders.hpp"

#include <cmath>
#include <string>

#include "mlcil/errors.hpp"
#include "mlcil/random.hpp"

namespace mlcil::encoders {

namespace {

enum Stream : std::uint64_t { kImage = 1, kText = 2, kProjection = 3 };

}  // namespace

void EncoderConfig::validate() const {
  if (d_in < 1) throw ContractError("encoder d_in must be >= 1");
  if (d_token < 1) throw ContractError("encoder d_token must be >= 1");
  if (d_feat < 2) throw ContractError("encoder d_feat must be >= 2");
  if (n_regions < 1) throw ContractError("encoder n_regions must be >= 1");
}

FrozenLinear::FrozenLinear(std::size_t out, std::size_t in, std::uint64_t seed)
    : weight_(numgrad::Shape{out, in}), weight_t_(numgrad::Shape{in, out}) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (std::size_t i = 0; i < weight_.size(); ++i) {
    weight_[i] = rng.uniform(-bound, bound);
  }
  for (std::size_t r = 0; r < out; ++r)
    for (std::size_t c = 0; c < in; ++c) weight_t_.at(c, r) = weight_.at(r, c);
}

Tensor FrozenLinear::apply_rows(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != in_features()) {
    throw DimensionError("frozen linear expects [* x " +
                         std::to_string(in_features()) + "], got " +
                         numgrad::shape_string(x.shape()));
  }
  return numgrad::matmul(x, weight_t_);
}

Encoders::Encoders(const EncoderConfig& cfg)
    : cfg_((cfg.validate(), cfg)),
      image_(cfg.d_feat, cfg.d_in, derive_seed(cfg.seed, kImage)),
      text_(cfg.d_feat, cfg.d_token, derive_seed(cfg.seed, kText)),
      projection_(cfg.d_feat, cfg.d_feat, derive_seed(cfg.seed, kProjection)) {}

Tensor Encoders::encode_image(const Tensor& regions) const {
  if (regions.rank() != 2 || regions.rows() != cfg_.n_regions) {
    throw DimensionError("encode_image expects " + std::to_string(cfg_.n_regions) +
                         " regions, got " + numgrad::shape_string(regions.shape()));
  }
  return image_.apply_rows(regions);
}

Var Encoders::encode_text(Var tokens) const {
  if (tokens.shape().size() != 2 || tokens.shape()[1] != cfg_.d_token) {
    throw DimensionError("encode_text expects [T x " + std::to_string(cfg_.d_token) +
                         "], got " + numgrad::shape_string(tokens.shape()));
  }
  numgrad::Graph& g = tokens.graph();
  Var pooled = numgrad::mean_rows(tokens);
  Var mapped = numgrad::matvec(g.constant(text_.weight()), pooled);
  return numgrad::l2_normalize(mapped);
}

Tensor Encoders::encode_text(const Tensor& tokens) const {
  numgrad::Graph g;
  return encode_text(g.constant(tokens)).value();
}

Tensor Encoders::project_to_text(const Tensor& features) const {
  return projection_.apply_rows(features);
}

Tensor Encoders::image_to_text(const Tensor& regions) const {
  return project_to_text(encode_image(regions));
}

std::uint64_t Encoders::checksum() const {
  std::uint64_t h = image_.weight().checksum();
  h = mix_seed(h ^ text_.weight().checksum());
  h = mix_seed(h ^ projection_.weight().checksum());
  return h;
}

}  // namespace mlcil::encoders
