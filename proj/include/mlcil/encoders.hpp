#pragma once

#include <cstdint>

#include "mlcil/numgrad.hpp"

namespace mlcil::encoders {

using numgrad::Tensor;
using numgrad::Var;

struct EncoderConfig {
  std::uint64_t seed = 0;
  std::size_t d_in = 16;      // region descriptor width
  std::size_t d_token = 48;   // prompt token width
  std::size_t d_feat = 32;    // joint image/text feature width
  std::size_t n_regions = 4;

  void validate() const;
};

/// Bias-free linear map with weights drawn i.i.d. from
/// uniform(-1/sqrt(in), 1/sqrt(in)) using mlcil::Rng. Never trained.
class FrozenLinear {
 public:
  FrozenLinear(std::size_t out, std::size_t in, std::uint64_t seed);

  const Tensor& weight() const { return weight_; }
  std::size_t in_features() const { return weight_.cols(); }
  std::size_t out_features() const { return weight_.rows(); }

  /// rows x in -> rows x out
  Tensor apply_rows(const Tensor& x) const;

 private:
  Tensor weight_;        // out x in
  Tensor weight_t_;      // in x out, cached for row-major application
};

/// Stand-ins for the frozen image encoder, text encoder and the
/// image-to-text projection. Immutable after construction.
class Encoders {
 public:
  explicit Encoders(const EncoderConfig& cfg);

  const EncoderConfig& config() const { return cfg_; }

  /// regions [R x d_in] -> per-region features [R x d_feat].
  Tensor encode_image(const Tensor& regions) const;

  /// tokens [T x d_token] -> unit feature [d_feat]: mean-pool, frozen linear
  /// map, L2 normalize. Gradients reach `tokens` only.
  Var encode_text(Var tokens) const;
  Tensor encode_text(const Tensor& tokens) const;

  /// [R x d_feat] -> [R x d_feat]
  Tensor project_to_text(const Tensor& features) const;

  /// encode_image followed by project_to_text.
  Tensor image_to_text(const Tensor& regions) const;

  /// Combined checksum of every frozen weight.
  std::uint64_t checksum() const;

  const FrozenLinear& image_weights() const { return image_; }
  const FrozenLinear& text_weights() const { return text_; }
  const FrozenLinear& projection_weights() const { return projection_; }

 private:
  EncoderConfig cfg_;
  FrozenLinear image_;
  FrozenLinear text_;
  FrozenLinear projection_;
};

}  // namespace mlcil::encoders
