#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlcil/encoders.hpp"
#include "mlcil/icp.hpp"
#include "mlcil/numgrad.hpp"

namespace mlcil::losses {

using icp::ClassId;
using numgrad::Graph;
using numgrad::Tensor;
using numgrad::Var;

inline constexpr double kProbEpsilon = 1e-7;

struct LossConfig {
  double gamma_pos = 0.0;
  double gamma_neg = 4.0;
  double alpha = 1.0;     // weight of the prompt-consistency term
  double neg_clip = 0.0;  // probability shift for negatives, in [0, 0.2]

  void validate() const;
};

/// Unit text features of the classes known before the current session,
/// captured at the end of the previous one.
struct PromptSnapshot {
  std::vector<ClassId> classes;
  std::vector<Tensor> class_features;    // g_c per class
  std::vector<Tensor> context_features;  // g_s per class; empty without ICP

  bool empty() const { return classes.empty(); }
};

PromptSnapshot capture_snapshot(const icp::PromptBank& bank,
                                const encoders::Encoders& enc);

/// Asymmetric loss averaged over the C categories:
///   -(1/C) sum_m [ y (1-p)^g+ log p + (1-y) q^g- log(1-q) ],
/// q = max(p - neg_clip, 0); p and q clamped to (eps, 1 - eps) before logs.
Var asl(Var probs, std::span<const std::uint8_t> labels, const LossConfig& cfg);
double asl(const Tensor& probs, std::span<const std::uint8_t> labels,
           const LossConfig& cfg);

/// Mean over snapshot classes of 2 - cos(g_c, g_c_prev) - cos(g_s, g_s_prev).
/// Without context features only the first cosine is used. Zero for an empty
/// snapshot.
Var tpc(Graph& graph, const icp::TextFeatures& current,
        const PromptSnapshot& snapshot);

/// asl + alpha * tpc for a single image.
Var total_loss(Var probs, std::span<const std::uint8_t> labels,
               const icp::TextFeatures& current, const PromptSnapshot& snapshot,
               const LossConfig& cfg);

}  // namespace mlcil::losses
