#include "mlcil/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mlcil/errors.hpp"

namespace mlcil::losses {

void LossConfig::validate() const {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ContractError(std::string(name) + " must be finite and >= 0");
    }
  };
  check(gamma_pos, "gamma_pos");
  check(gamma_neg, "gamma_neg");
  check(alpha, "alpha");
  check(neg_clip, "neg_clip");
  if (neg_clip > 0.2) throw ContractError("neg_clip must be in [0, 0.2]");
}

PromptSnapshot capture_snapshot(const icp::PromptBank& bank,
                                const encoders::Encoders& enc) {
  PromptSnapshot snap;
  if (bank.empty()) return snap;
  Graph g;
  icp::BoundBank bound = icp::bind(g, bank, false);
  icp::TextFeatures text = icp::encode_prompts(bound, bank, enc);
  snap.classes = text.classes;
  for (const Var& v : text.class_features) snap.class_features.push_back(v.value());
  for (const Var& v : text.context_features) snap.context_features.push_back(v.value());
  return snap;
}

Var asl(Var probs, std::span<const std::uint8_t> labels, const LossConfig& cfg) {
  const Tensor& p = probs.value();
  if (p.rank() != 1 || p.size() != labels.size()) {
    throw DimensionError("asl: probs " + numgrad::shape_string(p.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
  }
  for (double v : p.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("asl: probability outside [0, 1]");
  }
  Graph& g = probs.graph();
  const std::size_t C = p.size();
  Tensor pos_mask({C}), neg_mask({C});
  for (std::size_t m = 0; m < C; ++m) {
    if (labels[m] > 1) throw ContractError("asl: labels must be 0 or 1");
    pos_mask[m] = labels[m];
    neg_mask[m] = 1.0 - labels[m];
  }
  constexpr double lo = kProbEpsilon, hi = 1.0 - kProbEpsilon;

  Var pc = numgrad::clamp(probs, lo, hi);
  Var pos = numgrad::mul(numgrad::pow_scalar(numgrad::add_scalar(numgrad::scale(pc, -1.0), 1.0),
                                             cfg.gamma_pos),
                         numgrad::log(pc));

  Var shifted = numgrad::clamp(numgrad::add_scalar(probs, -cfg.neg_clip), lo, hi);
  Var neg = numgrad::mul(
      numgrad::pow_scalar(shifted, cfg.gamma_neg),
      numgrad::log(numgrad::add_scalar(numgrad::scale(shifted, -1.0), 1.0)));

  Var total = numgrad::add(numgrad::mul(pos, g.constant(pos_mask)),
                           numgrad::mul(neg, g.constant(neg_mask)));
  return numgrad::scale(numgrad::sum(total), -1.0 / static_cast<double>(C));
}

double asl(const Tensor& probs, std::span<const std::uint8_t> labels,
           const LossConfig& cfg) {
  Graph g;
  return asl(g.constant(probs), labels, cfg).value().item();
}

Var tpc(Graph& graph, const icp::TextFeatures& current,
        const PromptSnapshot& snapshot) {
  if (snapshot.empty()) return graph.constant(Tensor::scalar(0.0));
  const bool with_context = !snapshot.context_features.empty() &&
                            !current.context_features.empty();
  std::vector<Var> per_class;
  for (std::size_t k = 0; k < snapshot.classes.size(); ++k) {
    const auto it = std::find(current.classes.begin(), current.classes.end(),
                              snapshot.classes[k]);
    if (it == current.classes.end()) {
      throw ContractError("tpc: snapshot class " +
                          std::to_string(snapshot.classes[k]) +
                          " missing from current prompts");
    }
    const std::size_t idx = static_cast<std::size_t>(it - current.classes.begin());
    Var term = numgrad::add_scalar(
        numgrad::scale(numgrad::cosine(current.class_features[idx],
                                       graph.constant(snapshot.class_features[k])),
                       -1.0),
        with_context ? 2.0 : 1.0);
    if (with_context) {
      term = numgrad::sub(
          term, numgrad::cosine(current.context_features[idx],
                                graph.constant(snapshot.context_features[k])));
    }
    per_class.push_back(numgrad::reshape(term, {1}));
  }
  return numgrad::mean(numgrad::concat_rows(per_class));
}

Var total_loss(Var probs, std::span<const std::uint8_t> labels,
               const icp::TextFeatures& current, const PromptSnapshot& snapshot,
               const LossConfig& cfg) {
  Var loss = asl(probs, labels, cfg);
  if (cfg.alpha == 0.0 || snapshot.empty()) return loss;
  return numgrad::add(loss, numgrad::scale(tpc(probs.graph(), current, snapshot),
                                           cfg.alpha));
}

}  // namespace mlcil::losses
