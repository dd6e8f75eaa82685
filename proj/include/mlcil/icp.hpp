#pragma once

// Incremental context prompting: a per-class pair of learnable prompts, the
// class-specific region feature aggregation, and per-class scoring.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlcil/encoders.hpp"
#include "mlcil/numgrad.hpp"

namespace mlcil::icp {

using numgrad::Graph;
using numgrad::Tensor;
using numgrad::Var;
using ClassId = std::size_t;

struct IcpConfig {
  std::size_t context_length = 16;  // L; the context prompt holds L + 1 tokens
  double temperature = 5.0;         // logit scale before the sigmoid
  double init_std = 0.02;
  /// When false the negative context prompt is dropped and
  /// logit = temperature * f_c . g_c (ablation without ICP).
  bool use_context_prompt = true;
  /// One set of class-prompt context tokens for all classes instead of one per
  /// class.
  bool shared_context = false;

  void validate() const;
};

/// t_c = [w_1 .. w_L, CLS_j]; CLS_j is frozen.
struct ClassPrompt {
  Tensor context;          // L x d_token
  Tensor class_embedding;  // d_token
};

/// t_s = [w_1 .. w_{L+1}], no class embedding.
struct ContextPrompt {
  Tensor tokens;  // (L + 1) x d_token
};

struct PromptEntry {
  ClassId id = 0;
  std::string name;
  ClassPrompt class_prompt;
  ContextPrompt context_prompt;
  std::size_t session_added = 0;
};

/// Frozen word-embedding stand-in for a class name: N(0, 1/d_token) entries
/// seeded from the name alone, so it is identical across runs.
Tensor class_embedding_for(const std::string& name, std::size_t d_token);

class PromptBank {
 public:
  PromptBank(std::size_t d_token, IcpConfig cfg);

  /// Appends prompt pairs for new classes. Existing pairs are untouched.
  /// Throws ContractError on a duplicate id.
  void add_classes(std::span<const ClassId> ids,
                   std::span<const std::string> names, std::size_t session,
                   std::uint64_t init_seed);

  const IcpConfig& config() const { return cfg_; }
  std::size_t d_token() const { return d_token_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(ClassId id) const;
  /// Entries in ascending class id.
  const std::vector<PromptEntry>& entries() const { return entries_; }
  const PromptEntry& entry(ClassId id) const;
  std::vector<ClassId> class_ids() const;
  std::size_t index_of(ClassId id) const;
  const std::optional<Tensor>& shared_context() const { return shared_context_; }

  /// Learnable tensors in a fixed order: the shared context (if any), then per
  /// entry its class-prompt context (unless shared) and its context prompt
  /// (when the context prompt is in use).
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;

  std::uint64_t checksum() const;
  std::uint64_t class_embedding_checksum() const;

  /// Used by checkpoint loading; replaces all state.
  void restore(std::vector<PromptEntry> entries, std::optional<Tensor> shared);

 private:
  IcpConfig cfg_;
  std::size_t d_token_;
  std::vector<PromptEntry> entries_;
  std::optional<Tensor> shared_context_;
};

/// Bank tensors placed on a graph. `params` is parallel to
/// PromptBank::parameters(); the token matrices are parallel to entries().
struct BoundBank {
  std::vector<Var> params;
  std::vector<Var> class_tokens;    // (L + 1) x d_token each
  std::vector<Var> context_tokens;  // (L + 1) x d_token each; empty without ICP
};

BoundBank bind(Graph& graph, const PromptBank& bank, bool trainable);

/// Unit text features per class, stacked as C x d_feat.
struct TextFeatures {
  std::vector<ClassId> classes;
  std::vector<Var> class_features;    // g_c per class
  std::vector<Var> context_features;  // g_s per class; empty without ICP
  Var class_stack;
  Var context_stack;  // invalid without ICP
};

TextFeatures encode_prompts(const BoundBank& bound, const PromptBank& bank,
                            const encoders::Encoders& enc);

struct CfaResult {
  Var features;   // f_c, C x d
  Var attention;  // C x R, rows sum to 1
};

/// Aggregates already-projected region features [R x d] with class text
/// features [C x d]: attention = softmax over regions of g_c f^T, f_c =
/// attention f.
CfaResult cfa(Var projected_regions, Var class_features);

/// Projects image features with the frozen projection, then aggregates.
CfaResult cfa(const encoders::Encoders& enc, const Tensor& image_features,
              Var class_features);

/// logit_j = temperature * (f_c^j . g_c^j - f_c^j . g_s^j)
Var class_logits(const CfaResult& agg, const TextFeatures& text,
                 const IcpConfig& cfg);

struct AttentionDump {
  std::vector<ClassId> classes;
  Tensor weights;  // C x R
};

struct Score {
  Tensor probs;
  Tensor logits;
  AttentionDump attention;
};

/// Evaluation-time scorer: text features are computed once and reused.
class Scorer {
 public:
  Scorer(const PromptBank& bank, const encoders::Encoders& enc);

  /// `projected` is f_{i->t} for one image, [R x d_feat].
  Score score_projected(const Tensor& projected) const;
  /// `image_features` is f_x = encode_image(regions).
  Score score(const Tensor& image_features) const;

  const std::vector<ClassId>& classes() const { return classes_; }
  const Tensor& class_features() const { return class_features_; }
  const Tensor& context_features() const { return context_features_; }

 private:
  const encoders::Encoders* enc_;
  IcpConfig cfg_;
  std::vector<ClassId> classes_;
  Tensor class_features_;
  Tensor context_features_;
};

Score score(const Tensor& image_features, const PromptBank& bank,
            const encoders::Encoders& enc);

/// CSV rows `image_id,class_id,region_index,weight` (no header).
void write_attention_rows(std::ostream& os, const std::string& image_id,
                          const AttentionDump& dump);

}  // namespace mlcil::icp
