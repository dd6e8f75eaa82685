#include "mlcil/icp.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "mlcil/errors.hpp"
#include "mlcil/format.hpp"
#include "mlcil/random.hpp"

namespace mlcil::icp {

namespace {

constexpr std::uint64_t kClassEmbeddingStream = 0xc1a55e;
constexpr std::uint64_t kSharedContextStream = 0x5a4ed;

Tensor gaussian(numgrad::Shape shape, double stddev, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

void IcpConfig::validate() const {
  if (context_length < 1) throw ContractError("context_length must be >= 1");
  if (!std::isfinite(temperature) || temperature < 0.0) {
    throw ContractError("temperature must be finite and >= 0");
  }
  if (!(init_std >= 0.0)) throw ContractError("init_std must be >= 0");
}

Tensor class_embedding_for(const std::string& name, std::size_t d_token) {
  return gaussian({d_token}, 1.0 / std::sqrt(static_cast<double>(d_token)),
                  derive_seed(hash_name(name), kClassEmbeddingStream));
}

// ---------------------------------------------------------------- PromptBank

PromptBank::PromptBank(std::size_t d_token, IcpConfig cfg)
    : cfg_(cfg), d_token_(d_token) {
  cfg_.validate();
  if (d_token_ < 1) throw ContractError("d_token must be >= 1");
}

void PromptBank::add_classes(std::span<const ClassId> ids,
                             std::span<const std::string> names,
                             std::size_t session, std::uint64_t init_seed) {
  if (ids.size() != names.size()) {
    throw ContractError("add_classes: ids and names differ in length");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (contains(ids[i]) ||
        std::count(ids.begin(), ids.end(), ids[i]) > 1) {
      throw ContractError("add_classes: duplicate class id " +
                          std::to_string(ids[i]));
    }
  }
  const std::size_t L = cfg_.context_length;
  if (cfg_.shared_context && !shared_context_) {
    shared_context_ = gaussian({L, d_token_}, cfg_.init_std,
                               derive_seed(init_seed, kSharedContextStream));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    PromptEntry e;
    e.id = ids[i];
    e.name = names[i];
    e.session_added = session;
    const std::uint64_t s = derive_seed(init_seed, 2 * ids[i] + 1);
    e.class_prompt.context = gaussian({L, d_token_}, cfg_.init_std, s);
    e.class_prompt.class_embedding = class_embedding_for(names[i], d_token_);
    e.context_prompt.tokens =
        gaussian({L + 1, d_token_}, cfg_.init_std, derive_seed(s, 2));
    entries_.push_back(std::move(e));
  }
  std::sort(entries_.begin(), entries_.end(),
            [](const PromptEntry& a, const PromptEntry& b) { return a.id < b.id; });
}

bool PromptBank::contains(ClassId id) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [id](const PromptEntry& e) { return e.id == id; });
}

std::size_t PromptBank::index_of(ClassId id) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].id == id) return i;
  }
  throw ContractError("class " + std::to_string(id) + " not in prompt bank");
}

const PromptEntry& PromptBank::entry(ClassId id) const {
  return entries_[index_of(id)];
}

std::vector<ClassId> PromptBank::class_ids() const {
  std::vector<ClassId> ids;
  ids.reserve(entries_.size());
  for (const auto& e : entries_) ids.push_back(e.id);
  return ids;
}

std::vector<Tensor*> PromptBank::parameters() {
  std::vector<Tensor*> out;
  if (shared_context_) out.push_back(&*shared_context_);
  for (auto& e : entries_) {
    if (!shared_context_) out.push_back(&e.class_prompt.context);
    if (cfg_.use_context_prompt) out.push_back(&e.context_prompt.tokens);
  }
  return out;
}

std::vector<const Tensor*> PromptBank::parameters() const {
  auto mut = const_cast<PromptBank*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::uint64_t PromptBank::checksum() const {
  std::uint64_t h = class_embedding_checksum();
  if (shared_context_) h = mix_seed(h ^ shared_context_->checksum());
  for (const auto& e : entries_) {
    h = mix_seed(h ^ e.id);
    h = mix_seed(h ^ e.class_prompt.context.checksum());
    h = mix_seed(h ^ e.context_prompt.tokens.checksum());
  }
  return h;
}

std::uint64_t PromptBank::class_embedding_checksum() const {
  std::uint64_t h = 0;
  for (const auto& e : entries_) {
    h = mix_seed(h ^ e.class_prompt.class_embedding.checksum());
  }
  return h;
}

void PromptBank::restore(std::vector<PromptEntry> entries,
                         std::optional<Tensor> shared) {
  std::sort(entries.begin(), entries.end(),
            [](const PromptEntry& a, const PromptEntry& b) { return a.id < b.id; });
  entries_ = std::move(entries);
  shared_context_ = std::move(shared);
}

// ---------------------------------------------------------------- graph side

BoundBank bind(Graph& graph, const PromptBank& bank, bool trainable) {
  auto put = [&](const Tensor& t) {
    return trainable ? graph.parameter(t) : graph.constant(t);
  };
  BoundBank out;
  Var shared;
  if (bank.shared_context()) {
    shared = put(*bank.shared_context());
    out.params.push_back(shared);
  }
  const bool with_context = bank.config().use_context_prompt;
  for (const auto& e : bank.entries()) {
    Var ctx;
    if (bank.shared_context()) {
      ctx = shared;
    } else {
      ctx = put(e.class_prompt.context);
      out.params.push_back(ctx);
    }
    Var cls = graph.constant(e.class_prompt.class_embedding);
    const Var parts[] = {ctx, cls};
    out.class_tokens.push_back(numgrad::concat_rows(parts));
    if (with_context) {
      Var tokens = put(e.context_prompt.tokens);
      out.params.push_back(tokens);
      out.context_tokens.push_back(tokens);
    }
  }
  return out;
}

TextFeatures encode_prompts(const BoundBank& bound, const PromptBank& bank,
                            const encoders::Encoders& enc) {
  if (bank.empty()) throw ContractError("encode_prompts: empty prompt bank");
  TextFeatures out;
  out.classes = bank.class_ids();
  for (const Var& t : bound.class_tokens) {
    out.class_features.push_back(enc.encode_text(t));
  }
  out.class_stack = numgrad::concat_rows(out.class_features);
  if (!bound.context_tokens.empty()) {
    for (const Var& t : bound.context_tokens) {
      out.context_features.push_back(enc.encode_text(t));
    }
    out.context_stack = numgrad::concat_rows(out.context_features);
  }
  return out;
}

CfaResult cfa(Var projected_regions, Var class_features) {
  const auto& ps = projected_regions.shape();
  const auto& gs = class_features.shape();
  if (ps.size() != 2 || gs.size() != 2 || ps[1] != gs[1]) {
    throw DimensionError("cfa: region features " + numgrad::shape_string(ps) +
                         " vs class features " + numgrad::shape_string(gs));
  }
  Var logits = numgrad::matmul(class_features, numgrad::transpose(projected_regions));
  Var attention = numgrad::softmax_rows(logits);
  Var features = numgrad::matmul(attention, projected_regions);
  return {features, attention};
}

CfaResult cfa(const encoders::Encoders& enc, const Tensor& image_features,
              Var class_features) {
  Graph& g = class_features.graph();
  return cfa(g.constant(enc.project_to_text(image_features)), class_features);
}

Var class_logits(const CfaResult& agg, const TextFeatures& text,
                 const IcpConfig& cfg) {
  Var contrast = text.class_stack;
  if (cfg.use_context_prompt) {
    if (!text.context_stack.valid()) {
      throw ContractError("class_logits: context features missing");
    }
    contrast = numgrad::sub(text.class_stack, text.context_stack);
  }
  Var raw = numgrad::sum_cols(numgrad::mul(agg.features, contrast));
  return numgrad::scale(raw, cfg.temperature);
}

// ---------------------------------------------------------------- scoring

Scorer::Scorer(const PromptBank& bank, const encoders::Encoders& enc)
    : enc_(&enc), cfg_(bank.config()) {
  Graph g;
  BoundBank bound = bind(g, bank, false);
  TextFeatures text = encode_prompts(bound, bank, enc);
  classes_ = text.classes;
  class_features_ = text.class_stack.value();
  if (text.context_stack.valid()) context_features_ = text.context_stack.value();
}

Score Scorer::score_projected(const Tensor& projected) const {
  Graph g;
  TextFeatures text;
  text.classes = classes_;
  text.class_stack = g.constant(class_features_);
  if (cfg_.use_context_prompt) text.context_stack = g.constant(context_features_);
  CfaResult agg = cfa(g.constant(projected), text.class_stack);
  Var logits = class_logits(agg, text, cfg_);
  Var probs = numgrad::sigmoid(logits);
  return Score{probs.value(), logits.value(),
               AttentionDump{classes_, agg.attention.value()}};
}

Score Scorer::score(const Tensor& image_features) const {
  return score_projected(enc_->project_to_text(image_features));
}

Score score(const Tensor& image_features, const PromptBank& bank,
            const encoders::Encoders& enc) {
  return Scorer(bank, enc).score(image_features);
}

void write_attention_rows(std::ostream& os, const std::string& image_id,
                          const AttentionDump& dump) {
  const std::size_t R = dump.weights.cols();
  for (std::size_t c = 0; c < dump.classes.size(); ++c) {
    for (std::size_t r = 0; r < R; ++r) {
      os << image_id << ',' << dump.classes[c] << ',' << r << ','
         << format_double(dump.weights.at(c, r)) << '\n';
    }
  }
}

}  // namespace mlcil::icp
