#include "mlcil/sccr.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>

#include "mlcil/errors.hpp"
#include "mlcil/random.hpp"

namespace mlcil::sccr {

using nlohmann::json;

// ---------------------------------------------------------------- features

std::vector<Tensor> class_features(std::span<const dataio::Sample* const> samples,
                                   std::span<const Tensor> projected,
                                   ClassId class_id, const icp::Scorer& scorer) {
  if (samples.size() != projected.size()) {
    throw DimensionError("class_features: samples and projections differ in length");
  }
  const auto& classes = scorer.classes();
  const auto it = std::find(classes.begin(), classes.end(), class_id);
  if (it == classes.end()) {
    throw ContractError("class_features: class " + std::to_string(class_id) +
                        " not in the model");
  }
  auto g_row = scorer.class_features().row(static_cast<std::size_t>(it - classes.begin()));
  const Tensor g = Tensor::matrix(1, g_row.size(), {g_row.begin(), g_row.end()});

  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i]->has_label(class_id)) {
      throw ContractError("class_features: sample '" + samples[i]->id +
                          "' lacks positive label " + std::to_string(class_id));
    }
    numgrad::Graph graph;
    auto agg = icp::cfa(graph.constant(projected[i]), graph.constant(g));
    const Tensor& f = agg.features.value();
    out.push_back(Tensor::vector({f.data().begin(), f.data().end()}));
  }
  return out;
}

std::vector<Tensor> class_features(std::span<const dataio::Sample* const> samples,
                                   ClassId class_id, const icp::PromptBank& bank,
                                   const encoders::Encoders& enc) {
  std::vector<Tensor> projected;
  projected.reserve(samples.size());
  for (const auto* s : samples) projected.push_back(enc.image_to_text(s->regions));
  return class_features(samples, projected, class_id, icp::Scorer(bank, enc));
}

// ---------------------------------------------------------------- k-means

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double assign(std::span<const Tensor> points, ClusterSet& cs) {
  double sse = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cs.centroids.size(); ++c) {
      const double d = squared_distance(points[i].data(), cs.centroids[c].data());
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    cs.assignment[i] = best;
    sse += best_d;
  }
  return sse;
}

}  // namespace

std::vector<std::size_t> ClusterSet::members(std::size_t cluster) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == cluster) out.push_back(i);
  }
  return out;
}

double sum_squared_error(std::span<const Tensor> points, const ClusterSet& clusters) {
  double sse = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    sse += squared_distance(points[i].data(),
                            clusters.centroids[clusters.assignment[i]].data());
  }
  return sse;
}

ClusterSet kmeans(std::span<const Tensor> points, std::size_t m, std::uint64_t seed,
                  std::size_t max_iterations, double tolerance) {
  if (points.empty()) throw ContractError("kmeans: no points");
  if (m < 1) throw ContractError("kmeans: m must be >= 1");
  const std::size_t d = points.front().size();
  for (const auto& p : points) {
    if (p.size() != d) throw DimensionError("kmeans: points differ in width");
  }
  m = std::min(m, points.size());

  ClusterSet cs;
  cs.assignment.assign(points.size(), 0);

  // k-means++ seeding.
  Rng rng(seed);
  std::vector<std::size_t> chosen{static_cast<std::size_t>(rng.below(points.size()))};
  std::vector<double> nearest(points.size(), std::numeric_limits<double>::infinity());
  while (chosen.size() < m) {
    const auto& last = points[chosen.back()];
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points[i].data(), last.data()));
      total += nearest[i];
    }
    std::size_t pick = points.size();
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (nearest[i] <= 0.0) continue;
        acc += nearest[i];
        pick = i;
        if (acc > target) break;
      }
    } else {
      // All remaining points coincide with a centre; take the first unused.
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
  }
  for (std::size_t idx : chosen) cs.centroids.push_back(points[idx]);

  cs.sse = assign(points, cs);
  cs.sse_history.push_back(cs.sse);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    std::vector<Tensor> next(m, Tensor({d}, 0.0));
    std::vector<std::size_t> counts(m, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      auto& c = next[cs.assignment[i]];
      for (std::size_t t = 0; t < d; ++t) c[t] += points[i][t];
      ++counts[cs.assignment[i]];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      if (counts[c] == 0) {
        next[c] = cs.centroids[c];  // empty cluster keeps its centre
      } else {
        for (double& v : next[c].data()) v /= static_cast<double>(counts[c]);
      }
      shift = std::max(shift, std::sqrt(squared_distance(next[c].data(),
                                                         cs.centroids[c].data())));
    }
    cs.centroids = std::move(next);
    cs.sse = assign(points, cs);
    cs.sse_history.push_back(cs.sse);
    cs.iterations = it + 1;
    if (shift < tolerance) break;
  }
  return cs;
}

// ---------------------------------------------------------------- selection

std::vector<std::size_t> lowest_k(std::span<const Member> members,
                                  std::span<const std::size_t> candidates,
                                  std::size_t k) {
  std::vector<std::size_t> order(candidates.begin(), candidates.end());
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (members[a].prob != members[b].prob) return members[a].prob < members[b].prob;
    return members[a].id < members[b].id;
  });
  if (order.size() > k) order.resize(k);
  return order;
}

std::vector<std::size_t> select_exemplars(const ClusterSet& clusters,
                                          std::span<const Member> members,
                                          std::size_t k) {
  if (members.size() != clusters.assignment.size()) {
    throw DimensionError("select_exemplars: members and assignment differ in length");
  }
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    const auto in_cluster = clusters.members(c);
    const auto picked = lowest_k(members, in_cluster, k);
    out.insert(out.end(), picked.begin(), picked.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> select_with_quota(const ClusterSet& clusters,
                                           std::span<const Member> members,
                                           std::size_t quota) {
  if (clusters.size() == 0 || quota == 0) return {};
  const std::size_t k = quota / clusters.size();
  std::vector<std::size_t> out = select_exemplars(clusters, members, k);
  if (out.size() >= quota || out.size() == members.size()) {
    return out;
  }
  // Rank each cluster fully, then deal the leftovers round-robin.
  std::vector<std::vector<std::size_t>> ranked;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    const auto in_cluster = clusters.members(c);
    ranked.push_back(lowest_k(members, in_cluster, in_cluster.size()));
  }
  std::vector<std::size_t> cursor(clusters.size());
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    cursor[c] = std::min(k, ranked[c].size());
  }
  while (out.size() < quota) {
    bool progressed = false;
    for (std::size_t c = 0; c < clusters.size() && out.size() < quota; ++c) {
      if (cursor[c] < ranked[c].size()) {
        out.push_back(ranked[c][cursor[c]++]);
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- buffer

std::size_t Budget::quota(std::size_t n_classes) const {
  if (mode == BudgetMode::kPerClass) return size;
  return n_classes == 0 ? size : size / n_classes;
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kSccr: return "sccr";
    case Strategy::kRandom: return "random";
    case Strategy::kMeanFeature: return "mean-feature";
    case Strategy::kNone: return "none";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "sccr") return Strategy::kSccr;
  if (name == "random") return Strategy::kRandom;
  if (name == "mean-feature") return Strategy::kMeanFeature;
  if (name == "none") return Strategy::kNone;
  throw DataError("unknown replay strategy '" + name +
                  "' (expected sccr, random, mean-feature or none)");
}

std::size_t ReplayBuffer::total() const {
  std::size_t n = 0;
  for (const auto& [_, v] : entries_) n += v.size();
  return n;
}

std::size_t ReplayBuffer::count(ClassId c) const {
  auto it = entries_.find(c);
  return it == entries_.end() ? 0 : it->second.size();
}

bool ReplayBuffer::contains_sample(const std::string& id) const {
  for (const auto& [_, v] : entries_) {
    for (const auto& e : v) {
      if (e.sample_id == id) return true;
    }
  }
  return false;
}

std::vector<const BufferEntry*> ReplayBuffer::all() const {
  std::vector<const BufferEntry*> out;
  for (const auto& [_, v] : entries_) {
    for (const auto& e : v) out.push_back(&e);
  }
  return out;
}

void ReplayBuffer::check_budget() const {
  if (budget_.mode == BudgetMode::kPerClass) {
    for (const auto& [c, v] : entries_) {
      if (v.size() > budget_.size) {
        throw ContractError("replay budget violated: class " + std::to_string(c) +
                            " holds " + std::to_string(v.size()) + " > " +
                            std::to_string(budget_.size));
      }
    }
  } else if (total() > budget_.size) {
    throw ContractError("replay budget violated: " + std::to_string(total()) +
                        " > " + std::to_string(budget_.size));
  }
}

json ReplayBuffer::to_json() const {
  json entries = json::array();
  for (const BufferEntry* e : all()) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(e->feature_checksum));
    entries.push_back({{"sample_id", e->sample_id},
                       {"class", e->class_id},
                       {"cluster_id", e->cluster_id},
                       {"confidence", e->confidence},
                       {"stored_session", e->stored_session},
                       {"feature_checksum", hex}});
  }
  return {{"budget",
           {{"mode", budget_.mode == BudgetMode::kPerClass ? "per_class" : "total"},
            {"size", budget_.size}}},
          {"entries", entries}};
}

ReplayBuffer ReplayBuffer::from_json(const json& j) {
  try {
    Budget b;
    const std::string mode = j.at("budget").at("mode").get<std::string>();
    if (mode == "per_class") {
      b.mode = BudgetMode::kPerClass;
    } else if (mode == "total") {
      b.mode = BudgetMode::kTotal;
    } else {
      throw DataError("buffer: unknown budget mode '" + mode + "'");
    }
    b.size = j.at("budget").at("size").get<std::size_t>();
    ReplayBuffer buf(b);
    for (const auto& e : j.at("entries")) {
      BufferEntry be;
      be.sample_id = e.at("sample_id").get<std::string>();
      be.class_id = e.at("class").get<ClassId>();
      be.cluster_id = e.at("cluster_id").get<std::size_t>();
      be.confidence = e.at("confidence").get<double>();
      be.stored_session = e.at("stored_session").get<std::size_t>();
      be.feature_checksum =
          std::stoull(e.at("feature_checksum").get<std::string>(), nullptr, 16);
      buf.entries_[be.class_id].push_back(std::move(be));
    }
    buf.check_budget();
    return buf;
  } catch (const json::exception& e) {
    throw DataError(std::string("buffer: ") + e.what());
  }
}

namespace {

void trim_class(std::vector<BufferEntry>& entries, std::size_t quota,
                Strategy strategy) {
  if (entries.size() <= quota) return;
  if (strategy != Strategy::kSccr) {
    entries.resize(quota);  // stored order is the strategy's preference order
    return;
  }
  // Re-select with the same per-cluster lowest-confidence rule.
  std::vector<std::size_t> cluster_ids;
  for (const auto& e : entries) cluster_ids.push_back(e.cluster_id);
  std::vector<std::size_t> distinct = cluster_ids;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  ClusterSet cs;
  cs.centroids.resize(distinct.size());
  for (std::size_t cid : cluster_ids) {
    cs.assignment.push_back(static_cast<std::size_t>(
        std::lower_bound(distinct.begin(), distinct.end(), cid) - distinct.begin()));
  }
  std::vector<Member> members;
  for (const auto& e : entries) members.push_back({e.sample_id, e.confidence});
  const auto keep = select_with_quota(cs, members, quota);
  std::vector<BufferEntry> kept;
  for (std::size_t i : keep) kept.push_back(entries[i]);
  entries = std::move(kept);
}

}  // namespace

ReplayBuffer update_buffer(ReplayBuffer buffer, const SessionData& data,
                           const icp::PromptBank& model,
                           const encoders::Encoders& enc, const ReplayConfig& cfg) {
  if (cfg.strategy == Strategy::kNone || data.train_indices.empty() ||
      data.new_classes.empty()) {
    return buffer;
  }
  if (!data.dataset || !data.projected) {
    throw ContractError("update_buffer: session data incomplete");
  }
  const auto& samples = data.dataset->samples();
  const std::set<ClassId> new_set(data.new_classes.begin(), data.new_classes.end());

  std::set<ClassId> all_classes = new_set;
  for (const auto& [c, _] : buffer.entries()) all_classes.insert(c);
  const std::size_t quota = cfg.budget.quota(all_classes.size());

  const icp::Scorer scorer(model, enc);
  const auto& model_classes = scorer.classes();
  auto column = [&](ClassId c) {
    auto it = std::find(model_classes.begin(), model_classes.end(), c);
    if (it == model_classes.end()) {
      throw ContractError("update_buffer: class " + std::to_string(c) +
                          " missing from the model");
    }
    return static_cast<std::size_t>(it - model_classes.begin());
  };

  // Route each candidate to the new class it is least confident about.
  std::map<ClassId, std::vector<std::pair<std::size_t, double>>> candidates;
  for (std::size_t idx : data.train_indices) {
    const auto& s = samples[idx];
    if (buffer.contains_sample(s.id)) continue;
    const auto sc = scorer.score_projected((*data.projected)[idx]);
    ClassId best = 0;
    double best_p = 2.0;
    for (ClassId c : s.labels) {
      if (!new_set.count(c)) continue;
      const double p = sc.probs[column(c)];
      if (p < best_p) {
        best_p = p;
        best = c;
      }
    }
    if (best_p <= 1.0) candidates[best].push_back({idx, best_p});
  }

  auto& store = buffer.mutable_entries();
  for (ClassId c : data.new_classes) {
    auto it = candidates.find(c);
    if (it == candidates.end() || quota == 0) continue;
    const auto& cands = it->second;

    std::vector<const dataio::Sample*> ptrs;
    std::vector<Tensor> proj;
    std::vector<Member> members;
    for (auto [idx, p] : cands) {
      ptrs.push_back(&samples[idx]);
      proj.push_back((*data.projected)[idx]);
      members.push_back({samples[idx].id, p});
    }
    const auto feats = class_features(ptrs, proj, c, scorer);

    std::vector<std::size_t> chosen;
    std::vector<std::size_t> cluster_of(cands.size(), 0);
    const std::uint64_t class_seed = derive_seed(derive_seed(cfg.seed, data.session), c);
    switch (cfg.strategy) {
      case Strategy::kSccr: {
        const std::size_t m = std::max<std::size_t>(1, std::min(cfg.clusters, quota));
        const ClusterSet cs = kmeans(feats, m, class_seed);
        cluster_of = cs.assignment;
        chosen = select_with_quota(cs, members, quota);
        break;
      }
      case Strategy::kRandom: {
        std::vector<std::size_t> order(cands.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(class_seed);
        rng.shuffle(order);
        if (order.size() > quota) order.resize(quota);
        chosen = order;
        break;
      }
      case Strategy::kMeanFeature: {
        const std::size_t d = feats.front().size();
        std::vector<double> mean(d, 0.0);
        for (const auto& f : feats)
          for (std::size_t t = 0; t < d; ++t) mean[t] += f[t];
        for (double& v : mean) v /= static_cast<double>(feats.size());
        std::vector<double> dist;
        for (const auto& f : feats) dist.push_back(squared_distance(f.data(), mean));
        std::vector<std::size_t> order(cands.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          if (dist[a] != dist[b]) return dist[a] < dist[b];
          return members[a].id < members[b].id;
        });
        if (order.size() > quota) order.resize(quota);
        chosen = order;
        break;
      }
      case Strategy::kNone:
        break;
    }
    auto& slot = store[c];
    for (std::size_t i : chosen) {
      slot.push_back(BufferEntry{members[i].id, c, cluster_of[i], members[i].prob,
                                 data.session, feats[i].checksum()});
    }
  }

  if (cfg.budget.mode == BudgetMode::kTotal) {
    for (auto& [c, v] : store) trim_class(v, quota, cfg.strategy);
  }
  for (auto it = store.begin(); it != store.end();) {
    it = it->second.empty() ? store.erase(it) : std::next(it);
  }
  buffer.check_budget();
  return buffer;
}

}  // namespace mlcil::sccr
