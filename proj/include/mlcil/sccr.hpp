#pragma once

// Selective confidence cluster replay: per-class aggregated features,
// k-means, lowest-confidence selection per cluster, and the budgeted buffer.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcil/dataio.hpp"
#include "mlcil/encoders.hpp"
#include "mlcil/icp.hpp"
#include "mlcil/numgrad.hpp"

namespace mlcil::sccr {

using icp::ClassId;
using numgrad::Tensor;

/// f_c for `class_id` on every sample, using the bank's current g_c.
/// `projected` holds f_{i->t} per sample. Throws ContractError if a sample
/// lacks the positive label.
std::vector<Tensor> class_features(std::span<const dataio::Sample* const> samples,
                                   std::span<const Tensor> projected,
                                   ClassId class_id, const icp::Scorer& scorer);
std::vector<Tensor> class_features(std::span<const dataio::Sample* const> samples,
                                   ClassId class_id, const icp::PromptBank& bank,
                                   const encoders::Encoders& enc);

struct ClusterSet {
  std::vector<Tensor> centroids;
  std::vector<std::size_t> assignment;  // cluster index per point
  double sse = 0.0;
  std::vector<double> sse_history;      // after every assignment step
  std::size_t iterations = 0;

  std::size_t size() const { return centroids.size(); }
  std::vector<std::size_t> members(std::size_t cluster) const;
};

/// k-means++ seeding then Lloyd iterations until the largest centroid shift
/// is below `tolerance` or `max_iterations` updates ran. Squared Euclidean
/// distance; ties go to the lower centroid index. m is reduced to |points|
/// when there are fewer points.
ClusterSet kmeans(std::span<const Tensor> points, std::size_t m, std::uint64_t seed,
                  std::size_t max_iterations = 100, double tolerance = 1e-6);

double sum_squared_error(std::span<const Tensor> points, const ClusterSet& clusters);

struct Member {
  std::string id;
  double prob = 0.0;  // previous model's probability for the stored class
};

/// Up to k members with the lowest probability; ties by ascending id.
/// Returns member indices in that order.
std::vector<std::size_t> lowest_k(std::span<const Member> members,
                                  std::span<const std::size_t> candidates,
                                  std::size_t k);

/// Union over clusters of lowest_k within each cluster. `members` is parallel
/// to the clustered points. Result is sorted by member index.
std::vector<std::size_t> select_exemplars(const ClusterSet& clusters,
                                          std::span<const Member> members,
                                          std::size_t k);

/// select_exemplars with k = quota / |clusters|, then topped up round-robin
/// across clusters (next-lowest probability first) until `quota` members or
/// all of them are chosen.
std::vector<std::size_t> select_with_quota(const ClusterSet& clusters,
                                           std::span<const Member> members,
                                           std::size_t quota);

enum class BudgetMode { kPerClass, kTotal };

struct Budget {
  BudgetMode mode = BudgetMode::kPerClass;
  std::size_t size = 20;

  /// Per-class allowance when `n_classes` classes share the buffer.
  std::size_t quota(std::size_t n_classes) const;
};

enum class Strategy { kSccr, kRandom, kMeanFeature, kNone };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct ReplayConfig {
  Budget budget;
  std::size_t clusters = 5;
  Strategy strategy = Strategy::kSccr;
  std::uint64_t seed = 0;
};

struct BufferEntry {
  std::string sample_id;
  ClassId class_id = 0;
  std::size_t cluster_id = 0;
  double confidence = 0.0;
  std::size_t stored_session = 0;
  std::uint64_t feature_checksum = 0;

  friend bool operator==(const BufferEntry&, const BufferEntry&) = default;
};

class ReplayBuffer {
 public:
  ReplayBuffer() = default;
  explicit ReplayBuffer(Budget budget) : budget_(budget) {}

  const Budget& budget() const { return budget_; }
  const std::map<ClassId, std::vector<BufferEntry>>& entries() const { return entries_; }
  std::map<ClassId, std::vector<BufferEntry>>& mutable_entries() { return entries_; }

  std::size_t total() const;
  std::size_t count(ClassId c) const;
  bool contains_sample(const std::string& id) const;
  /// All stored entries ordered by (class, position).
  std::vector<const BufferEntry*> all() const;

  /// Throws ContractError if the budget is exceeded.
  void check_budget() const;

  nlohmann::json to_json() const;
  static ReplayBuffer from_json(const nlohmann::json& j);

  friend bool operator==(const ReplayBuffer& a, const ReplayBuffer& b) {
    return a.budget_.mode == b.budget_.mode && a.budget_.size == b.budget_.size &&
           a.entries_ == b.entries_;
  }

 private:
  Budget budget_;
  std::map<ClassId, std::vector<BufferEntry>> entries_;
};

/// Training data of the session that just finished.
struct SessionData {
  const dataio::Dataset* dataset = nullptr;
  std::vector<std::size_t> train_indices;  // fresh samples of the session
  std::vector<ClassId> new_classes;
  std::size_t session = 0;
  /// f_{i->t} for every dataset sample (indexed like dataset->samples()).
  const std::vector<Tensor>* projected = nullptr;
};

/// Stores exemplars of the session's new classes, scored by `model` (the model
/// at the end of that session). Each sample is stored at most once, under the
/// new class for which it has the lowest probability. In total-budget mode all
/// classes are re-trimmed to the shared quota.
ReplayBuffer update_buffer(ReplayBuffer buffer, const SessionData& data,
                           const icp::PromptBank& model,
                           const encoders::Encoders& enc, const ReplayConfig& cfg);

}  // namespace mlcil::sccr
