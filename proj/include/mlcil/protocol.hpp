#pragma once

// Incremental session protocol: class schedule, relabeling, the optimizer and
// its learning-rate schedule, session training/evaluation and checkpoints.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mlcil/dataio.hpp"
#include "mlcil/encoders.hpp"
#include "mlcil/icp.hpp"
#include "mlcil/losses.hpp"
#include "mlcil/metrics.hpp"
#include "mlcil/numgrad.hpp"
#include "mlcil/sccr.hpp"

namespace mlcil::protocol {

using icp::ClassId;
using numgrad::Tensor;

struct SessionSchedule {
  std::size_t base_count = 0;
  std::size_t increment = 0;
  std::vector<std::vector<ClassId>> sessions;

  std::size_t size() const { return sessions.size(); }
  /// Classes of sessions 0..s, ascending.
  std::vector<ClassId> seen_through(std::size_t s) const;
  std::size_t session_of(ClassId c) const;
};

/// Contiguous slices of the alphabetically sorted classes: `base` first, then
/// `increment` per session (the last may be smaller). base == 0 means equal
/// sessions of `increment` classes. increment == 0 requires base == |classes|.
SessionSchedule make_schedule(std::span<const std::string> class_names,
                              std::size_t base, std::size_t increment);

/// Explicit session lists by class name. Must be disjoint and cover every
/// class exactly once.
SessionSchedule schedule_from_lists(std::span<const std::string> class_names,
                                    const std::vector<std::vector<std::string>>& sessions);

/// Binary labels over `label_space`; a class is positive only if the sample
/// carries it and it lies in `scope`.
std::vector<std::uint8_t> relabel(const dataio::Sample& sample,
                                  std::span<const ClassId> label_space,
                                  std::span<const ClassId> scope);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 1.6e-3;
  double incremental_lr = 1.6e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  double f1_threshold = 0.5;

  void validate() const;
};

/// Linear warm-up from peak/25 over the first 30% of steps, then cosine
/// annealing to peak/100 at the last step.
class OneCycleSchedule {
 public:
  OneCycleSchedule(double peak, std::size_t total_steps, double warmup_fraction = 0.3,
                   double start_divisor = 25.0, double end_divisor = 100.0);

  double lr(std::size_t step) const;
  std::size_t peak_step() const { return peak_step_; }
  std::size_t total_steps() const { return total_; }

 private:
  double peak_, start_, end_;
  std::size_t total_, peak_step_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;  // decoupled
};

/// Adam with bias correction and decoupled weight decay.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// One update. `step_idx` is 0-based; moments are allocated on first use.
  /// Throws NumericError on a non-finite gradient.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads,
            double lr);

  std::size_t steps_taken() const { return t_; }
  void reset();

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Frozen model at the end of a session.
struct ModelSnapshot {
  icp::PromptBank bank;
  losses::PromptSnapshot text;
  std::uint64_t checksum = 0;

  static ModelSnapshot capture(const icp::PromptBank& bank,
                               const encoders::Encoders& enc);
};

struct ProtocolOptions {
  icp::IcpConfig icp;
  losses::LossConfig loss;
  sccr::ReplayConfig replay;
  TrainConfig train;
  bool tpc = true;  // include the prompt-consistency term
};

/// Everything fixed for the whole run.
class Context {
 public:
  Context(const dataio::Dataset& data, SessionSchedule schedule,
          const encoders::Encoders& enc, ProtocolOptions options);

  const dataio::Dataset& dataset() const { return *data_; }
  const SessionSchedule& schedule() const { return schedule_; }
  const encoders::Encoders& encoders() const { return *enc_; }
  const ProtocolOptions& options() const { return options_; }
  /// f_{i->t} per dataset sample.
  const std::vector<Tensor>& projected() const { return projected_; }

 private:
  const dataio::Dataset* data_;
  SessionSchedule schedule_;
  const encoders::Encoders* enc_;
  ProtocolOptions options_;
  std::vector<Tensor> projected_;
};

struct ExperimentState {
  icp::PromptBank bank;
  sccr::ReplayBuffer buffer;
  std::optional<ModelSnapshot> previous;
  std::vector<metrics::SessionReport> reports;
  std::size_t next_session = 0;
};

ExperimentState initial_state(const Context& ctx);

/// One training example of D = D_fresh U R.
struct TrainItem {
  std::size_t sample_index;
  std::vector<std::uint8_t> labels;  // over seen_through(session)
  bool replayed = false;
};

/// Fresh samples carrying a class of the session, labeled within the session
/// classes, merged with replayed samples labeled within their stored scope.
/// A sample present in both keeps the union of scopes. Ordered by sample index.
std::vector<TrainItem> build_training_set(const Context& ctx, const ExperimentState& state,
                                          std::size_t session);

/// Test split scored over seen_through(session).
metrics::SessionReport evaluate(const Context& ctx, const icp::PromptBank& bank,
                                std::size_t session);

/// Adds the session's prompts, trains, snapshots, updates the buffer and
/// evaluates.
std::pair<ExperimentState, metrics::SessionReport> run_session(
    const Context& ctx, ExperimentState state, std::size_t session);

metrics::RunReport run_all(const Context& ctx);

// Checkpoint files of one session directory.
nlohmann::json bank_to_json(const icp::PromptBank& bank);
icp::PromptBank bank_from_json(const nlohmann::json& j);

struct Checkpoint {
  icp::PromptBank bank;
  sccr::ReplayBuffer buffer;
  metrics::SessionReport report;
};

/// Writes bank.json, buffer.json, report.csv and class_ap.csv into `dir`.
void save_checkpoint(const std::filesystem::path& dir, const ExperimentState& state,
                     const metrics::SessionReport& report);
/// Reads a session directory; seen classes and n_test are taken from `ctx`.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const Context& ctx,
                           std::size_t session);

}  // namespace mlcil::protocol
