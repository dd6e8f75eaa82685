#pragma once

// Experiment configuration (TOML) and the command-line front end.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mlcil/dataio.hpp"
#include "mlcil/encoders.hpp"
#include "mlcil/icp.hpp"
#include "mlcil/losses.hpp"
#include "mlcil/protocol.hpp"
#include "mlcil/sccr.hpp"

namespace mlcil::cli {

// Bad flags or configuration. Exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kData = 3,
  kNumeric = 4,
};

struct ScheduleSpec {
  std::size_t base = 4;
  std::size_t increment = 4;
  std::vector<std::vector<std::string>> sessions;  // overrides base/increment
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string dataset;  // relative to the working directory
  std::uint64_t seed = 0;
  ScheduleSpec schedule;
  sccr::Budget buffer{sccr::BudgetMode::kPerClass, 20};
  std::size_t clusters = 5;
  losses::LossConfig loss;
  protocol::TrainConfig train;
  std::optional<std::uint64_t> encoder_seed;  // defaults to `seed`
  std::size_t d_token = encoders::EncoderConfig{}.d_token;
  std::size_t d_feat = encoders::EncoderConfig{}.d_feat;
  icp::IcpConfig prompt;
  bool icp_context_prompt = true;
  bool tpc = true;
  sccr::Strategy replay_strategy = sccr::Strategy::kSccr;
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2, 3, 4};

  /// Options for the protocol with every seed taken from `seed`.
  protocol::ProtocolOptions options() const;
  /// Region count and width come from the dataset.
  encoders::EncoderConfig encoder_config(const dataio::Dataset& data) const;
  protocol::SessionSchedule make_schedule(const dataio::Dataset& data) const;
  /// Short buffer description for report tables, e.g. "5/class".
  std::string buffer_label() const;
};

/// One `--set section.key=value` override. The value is read as a TOML value
/// and falls back to a plain string.
struct Override {
  std::string key;
  std::string value;
};

Override parse_override(const std::string& text);

/// Parses TOML text. Unknown keys and ill-typed values raise UsageError naming
/// the key. Precedence: overrides > text > `defaults`.
ExperimentConfig parse_config(std::string_view text, const std::string& source,
                              const ExperimentConfig& defaults = {},
                              const std::vector<Override>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path,
                             const ExperimentConfig& defaults = {},
                             const std::vector<Override>& overrides = {});

/// Canonical TOML form; parse_config(to_toml(c)) == c.
std::string to_toml(const ExperimentConfig& cfg);

/// Median over seeds, average of the two middle values for even counts.
double median(std::vector<double> values);

/// "75.9(+1.2)" from fractions.
std::string format_with_delta(double value, double baseline);

/// Runs one command line (without the program name). Output goes to `out`,
/// diagnostics to `err`. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mlcil::cli
