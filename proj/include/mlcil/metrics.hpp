#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlcil/numgrad.hpp"

namespace mlcil::metrics {

using ClassId = std::size_t;

/// Average of precision at the rank of each positive. Items are ranked by
/// descending score; equal scores keep ascending index order. Returns nullopt
/// when there is no positive label.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels);

/// Row-major N x C binary matrix.
struct LabelMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  double f1() const;
};

/// Per-class counts with prediction = prob >= threshold.
std::vector<Counts> class_counts(const numgrad::Tensor& probs,
                                 const LabelMatrix& labels, double threshold);

struct F1Scores {
  double cf1 = 0.0;  // mean of per-class F1
  double of1 = 0.0;  // F1 of pooled counts
};

F1Scores f1_scores(const numgrad::Tensor& probs, const LabelMatrix& labels,
                   double threshold = 0.5);

struct ClassAp {
  ClassId class_id;
  double ap;
};

struct SessionReport {
  std::size_t session = 0;
  std::vector<ClassId> seen_classes;
  std::vector<ClassAp> class_ap;  // classes without test positives are absent
  double map = 0.0;
  double cf1 = 0.0;
  double of1 = 0.0;
  std::size_t n_test = 0;

  friend bool operator==(const SessionReport&, const SessionReport&) = default;
};

inline bool operator==(const ClassAp& a, const ClassAp& b) {
  return a.class_id == b.class_id && a.ap == b.ap;
}

/// `probs` and `labels` are N x |seen_classes|, columns parallel to
/// seen_classes.
SessionReport evaluate_session(std::size_t session,
                               std::vector<ClassId> seen_classes,
                               const numgrad::Tensor& probs,
                               const LabelMatrix& labels, double threshold = 0.5);

struct RunReport {
  std::vector<SessionReport> sessions;

  double average_accuracy() const;  // mean of session mAPs
  double last_accuracy() const;     // final session mAP
};

void write_class_ap_csv(std::ostream& os, const std::vector<SessionReport>& sessions);
void write_session_csv(std::ostream& os, const std::vector<SessionReport>& sessions);

/// One row of the summary table.
struct TableRow {
  std::string method;
  std::string buffer;
  RunReport report;
};

/// Markdown table: Method | Buffer Size | Avg.Acc mAP(%) | Last CF1 | Last OF1 |
/// Last mAP(%), percentages with one decimal.
void write_markdown_table(std::ostream& os, const std::vector<TableRow>& rows);

}  // namespace mlcil::metrics
