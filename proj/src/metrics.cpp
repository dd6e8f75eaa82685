#include "mlcil/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "mlcil/errors.hpp"
#include "mlcil/format.hpp"

namespace mlcil::metrics {

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("average_precision: scores and labels differ in length");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

double Counts::f1() const {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

std::vector<Counts> class_counts(const numgrad::Tensor& probs,
                                 const LabelMatrix& labels, double threshold) {
  if (probs.rank() != 2 || probs.rows() != labels.rows || probs.cols() != labels.cols) {
    throw DimensionError("class_counts: probs " + numgrad::shape_string(probs.shape()) +
                         " vs labels " + std::to_string(labels.rows) + "x" +
                         std::to_string(labels.cols));
  }
  std::vector<Counts> out(labels.cols);
  for (std::size_t r = 0; r < labels.rows; ++r) {
    for (std::size_t c = 0; c < labels.cols; ++c) {
      const bool pred = probs.at(r, c) >= threshold;
      const bool truth = labels.at(r, c) != 0;
      if (pred && truth) ++out[c].tp;
      else if (pred) ++out[c].fp;
      else if (truth) ++out[c].fn;
    }
  }
  return out;
}

F1Scores f1_scores(const numgrad::Tensor& probs, const LabelMatrix& labels,
                   double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("f1 threshold must be in (0, 1)");
  }
  const auto counts = class_counts(probs, labels, threshold);
  F1Scores out;
  Counts pooled;
  for (const Counts& c : counts) {
    out.cf1 += c.f1();
    pooled.tp += c.tp;
    pooled.fp += c.fp;
    pooled.fn += c.fn;
  }
  if (!counts.empty()) out.cf1 /= static_cast<double>(counts.size());
  out.of1 = pooled.f1();
  return out;
}

SessionReport evaluate_session(std::size_t session,
                               std::vector<ClassId> seen_classes,
                               const numgrad::Tensor& probs,
                               const LabelMatrix& labels, double threshold) {
  if (labels.cols != seen_classes.size()) {
    throw DimensionError("evaluate_session: label columns differ from seen classes");
  }
  SessionReport rep;
  rep.session = session;
  rep.n_test = labels.rows;
  std::vector<double> col(labels.rows);
  std::vector<std::uint8_t> ycol(labels.rows);
  double total = 0.0;
  for (std::size_t c = 0; c < seen_classes.size(); ++c) {
    for (std::size_t r = 0; r < labels.rows; ++r) {
      col[r] = probs.at(r, c);
      ycol[r] = labels.at(r, c);
    }
    if (auto ap = average_precision(col, ycol)) {
      rep.class_ap.push_back({seen_classes[c], *ap});
      total += *ap;
    }
  }
  rep.map = rep.class_ap.empty() ? 0.0 : total / static_cast<double>(rep.class_ap.size());
  const F1Scores f1 = f1_scores(probs, labels, threshold);
  rep.cf1 = f1.cf1;
  rep.of1 = f1.of1;
  rep.seen_classes = std::move(seen_classes);
  return rep;
}

double RunReport::average_accuracy() const {
  if (sessions.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : sessions) s += r.map;
  return s / static_cast<double>(sessions.size());
}

double RunReport::last_accuracy() const {
  return sessions.empty() ? 0.0 : sessions.back().map;
}

void write_class_ap_csv(std::ostream& os, const std::vector<SessionReport>& sessions) {
  os << "session,class,ap\n";
  for (const auto& s : sessions) {
    for (const auto& c : s.class_ap) {
      os << s.session << ',' << c.class_id << ',' << format_double(c.ap) << '\n';
    }
  }
}

void write_session_csv(std::ostream& os, const std::vector<SessionReport>& sessions) {
  os << "session,mAP,CF1,OF1\n";
  for (const auto& s : sessions) {
    os << s.session << ',' << format_double(s.map) << ',' << format_double(s.cf1)
       << ',' << format_double(s.of1) << '\n';
  }
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

}  // namespace

void write_markdown_table(std::ostream& os, const std::vector<TableRow>& rows) {
  os << "| Method | Buffer Size | Avg.Acc mAP(%) | Last CF1 | Last OF1 | Last mAP(%) |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    const bool has = !r.sessions.empty();
    os << "| " << row.method << " | " << row.buffer << " | "
       << (r.sessions.size() > 1 ? pct(r.average_accuracy()) : std::string("-"))
       << " | " << (has ? pct(r.sessions.back().cf1) : "-") << " | "
       << (has ? pct(r.sessions.back().of1) : "-") << " | "
       << (has ? pct(r.last_accuracy()) : "-") << " |\n";
  }
}

}  // namespace mlcil::metrics
