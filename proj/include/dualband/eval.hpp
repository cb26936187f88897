#pragma once

// Evaluation folds over event records: per-class accuracy, detection-time
// deltas and score histograms.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "dualband/conformal.hpp"
#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/io_util.hpp"
#include "dualband/scoring.hpp"

namespace dualband {

// Percentages; nullopt when the class has no trajectories.
struct AccuracyCell {
  std::optional<double> ood_success_model;  // OOD truths on which the success detector fired
  std::optional<double> ood_fail_model;     // OOD truths on which the failure detector fired
  std::optional<double> ood_total;          // OOD truths labelled OOD
  std::optional<double> fail_total;         // failure truths labelled KnownFailure
  std::optional<double> success_total;      // success truths labelled Success
  std::size_t n_success = 0, n_failure = 0, n_ood = 0;
};

enum class LabelBasis { Settled, AtDetection };

inline std::optional<double> percent(std::size_t hits, std::size_t n) {
  if (n == 0) return std::nullopt;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

inline AccuracyCell accuracy_cell(std::span<const DetectionEvent> events, std::span<const ClassLabel> truths,
                                  LabelBasis basis = LabelBasis::Settled) {
  require(events.size() == truths.size(), "accuracy_report: events and truths are not aligned");
  std::size_t ood_s = 0, ood_f = 0, ood_ok = 0, fail_ok = 0, succ_ok = 0;
  AccuracyCell c;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    const auto label = basis == LabelBasis::Settled ? e.label : e.label_at_detection;
    switch (truths[i]) {
      case ClassLabel::Success:
        ++c.n_success;
        succ_ok += label == ClassLabel::Success;
        break;
      case ClassLabel::KnownFailure:
        ++c.n_failure;
        fail_ok += label == ClassLabel::KnownFailure;
        break;
      case ClassLabel::OOD:
        ++c.n_ood;
        ood_ok += label == ClassLabel::OOD;
        ood_s += e.fired_success;
        ood_f += e.fired_fail;
        break;
      case ClassLabel::Ambiguous: throw InvalidInput("accuracy_report: Ambiguous is not a truth class");
    }
  }
  c.ood_success_model = percent(ood_s, c.n_ood);
  c.ood_fail_model = percent(ood_f, c.n_ood);
  c.ood_total = percent(ood_ok, c.n_ood);
  c.fail_total = percent(fail_ok, c.n_failure);
  c.success_total = percent(succ_ok, c.n_success);
  return c;
}

struct AccuracyRow {
  Metric metric = Metric::LatentPredictionError;
  double alpha = 0.1;
  LabelBasis basis = LabelBasis::Settled;
  AccuracyCell cell;
};

using GroupKey = std::pair<std::size_t, double>;  // (metric index, alpha)

namespace detail {

inline std::size_t metric_index(Metric m) {
  return static_cast<std::size_t>(std::find(kAllMetrics.begin(), kAllMetrics.end(), m) - kAllMetrics.begin());
}

// Records grouped by (metric, alpha), metrics in enumeration order and
// alphas descending (90%, 95%, 100% thresholds).
inline std::vector<std::pair<GroupKey, std::vector<const EventRecord*>>> group_records(
    std::span<const EventRecord> records) {
  std::map<GroupKey, std::vector<const EventRecord*>> groups;
  for (const auto& r : records) groups[{metric_index(r.metric), -r.alpha}].push_back(&r);
  std::vector<std::pair<GroupKey, std::vector<const EventRecord*>>> out;
  for (auto& [k, v] : groups) out.push_back({{k.first, -k.second}, std::move(v)});
  return out;
}

}  // namespace detail

// One row per (metric, alpha) present, restricted to alpha_grid if non-empty.
inline std::vector<AccuracyRow> accuracy_report(std::span<const EventRecord> records, std::span<const double> alpha_grid = {},
                                                LabelBasis basis = LabelBasis::Settled) {
  std::vector<AccuracyRow> rows;
  for (const auto& [key, group] : detail::group_records(records)) {
    if (!alpha_grid.empty() && std::find(alpha_grid.begin(), alpha_grid.end(), key.second) == alpha_grid.end()) continue;
    std::vector<DetectionEvent> events;
    std::vector<ClassLabel> truths;
    for (const auto* r : group) {
      if (!r->truth) throw InvalidInput("accuracy_report: record '" + r->id + "' has no truth class");
      events.push_back(r->event);
      truths.push_back(*r->truth);
    }
    rows.push_back({kAllMetrics[key.first], key.second, basis, accuracy_cell(events, truths, basis)});
  }
  return rows;
}

struct DeltaStats {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t count = 0;
};

inline DeltaStats delta_stats(std::span<const double> deltas) {
  DeltaStats s;
  s.count = deltas.size();
  if (deltas.empty()) return s;
  double sum = 0.0;
  for (double d : deltas) sum += d;
  s.mean = sum / static_cast<double>(deltas.size());
  if (deltas.size() > 1) {
    double ss = 0.0;
    for (double d : deltas) ss += (d - s.mean) * (d - s.mean);
    s.standard_error = std::sqrt(ss / static_cast<double>(deltas.size() - 1)) / std::sqrt(static_cast<double>(deltas.size()));
  }
  return s;
}

// Reference time for a record: the post-skip onset for failure/OOD truths,
// the end of the stream for successes (there is nothing to detect).
inline double reference_time(const EventRecord& r) {
  if (!r.truth) throw InvalidInput("detection_time_report: record '" + r.id + "' has no truth class");
  if (*r.truth == ClassLabel::Success) return static_cast<double>(r.event.pair_count);
  if (!r.onset) throw InvalidInput("detection_time_report: record '" + r.id + "' has no onset");
  return static_cast<double>(*r.onset);
}

inline double step_seconds(const EventRecord& r) { return static_cast<double>(r.skip) / r.frame_rate; }

inline double detection_delta_seconds(const EventRecord& r) {
  return (static_cast<double>(r.event.detected_time) - reference_time(r)) * step_seconds(r);
}

struct DeltaRow {
  Metric metric = Metric::LatentPredictionError;
  double alpha = 0.1;
  ClassLabel truth = ClassLabel::Success;
  DeltaStats combined;                     // k-hat of the detector pair
  std::optional<DeltaStats> success_model; // first firing of each detector alone
  std::optional<DeltaStats> fail_model;
};

inline std::vector<DeltaRow> detection_time_report(std::span<const EventRecord> records,
                                                   std::span<const double> alpha_grid = {}) {
  std::vector<DeltaRow> rows;
  for (const auto& [key, group] : detail::group_records(records)) {
    if (!alpha_grid.empty() && std::find(alpha_grid.begin(), alpha_grid.end(), key.second) == alpha_grid.end()) continue;
    for (auto cls : {ClassLabel::Success, ClassLabel::KnownFailure, ClassLabel::OOD}) {
      std::vector<double> combined, by_s, by_f;
      for (const auto* r : group) {
        if (r->truth != cls) continue;
        const double ref = reference_time(*r), step = step_seconds(*r);
        combined.push_back(detection_delta_seconds(*r));
        if (r->event.first_fire_success) by_s.push_back((static_cast<double>(*r->event.first_fire_success) - ref) * step);
        if (r->event.first_fire_fail) by_f.push_back((static_cast<double>(*r->event.first_fire_fail) - ref) * step);
      }
      if (combined.empty()) continue;
      DeltaRow row{kAllMetrics[key.first], key.second, cls, delta_stats(combined), std::nullopt, std::nullopt};
      if (!by_s.empty()) row.success_model = delta_stats(by_s);
      if (!by_f.empty()) row.fail_model = delta_stats(by_f);
      rows.push_back(row);
    }
  }
  return rows;
}

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::map<std::string, std::vector<std::size_t>> counts;
  std::map<std::string, std::size_t> totals;
  double threshold = 0.0;

  std::size_t bins() const { return edges.size() - 1; }
};

// Range [min(0, smallest score), largest score]; the top edge is inclusive.
inline Histogram histogram_export(const std::map<std::string, std::vector<double>>& scores_by_class, double threshold,
                                  std::size_t bins = 30) {
  require(bins >= 1, "histogram_export: need at least one bin");
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& [cls, scores] : scores_by_class) {
    for (double s : scores) {
      if (!std::isfinite(s)) throw NumericalError("histogram_export: non-finite score");
      lo = std::min(lo, s);
      hi = any ? std::max(hi, s) : std::max(0.0, s);
      any = true;
    }
  }
  if (hi <= lo) hi = lo + 1.0;
  Histogram h;
  h.threshold = threshold;
  h.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  h.edges.back() = hi;
  for (const auto& [cls, scores] : scores_by_class) {
    auto& c = h.counts[cls];
    c.assign(bins, 0);
    for (double s : scores) {
      auto b = static_cast<std::size_t>((s - lo) / (hi - lo) * static_cast<double>(bins));
      b = std::min(b, bins - 1);
      // guard against rounding at the computed edges
      while (b > 0 && s < h.edges[b]) --b;
      while (b + 1 < bins && s >= h.edges[b + 1]) ++b;
      ++c[b];
    }
    h.totals[cls] = scores.size();
  }
  return h;
}

// Overlap coefficient sum_b min(p_b, q_b) of two normalized class histograms.
inline double histogram_overlap(const Histogram& h, const std::string& a, const std::string& b) {
  const auto& ca = h.counts.at(a);
  const auto& cb = h.counts.at(b);
  const double na = static_cast<double>(h.totals.at(a)), nb = static_cast<double>(h.totals.at(b));
  require(na > 0 && nb > 0, "histogram_overlap: empty class");
  double acc = 0.0;
  for (std::size_t i = 0; i < ca.size(); ++i) acc += std::min(static_cast<double>(ca[i]) / na, static_cast<double>(cb[i]) / nb);
  return acc;
}

// ---- text output ----

namespace detail {

inline std::string cell_text(const std::optional<double>& v) { return v ? io::fixed(*v, 2) : "-"; }

inline std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.insert(0, width - s.size(), ' ');
  return s;
}

inline std::string quantile_label(double alpha) { return io::fixed(100.0 * (1.0 - alpha), 0) + "%"; }

}  // namespace detail

inline std::string_view to_string(LabelBasis b) { return b == LabelBasis::Settled ? "settled" : "at_detection"; }

inline void write_accuracy_table(std::ostream& out, std::span<const AccuracyRow> rows) {
  out << detail::pad("metric", 24) << detail::pad("quantile", 10) << detail::pad("OOD(Succ)", 11)
      << detail::pad("OOD(Fail)", 11) << detail::pad("OOD(Total)", 12) << detail::pad("Fail(Total)", 13)
      << detail::pad("Succ(Total)", 13) << '\n';
  for (const auto& r : rows) {
    out << detail::pad(std::string(to_string(r.metric)), 24) << detail::pad(detail::quantile_label(r.alpha), 10)
        << detail::pad(detail::cell_text(r.cell.ood_success_model), 11)
        << detail::pad(detail::cell_text(r.cell.ood_fail_model), 11)
        << detail::pad(detail::cell_text(r.cell.ood_total), 12) << detail::pad(detail::cell_text(r.cell.fail_total), 13)
        << detail::pad(detail::cell_text(r.cell.success_total), 13) << '\n';
  }
}

inline void write_accuracy_records(std::ostream& out, std::span<const AccuracyRow> rows) {
  const auto v = [](const std::optional<double>& x) { return x ? io::fmt(*x) : std::string("none"); };
  for (const auto& r : rows) {
    out << "accuracy metric=" << to_string(r.metric) << " alpha=" << io::fmt(r.alpha) << " basis=" << to_string(r.basis)
        << " ood_succ=" << v(r.cell.ood_success_model) << " ood_fail=" << v(r.cell.ood_fail_model)
        << " ood_total=" << v(r.cell.ood_total) << " fail_total=" << v(r.cell.fail_total)
        << " succ_total=" << v(r.cell.success_total) << " n_success=" << r.cell.n_success
        << " n_failure=" << r.cell.n_failure << " n_ood=" << r.cell.n_ood << '\n';
  }
}

inline void write_delta_table(std::ostream& out, std::span<const DeltaRow> rows) {
  const auto cell = [](const std::optional<DeltaStats>& s) {
    return s ? io::fixed(s->mean, 3) + " +/- " + io::fixed(s->standard_error, 3) + " (" + std::to_string(s->count) + ")"
             : std::string("-");
  };
  out << detail::pad("metric", 24) << detail::pad("quantile", 10) << detail::pad("class", 15)
      << detail::pad("delta_s (n)", 26) << detail::pad("success-model", 26) << detail::pad("failure-model", 26) << '\n';
  for (const auto& r : rows) {
    out << detail::pad(std::string(to_string(r.metric)), 24) << detail::pad(detail::quantile_label(r.alpha), 10)
        << detail::pad(std::string(to_string(r.truth)), 15) << detail::pad(cell(r.combined), 26)
        << detail::pad(cell(r.success_model), 26) << detail::pad(cell(r.fail_model), 26) << '\n';
  }
}

inline void write_delta_records(std::ostream& out, std::span<const DeltaRow> rows) {
  const auto put = [&](const char* tag, const std::optional<DeltaStats>& s) {
    if (!s) {
      out << ' ' << tag << "_mean=none " << tag << "_se=none " << tag << "_n=0";
      return;
    }
    out << ' ' << tag << "_mean=" << io::fmt(s->mean) << ' ' << tag << "_se=" << io::fmt(s->standard_error) << ' ' << tag
        << "_n=" << s->count;
  };
  for (const auto& r : rows) {
    out << "delta metric=" << to_string(r.metric) << " alpha=" << io::fmt(r.alpha) << " class=" << to_string(r.truth);
    put("combined", r.combined);
    put("success_model", r.success_model);
    put("fail_model", r.fail_model);
    out << '\n';
  }
}

inline void write_histogram(std::ostream& out, std::string_view label, const Histogram& h) {
  out << "histogram " << label << " bins=" << h.bins() << " threshold=" << io::fmt(h.threshold) << '\n';
  out << "edges";
  for (double e : h.edges) out << ' ' << io::fmt(e);
  out << '\n';
  for (const auto& [cls, c] : h.counts) {
    out << "counts " << cls << " n=" << h.totals.at(cls);
    for (auto v : c) out << ' ' << v;
    out << '\n';
  }
}

}  // namespace dualband
