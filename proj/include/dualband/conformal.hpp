#pragma once

// Split-conformal thresholds, the two decision functions and their
// combination into a class label and a detection time.

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/io_util.hpp"
#include "dualband/scoring.hpp"

namespace dualband {

struct Threshold {
  double eta = 0.0;
  double alpha = 0.1;
  std::size_t n = 0;
  std::size_t rank = 0;  // eta is the rank-th smallest calibration score
  Metric metric = Metric::LatentPredictionError;
  ClassLabel model_class = ClassLabel::Success;
};

// k = ceil((n+1)(1-alpha)) clamped to [1, n]. The product is nudged down by a
// relative 1e-9 so that exact integers such as 20 * 0.9 = 18 are not pushed
// to 19 by representation error in alpha.
inline std::size_t conformal_rank(std::size_t n, double alpha) {
  require(n >= 1, "conformal_rank: empty calibration set");
  require(alpha >= 0.0 && alpha <= 1.0, "conformal_rank: alpha must lie in [0, 1]");
  const double np1 = static_cast<double>(n + 1);
  const double k = std::ceil(np1 * (1.0 - alpha) - 1e-9 * np1);
  return static_cast<std::size_t>(std::clamp(k, 1.0, static_cast<double>(n)));
}

inline Threshold calibrate_threshold(std::span<const double> scores, double alpha,
                                     Metric metric = Metric::LatentPredictionError,
                                     ClassLabel model_class = ClassLabel::Success) {
  require(!scores.empty(), "calibrate_threshold: no calibration scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericalError("calibrate_threshold: non-finite calibration score");
  }
  Threshold t;
  t.alpha = alpha;
  t.n = scores.size();
  t.rank = conformal_rank(t.n, alpha);
  t.metric = metric;
  t.model_class = model_class;
  std::vector<double> work(scores.begin(), scores.end());
  const auto nth = work.begin() + static_cast<std::ptrdiff_t>(t.rank - 1);
  std::nth_element(work.begin(), nth, work.end());
  t.eta = *nth;
  return t;
}

// D = 1 iff the score strictly exceeds eta.
inline bool exceeds(double score, const Threshold& t) { return score > t.eta; }

inline double normalized_margin(double score, double eta) { return (score - eta) / std::max(std::abs(eta), 1e-12); }

enum class AmbiguityPolicy { ReportAmbiguous, MarginArgmin, TreatAsSuccess };

inline std::string_view to_string(AmbiguityPolicy p) {
  switch (p) {
    case AmbiguityPolicy::ReportAmbiguous: return "report_ambiguous";
    case AmbiguityPolicy::MarginArgmin: return "margin_argmin";
    case AmbiguityPolicy::TreatAsSuccess: return "treat_as_success";
  }
  return "?";
}

inline AmbiguityPolicy parse_ambiguity_policy(std::string_view text) {
  for (auto p : {AmbiguityPolicy::ReportAmbiguous, AmbiguityPolicy::MarginArgmin, AmbiguityPolicy::TreatAsSuccess}) {
    if (to_string(p) == text) return p;
  }
  throw InvalidInput("unknown ambiguity policy '" + std::string(text) + "'");
}

// (0,1) -> Success, (1,0) -> KnownFailure, (1,1) -> OOD, (0,0) -> policy.
// MarginArgmin picks the band the trajectory sits deepest inside; an exact
// tie stays Ambiguous.
inline ClassLabel classify(bool d_success, bool d_fail, AmbiguityPolicy policy = AmbiguityPolicy::ReportAmbiguous,
                           double margin_success = 0.0, double margin_fail = 0.0) {
  if (d_success && d_fail) return ClassLabel::OOD;
  if (d_fail) return ClassLabel::Success;
  if (d_success) return ClassLabel::KnownFailure;
  switch (policy) {
    case AmbiguityPolicy::TreatAsSuccess: return ClassLabel::Success;
    case AmbiguityPolicy::MarginArgmin:
      if (margin_success < margin_fail) return ClassLabel::Success;
      if (margin_fail < margin_success) return ClassLabel::KnownFailure;
      return ClassLabel::Ambiguous;
    case AmbiguityPolicy::ReportAmbiguous: break;
  }
  return ClassLabel::Ambiguous;
}

enum class Action { Idle, RecordAndRevisit, ZoomAndReprocess };

inline std::string_view to_string(Action a) {
  switch (a) {
    case Action::Idle: return "idle";
    case Action::RecordAndRevisit: return "record_and_revisit";
    case Action::ZoomAndReprocess: return "zoom_and_reprocess";
  }
  return "?";
}

inline Action recommend_action(ClassLabel label) {
  switch (label) {
    case ClassLabel::Success: return Action::Idle;
    case ClassLabel::OOD: return Action::ZoomAndReprocess;
    case ClassLabel::KnownFailure:
    case ClassLabel::Ambiguous: break;
  }
  return Action::RecordAndRevisit;
}

// A calibrated decision function: how to score plus where the band ends.
struct Detector {
  ScoringContext scoring;
  Threshold threshold;
  ClassLabel model_class = ClassLabel::Success;

  void validate() const {
    scoring.validate();
    if (threshold.metric != scoring.metric) throw ConfigurationError("detector: threshold metric differs from scoring metric");
    if (threshold.model_class != model_class) throw ConfigurationError("detector: threshold model class differs");
    if (scoring.model != nullptr && scoring.model->training_class() != model_class) {
      throw ConfigurationError("detector: model class differs");
    }
  }
};

// D(tau_t) on a (raw, unskipped) trajectory prefix.
inline bool decide(const Detector& detector, const Trajectory& prefix) {
  detector.validate();
  return exceeds(score_trajectory(detector.scoring, prefix).aggregate, detector.threshold);
}

// Streaming state for one trajectory: running maxima of both detectors.
class BandTracker {
 public:
  BandTracker(double eta_success, double eta_fail, AmbiguityPolicy policy)
      : eta_s_(eta_success), eta_f_(eta_fail), policy_(policy) {}

  // Feed the next pair's scores; returns true once either detector has fired.
  bool push(double score_success, double score_fail) {
    if (!std::isfinite(score_success) || !std::isfinite(score_fail)) {
      throw NumericalError("monitor: non-finite score");
    }
    ++t_;
    max_s_ = t_ == 1 ? score_success : std::max(max_s_, score_success);
    max_f_ = t_ == 1 ? score_fail : std::max(max_f_, score_fail);
    if (!first_s_ && max_s_ > eta_s_) first_s_ = t_;
    if (!first_f_ && max_f_ > eta_f_) first_f_ = t_;
    if (detected_ == 0 && (first_s_ || first_f_)) {
      detected_ = t_;
      at_detection_s_ = max_s_;
      at_detection_f_ = max_f_;
    }
    return detected_ != 0;
  }

  std::size_t time() const { return t_; }
  bool fired_success() const { return first_s_.has_value(); }
  bool fired_fail() const { return first_f_.has_value(); }

  ClassLabel current_label() const {
    return classify(fired_success(), fired_fail(), policy_, normalized_margin(max_s_, eta_s_),
                    normalized_margin(max_f_, eta_f_));
  }

  DetectionEvent finish() const {
    require(t_ >= 1, "monitor: no pairs were scored");
    DetectionEvent e;
    e.pair_count = t_;
    e.detected_time = detected_ != 0 ? detected_ : t_;
    e.score_success = detected_ != 0 ? at_detection_s_ : max_s_;
    e.score_fail = detected_ != 0 ? at_detection_f_ : max_f_;
    e.margin_success = normalized_margin(e.score_success, eta_s_);
    e.margin_fail = normalized_margin(e.score_fail, eta_f_);
    e.final_score_success = max_s_;
    e.final_score_fail = max_f_;
    e.fired_success = fired_success();
    e.fired_fail = fired_fail();
    e.first_fire_success = first_s_;
    e.first_fire_fail = first_f_;
    const bool s_at = first_s_ && *first_s_ <= e.detected_time;
    const bool f_at = first_f_ && *first_f_ <= e.detected_time;
    e.label_at_detection = classify(s_at, f_at, policy_, e.margin_success, e.margin_fail);
    e.label = current_label();
    return e;
  }

 private:
  double eta_s_, eta_f_;
  AmbiguityPolicy policy_;
  std::size_t t_ = 0;
  double max_s_ = 0.0, max_f_ = 0.0;
  double at_detection_s_ = 0.0, at_detection_f_ = 0.0;
  std::optional<std::size_t> first_s_, first_f_;
  std::size_t detected_ = 0;  // 0 until a detector fires; times start at 1
};

inline DetectionEvent monitor_series(std::span<const double> success_scores, std::span<const double> fail_scores,
                                     double eta_success, double eta_fail, AmbiguityPolicy policy) {
  require(success_scores.size() == fail_scores.size(), "monitor: score series lengths differ");
  require(!success_scores.empty(), "monitor: empty score series");
  BandTracker tracker(eta_success, eta_fail, policy);
  for (std::size_t i = 0; i < success_scores.size(); ++i) tracker.push(success_scores[i], fail_scores[i]);
  return tracker.finish();
}

inline DetectionEvent monitor(const Trajectory& trajectory, const Detector& success, const Detector& fail,
                              AmbiguityPolicy policy) {
  success.validate();
  fail.validate();
  if (success.model_class != ClassLabel::Success || fail.model_class != ClassLabel::KnownFailure) {
    throw ConfigurationError("monitor: expected a success detector and a failure detector");
  }
  if (success.scoring.metric != fail.scoring.metric) throw ConfigurationError("monitor: detectors use different metrics");
  if (!success.scoring.codec->same_as(*fail.scoring.codec)) throw ConfigurationError("monitor: detectors use different codecs");
  if (success.scoring.options.skip != fail.scoring.options.skip) throw ConfigurationError("monitor: detectors use different skips");
  const auto skipped = frame_skip(trajectory, success.scoring.options.skip);
  const auto s = score_pairs(success.scoring, skipped);
  const auto f = score_pairs(fail.scoring, skipped);
  return monitor_series(s, f, success.threshold.eta, fail.threshold.eta, policy);
}

// ---- artifacts ----

inline constexpr std::string_view kThresholdsMagic = "DUALBAND-THRESHOLDS 1";

struct ThresholdRecord {
  Threshold threshold;
  std::uint64_t codec_seed = 0;
  std::string model_checksum;  // hex, or "none" for stats-only metrics
};

inline void write_thresholds(std::ostream& out, std::span<const ThresholdRecord> records,
                             const std::map<std::string, std::string>& provenance = {}) {
  out << kThresholdsMagic << '\n';
  for (const auto& [k, v] : provenance) out << k << ' ' << v << '\n';
  out << "records " << records.size() << '\n' << "end\n";
  for (const auto& r : records) {
    const auto& t = r.threshold;
    out << to_string(t.metric) << ' ' << to_string(t.model_class) << ' ' << io::fmt(t.alpha) << ' ' << t.n << ' '
        << t.rank << ' ' << io::fmt(t.eta) << ' ' << r.codec_seed << ' ' << r.model_checksum << '\n';
  }
}

inline std::vector<ThresholdRecord> read_thresholds(std::istream& in) {
  const auto h = io::Header::read(in, kThresholdsMagic);
  const auto count = h.integer("records");
  std::vector<ThresholdRecord> out;
  std::string line;
  while (out.size() < count && std::getline(in, line)) {
    const auto p = io::split(line, ' ');
    if (p.size() != 8) throw FormatError("thresholds: malformed record: " + line);
    ThresholdRecord r;
    r.threshold.metric = parse_metric(p[0]);
    r.threshold.model_class = parse_class_label(p[1]);
    r.threshold.alpha = io::parse_double(p[2]);
    r.threshold.n = io::parse_u64(p[3]);
    r.threshold.rank = io::parse_u64(p[4]);
    r.threshold.eta = io::parse_double(p[5]);
    r.codec_seed = io::parse_u64(p[6]);
    r.model_checksum = p[7];
    out.push_back(std::move(r));
  }
  if (out.size() != count) throw FormatError("thresholds: truncated record list");
  return out;
}

inline std::optional<Threshold> find_threshold(std::span<const ThresholdRecord> records, Metric metric,
                                               ClassLabel cls, double alpha) {
  for (const auto& r : records) {
    if (r.threshold.metric == metric && r.threshold.model_class == cls && r.threshold.alpha == alpha) return r.threshold;
  }
  return std::nullopt;
}

// Event records: one line of key=value tokens per monitored trajectory.
struct EventRecord {
  std::string id;
  Metric metric = Metric::LatentPredictionError;
  double alpha = 0.1;
  std::optional<ClassLabel> truth;
  std::optional<std::size_t> onset;  // post-skip frame index
  std::size_t skip = 1;
  double frame_rate = 10.0;
  DetectionEvent event;
};

namespace detail {

inline std::string opt_str(const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : "none"; }

inline std::optional<std::size_t> parse_opt(const std::string& s) {
  if (s == "none") return std::nullopt;
  return io::parse_u64(s);
}

}  // namespace detail

inline void write_event_line(std::ostream& out, const EventRecord& r) {
  const auto& e = r.event;
  out << "id=" << r.id << " metric=" << to_string(r.metric) << " alpha=" << io::fmt(r.alpha)
      << " truth=" << (r.truth ? std::string(to_string(*r.truth)) : "none") << " onset=" << detail::opt_str(r.onset)
      << " skip=" << r.skip << " frame_rate=" << io::fmt(r.frame_rate) << " k=" << e.detected_time
      << " pairs=" << e.pair_count << " label=" << to_string(e.label)
      << " label_at_k=" << to_string(e.label_at_detection) << " action=" << to_string(recommend_action(e.label))
      << " score_s=" << io::fmt(e.score_success) << " score_f=" << io::fmt(e.score_fail)
      << " margin_s=" << io::fmt(e.margin_success) << " margin_f=" << io::fmt(e.margin_fail)
      << " final_s=" << io::fmt(e.final_score_success) << " final_f=" << io::fmt(e.final_score_fail)
      << " fired_s=" << (e.fired_success ? 1 : 0) << " fired_f=" << (e.fired_fail ? 1 : 0)
      << " first_s=" << detail::opt_str(e.first_fire_success) << " first_f=" << detail::opt_str(e.first_fire_fail)
      << '\n';
}

inline EventRecord parse_event_line(const std::string& line) {
  std::map<std::string, std::string> kv;
  for (const auto& tok : io::split(line, ' ')) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("event: malformed token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  const auto get = [&](const std::string& k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("event: missing field '" + k + "'");
    return it->second;
  };
  EventRecord r;
  r.id = get("id");
  r.metric = parse_metric(get("metric"));
  r.alpha = io::parse_double(get("alpha"));
  if (get("truth") != "none") r.truth = parse_class_label(get("truth"));
  r.onset = detail::parse_opt(get("onset"));
  r.skip = io::parse_u64(get("skip"));
  r.frame_rate = io::parse_double(get("frame_rate"));
  auto& e = r.event;
  e.detected_time = io::parse_u64(get("k"));
  e.pair_count = io::parse_u64(get("pairs"));
  e.label = parse_class_label(get("label"));
  e.label_at_detection = parse_class_label(get("label_at_k"));
  e.score_success = io::parse_double(get("score_s"));
  e.score_fail = io::parse_double(get("score_f"));
  e.margin_success = io::parse_double(get("margin_s"));
  e.margin_fail = io::parse_double(get("margin_f"));
  e.final_score_success = io::parse_double(get("final_s"));
  e.final_score_fail = io::parse_double(get("final_f"));
  e.fired_success = get("fired_s") == "1";
  e.fired_fail = get("fired_f") == "1";
  e.first_fire_success = detail::parse_opt(get("first_s"));
  e.first_fire_fail = detail::parse_opt(get("first_f"));
  return r;
}

inline constexpr std::string_view kEventsMagic = "DUALBAND-EVENTS 1";

inline void write_events(std::ostream& out, std::span<const EventRecord> records,
                         const std::map<std::string, std::string>& provenance = {}) {
  out << kEventsMagic << '\n';
  for (const auto& [k, v] : provenance) out << k << ' ' << v << '\n';
  out << "records " << records.size() << '\n' << "end\n";
  for (const auto& r : records) write_event_line(out, r);
}

inline std::vector<EventRecord> read_events(std::istream& in) {
  const auto h = io::Header::read(in, kEventsMagic);
  const auto count = h.integer("records");
  std::vector<EventRecord> out;
  std::string line;
  while (out.size() < count && std::getline(in, line)) out.push_back(parse_event_line(line));
  if (out.size() != count) throw FormatError("events: truncated record list");
  return out;
}

}  // namespace dualband
