#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "dualband/conformal.hpp"
#include "dualband/gauge_sim.hpp"
#include "dualband/rng.hpp"

using namespace dualband;

namespace {

std::vector<double> one_to(int n) {
  std::vector<double> v;
  for (int i = 1; i <= n; ++i) v.push_back(i);
  return v;
}

// Earliest 1-based time at which either running max exceeds its threshold.
std::size_t brute_force_khat(const std::vector<double>& s, const std::vector<double>& f, double es, double ef) {
  for (std::size_t t = 1; t <= s.size(); ++t) {
    double ms = s[0], mf = f[0];
    for (std::size_t i = 1; i < t; ++i) ms = std::max(ms, s[i]), mf = std::max(mf, f[i]);
    if (ms > es || mf > ef) return t;
  }
  return s.size();
}

}  // namespace

TEST(Calibrate, HandQuantiles) {
  const auto ten = one_to(10);
  EXPECT_EQ(calibrate_threshold(ten, 0.0).eta, 10.0);
  EXPECT_EQ(calibrate_threshold(ten, 0.1).eta, 10.0);
  EXPECT_EQ(calibrate_threshold(ten, 0.1).rank, 10u);
  const auto nineteen = one_to(19);
  EXPECT_EQ(calibrate_threshold(nineteen, 0.1).rank, 18u);
  EXPECT_EQ(calibrate_threshold(nineteen, 0.1).eta, 18.0);
  EXPECT_EQ(calibrate_threshold(nineteen, 0.05).eta, 19.0);
  EXPECT_EQ(calibrate_threshold(nineteen, 1.0).eta, 1.0);
  EXPECT_THROW(calibrate_threshold(std::vector<double>{}, 0.1), InvalidInput);
  EXPECT_THROW(calibrate_threshold(ten, 1.5), InvalidInput);
  EXPECT_THROW(calibrate_threshold(ten, -0.1), InvalidInput);
}

TEST(Calibrate, DefaultCalibrationSizes) {
  // 45 success / 37 failure calibration trajectories
  EXPECT_EQ(conformal_rank(45, 0.1), 42u);
  EXPECT_EQ(conformal_rank(45, 0.05), 44u);
  EXPECT_EQ(conformal_rank(45, 0.0), 45u);
  EXPECT_EQ(conformal_rank(37, 0.1), 35u);
  EXPECT_EQ(conformal_rank(37, 0.05), 37u);
}

TEST(Calibrate, SelectionMatchesFullSort) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 300));
    std::vector<double> scores(n);
    for (auto& s : scores) s = rng.uniform_int(0, 20) == 0 ? 1.0 : rng.normal();  // include ties
    const double alpha = rng.uniform();
    auto sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const auto t = calibrate_threshold(scores, alpha);
    EXPECT_EQ(t.eta, sorted[t.rank - 1]);
    const double k = std::ceil(static_cast<double>(n + 1) * (1.0 - alpha));
    if (k <= static_cast<double>(n)) {
      EXPECT_LE(std::abs(static_cast<double>(t.rank) - k), 1.0);
    }
  }
}

TEST(Calibrate, AlphaZeroContainsEveryCalibrationScore) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(82);
    for (auto& s : scores) s = rng.normal(1.0, 2.0);
    const auto t = calibrate_threshold(scores, 0.0);
    EXPECT_EQ(std::count_if(scores.begin(), scores.end(), [&](double s) { return exceeds(s, t); }), 0);
  }
}

TEST(Calibrate, MarginalCoverageOnExchangeableScores) {
  Rng rng(7);
  for (double alpha : {0.1, 0.05}) {
    double fp = 0.0;
    const int reps = 400;
    for (int r = 0; r < reps; ++r) {
      std::vector<double> cal(200);
      for (auto& s : cal) s = rng.normal();
      const auto t = calibrate_threshold(cal, alpha);
      int over = 0;
      for (int i = 0; i < 200; ++i) over += exceeds(rng.normal(), t);
      fp += over / 200.0;
    }
    EXPECT_LE(fp / reps, alpha + 1.0 / 201.0 + 0.005);
    EXPECT_GE(fp / reps, alpha - 1.0 / 201.0 - 0.01);
  }
}

TEST(Decide, StrictInequality) {
  Threshold t;
  t.eta = 0.5;
  EXPECT_FALSE(exceeds(0.5, t));
  EXPECT_TRUE(exceeds(0.6, t));
}

TEST(Decide, MonotoneInPrefixLength) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    BandTracker tracker(rng.uniform(0.5, 1.5), 1e9, AmbiguityPolicy::ReportAmbiguous);
    bool was = false;
    for (int i = 0; i < 40; ++i) {
      tracker.push(rng.uniform(0.0, 2.0), 0.0);
      if (was) {
        EXPECT_TRUE(tracker.fired_success());
      }
      was = tracker.fired_success();
    }
  }
}

TEST(Classify, TruthTable) {
  EXPECT_EQ(classify(false, true), ClassLabel::Success);
  EXPECT_EQ(classify(true, false), ClassLabel::KnownFailure);
  EXPECT_EQ(classify(true, true), ClassLabel::OOD);
  EXPECT_EQ(classify(false, false), ClassLabel::Ambiguous);
  EXPECT_EQ(classify(false, false, AmbiguityPolicy::TreatAsSuccess), ClassLabel::Success);
  EXPECT_EQ(classify(false, false, AmbiguityPolicy::MarginArgmin, -0.5, -0.1), ClassLabel::Success);
  EXPECT_EQ(classify(false, false, AmbiguityPolicy::MarginArgmin, -0.1, -0.5), ClassLabel::KnownFailure);
  EXPECT_EQ(classify(false, false, AmbiguityPolicy::MarginArgmin, -0.2, -0.2), ClassLabel::Ambiguous);
  // policies only govern (0,0)
  for (auto p : {AmbiguityPolicy::ReportAmbiguous, AmbiguityPolicy::MarginArgmin, AmbiguityPolicy::TreatAsSuccess}) {
    EXPECT_EQ(classify(true, true, p, -1, 1), ClassLabel::OOD);
    EXPECT_EQ(classify(false, true, p, -1, 1), ClassLabel::Success);
    EXPECT_EQ(classify(true, false, p, 1, -1), ClassLabel::KnownFailure);
  }
}

TEST(RecommendAction, FollowsLabels) {
  EXPECT_EQ(recommend_action(ClassLabel::Success), Action::Idle);
  EXPECT_EQ(recommend_action(ClassLabel::KnownFailure), Action::RecordAndRevisit);
  EXPECT_EQ(recommend_action(ClassLabel::OOD), Action::ZoomAndReprocess);
  EXPECT_EQ(recommend_action(ClassLabel::Ambiguous), Action::RecordAndRevisit);
}

TEST(Monitor, FailureBandExceededAtPairSeven) {
  std::vector<double> s(12, 0.1), f(12, 0.1);
  f[6] = 2.0;  // the seventh pair
  const auto e = monitor_series(s, f, 1.0, 1.0, AmbiguityPolicy::ReportAmbiguous);
  EXPECT_EQ(e.detected_time, 7u);
  EXPECT_EQ(e.label, ClassLabel::Success);
  EXPECT_EQ(e.label_at_detection, ClassLabel::Success);
  EXPECT_EQ(e.first_fire_fail, std::optional<std::size_t>(7));
  EXPECT_FALSE(e.first_fire_success.has_value());
}

TEST(Monitor, BothExceededFirstAtPairThree) {
  std::vector<double> s(8, 0.0), f(8, 0.0);
  s[2] = 3.0;
  f[2] = 3.0;
  const auto e = monitor_series(s, f, 1.0, 1.0, AmbiguityPolicy::ReportAmbiguous);
  EXPECT_EQ(e.detected_time, 3u);
  EXPECT_EQ(e.label, ClassLabel::OOD);
  EXPECT_EQ(e.label_at_detection, ClassLabel::OOD);
  EXPECT_NEAR(e.margin_success, 2.0, 1e-15);
}

TEST(Monitor, NothingFiresGivesEndOfStreamAndPolicyLabel) {
  std::vector<double> s(5, 0.2), f(5, 0.4);
  const auto e = monitor_series(s, f, 1.0, 1.0, AmbiguityPolicy::MarginArgmin);
  EXPECT_EQ(e.detected_time, 5u);
  EXPECT_EQ(e.label, ClassLabel::Success);
  EXPECT_EQ(monitor_series(s, f, 1.0, 1.0, AmbiguityPolicy::ReportAmbiguous).label, ClassLabel::Ambiguous);
}

TEST(Monitor, SettledLabelCanDifferFromLabelAtDetection) {
  std::vector<double> s{0, 0, 5, 0, 0}, f{0, 0, 0, 0, 5};
  const auto e = monitor_series(s, f, 1.0, 1.0, AmbiguityPolicy::ReportAmbiguous);
  EXPECT_EQ(e.detected_time, 3u);
  EXPECT_EQ(e.label_at_detection, ClassLabel::KnownFailure);
  EXPECT_EQ(e.label, ClassLabel::OOD);
}

TEST(Monitor, MatchesBruteForceScanOnRandomSeries) {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 60));
    std::vector<double> s(n), f(n);
    for (auto& v : s) v = rng.uniform();
    for (auto& v : f) v = rng.uniform();
    const double es = rng.uniform(0.5, 1.0), ef = rng.uniform(0.5, 1.0);
    const auto e = monitor_series(s, f, es, ef, AmbiguityPolicy::ReportAmbiguous);
    ASSERT_EQ(e.detected_time, brute_force_khat(s, f, es, ef)) << trial;
    const bool any_s = *std::max_element(s.begin(), s.end()) > es;
    const bool any_f = *std::max_element(f.begin(), f.end()) > ef;
    ASSERT_EQ(e.label, classify(any_s, any_f));
  }
}

TEST(Monitor, RejectsMisconfiguredDetectors) {
  SimConfig c;
  c.width = 16;
  c.height = 12;
  c.length = 12;
  c.blur_radius = 2;
  const auto codec = build_codec(16, 12, 2, 8, 1);
  const auto other_codec = build_codec(16, 12, 2, 8, 2);
  Hyperparams h;
  h.hidden = 4;
  const auto ms = TrainedModel::initialize(8, 4, ClassLabel::Success, h);
  const auto mf = TrainedModel::initialize(8, 4, ClassLabel::KnownFailure, h);
  const auto traj = generate_trajectory(ClassLabel::OOD, c, 3);
  Threshold ts{1.0, 0.1, 10, 9, Metric::LatentPredictionError, ClassLabel::Success};
  Threshold tf{1.0, 0.1, 10, 9, Metric::LatentPredictionError, ClassLabel::KnownFailure};
  Detector ds{{Metric::LatentPredictionError, &codec, &ms, nullptr, {}}, ts, ClassLabel::Success};
  Detector df{{Metric::LatentPredictionError, &codec, &mf, nullptr, {}}, tf, ClassLabel::KnownFailure};
  EXPECT_NO_THROW(monitor(traj, ds, df, AmbiguityPolicy::ReportAmbiguous));

  auto wrong_metric = df;
  wrong_metric.scoring.metric = Metric::ReconstructionError;
  wrong_metric.threshold.metric = Metric::ReconstructionError;
  EXPECT_THROW(monitor(traj, ds, wrong_metric, AmbiguityPolicy::ReportAmbiguous), ConfigurationError);
  auto wrong_codec = df;
  wrong_codec.scoring.codec = &other_codec;
  EXPECT_THROW(monitor(traj, ds, wrong_codec, AmbiguityPolicy::ReportAmbiguous), ConfigurationError);
  auto mismatched = df;
  mismatched.threshold.metric = Metric::LatentL2;
  EXPECT_THROW(monitor(traj, ds, mismatched, AmbiguityPolicy::ReportAmbiguous), ConfigurationError);
  EXPECT_THROW(monitor(traj, df, ds, AmbiguityPolicy::ReportAmbiguous), ConfigurationError);

  // decide on the full trajectory agrees with the monitor's settled bits
  const auto e = monitor(traj, ds, df, AmbiguityPolicy::ReportAmbiguous);
  EXPECT_EQ(decide(ds, traj), e.fired_success);
  EXPECT_EQ(decide(df, traj), e.fired_fail);
}

TEST(Artifacts, ThresholdAndEventRoundTrip) {
  std::vector<ThresholdRecord> th{{{0.123456789, 0.05, 45, 44, Metric::Mahalanobis, ClassLabel::Success}, 7, "none"},
                                  {{2.5e-7, 0.1, 37, 35, Metric::TrainingLoss, ClassLabel::KnownFailure}, 7, "00ff"}};
  std::stringstream buf;
  write_thresholds(buf, th, {{"config_hash", "abc"}});
  const auto back = read_thresholds(buf);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].threshold.eta, 0.123456789);
  EXPECT_EQ(back[1].threshold.metric, Metric::TrainingLoss);
  EXPECT_EQ(back[1].model_checksum, "00ff");
  EXPECT_TRUE(find_threshold(back, Metric::Mahalanobis, ClassLabel::Success, 0.05).has_value());
  EXPECT_FALSE(find_threshold(back, Metric::Mahalanobis, ClassLabel::Success, 0.1).has_value());

  std::vector<double> s{0, 0, 5, 0}, f{0, 0, 0, 5};
  EventRecord r{"test_o3", Metric::LatentStdDev, 0.05, ClassLabel::OOD, 2, 2, 10.0,
                monitor_series(s, f, 1.0, 1.0, AmbiguityPolicy::TreatAsSuccess)};
  std::vector<EventRecord> evs{r};
  std::stringstream eb;
  write_events(eb, evs);
  const auto eback = read_events(eb);
  ASSERT_EQ(eback.size(), 1u);
  EXPECT_EQ(eback[0].event, r.event);
  EXPECT_EQ(eback[0].id, "test_o3");
  EXPECT_EQ(eback[0].onset, std::optional<std::size_t>(2));
}
