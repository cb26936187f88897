#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "dualband/gauge_sim.hpp"

using namespace dualband;

namespace {

ConditionSchedule constant_schedule(ClassLabel cls, ConditionKind kind, std::size_t length, double severity) {
  ConditionSchedule s;
  s.cls = cls;
  s.kind = kind;
  if (severity > 0.0) s.onset = 0;
  s.severity.assign(length, severity);
  return s;
}

SimConfig noiseless() {
  SimConfig c;
  c.noise_sigma = 0.0;
  return c;
}

// Straightforward replicate-edge box filter, one output pixel at a time.
std::vector<double> reference_box(const std::vector<double>& img, int w, int h, int r) {
  std::vector<double> out(img.size());
  const double norm = 1.0 / ((2.0 * r + 1) * (2.0 * r + 1));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int sx = std::clamp(x + dx, 0, w - 1), sy = std::clamp(y + dy, 0, h - 1);
          acc += img[static_cast<std::size_t>(sy * w + sx)];
        }
      }
      out[static_cast<std::size_t>(y * w + x)] = acc * norm;
    }
  }
  return out;
}

}  // namespace

TEST(GaugeSim, ZeroSeverityMatchesCleanRendering) {
  const auto g = draw_gauge_spec(17);
  const auto clean = constant_schedule(ClassLabel::Success, ConditionKind::Centered, 5, 0.0);
  for (auto kind : {ConditionKind::OffFrame, ConditionKind::PartialOcclusion, ConditionKind::WideAngle,
                    ConditionKind::Shadow, ConditionKind::Glare, ConditionKind::Blur}) {
    const auto sched = constant_schedule(ClassLabel::OOD, kind, 5, 0.0);
    for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(render_frame(g, sched, t, 99), render_frame(g, clean, t, 99));
  }
}

TEST(GaugeSim, OffFrameAtFullSeverityLeavesLittleOfTheGaugeVisible) {
  const SimConfig cfg = noiseless();
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto g = draw_gauge_spec(seed);
    auto sched = constant_schedule(ClassLabel::KnownFailure, ConditionKind::OffFrame, 3, 1.0);
    sched.effect.side = static_cast<int>(seed % 4);
    const auto pose = gauge_pose(g, sched, 1, cfg);
    const double nx = pose.cx / static_cast<double>(cfg.width), ny = pose.cy / static_cast<double>(cfg.height);
    EXPECT_TRUE(nx < 0.0 || nx > 1.0 || ny < 0.0 || ny > 1.0) << "seed " << seed;
    // Gauge area via a fine supersampled count over the plane, visible part via the frame.
    const double r = pose.radius;
    std::size_t visible = 0;
    constexpr int kSub = 4;
    for (std::size_t y = 0; y < cfg.height * kSub; ++y) {
      for (std::size_t x = 0; x < cfg.width * kSub; ++x) {
        const double px = (static_cast<double>(x) + 0.5) / kSub, py = (static_cast<double>(y) + 0.5) / kSub;
        if (std::hypot(px - pose.cx, py - pose.cy) <= r) ++visible;
      }
    }
    const double area = std::numbers::pi * r * r * kSub * kSub;
    EXPECT_LE(static_cast<double>(visible) / area, 0.10) << "seed " << seed;
  }
}

TEST(GaugeSim, FullBlurEqualsReferenceBoxConvolution) {
  const SimConfig cfg = noiseless();
  const auto g = draw_gauge_spec(5);
  const auto blur = constant_schedule(ClassLabel::OOD, ConditionKind::Blur, 2, 1.0);
  const auto clean = constant_schedule(ClassLabel::Success, ConditionKind::Centered, 2, 0.0);
  const auto base = render_scene(g, clean, 0, cfg);
  const auto expect = reference_box(base, static_cast<int>(cfg.width), static_cast<int>(cfg.height),
                                    static_cast<int>(cfg.blur_radius));
  const auto frame = render_frame(g, blur, 0, 1, cfg);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    ASSERT_NEAR(frame.pixels()[i], expect[i], 1e-6) << i;
  }
}

TEST(GaugeSim, EffectsGrowWithSeverity) {
  const SimConfig cfg = noiseless();
  const auto g = draw_gauge_spec(8);
  const auto clean = render_scene(g, constant_schedule(ClassLabel::Success, ConditionKind::Centered, 1, 0.0), 0, cfg);
  for (auto kind : {ConditionKind::OffFrame, ConditionKind::PartialOcclusion, ConditionKind::WideAngle,
                    ConditionKind::Shadow, ConditionKind::Glare, ConditionKind::Blur}) {
    double prev = 0.0;
    for (double s : {0.25, 0.5, 1.0}) {
      const auto img = render_scene(g, constant_schedule(ClassLabel::OOD, kind, 1, s), 0, cfg);
      double diff = 0.0;
      for (std::size_t i = 0; i < img.size(); ++i) diff += std::abs(img[i] - clean[i]);
      // a moving gauge overlaps its old footprint less at mid severity, so only require change
      if (kind == ConditionKind::OffFrame) {
        EXPECT_GT(diff, 0.0);
      } else {
        EXPECT_GT(diff, prev) << to_string(kind) << " s=" << s;
      }
      prev = diff;
    }
  }
}

TEST(GaugeSim, RenderFrameRejectsOutOfRange) {
  const auto sched = constant_schedule(ClassLabel::Success, ConditionKind::Centered, 3, 0.0);
  EXPECT_THROW(render_frame(draw_gauge_spec(1), sched, 3, 0), InvalidInput);
}

TEST(GaugeSim, GenerateTrajectoryContract) {
  const auto s = generate_trajectory(ClassLabel::Success, 100, 11);
  EXPECT_EQ(s.length(), 100u);
  EXPECT_EQ(s.truth_class(), ClassLabel::Success);
  EXPECT_FALSE(s.truth_onset().has_value());
  EXPECT_TRUE(std::ranges::all_of(draw_schedule(ClassLabel::Success, 100, 11).severity, [](double v) { return v == 0.0; }));

  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto sched = draw_schedule(ClassLabel::KnownFailure, 100, seed);
    ASSERT_TRUE(sched.onset.has_value());
    EXPECT_GE(*sched.onset, 25u);
    EXPECT_LE(*sched.onset, 75u);
  }
  EXPECT_EQ(generate_trajectory(ClassLabel::OOD, 40, 3), generate_trajectory(ClassLabel::OOD, 40, 3));
  EXPECT_THROW(generate_trajectory(ClassLabel::Ambiguous, 40, 3), InvalidInput);
  EXPECT_THROW(generate_trajectory(ClassLabel::Success, 3, 3), InvalidInput);
}

TEST(GaugeSim, OnsetCoversItsWholeRange) {
  std::set<std::size_t> seen;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) seen.insert(*draw_schedule(ClassLabel::OOD, 100, seed).onset);
  EXPECT_EQ(*seen.begin(), 25u);
  EXPECT_EQ(*seen.rbegin(), 75u);
  EXPECT_EQ(seen.size(), 51u);
}

TEST(GaugeSim, ClassKindConsistencyAndMonotoneSeverity) {
  for (auto cls : {ClassLabel::Success, ClassLabel::KnownFailure, ClassLabel::OOD}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto sched = draw_schedule(cls, 60, seed);
      EXPECT_TRUE(kind_allowed(cls, sched.kind));
      for (std::size_t t = 0; t < sched.severity.size(); ++t) {
        EXPECT_GE(sched.severity[t], 0.0);
        EXPECT_LE(sched.severity[t], 1.0);
        if (sched.onset && t < *sched.onset) {
          EXPECT_EQ(sched.severity[t], 0.0);
        }
        if (t > 0) {
          EXPECT_GE(sched.severity[t], sched.severity[t - 1]);
        }
      }
    }
  }
  EXPECT_FALSE(kind_allowed(ClassLabel::KnownFailure, ConditionKind::Glare));
  EXPECT_FALSE(kind_allowed(ClassLabel::OOD, ConditionKind::OffFrame));
}

TEST(GaugeSim, PreOnsetFramesMatchSuccessWithSameSeed) {
  for (std::uint64_t seed : {4u, 9u, 23u}) {
    const auto ok = generate_trajectory(ClassLabel::Success, 60, seed);
    for (auto cls : {ClassLabel::KnownFailure, ClassLabel::OOD}) {
      const auto bad = generate_trajectory(cls, 60, seed);
      const auto onset = *bad.truth_onset();
      for (std::size_t t = 0; t < onset; ++t) ASSERT_EQ(bad.frame(t), ok.frame(t));
      EXPECT_NE(bad.frame(onset), ok.frame(onset));
    }
  }
}

// The listed per-split counts sum to 257, not the quoted total of 290; the
// listed counts are what the accuracy percentages are built on, so they win.
TEST(GaugeSim, DefaultDatasetShape) {
  const SplitCounts counts;
  EXPECT_EQ(counts.train.success, 14u);
  EXPECT_EQ(counts.train.failure, 14u);
  EXPECT_EQ(counts.val.success, 6u);
  EXPECT_EQ(counts.calibration.success, 45u);
  EXPECT_EQ(counts.calibration.failure, 37u);
  EXPECT_EQ(counts.test.success, 45u);
  EXPECT_EQ(counts.test.failure, 37u);
  EXPECT_EQ(counts.total(), 257u);
  const auto plan = plan_dataset(counts, 100, 1000);
  EXPECT_EQ(plan.size(), 257u);
  std::set<std::uint64_t> seeds;
  std::size_t test_ood = 0;
  for (const auto& r : plan) {
    seeds.insert(r.seed);
    if (r.split == "test" && r.truth == ClassLabel::OOD) ++test_ood;
  }
  EXPECT_EQ(seeds.size(), 257u);
  EXPECT_EQ(test_ood, 53u);

  SimConfig small;
  small.width = 16;
  small.height = 12;
  small.length = 4;
  const auto data = generate_dataset(counts, small, 1000);
  EXPECT_EQ(data.size(), 257u);
  EXPECT_EQ(data.train.size(), 28u);
  EXPECT_EQ(data.val.size(), 12u);
  EXPECT_EQ(data.calibration.size(), 82u);
  EXPECT_EQ(data.test.size(), 135u);
  EXPECT_EQ(generate_dataset(SplitCounts::zero(), small, 1).size(), 0u);
}

TEST(GaugeSim, StridedRenderingMatchesFrameSkip) {
  SimConfig cfg;
  cfg.width = 24;
  cfg.height = 18;
  cfg.length = 31;
  for (const auto cls : {ClassLabel::Success, ClassLabel::KnownFailure, ClassLabel::OOD}) {
    for (std::uint64_t seed : {3u, 77u, 901u}) {
      const auto full = generate_trajectory(cls, cfg, seed);
      for (std::size_t stride : {1u, 2u, 3u}) {
        const auto a = frame_skip(full, stride);
        const auto b = generate_strided(cls, cfg, seed, stride);
        ASSERT_EQ(a.length(), b.length());
        EXPECT_EQ(a.truth_onset(), b.truth_onset());
        for (std::size_t i = 0; i < a.length(); ++i) EXPECT_EQ(a.frame(i), b.frame(i));
      }
    }
  }
}
