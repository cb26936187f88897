#pragma once

// Procedural gauge-inspection trajectories for the three outcome classes.
//
// A trajectory renders one gauge (fixed per seed) over time. Success views
// stay centered; known failures drift off frame, get occluded or foreshorten;
// OOD views pick up shadow, glare or blur. Conditions start at the onset and
// ramp linearly to full severity over `ramp_fraction` of the trajectory.
//
// Seed streams: gauge geometry and pixel noise depend only on the seed, so a
// failure/OOD trajectory and a success trajectory with the same seed are
// pixel-identical before the onset. Condition kind, onset and effect
// placement come from a separate stream.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/rng.hpp"

namespace dualband {

enum class ConditionKind { Centered, OffFrame, PartialOcclusion, WideAngle, Shadow, Glare, Blur };

inline std::string_view to_string(ConditionKind kind) {
  switch (kind) {
    case ConditionKind::Centered: return "centered";
    case ConditionKind::OffFrame: return "off_frame";
    case ConditionKind::PartialOcclusion: return "partial_occlusion";
    case ConditionKind::WideAngle: return "wide_angle";
    case ConditionKind::Shadow: return "shadow";
    case ConditionKind::Glare: return "glare";
    case ConditionKind::Blur: return "blur";
  }
  return "?";
}

inline ConditionKind parse_condition_kind(std::string_view text) {
  for (auto k : {ConditionKind::Centered, ConditionKind::OffFrame, ConditionKind::PartialOcclusion,
                 ConditionKind::WideAngle, ConditionKind::Shadow, ConditionKind::Glare, ConditionKind::Blur}) {
    if (to_string(k) == text) return k;
  }
  throw InvalidInput("unknown condition kind: " + std::string(text));
}

inline bool kind_allowed(ClassLabel cls, ConditionKind kind) {
  switch (cls) {
    case ClassLabel::Success: return kind == ConditionKind::Centered;
    case ClassLabel::KnownFailure:
      return kind == ConditionKind::OffFrame || kind == ConditionKind::PartialOcclusion ||
             kind == ConditionKind::WideAngle;
    case ClassLabel::OOD:
      return kind == ConditionKind::Shadow || kind == ConditionKind::Glare || kind == ConditionKind::Blur;
    case ClassLabel::Ambiguous: return false;
  }
  return false;
}

struct GaugeSpec {
  double center_x = 0.5;  // fraction of width
  double center_y = 0.5;  // fraction of height
  double radius = 0.32;   // fraction of min(width, height)
  double needle_angle = 1.0;
  double face_brightness = 0.85;
  double background = 0.3;
  double wobble_phase = 0.0;
};

// Placement of the condition effect; drawn from the condition stream.
struct EffectParams {
  int side = 0;              // 0 left, 1 right, 2 top, 3 bottom
  double direction = 0.0;    // shadow gradient direction, radians
  double glare_x = 0.5;      // glare ellipse center, fraction of width
  double glare_y = 0.5;
};

struct ConditionSchedule {
  ClassLabel cls = ClassLabel::Success;
  ConditionKind kind = ConditionKind::Centered;
  std::optional<std::size_t> onset;
  std::vector<double> severity;  // one entry per frame
  EffectParams effect;

  std::size_t length() const { return severity.size(); }
};

struct SimConfig {
  std::size_t width = 64;
  std::size_t height = 48;
  std::size_t length = 100;
  double frame_rate = 10.0;
  double noise_sigma = 0.01;
  double ramp_fraction = 0.25;
  std::size_t blur_radius = 5;  // box kernel is (2r+1) x (2r+1)
  double shadow_depth = 0.8;     // darkening at full severity, deepest side
  double glare_gain = 1.4;       // additive peak at full severity
};

// Stream tags for derive_seed.
namespace sim_stream {
inline constexpr std::uint64_t kGauge = 1;
inline constexpr std::uint64_t kCondition = 2;
inline constexpr std::uint64_t kNoise = 3;
}  // namespace sim_stream

inline GaugeSpec draw_gauge_spec(std::uint64_t seed) {
  Rng rng(derive_seed(seed, sim_stream::kGauge));
  GaugeSpec g;
  g.center_x = rng.uniform(0.46, 0.54);
  g.center_y = rng.uniform(0.46, 0.54);
  g.radius = rng.uniform(0.28, 0.34);
  g.needle_angle = rng.uniform(0.6, 2.5);
  g.face_brightness = rng.uniform(0.78, 0.9);
  g.background = rng.uniform(0.26, 0.34);
  g.wobble_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return g;
}

// Linear ramp: zero before onset, reaching 1 after `ramp` frames.
inline std::vector<double> severity_ramp(std::size_t length, std::optional<std::size_t> onset, std::size_t ramp) {
  std::vector<double> s(length, 0.0);
  if (!onset) return s;
  ramp = std::max<std::size_t>(ramp, 1);
  for (std::size_t t = *onset; t < length; ++t) {
    s[t] = std::min(1.0, static_cast<double>(t - *onset + 1) / static_cast<double>(ramp));
  }
  return s;
}

inline ConditionSchedule draw_schedule(ClassLabel cls, std::size_t length, std::uint64_t seed,
                                       double ramp_fraction = 0.25) {
  require(cls != ClassLabel::Ambiguous, "simulator cannot generate Ambiguous trajectories");
  require(length >= 4, "trajectory length must be >= 4");
  Rng rng(derive_seed(seed, sim_stream::kCondition));
  ConditionSchedule sched;
  sched.cls = cls;
  // Draw everything unconditionally so the stream layout is class-independent.
  const auto kind_index = rng.uniform_int(0, 2);
  const auto onset = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(length / 4), static_cast<std::int64_t>(3 * length / 4)));
  sched.effect.side = static_cast<int>(rng.uniform_int(0, 3));
  sched.effect.direction = rng.uniform(0.0, 2.0 * std::numbers::pi);
  sched.effect.glare_x = rng.uniform(0.3, 0.7);
  sched.effect.glare_y = rng.uniform(0.3, 0.7);

  static constexpr std::array kFailureKinds{ConditionKind::OffFrame, ConditionKind::PartialOcclusion,
                                            ConditionKind::WideAngle};
  static constexpr std::array kOodKinds{ConditionKind::Shadow, ConditionKind::Glare, ConditionKind::Blur};
  switch (cls) {
    case ClassLabel::Success: sched.kind = ConditionKind::Centered; break;
    case ClassLabel::KnownFailure: sched.kind = kFailureKinds[static_cast<std::size_t>(kind_index)]; break;
    default: sched.kind = kOodKinds[static_cast<std::size_t>(kind_index)]; break;
  }
  if (cls != ClassLabel::Success) sched.onset = onset;
  const auto ramp = static_cast<std::size_t>(std::lround(ramp_fraction * static_cast<double>(length)));
  sched.severity = severity_ramp(length, sched.onset, ramp);
  return sched;
}

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Distance from p to segment [a, b].
inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double u = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  u = std::clamp(u, 0.0, 1.0);
  const double dx = px - (ax + u * vx), dy = py - (ay + u * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Replicate-edge box filter of half-width r, separable.
inline std::vector<double> box_blur(const std::vector<double>& img, std::size_t w, std::size_t h, std::size_t r) {
  const auto side = static_cast<double>(2 * r + 1);
  const auto clampi = [](std::ptrdiff_t i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  std::vector<double> tmp(img.size()), out(img.size());
  const auto ri = static_cast<std::ptrdiff_t>(r);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -ri; k <= ri; ++k) acc += img[y * w + clampi(static_cast<std::ptrdiff_t>(x) + k, w)];
      tmp[y * w + x] = acc / side;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -ri; k <= ri; ++k) acc += tmp[clampi(static_cast<std::ptrdiff_t>(y) + k, h) * w + x];
      out[y * w + x] = acc / side;
    }
  }
  return out;
}

}  // namespace detail

// Per-frame gauge placement after geometric conditions.
struct GaugePose {
  double cx = 0.0, cy = 0.0;  // pixels
  double radius = 0.0;        // pixels
  double x_scale = 1.0;       // horizontal foreshortening
  double needle = 0.0;        // radians
};

inline GaugePose gauge_pose(const GaugeSpec& g, const ConditionSchedule& sched, std::size_t t, const SimConfig& cfg) {
  const double w = static_cast<double>(cfg.width), h = static_cast<double>(cfg.height);
  GaugePose p;
  p.cx = g.center_x * w;
  p.cy = g.center_y * h;
  p.radius = g.radius * std::min(w, h);
  p.needle = g.needle_angle + 0.04 * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / 30.0 + g.wobble_phase);
  const double s = sched.severity[t];
  if (sched.kind == ConditionKind::OffFrame) {
    // At full severity the center sits 0.8 radii beyond the chosen edge.
    const double beyond = 0.8 * p.radius;
    switch (sched.effect.side) {
      case 0: p.cx -= s * (p.cx + beyond); break;
      case 1: p.cx += s * (w - p.cx + beyond); break;
      case 2: p.cy -= s * (p.cy + beyond); break;
      default: p.cy += s * (h - p.cy + beyond); break;
    }
  } else if (sched.kind == ConditionKind::WideAngle) {
    p.x_scale = 1.0 - 0.65 * s;
  }
  return p;
}

// Noise-free scene at frame t (geometry, occlusion and photometric effects).
inline std::vector<double> render_scene(const GaugeSpec& g, const ConditionSchedule& sched, std::size_t t,
                                        const SimConfig& cfg) {
  const std::size_t w = cfg.width, h = cfg.height;
  const auto pose = gauge_pose(g, sched, t, cfg);
  const double r = pose.radius;
  const double rim_inner = 0.86 * r;
  const double needle_len = 0.78 * r;
  const double nx = pose.cx + needle_len * std::cos(pose.needle) * pose.x_scale;
  const double ny = pose.cy - needle_len * std::sin(pose.needle);
  const double s = sched.severity[t];

  std::vector<double> img(w * h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double lx = (px - pose.cx) / pose.x_scale, ly = py - pose.cy;
      const double dist = std::sqrt(lx * lx + ly * ly);
      const double disc = detail::clamp01(r - dist + 0.5);
      const double rim = detail::clamp01(dist - rim_inner + 0.5);
      double face = g.face_brightness * (1.0 - rim) + 0.12 * rim;
      const double needle = detail::clamp01(1.3 - detail::segment_distance(px, py, pose.cx, pose.cy, nx, ny));
      const double hub = detail::clamp01(0.09 * r - dist + 0.5);
      face = face * (1.0 - std::max(needle, hub)) + 0.08 * std::max(needle, hub);
      img[y * w + x] = g.background * (1.0 - disc) + face * disc;
    }
  }

  if (s <= 0.0) return img;

  switch (sched.kind) {
    case ConditionKind::PartialOcclusion: {
      // Dark panel sliding in from one edge until it covers ~60% of the gauge.
      const double extent = sched.effect.side < 2 ? static_cast<double>(w) : static_cast<double>(h);
      const double c = sched.effect.side < 2 ? pose.cx : pose.cy;
      const bool from_low = sched.effect.side % 2 == 0;
      const double target = from_low ? c + 0.2 * r : extent - (c - 0.2 * r);
      const double edge = -1.0 + s * (target + 1.0);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double coord = (sched.effect.side < 2 ? static_cast<double>(x) : static_cast<double>(y)) + 0.5;
          const double depth = from_low ? coord : extent - coord;
          const double cover = detail::clamp01(edge - depth + 0.5);
          auto& v = img[y * w + x];
          v = v * (1.0 - cover) + 0.14 * cover;
        }
      }
      break;
    }
    case ConditionKind::Shadow: {
      const double cd = std::cos(sched.effect.direction), sd = std::sin(sched.effect.direction);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 0.5;
          const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 0.5;
          const double grad = detail::clamp01(0.6 + 1.2 * (u * cd + v * sd));
          img[y * w + x] *= 1.0 - cfg.shadow_depth * s * grad;
        }
      }
      break;
    }
    case ConditionKind::Glare: {
      const double gx = sched.effect.glare_x * static_cast<double>(w);
      const double gy = sched.effect.glare_y * static_cast<double>(h);
      const double ax = 0.45 * static_cast<double>(w), ay = 0.35 * static_cast<double>(h);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dx = (static_cast<double>(x) + 0.5 - gx) / ax;
          const double dy = (static_cast<double>(y) + 0.5 - gy) / ay;
          const double q = std::sqrt(dx * dx + dy * dy);
          const double profile = detail::clamp01(1.6 * (1.0 - q));
          auto& v = img[y * w + x];
          v = std::min(1.0, v + cfg.glare_gain * s * profile);
        }
      }
      break;
    }
    case ConditionKind::Blur: {
      const auto blurred = detail::box_blur(img, w, h, cfg.blur_radius);
      for (std::size_t i = 0; i < img.size(); ++i) img[i] = (1.0 - s) * img[i] + s * blurred[i];
      break;
    }
    default: break;
  }
  return img;
}

// Rendered frame with seeded sensor noise; noise depends on (seed, t) only.
inline Frame render_frame(const GaugeSpec& g, const ConditionSchedule& sched, std::size_t t, std::uint64_t seed,
                          const SimConfig& cfg = {}) {
  require(t < sched.length(), "render_frame: frame index out of range");
  const auto scene = render_scene(g, sched, t, cfg);
  std::vector<float> pixels(scene.size());
  Rng noise(derive_seed(derive_seed(seed, sim_stream::kNoise), t));
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const double v = cfg.noise_sigma > 0.0 ? scene[i] + cfg.noise_sigma * noise.normal() : scene[i];
    pixels[i] = static_cast<float>(detail::clamp01(v));
  }
  return Frame(cfg.width, cfg.height, std::move(pixels));
}

inline Trajectory generate_trajectory(ClassLabel cls, const SimConfig& cfg, std::uint64_t seed) {
  require(cls != ClassLabel::Ambiguous, "generate_trajectory: Ambiguous is not a simulator class");
  require(cfg.length >= 4, "generate_trajectory: length must be >= 4");
  const auto gauge = draw_gauge_spec(seed);
  const auto sched = draw_schedule(cls, cfg.length, seed, cfg.ramp_fraction);
  std::vector<Frame> frames;
  frames.reserve(cfg.length);
  for (std::size_t t = 0; t < cfg.length; ++t) frames.push_back(render_frame(gauge, sched, t, seed, cfg));
  return Trajectory(std::move(frames), cfg.frame_rate, cls, sched.onset);
}

// Renders only frames 0, stride, 2*stride, ...; equals frame_skip(generate_trajectory(...), stride)
// since every frame depends on (seed, t) alone.
inline Trajectory generate_strided(ClassLabel cls, const SimConfig& cfg, std::uint64_t seed, std::size_t stride) {
  require(stride >= 1, "generate_strided: stride must be >= 1");
  require(cls != ClassLabel::Ambiguous, "generate_trajectory: Ambiguous is not a simulator class");
  require(cfg.length >= 4, "generate_trajectory: length must be >= 4");
  const auto gauge = draw_gauge_spec(seed);
  const auto sched = draw_schedule(cls, cfg.length, seed, cfg.ramp_fraction);
  std::vector<Frame> frames;
  frames.reserve(ceil_div(cfg.length, stride));
  for (std::size_t t = 0; t < cfg.length; t += stride) frames.push_back(render_frame(gauge, sched, t, seed, cfg));
  std::optional<std::size_t> onset;
  if (sched.onset) onset = ceil_div(*sched.onset, stride);
  return Trajectory(std::move(frames), cfg.frame_rate, cls, onset);
}

inline Trajectory generate_trajectory(ClassLabel cls, std::size_t length, std::uint64_t seed) {
  SimConfig cfg;
  cfg.length = length;
  return generate_trajectory(cls, cfg, seed);
}

struct ClassCounts {
  std::size_t success = 0;
  std::size_t failure = 0;
  std::size_t ood = 0;

  std::size_t total() const { return success + failure + ood; }
};

struct SplitCounts {
  ClassCounts train{14, 14, 0};
  ClassCounts val{6, 6, 0};
  ClassCounts calibration{45, 37, 0};
  ClassCounts test{45, 37, 53};

  std::size_t total() const { return train.total() + val.total() + calibration.total() + test.total(); }

  static SplitCounts zero() { return {{}, {}, {}, {}}; }
};

struct SimRecord {
  std::string id;
  std::string split;
  ClassLabel truth = ClassLabel::Success;
  ConditionKind kind = ConditionKind::Centered;
  std::optional<std::size_t> onset;
  std::uint64_t seed = 0;
  Trajectory trajectory;
};

struct DatasetSplits {
  std::vector<SimRecord> train, val, calibration, test;

  std::size_t size() const { return train.size() + val.size() + calibration.size() + test.size(); }
};

// One metadata record per trajectory in generation order (no rendering).
// Seeds are base_seed + running index, hence pairwise distinct.
inline std::vector<SimRecord> plan_dataset(const SplitCounts& counts, std::size_t length, std::uint64_t base_seed) {
  std::vector<SimRecord> plan;
  std::uint64_t index = 0;
  const auto add = [&](const char* split, const ClassCounts& c) {
    const std::array<std::pair<ClassLabel, std::size_t>, 3> groups{
        {{ClassLabel::Success, c.success}, {ClassLabel::KnownFailure, c.failure}, {ClassLabel::OOD, c.ood}}};
    for (const auto& [cls, n] : groups) {
      for (std::size_t i = 0; i < n; ++i) {
        SimRecord r;
        r.split = split;
        r.truth = cls;
        r.seed = base_seed + index;
        const auto sched = draw_schedule(cls, length, r.seed);
        r.kind = sched.kind;
        r.onset = sched.onset;
        const std::string tag = cls == ClassLabel::Success ? "s" : cls == ClassLabel::KnownFailure ? "f" : "o";
        r.id = std::string(split) + "_" + tag + std::to_string(i);
        plan.push_back(std::move(r));
        ++index;
      }
    }
  };
  add("train", counts.train);
  add("val", counts.val);
  add("calibration", counts.calibration);
  add("test", counts.test);
  return plan;
}

template <typename ParallelFor>
DatasetSplits generate_dataset(const SplitCounts& counts, const SimConfig& cfg, std::uint64_t base_seed,
                               ParallelFor&& parallel_for) {
  auto plan = plan_dataset(counts, cfg.length, base_seed);
  parallel_for(plan.size(), [&](std::size_t i) { plan[i].trajectory = generate_trajectory(plan[i].truth, cfg, plan[i].seed); });
  DatasetSplits out;
  for (auto& r : plan) {
    auto& dest = r.split == "train" ? out.train : r.split == "val" ? out.val : r.split == "calibration" ? out.calibration : out.test;
    dest.push_back(std::move(r));
  }
  return out;
}

inline DatasetSplits generate_dataset(const SplitCounts& counts, const SimConfig& cfg, std::uint64_t base_seed) {
  return generate_dataset(counts, cfg, base_seed, [](std::size_t n, const auto& fn) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
  });
}

}  // namespace dualband
