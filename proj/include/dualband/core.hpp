#pragma once

// Shared domain types: frames, trajectories, labels, latents and detection
// events, plus the two trajectory reshaping operations used throughout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dualband/error.hpp"

namespace dualband {

enum class ClassLabel { Success, KnownFailure, OOD, Ambiguous };

inline std::string_view to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::Success: return "Success";
    case ClassLabel::KnownFailure: return "KnownFailure";
    case ClassLabel::OOD: return "OOD";
    case ClassLabel::Ambiguous: return "Ambiguous";
  }
  return "?";
}

inline ClassLabel parse_class_label(std::string_view text) {
  if (text == "Success") return ClassLabel::Success;
  if (text == "KnownFailure") return ClassLabel::KnownFailure;
  if (text == "OOD") return ClassLabel::OOD;
  if (text == "Ambiguous") return ClassLabel::Ambiguous;
  throw InvalidInput("unknown class label: " + std::string(text));
}

// Grayscale observation, row-major intensities in [0, 1].
class Frame {
 public:
  Frame() = default;

  Frame(std::size_t width, std::size_t height, std::vector<float> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    require(width_ > 0 && height_ > 0, "frame dimensions must be positive");
    require(pixels_.size() == width_ * height_, "frame pixel count must equal width*height");
    for (float v : pixels_) {
      require(v >= 0.0f && v <= 1.0f, "frame intensities must lie in [0,1]");
    }
  }

  // Uniform frame.
  static Frame filled(std::size_t width, std::size_t height, float value) {
    return Frame(width, height, std::vector<float>(width * height, value));
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return pixels_.size(); }
  std::span<const float> pixels() const { return pixels_; }
  float at(std::size_t x, std::size_t y) const { return pixels_[y * width_ + x]; }

  bool same_shape(const Frame& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }

  friend bool operator==(const Frame&, const Frame&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<float> pixels_;
};

// Ordered observations tau_t = {o_0, ..., o_t}, with optional ground truth.
class Trajectory {
 public:
  Trajectory() = default;

  Trajectory(std::vector<Frame> frames, double frame_rate,
             std::optional<ClassLabel> truth_class = std::nullopt,
             std::optional<std::size_t> truth_onset = std::nullopt)
      : frames_(std::move(frames)),
        frame_rate_(frame_rate),
        truth_class_(truth_class),
        truth_onset_(truth_onset) {
    require(frame_rate_ > 0.0 && std::isfinite(frame_rate_), "frame rate must be positive");
    for (const auto& f : frames_) {
      require(f.same_shape(frames_.front()), "all frames of a trajectory must share dimensions");
    }
    if (truth_onset_) {
      require(*truth_onset_ < frames_.size(), "truth onset must index a frame");
    }
  }

  std::span<const Frame> frames() const { return frames_; }
  const Frame& frame(std::size_t i) const { return frames_.at(i); }
  std::size_t length() const { return frames_.size(); }
  bool empty() const { return frames_.empty(); }
  double frame_rate() const { return frame_rate_; }
  std::optional<ClassLabel> truth_class() const { return truth_class_; }
  std::optional<std::size_t> truth_onset() const { return truth_onset_; }
  std::size_t width() const { return frames_.empty() ? 0 : frames_.front().width(); }
  std::size_t height() const { return frames_.empty() ? 0 : frames_.front().height(); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;

 private:
  std::vector<Frame> frames_;
  double frame_rate_ = 10.0;
  std::optional<ClassLabel> truth_class_;
  std::optional<std::size_t> truth_onset_;
};

// Codec embedding z_t.
struct LatentVector {
  Eigen::VectorXd values;

  LatentVector() = default;
  explicit LatentVector(Eigen::VectorXd v) : values(std::move(v)) {
    if (!values.allFinite()) throw NumericalError("latent vector has non-finite entries");
  }

  Eigen::Index dim() const { return values.size(); }
};

// Outcome of monitoring one trajectory with a pair of detectors.
//
// Times are post-skip frame indices; the pair (o_{t-1}, o_t) is scored at
// time t, so t runs over 1..pair_count. detected_time is the first t at
// which either detector fires, or pair_count when neither does. Scores and
// margins are the running maxima at that time; `label` is the
// classification once the whole stream has been seen, `label_at_detection`
// the one at detected_time.
struct DetectionEvent {
  std::size_t detected_time = 0;
  ClassLabel label = ClassLabel::Ambiguous;
  ClassLabel label_at_detection = ClassLabel::Ambiguous;
  double score_success = 0.0;
  double score_fail = 0.0;
  double margin_success = 0.0;
  double margin_fail = 0.0;
  double final_score_success = 0.0;
  double final_score_fail = 0.0;
  bool fired_success = false;
  bool fired_fail = false;
  std::optional<std::size_t> first_fire_success;
  std::optional<std::size_t> first_fire_fail;
  std::size_t pair_count = 0;

  friend bool operator==(const DetectionEvent&, const DetectionEvent&) = default;
};

// Cut every trajectory's tail so all share the shortest length.
inline std::vector<Trajectory> trim_to_common_length(std::span<const Trajectory> trajectories) {
  require(!trajectories.empty(), "trim_to_common_length: empty trajectory list");
  std::size_t shortest = trajectories.front().length();
  for (const auto& t : trajectories) {
    require(!t.empty(), "trim_to_common_length: empty trajectory");
    shortest = std::min(shortest, t.length());
  }
  std::vector<Trajectory> out;
  out.reserve(trajectories.size());
  for (const auto& t : trajectories) {
    if (t.length() == shortest) {
      out.push_back(t);
      continue;
    }
    std::vector<Frame> kept(t.frames().begin(), t.frames().begin() + static_cast<std::ptrdiff_t>(shortest));
    // An onset inside the removed tail never manifests in the kept frames.
    auto onset = t.truth_onset();
    if (onset && *onset >= shortest) onset.reset();
    out.emplace_back(std::move(kept), t.frame_rate(), t.truth_class(), onset);
  }
  return out;
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Keep frames 0, skip, 2*skip, ...; the onset maps to the first kept frame at
// or after it. The frame rate is left unchanged: it describes the source
// clock, and callers convert post-skip indices with skip / frame_rate.
inline Trajectory frame_skip(const Trajectory& trajectory, std::size_t skip) {
  require(skip >= 1, "frame_skip: skip must be >= 1");
  if (skip == 1) return trajectory;
  std::vector<Frame> kept;
  kept.reserve(ceil_div(trajectory.length(), skip));
  for (std::size_t i = 0; i < trajectory.length(); i += skip) kept.push_back(trajectory.frame(i));
  std::optional<std::size_t> onset;
  if (trajectory.truth_onset()) onset = ceil_div(*trajectory.truth_onset(), skip);
  return Trajectory(std::move(kept), trajectory.frame_rate(), trajectory.truth_class(), onset);
}

}  // namespace dualband
