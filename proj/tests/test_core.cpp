#include <gtest/gtest.h>

#include <sstream>

#include "dualband/core.hpp"
#include "dualband/trajectory_io.hpp"

using namespace dualband;

namespace {

Frame tagged_frame(std::size_t tag, std::size_t w = 3, std::size_t h = 2) {
  std::vector<float> px(w * h);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>((tag * 7 + i) % 11) / 10.0f;
  return Frame(w, h, std::move(px));
}

Trajectory make_trajectory(std::size_t n, std::optional<std::size_t> onset = std::nullopt) {
  std::vector<Frame> frames;
  for (std::size_t i = 0; i < n; ++i) frames.push_back(tagged_frame(i));
  return Trajectory(std::move(frames), 10.0, onset ? std::optional(ClassLabel::KnownFailure) : std::nullopt, onset);
}

}  // namespace

TEST(Frame, RejectsOutOfRangeAndWrongSize) {
  EXPECT_THROW(Frame(2, 2, {0.f, 0.f, 0.f}), InvalidInput);
  EXPECT_THROW(Frame(1, 1, {1.5f}), InvalidInput);
  EXPECT_THROW(Frame(1, 1, {-0.1f}), InvalidInput);
  EXPECT_NO_THROW(Frame(1, 2, {0.f, 1.f}));
}

TEST(Trajectory, InvariantsChecked) {
  EXPECT_THROW(Trajectory({tagged_frame(0, 3, 2), tagged_frame(1, 2, 3)}, 10.0), InvalidInput);
  EXPECT_THROW(make_trajectory(4, 4), InvalidInput);
  EXPECT_NO_THROW(make_trajectory(4, 3));
}

TEST(LatentVector, RejectsNonFinite) {
  Eigen::VectorXd v(2);
  v << 1.0, std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(LatentVector{v}, NumericalError);
}

TEST(ClassLabel, RoundTripsThroughText) {
  for (auto c : {ClassLabel::Success, ClassLabel::KnownFailure, ClassLabel::OOD, ClassLabel::Ambiguous}) {
    EXPECT_EQ(parse_class_label(to_string(c)), c);
  }
  EXPECT_THROW(parse_class_label("bogus"), InvalidInput);
}

TEST(TrimToCommonLength, TrimsToShortest) {
  std::vector<Trajectory> ts{make_trajectory(10), make_trajectory(8), make_trajectory(9)};
  const auto out = trim_to_common_length(ts);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& t : out) EXPECT_EQ(t.length(), 8u);
  // tail trimming: leading frames are untouched
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out[0].frame(i), ts[0].frame(i));
}

TEST(TrimToCommonLength, SingletonAndEqualAreIdentity) {
  std::vector<Trajectory> one{make_trajectory(5)};
  EXPECT_EQ(trim_to_common_length(one)[0], one[0]);
  std::vector<Trajectory> two{make_trajectory(100), make_trajectory(100)};
  const auto out = trim_to_common_length(two);
  EXPECT_EQ(out[0], two[0]);
  EXPECT_EQ(out[1], two[1]);
}

TEST(TrimToCommonLength, Idempotent) {
  std::vector<Trajectory> ts{make_trajectory(7), make_trajectory(4, 2), make_trajectory(6, 5)};
  const auto once = trim_to_common_length(ts);
  const auto twice = trim_to_common_length(once);
  ASSERT_EQ(once.size(), twice.size());
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(once[i], twice[i]);
  EXPECT_EQ(once[1].truth_onset(), std::optional<std::size_t>(2));
  EXPECT_FALSE(once[2].truth_onset().has_value());  // onset fell into the trimmed tail
}

TEST(TrimToCommonLength, RejectsEmpty) {
  EXPECT_THROW(trim_to_common_length(std::vector<Trajectory>{}), InvalidInput);
  std::vector<Trajectory> ts{make_trajectory(3), Trajectory({}, 10.0)};
  EXPECT_THROW(trim_to_common_length(ts), InvalidInput);
}

TEST(FrameSkip, IdentityAndSubsampling) {
  const auto t = make_trajectory(10);
  EXPECT_EQ(frame_skip(t, 1), t);
  const auto s = frame_skip(t, 3);
  ASSERT_EQ(s.length(), 4u);
  const std::size_t idx[] = {0, 3, 6, 9};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s.frame(i), t.frame(idx[i]));
  EXPECT_THROW(frame_skip(t, 0), InvalidInput);
}

TEST(FrameSkip, OnsetRemapsToCeiling) {
  EXPECT_EQ(frame_skip(make_trajectory(10, 5), 2).truth_onset(), std::optional<std::size_t>(3));
  EXPECT_EQ(frame_skip(make_trajectory(10, 6), 2).truth_onset(), std::optional<std::size_t>(3));
  EXPECT_EQ(frame_skip(make_trajectory(10, 0), 4).truth_onset(), std::optional<std::size_t>(0));
}

TEST(FrameSkip, ComposesMultiplicatively) {
  const auto t = make_trajectory(37, 11);
  for (std::size_t a : {1, 2, 3}) {
    for (std::size_t b : {1, 2, 5}) {
      const auto twice = frame_skip(frame_skip(t, a), b);
      const auto direct = frame_skip(t, a * b);
      ASSERT_EQ(twice.length(), direct.length());
      for (std::size_t i = 0; i < direct.length(); ++i) EXPECT_EQ(twice.frame(i), direct.frame(i));
    }
  }
}

TEST(TrajectoryIo, RoundTripIsBitExact) {
  std::vector<Frame> frames;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<float> px(6);
    for (std::size_t j = 0; j < 6; ++j) px[j] = std::nextafter(static_cast<float>(j) / 7.0f, 1.0f);
    px[i] = 1.0f / 3.0f;
    frames.emplace_back(3, 2, std::move(px));
  }
  const Trajectory t(std::move(frames), 12.5, ClassLabel::OOD, 2);
  std::stringstream buf;
  write_trajectory(buf, t);
  const auto back = read_trajectory(buf);
  EXPECT_EQ(back, t);
  EXPECT_EQ(back.truth_class(), t.truth_class());
  EXPECT_EQ(back.truth_onset(), t.truth_onset());
  EXPECT_EQ(back.frame_rate(), 12.5);

  const Trajectory plain = make_trajectory(3);
  std::stringstream buf2;
  write_trajectory(buf2, plain);
  const auto back2 = read_trajectory(buf2);
  EXPECT_EQ(back2, plain);
  EXPECT_FALSE(back2.truth_class().has_value());
}

TEST(TrajectoryIo, RejectsBadMagicAndTruncation) {
  std::stringstream bad("NOT-A-TRAJECTORY\n");
  EXPECT_THROW(read_trajectory(bad), FormatError);
  std::stringstream buf;
  write_trajectory(buf, make_trajectory(2));
  auto bytes = buf.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream cut(bytes);
  EXPECT_THROW(read_trajectory(cut), FormatError);
}
