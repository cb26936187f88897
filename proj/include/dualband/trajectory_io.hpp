#pragma once

// Trajectory container: text header, then frame-major row-major float32 LE.
// Byte layout is documented in docs/file_formats.md.

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "dualband/core.hpp"
#include "dualband/io_util.hpp"

namespace dualband {

inline constexpr std::string_view kTrajectoryMagic = "DUALBAND-TRAJECTORY 1";

inline void write_trajectory(std::ostream& out, const Trajectory& t) {
  out << kTrajectoryMagic << '\n'
      << "width " << t.width() << '\n'
      << "height " << t.height() << '\n'
      << "frame_rate " << io::fmt(t.frame_rate()) << '\n'
      << "frames " << t.length() << '\n'
      << "truth_class " << (t.truth_class() ? to_string(*t.truth_class()) : "none") << '\n'
      << "truth_onset " << (t.truth_onset() ? std::to_string(*t.truth_onset()) : "none") << '\n'
      << "dtype f32le\n"
      << "end\n";
  for (const auto& frame : t.frames()) {
    for (float v : frame.pixels()) io::write_f32_le(out, v);
  }
}

inline Trajectory read_trajectory(std::istream& in) {
  const auto header = io::Header::read(in, kTrajectoryMagic);
  if (header.get("dtype") != "f32le") throw FormatError("unsupported dtype " + header.get("dtype"));
  const auto width = static_cast<std::size_t>(header.integer("width"));
  const auto height = static_cast<std::size_t>(header.integer("height"));
  const auto count = static_cast<std::size_t>(header.integer("frames"));
  const double rate = header.number("frame_rate");
  std::optional<ClassLabel> truth;
  if (header.get("truth_class") != "none") truth = parse_class_label(header.get("truth_class"));
  std::optional<std::size_t> onset;
  if (header.get("truth_onset") != "none") onset = static_cast<std::size_t>(header.integer("truth_onset"));

  std::vector<Frame> frames;
  frames.reserve(count);
  for (std::size_t f = 0; f < count; ++f) {
    std::vector<float> pixels(width * height);
    for (auto& v : pixels) v = io::read_f32_le(in);
    frames.emplace_back(width, height, std::move(pixels));
  }
  return Trajectory(std::move(frames), rate, truth, onset);
}

inline void save_trajectory(const std::filesystem::path& path, const Trajectory& t) {
  std::ostringstream out(std::ios::binary);
  write_trajectory(out, t);
  io::write_file(path, out.str());
}

inline Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open trajectory " + path.string());
  return read_trajectory(in);
}

}  // namespace dualband
