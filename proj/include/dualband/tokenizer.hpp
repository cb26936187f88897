#pragma once

// Frozen linear patch codec.
//
// A frame is reduced to its grid of patch means m (patch_size x patch_size
// blocks, row-major over the grid). The latent is z = P (m - 0.5) where P is
// a d x G matrix with orthonormal rows drawn from a seeded Gaussian. Decoding
// broadcasts P^T z + 0.5 back over each patch and clamps to [0, 1]. Only the
// header (dims, patch, d, seed) is persisted; P is regenerated from the seed.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/io_util.hpp"
#include "dualband/rng.hpp"

namespace dualband {

class Codec {
 public:
  Codec() = default;

  std::size_t frame_width() const { return width_; }
  std::size_t frame_height() const { return height_; }
  std::size_t patch_size() const { return patch_; }
  std::size_t grid_width() const { return width_ / patch_; }
  std::size_t grid_height() const { return height_ / patch_; }
  std::size_t grid_size() const { return grid_width() * grid_height(); }
  std::size_t latent_dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  const Eigen::MatrixXd& projection() const { return projection_; }

  // Patch index of pixel (x, y).
  std::size_t patch_of(std::size_t x, std::size_t y) const { return (y / patch_) * grid_width() + x / patch_; }

  bool matches(const Frame& f) const { return f.width() == width_ && f.height() == height_; }

  bool same_as(const Codec& other) const {
    return width_ == other.width_ && height_ == other.height_ && patch_ == other.patch_ && dim_ == other.dim_ &&
           seed_ == other.seed_;
  }

  Eigen::VectorXd patch_means(const Frame& frame) const {
    require(matches(frame), "codec: frame dimensions do not match codec");
    Eigen::VectorXd means = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid_size()));
    const auto px = frame.pixels();
    for (std::size_t y = 0; y < height_; ++y) {
      for (std::size_t x = 0; x < width_; ++x) means[static_cast<Eigen::Index>(patch_of(x, y))] += px[y * width_ + x];
    }
    return means / static_cast<double>(patch_ * patch_);
  }

  LatentVector encode(const Frame& frame) const {
    return LatentVector(projection_ * (patch_means(frame).array() - 0.5).matrix());
  }

  // Unclamped patch means P^T z + 0.5.
  Eigen::VectorXd decode_means(const Eigen::VectorXd& z) const {
    require(static_cast<std::size_t>(z.size()) == dim_, "codec: latent dimension mismatch");
    return (projection_.transpose() * z).array() + 0.5;
  }

  // Broadcast patch means to pixels, clamped to [0, 1]; pixels stay in double.
  std::vector<double> broadcast(const Eigen::VectorXd& means) const {
    std::vector<double> out(width_ * height_);
    for (std::size_t y = 0; y < height_; ++y) {
      for (std::size_t x = 0; x < width_; ++x) {
        out[y * width_ + x] = std::clamp(means[static_cast<Eigen::Index>(patch_of(x, y))], 0.0, 1.0);
      }
    }
    return out;
  }

  Frame decode(const LatentVector& z) const {
    const auto pixels = broadcast(decode_means(z.values));
    std::vector<float> f(pixels.begin(), pixels.end());
    return Frame(width_, height_, std::move(f));
  }

  friend Codec build_codec(std::size_t, std::size_t, std::size_t, std::size_t, std::uint64_t);

 private:
  std::size_t width_ = 0, height_ = 0, patch_ = 1, dim_ = 0;
  std::uint64_t seed_ = 0;
  Eigen::MatrixXd projection_;
};

inline Codec build_codec(std::size_t frame_width, std::size_t frame_height, std::size_t patch_size, std::size_t dim,
                         std::uint64_t seed) {
  require(patch_size >= 1, "build_codec: patch size must be >= 1");
  require(frame_width % patch_size == 0 && frame_height % patch_size == 0,
          "build_codec: patch size must divide frame width and height");
  const std::size_t grid = (frame_width / patch_size) * (frame_height / patch_size);
  require(dim >= 1 && dim <= grid, "build_codec: latent dimension must be in [1, patch grid size]");

  Codec c;
  c.width_ = frame_width;
  c.height_ = frame_height;
  c.patch_ = patch_size;
  c.dim_ = dim;
  c.seed_ = seed;

  const auto rows = static_cast<Eigen::Index>(dim), cols = static_cast<Eigen::Index>(grid);
  Eigen::MatrixXd p(rows, cols);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) p(i, j) = rng.normal();
  }
  // Modified Gram-Schmidt, two passes for orthogonality at machine precision.
  for (int pass = 0; pass < 2; ++pass) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index k = 0; k < i; ++k) p.row(i) -= p.row(i).dot(p.row(k)) * p.row(k);
      const double norm = p.row(i).norm();
      if (norm < 1e-12) throw NumericalError("build_codec: degenerate projection draw");
      p.row(i) /= norm;
    }
  }
  c.projection_ = std::move(p);
  return c;
}

// Area-average downscaling by an integer factor (pre-codec compression).
inline Frame area_downscale(const Frame& frame, std::size_t factor) {
  require(factor >= 1, "area_downscale: factor must be >= 1");
  require(frame.width() % factor == 0 && frame.height() % factor == 0,
          "area_downscale: factor must divide frame dimensions");
  if (factor == 1) return frame;
  const std::size_t w = frame.width() / factor, h = frame.height() / factor;
  std::vector<float> out(w * h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t dy = 0; dy < factor; ++dy) {
        for (std::size_t dx = 0; dx < factor; ++dx) acc += frame.at(x * factor + dx, y * factor + dy);
      }
      out[y * w + x] = static_cast<float>(std::clamp(acc / static_cast<double>(factor * factor), 0.0, 1.0));
    }
  }
  return Frame(w, h, std::move(out));
}

inline Trajectory area_downscale(const Trajectory& t, std::size_t factor) {
  if (factor == 1) return t;
  std::vector<Frame> frames;
  frames.reserve(t.length());
  for (const auto& f : t.frames()) frames.push_back(area_downscale(f, factor));
  return Trajectory(std::move(frames), t.frame_rate(), t.truth_class(), t.truth_onset());
}

inline constexpr std::string_view kCodecMagic = "DUALBAND-CODEC 1";

inline std::string codec_header(const Codec& c) {
  std::ostringstream out;
  out << kCodecMagic << '\n'
      << "width " << c.frame_width() << '\n'
      << "height " << c.frame_height() << '\n'
      << "patch " << c.patch_size() << '\n'
      << "dim " << c.latent_dim() << '\n'
      << "seed " << c.seed() << '\n'
      << "end\n";
  return out.str();
}

inline void save_codec(const std::filesystem::path& path, const Codec& c) { io::write_file(path, codec_header(c)); }

inline Codec load_codec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open codec " + path.string());
  const auto h = io::Header::read(in, kCodecMagic);
  return build_codec(h.integer("width"), h.integer("height"), h.integer("patch"), h.integer("dim"), h.integer("seed"));
}

}  // namespace dualband
