#pragma once

// Pixel-space similarity terms used by the world-model loss: SSIM, a frozen
// random-feature perceptual distance, and a center-weighted MSE. Each term
// offers a value and a gradient with respect to its first image.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/rng.hpp"

namespace dualband {

// Non-owning grayscale image in double precision.
struct ImageView {
  std::span<const double> px;
  std::size_t width = 0;
  std::size_t height = 0;
};

inline std::vector<double> to_double(const Frame& f) { return {f.pixels().begin(), f.pixels().end()}; }

namespace detail {

// Sums over every fully contained k x k window; output is (w-k+1) x (h-k+1).
// Separable sliding sums.
inline std::vector<double> window_sums(std::span<const double> img, std::size_t w, std::size_t h, std::size_t k) {
  const std::size_t ow = w - k + 1, oh = h - k + 1;
  std::vector<double> rows(ow * h), out(ow * oh);
  for (std::size_t y = 0; y < h; ++y) {
    const double* row = img.data() + y * w;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) acc += row[i];
    rows[y * ow] = acc;
    for (std::size_t x = 1; x < ow; ++x) {
      acc += row[x + k - 1] - row[x - 1];
      rows[y * ow + x] = acc;
    }
  }
  for (std::size_t x = 0; x < ow; ++x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) acc += rows[i * ow + x];
    out[x] = acc;
    for (std::size_t y = 1; y < oh; ++y) {
      acc += rows[(y + k - 1) * ow + x] - rows[(y - 1) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

// Adjoint of window_sums: scatter each window coefficient over its pixels.
inline std::vector<double> window_scatter(std::span<const double> coef, std::size_t w, std::size_t h, std::size_t k) {
  const std::size_t ow = w - k + 1, oh = h - k + 1;
  // Pixel (x, y) collects windows with origin in [x-k+1, x] x [y-k+1, y].
  std::vector<double> cols(ow * h, 0.0), out(w * h, 0.0);
  for (std::size_t x = 0; x < ow; ++x) {
    double acc = 0.0;
    for (std::size_t y = 0; y < h; ++y) {
      if (y < oh) acc += coef[y * ow + x];
      if (y >= k) acc -= coef[(y - k) * ow + x];
      cols[y * ow + x] = acc;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    double acc = 0.0;
    for (std::size_t x = 0; x < w; ++x) {
      if (x < ow) acc += cols[y * ow + x];
      if (x >= k) acc -= cols[y * ow + x - k];
      out[y * w + x] = acc;
    }
  }
  return out;
}

}  // namespace detail

struct SsimResult {
  double value = 0.0;
  std::vector<double> grad_a;  // d value / d a, empty unless requested
};

// Single-scale SSIM with a 7x7 uniform window over all fully contained
// windows, sample (n-1) variances, C1 = 0.01^2 and C2 = 0.03^2 for unit range.
inline SsimResult ssim_with_grad(ImageView a, ImageView b, bool want_grad) {
  constexpr std::size_t kWin = 7;
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  require(a.width == b.width && a.height == b.height, "ssim: image dimensions differ");
  require(a.width >= kWin && a.height >= kWin, "ssim: image smaller than the 7x7 window");
  const std::size_t w = a.width, h = a.height;
  const double n = kWin * kWin;

  std::vector<double> aa(w * h), bb(w * h), ab(w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    aa[i] = a.px[i] * a.px[i];
    bb[i] = b.px[i] * b.px[i];
    ab[i] = a.px[i] * b.px[i];
  }
  const auto sa = detail::window_sums(a.px, w, h, kWin), sb = detail::window_sums(b.px, w, h, kWin);
  const auto saa = detail::window_sums(aa, w, h, kWin), sbb = detail::window_sums(bb, w, h, kWin);
  const auto sab = detail::window_sums(ab, w, h, kWin);
  const std::size_t m = sa.size();

  SsimResult out;
  std::vector<double> alpha, beta, gamma;
  if (want_grad) {
    alpha.resize(m);
    beta.resize(m);
    gamma.resize(m);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double mua = sa[i] / n, mub = sb[i] / n;
    const double var_a = (saa[i] - n * mua * mua) / (n - 1.0);
    const double var_b = (sbb[i] - n * mub * mub) / (n - 1.0);
    const double cov = (sab[i] - n * mua * mub) / (n - 1.0);
    const double a1 = 2.0 * mua * mub + kC1, a2 = 2.0 * cov + kC2;
    const double b1 = mua * mua + mub * mub + kC1, b2 = var_a + var_b + kC2;
    const double s = a1 * a2 / (b1 * b2);
    total += s;
    if (want_grad) {
      const double ds_dmu = 2.0 * mub * a2 / (b1 * b2) - s * 2.0 * mua / b1;
      const double ds_dvar = -s / b2;
      const double ds_dcov = 2.0 * a1 / (b1 * b2);
      alpha[i] = ds_dmu / n - ds_dvar * 2.0 * mua / (n - 1.0) - ds_dcov * mub / (n - 1.0);
      beta[i] = 2.0 * ds_dvar / (n - 1.0);
      gamma[i] = ds_dcov / (n - 1.0);
    }
  }
  out.value = total / static_cast<double>(m);
  if (want_grad) {
    const auto ga = detail::window_scatter(alpha, w, h, kWin);
    const auto gb = detail::window_scatter(beta, w, h, kWin);
    const auto gc = detail::window_scatter(gamma, w, h, kWin);
    out.grad_a.resize(w * h);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < w * h; ++i) out.grad_a[i] = inv_m * (ga[i] + a.px[i] * gb[i] + b.px[i] * gc[i]);
  }
  return out;
}

inline double ssim(const Frame& a, const Frame& b) {
  require(a.same_shape(b), "ssim: frame dimensions differ");
  const auto da = to_double(a), db = to_double(b);
  return ssim_with_grad({da, a.width(), a.height()}, {db, b.width(), b.height()}, false).value;
}

// Perceptual stand-in: squared distance between frozen random 3x3 filter
// responses (tanh-squashed) at full and half resolution.
class FeatureDistance {
 public:
  static constexpr std::size_t kFilters = 4;
  static constexpr std::size_t kScales = 2;
  static constexpr double kGain = 4.0;
  static constexpr std::uint64_t kDefaultSeed = 0x5eedf00dULL;

  explicit FeatureDistance(std::uint64_t seed = kDefaultSeed) {
    Rng rng(seed);
    for (auto& scale : filters_) {
      for (auto& f : scale) {
        double mean = 0.0;
        for (auto& v : f) {
          v = rng.normal();
          mean += v;
        }
        mean /= 9.0;
        double norm = 0.0;
        for (auto& v : f) {
          v -= mean;
          norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : f) v /= norm;
      }
    }
  }

  static bool supports(std::size_t w, std::size_t h) { return w >= 6 && h >= 6; }

  struct Result {
    double value = 0.0;
    std::vector<double> grad_a;
  };

  Result evaluate(ImageView a, ImageView b, bool want_grad) const {
    require(a.width == b.width && a.height == b.height, "featdist: image dimensions differ");
    require(supports(a.width, a.height), "featdist: image too small");
    Result out;
    if (want_grad) out.grad_a.assign(a.px.size(), 0.0);

    std::vector<double> ca(a.px.begin(), a.px.end()), cb(b.px.begin(), b.px.end());
    std::size_t w = a.width, h = a.height;
    for (std::size_t scale = 0; scale < kScales; ++scale) {
      if (scale > 0) {
        ca = downsample(ca, w, h);
        cb = downsample(cb, w, h);
        w /= 2;
        h /= 2;
      }
      const std::size_t ow = w - 2, oh = h - 2;
      const double count = static_cast<double>(ow * oh * kFilters);
      std::vector<double> grad_scale(want_grad ? w * h : 0, 0.0);
      for (const auto& f : filters_[scale]) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t x = 0; x < ow; ++x) {
            double ra = 0.0, rb = 0.0;
            for (std::size_t j = 0; j < 3; ++j) {
              for (std::size_t i = 0; i < 3; ++i) {
                ra += f[j * 3 + i] * ca[(y + j) * w + x + i];
                rb += f[j * 3 + i] * cb[(y + j) * w + x + i];
              }
            }
            const double pa = std::tanh(kGain * ra), pb = std::tanh(kGain * rb);
            const double diff = pa - pb;
            out.value += diff * diff / count;
            if (want_grad) {
              const double g = 2.0 * diff / count * kGain * (1.0 - pa * pa);
              for (std::size_t j = 0; j < 3; ++j) {
                for (std::size_t i = 0; i < 3; ++i) grad_scale[(y + j) * w + x + i] += g * f[j * 3 + i];
              }
            }
          }
        }
      }
      if (want_grad) {
        // Pull the gradient back through the 2x2 averaging of earlier scales.
        const std::size_t factor = std::size_t{1} << scale;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double g = grad_scale[y * w + x] / static_cast<double>(factor * factor);
            for (std::size_t dy = 0; dy < factor; ++dy) {
              for (std::size_t dx = 0; dx < factor; ++dx) {
                out.grad_a[(y * factor + dy) * a.width + x * factor + dx] += g;
              }
            }
          }
        }
      }
    }
    return out;
  }

 private:
  static std::vector<double> downsample(const std::vector<double>& img, std::size_t w, std::size_t h) {
    const std::size_t ow = w / 2, oh = h / 2;
    std::vector<double> out(ow * oh);
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        out[y * ow + x] = 0.25 * (img[2 * y * w + 2 * x] + img[2 * y * w + 2 * x + 1] + img[(2 * y + 1) * w + 2 * x] +
                                  img[(2 * y + 1) * w + 2 * x + 1]);
      }
    }
    return out;
  }

  std::array<std::array<std::array<double, 9>, kFilters>, kScales> filters_{};
};

// Gaussian center mask with sigma = width / 4, normalized to unit sum.
inline std::vector<double> center_weights(std::size_t w, std::size_t h) {
  const double sigma = static_cast<double>(w) / 4.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  std::vector<double> weights(w * h);
  double total = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      weights[y * w + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += weights[y * w + x];
    }
  }
  for (auto& v : weights) v /= total;
  return weights;
}

inline double mse(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

}  // namespace dualband
