#pragma once

// Nonconformity scores: per-pair scores for seven metrics and the
// max-aggregated trajectory score.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/image_ops.hpp"
#include "dualband/io_util.hpp"
#include "dualband/tokenizer.hpp"
#include "dualband/world_model.hpp"

namespace dualband {

enum class Metric {
  ReconstructionError,
  LatentPredictionError,
  LatentStdDev,
  Mahalanobis,
  LatentL2,
  LatentCosine,
  TrainingLoss,
};

inline constexpr std::array kAllMetrics{Metric::ReconstructionError, Metric::LatentPredictionError,
                                        Metric::LatentStdDev,        Metric::Mahalanobis,
                                        Metric::LatentL2,            Metric::LatentCosine,
                                        Metric::TrainingLoss};

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::ReconstructionError: return "reconstruction_error";
    case Metric::LatentPredictionError: return "latent_prediction_error";
    case Metric::LatentStdDev: return "latent_std";
    case Metric::Mahalanobis: return "mahalanobis";
    case Metric::LatentL2: return "latent_l2";
    case Metric::LatentCosine: return "latent_cosine";
    case Metric::TrainingLoss: return "training_loss";
  }
  return "?";
}

inline Metric parse_metric(std::string_view text) {
  for (auto m : kAllMetrics) {
    if (to_string(m) == text) return m;
  }
  throw InvalidInput("unknown metric '" + std::string(text) + "'");
}

// Metrics that consult the Gaussian fit of calibration latents.
inline bool uses_stats(Metric m) {
  return m == Metric::Mahalanobis || m == Metric::LatentL2 || m == Metric::LatentCosine;
}

inline bool uses_model(Metric m) {
  return m == Metric::ReconstructionError || m == Metric::LatentPredictionError || m == Metric::TrainingLoss;
}

struct CalibrationStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // sample covariance + shrinkage * I
  double shrinkage = 0.0;
  std::optional<std::size_t> pca_rank;
  Eigen::MatrixXd basis;        // d x rank, used when pca_rank is set
  Eigen::VectorXd eigenvalues;  // rank
  std::size_t count = 0;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  // Cholesky factor of the covariance; throws if not positive definite.
  // Cached on first use; fit_calibration_stats and read_stats fill it eagerly.
  const Eigen::LLT<Eigen::MatrixXd>& factor() const {
    if (!factor_) {
      factor_.emplace(covariance);
      if (factor_->info() != Eigen::Success) {
        factor_.reset();
        throw NumericalError("covariance is not positive definite after shrinkage");
      }
    }
    return *factor_;
  }

 private:
  mutable std::optional<Eigen::LLT<Eigen::MatrixXd>> factor_;
};

inline double default_shrinkage(const Eigen::MatrixXd& sample_cov) {
  return 1e-3 * sample_cov.trace() / static_cast<double>(sample_cov.rows());
}

// shrinkage = nullopt selects the trace-scaled default.
inline CalibrationStats fit_calibration_stats(std::span<const LatentVector> latents,
                                              std::optional<double> shrinkage = std::nullopt,
                                              std::optional<std::size_t> pca_rank = std::nullopt) {
  require(latents.size() >= 2, "fit_calibration_stats: need at least 2 latents");
  const auto d = latents.front().dim();
  require(d > 0, "fit_calibration_stats: empty latents");
  for (const auto& z : latents) require(z.dim() == d, "fit_calibration_stats: latent dimensions differ");
  if (shrinkage) require(*shrinkage >= 0.0 && std::isfinite(*shrinkage), "fit_calibration_stats: shrinkage must be >= 0");
  if (pca_rank) require(*pca_rank >= 1 && *pca_rank <= static_cast<std::size_t>(d), "fit_calibration_stats: bad PCA rank");

  CalibrationStats s;
  s.count = latents.size();
  s.mean = Eigen::VectorXd::Zero(d);
  for (const auto& z : latents) s.mean += z.values;
  s.mean /= static_cast<double>(latents.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& z : latents) {
    const Eigen::VectorXd c = z.values - s.mean;
    cov.noalias() += c * c.transpose();
  }
  cov /= static_cast<double>(latents.size() - 1);
  s.shrinkage = shrinkage.value_or(default_shrinkage(cov));
  s.covariance = cov + s.shrinkage * Eigen::MatrixXd::Identity(d, d);
  s.pca_rank = pca_rank;
  if (pca_rank) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.covariance);
    if (eig.info() != Eigen::Success) throw NumericalError("fit_calibration_stats: eigen-decomposition failed");
    const auto r = static_cast<Eigen::Index>(*pca_rank);
    // eigenvalues ascend; keep the top r
    s.eigenvalues = eig.eigenvalues().tail(r).reverse();
    s.basis = eig.eigenvectors().rightCols(r).rowwise().reverse();
    if (s.eigenvalues.minCoeff() <= 0.0) throw NumericalError("fit_calibration_stats: retained eigenvalue not positive");
  } else {
    s.factor();
  }
  return s;
}

inline double score_mahalanobis(const CalibrationStats& stats, const LatentVector& z) {
  require(static_cast<std::size_t>(z.dim()) == stats.dim(), "score_mahalanobis: dimension mismatch");
  const Eigen::VectorXd diff = z.values - stats.mean;
  if (stats.pca_rank) {
    const Eigen::VectorXd proj = stats.basis.transpose() * diff;
    return (proj.array().square() / stats.eigenvalues.array()).sum();
  }
  return stats.factor().matrixL().solve(diff).squaredNorm();
}

inline double score_latent_l2(const CalibrationStats& stats, const LatentVector& z) {
  require(static_cast<std::size_t>(z.dim()) == stats.dim(), "score_latent_l2: dimension mismatch");
  return (z.values - stats.mean).norm();
}

inline double score_latent_cosine(const CalibrationStats& stats, const LatentVector& z) {
  require(static_cast<std::size_t>(z.dim()) == stats.dim(), "score_latent_cosine: dimension mismatch");
  const double nz = z.values.norm(), nm = stats.mean.norm();
  if (nz < 1e-12 || nm < 1e-12) throw DegenerateDirection("score_latent_cosine: zero-length vector");
  const double cosine = std::clamp(z.values.dot(stats.mean) / (nz * nm), -1.0, 1.0);
  return 1.0 - cosine;
}

inline double score_reconstruction(const TrainedModel& model, const Codec& codec, const Frame& frame_t,
                                   const Frame& frame_t1) {
  require(codec.matches(frame_t1), "score_reconstruction: frame dimensions do not match codec");
  const auto z_hat = predict_next(model, codec.encode(frame_t));
  return mse(codec.broadcast(codec.decode_means(z_hat.values)), to_double(frame_t1));
}

inline double latent_prediction_error(const TrainedModel& model, const Eigen::VectorXd& z_t, const Eigen::VectorXd& z_t1) {
  return (model.forward(z_t).output - z_t1).squaredNorm();
}

inline double score_latent_prediction(const TrainedModel& model, const Codec& codec, const Frame& frame_t,
                                      const Frame& frame_t1) {
  return latent_prediction_error(model, codec.encode(frame_t).values, codec.encode(frame_t1).values);
}

// Mean over dimensions of the per-dimension sample standard deviation.
// Deviations are shifted by the first latent, so a constant window is exactly 0.
inline double score_latent_std(std::span<const LatentVector> window) {
  require(window.size() >= 2, "score_latent_std: window needs at least 2 latents");
  const auto d = window.front().dim();
  const Eigen::VectorXd& ref = window.front().values;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
  for (const auto& z : window) {
    require(z.dim() == d, "score_latent_std: latent dimensions differ");
    const Eigen::VectorXd c = z.values - ref;
    sum += c;
    sq += c.cwiseAbs2();
  }
  const double n = static_cast<double>(window.size());
  const Eigen::VectorXd var = ((sq - sum.cwiseAbs2() / n) / (n - 1.0)).cwiseMax(0.0);
  return var.cwiseSqrt().mean();
}

inline double score_latent_std(const Codec& codec, std::span<const Frame> window) {
  std::vector<LatentVector> latents;
  latents.reserve(window.size());
  for (const auto& f : window) latents.push_back(codec.encode(f));
  return score_latent_std(latents);
}

inline double score_training_loss(const TrainedModel& model, const Codec& codec, const Frame& frame_t,
                                  const Frame& frame_t1) {
  return loss_components(model, codec, frame_t, frame_t1).total;
}

enum class LatentSource { Observed, Predicted };

struct ScoringOptions {
  std::size_t skip = 2;
  std::size_t std_window = 8;  // post-skip frames; 0 = whole prefix
  LatentSource latent_source = LatentSource::Observed;
};

// What a detector scores with. `model` is required for model metrics and for
// predicted-latent geometry; `stats` for the latent-geometry metrics.
struct ScoringContext {
  Metric metric = Metric::LatentPredictionError;
  const Codec* codec = nullptr;
  const TrainedModel* model = nullptr;
  const CalibrationStats* stats = nullptr;
  ScoringOptions options;

  void validate() const {
    if (codec == nullptr) throw ConfigurationError("scoring: codec missing");
    if (uses_model(metric) && model == nullptr) throw ConfigurationError("scoring: metric needs a model");
    if (uses_stats(metric) && stats == nullptr) throw ConfigurationError("scoring: metric needs calibration stats");
    if (uses_stats(metric) && options.latent_source == LatentSource::Predicted && model == nullptr) {
      throw ConfigurationError("scoring: predicted latents need a model");
    }
    if (model != nullptr && model->dim() != codec->latent_dim()) {
      throw ConfigurationError("scoring: model and codec latent dimensions differ");
    }
    if (stats != nullptr && uses_stats(metric) && stats->dim() != codec->latent_dim()) {
      throw ConfigurationError("scoring: stats and codec latent dimensions differ");
    }
    require(options.skip >= 1, "scoring: skip must be >= 1");
    require(options.std_window == 0 || options.std_window >= 2, "scoring: latent std window must be 0 or >= 2");
  }
};

struct TrajectoryScore {
  std::vector<double> per_pair;
  double aggregate = 0.0;
  std::size_t argmax = 0;  // earliest pair attaining the aggregate
  Metric metric = Metric::LatentPredictionError;
  std::optional<ClassLabel> model_class;
};

inline TrajectoryScore aggregate_scores(std::vector<double> per_pair, Metric metric,
                                        std::optional<ClassLabel> model_class = std::nullopt) {
  require(!per_pair.empty(), "aggregate: no pair scores");
  TrajectoryScore out;
  out.metric = metric;
  out.model_class = model_class;
  for (std::size_t i = 0; i < per_pair.size(); ++i) {
    if (!std::isfinite(per_pair[i])) throw NumericalError("non-finite score at pair " + std::to_string(i));
    if (i == 0 || per_pair[i] > out.aggregate) {
      out.aggregate = per_pair[i];
      out.argmax = i;
    }
  }
  out.per_pair = std::move(per_pair);
  return out;
}

// Per-pair scores of an already frame-skipped trajectory.
inline std::vector<double> score_pairs(const ScoringContext& ctx, const Trajectory& skipped) {
  ctx.validate();
  require(skipped.length() >= 2, "score_trajectory: trajectory needs at least 2 frames after skipping");
  const Codec& codec = *ctx.codec;
  const std::size_t n = skipped.length(), pairs = n - 1;
  std::vector<LatentVector> z;
  z.reserve(n);
  for (const auto& f : skipped.frames()) {
    require(codec.matches(f), "score_trajectory: frame dimensions do not match codec");
    z.push_back(codec.encode(f));
  }

  std::vector<double> out(pairs);
  switch (ctx.metric) {
    case Metric::ReconstructionError: {
      for (std::size_t i = 0; i < pairs; ++i) {
        const auto z_hat = ctx.model->forward(z[i].values).output;
        out[i] = mse(codec.broadcast(codec.decode_means(z_hat)), to_double(skipped.frame(i + 1)));
      }
      break;
    }
    case Metric::LatentPredictionError:
      for (std::size_t i = 0; i < pairs; ++i) out[i] = latent_prediction_error(*ctx.model, z[i].values, z[i + 1].values);
      break;
    case Metric::LatentStdDev: {
      const std::size_t w = ctx.options.std_window;
      for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t end = i + 2;  // window ends at the pair's second frame
        const std::size_t begin = w == 0 || end <= w ? 0 : end - w;
        out[i] = score_latent_std(std::span<const LatentVector>(z).subspan(begin, end - begin));
      }
      break;
    }
    case Metric::Mahalanobis:
    case Metric::LatentL2:
    case Metric::LatentCosine: {
      const auto geometry = [&](const LatentVector& v) {
        if (ctx.metric == Metric::Mahalanobis) return score_mahalanobis(*ctx.stats, v);
        if (ctx.metric == Metric::LatentL2) return score_latent_l2(*ctx.stats, v);
        return score_latent_cosine(*ctx.stats, v);
      };
      if (ctx.options.latent_source == LatentSource::Predicted) {
        for (std::size_t i = 0; i < pairs; ++i) out[i] = geometry(predict_next(*ctx.model, z[i]));
      } else {
        std::vector<double> per_frame(n);
        for (std::size_t j = 0; j < n; ++j) per_frame[j] = geometry(z[j]);
        for (std::size_t i = 0; i < pairs; ++i) out[i] = std::max(per_frame[i], per_frame[i + 1]);
      }
      break;
    }
    case Metric::TrainingLoss: {
      const auto loss = LossFunction::for_model(codec, *ctx.model);
      for (std::size_t i = 0; i < pairs; ++i) {
        const auto target = ctx.model->hyperparams().pixel_target;
        const FramePair p{FramePair::pixels(codec, skipped.frame(i), z[i].values, target),
                          FramePair::pixels(codec, skipped.frame(i + 1), z[i + 1].values, target), z[i].values,
                          z[i + 1].values};
        out[i] = loss.evaluate(*ctx.model, p).total;
      }
      break;
    }
  }
  return out;
}

inline TrajectoryScore score_trajectory(const ScoringContext& ctx, const Trajectory& trajectory) {
  const auto skipped = frame_skip(trajectory, ctx.options.skip);
  std::optional<ClassLabel> cls;
  if (ctx.model != nullptr) cls = ctx.model->training_class();
  return aggregate_scores(score_pairs(ctx, skipped), ctx.metric, cls);
}

// Latents a metric's Gaussian fit is estimated from: observed codec latents
// of every post-skip frame, or the model's one-step predictions.
inline std::vector<LatentVector> stats_latents(const Codec& codec, const TrainedModel* model, LatentSource source,
                                               std::span<const Trajectory> trajectories, std::size_t skip) {
  std::vector<LatentVector> out;
  for (const auto& t : trajectories) {
    const auto s = frame_skip(t, skip);
    for (std::size_t j = 0; j < s.length(); ++j) {
      auto z = codec.encode(s.frame(j));
      if (source == LatentSource::Predicted) {
        if (model == nullptr) throw ConfigurationError("stats_latents: predicted latents need a model");
        if (j + 1 == s.length()) break;
        z = predict_next(*model, z);
      }
      out.push_back(std::move(z));
    }
  }
  return out;
}

// Score dump: one "id pair metric score" line per pair.
inline void write_score_lines(std::ostream& out, std::string_view id, const TrajectoryScore& s) {
  for (std::size_t i = 0; i < s.per_pair.size(); ++i) {
    out << id << ' ' << i << ' ' << to_string(s.metric) << ' ' << io::fmt(s.per_pair[i]) << '\n';
  }
}

inline constexpr std::string_view kStatsMagic = "DUALBAND-STATS 1";

inline void write_stats(std::ostream& out, const CalibrationStats& s) {
  out << kStatsMagic << '\n'
      << "dim " << s.dim() << '\n'
      << "count " << s.count << '\n'
      << "shrinkage " << io::fmt(s.shrinkage) << '\n'
      << "pca_rank " << (s.pca_rank ? std::to_string(*s.pca_rank) : "none") << '\n'
      << "end\n";
  out << "mean";
  for (double v : s.mean) out << ' ' << io::fmt(v);
  out << '\n';
  for (Eigen::Index i = 0; i < s.covariance.rows(); ++i) {
    out << "cov";
    for (Eigen::Index j = 0; j < s.covariance.cols(); ++j) out << ' ' << io::fmt(s.covariance(i, j));
    out << '\n';
  }
}

inline CalibrationStats read_stats(std::istream& in) {
  const auto h = io::Header::read(in, kStatsMagic);
  const auto d = static_cast<Eigen::Index>(h.integer("dim"));
  CalibrationStats s;
  s.count = h.integer("count");
  s.shrinkage = h.number("shrinkage");
  if (h.get("pca_rank") != "none") s.pca_rank = h.integer("pca_rank");
  const auto read_row = [&](std::string_view tag) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("stats: truncated");
    const auto parts = io::split(line, ' ');
    if (parts.empty() || parts[0] != tag || static_cast<Eigen::Index>(parts.size()) != d + 1) {
      throw FormatError("stats: malformed '" + std::string(tag) + "' row");
    }
    Eigen::VectorXd row(d);
    for (Eigen::Index j = 0; j < d; ++j) row[j] = io::parse_double(parts[static_cast<std::size_t>(j) + 1]);
    return row;
  };
  s.mean = read_row("mean");
  s.covariance.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) s.covariance.row(i) = read_row("cov").transpose();
  if (s.pca_rank) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.covariance);
    const auto r = static_cast<Eigen::Index>(*s.pca_rank);
    s.eigenvalues = eig.eigenvalues().tail(r).reverse();
    s.basis = eig.eigenvectors().rightCols(r).rowwise().reverse();
  } else {
    s.factor();  // factor eagerly so shared stats are never mutated
  }
  return s;
}

}  // namespace dualband
