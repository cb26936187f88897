#pragma once

// Latent world model: a d -> h -> h -> d tanh perceptron that predicts the
// next codec latent, trained with the composite loss
//
//   total = rec + (rec - cross) + 0.5 * hyb
//   rec   = 0.5 * MSE(x_hat, x1) + 0.5 * (1 - SSIM(x_hat, x1))
//   cross = MSE(x_hat, x0) - MSE(x_hat, x1)          (optionally hinged at 0)
//   hyb   = |z_hat - z1|^2 + featdist(x_hat, x1) + lambda_c * centerMSE(x_hat, x1)
//
// where z_hat = M(encode(x0)) and x_hat = decode(z_hat). Gradients are
// computed by hand through the decoder, the pixel terms and the network.
//
// Pixel targets x0, x1 default to the codec round trip decode(encode(x)).
// The codec is lossy, so against raw frames SSIM and the feature distance
// are minimized away from z1 and every prediction carries a frame-dependent
// bias; against round trips all terms agree at z_hat = z1. Raw targets
// remain available (PixelTarget::Raw).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/image_ops.hpp"
#include "dualband/io_util.hpp"
#include "dualband/parallel.hpp"
#include "dualband/rng.hpp"
#include "dualband/tokenizer.hpp"

namespace dualband {

enum class PixelTarget { Codec, Raw };

inline std::string_view to_string(PixelTarget t) { return t == PixelTarget::Codec ? "codec" : "raw"; }

inline PixelTarget parse_pixel_target(std::string_view text) {
  if (text == "codec") return PixelTarget::Codec;
  if (text == "raw") return PixelTarget::Raw;
  throw InvalidInput("unknown pixel target '" + std::string(text) + "'");
}

struct Hyperparams {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  double clip_value = 1.0;
  std::size_t patience = 15;
  double min_delta = 1e-5;
  std::size_t max_epochs = 10;
  double validation_fraction = 0.3;
  std::uint64_t seed = 0;
  std::size_t hidden = 64;
  std::size_t skip = 2;
  double center_weight = 0.1;
  bool hinge_cross = false;
  PixelTarget pixel_target = PixelTarget::Codec;

  void validate() const {
    require(learning_rate > 0 && weight_decay >= 0 && batch_size > 0 && clip_value > 0 && hidden > 0 && skip > 0,
            "hyperparameters must be positive");
    require(validation_fraction > 0.0 && validation_fraction < 1.0, "validation fraction must lie in (0,1)");
    require(min_delta >= 0 && center_weight >= 0, "min_delta and center_weight must be non-negative");
  }
};

struct LossBreakdown {
  double rec = 0.0;
  double cross = 0.0;
  double hyb = 0.0;
  double total = 0.0;
  // hyb parts, reported for diagnostics and cross-metric checks
  double latent = 0.0;
  double feature = 0.0;
  double center = 0.0;
};

inline double compose_total(double rec, double cross, double hyb) { return rec + (rec - cross) + 0.5 * hyb; }

enum class LossComponent { Total, Rec, Cross, Hyb };

inline double component_value(const LossBreakdown& b, LossComponent c) {
  switch (c) {
    case LossComponent::Rec: return b.rec;
    case LossComponent::Cross: return b.cross;
    case LossComponent::Hyb: return b.hyb;
    case LossComponent::Total: break;
  }
  return b.total;
}

// Coefficients of (rec, cross, hyb) in the differentiated objective.
struct LossWeights {
  double rec = 2.0, cross = -1.0, hyb = 0.5;

  static LossWeights of(LossComponent c) {
    switch (c) {
      case LossComponent::Rec: return {1.0, 0.0, 0.0};
      case LossComponent::Cross: return {0.0, 1.0, 0.0};
      case LossComponent::Hyb: return {0.0, 0.0, 1.0};
      case LossComponent::Total: break;
    }
    return {};
  }
};

// Parameters live in one flat vector: W1 (h x d), b1, W2 (h x h), b2, W3 (d x h), b3,
// matrices column-major.
class TrainedModel {
 public:
  TrainedModel() = default;

  TrainedModel(std::size_t dim, std::size_t hidden, ClassLabel training_class, Hyperparams hp)
      : dim_(dim), hidden_(hidden), training_class_(training_class), hp_(hp) {
    require(dim > 0 && hidden > 0, "model dimensions must be positive");
    params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count(dim, hidden)));
  }

  static std::size_t parameter_count(std::size_t d, std::size_t h) { return h * d + h + h * h + h + d * h + d; }

  // Xavier-uniform weights, zero biases.
  static TrainedModel initialize(std::size_t dim, std::size_t hidden, ClassLabel training_class, const Hyperparams& hp) {
    TrainedModel m(dim, hidden, training_class, hp);
    Rng rng(derive_seed(hp.seed, 0x1417));
    const auto fill = [&](auto mat, std::size_t fan_in, std::size_t fan_out) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (Eigen::Index j = 0; j < mat.cols(); ++j) {
        for (Eigen::Index i = 0; i < mat.rows(); ++i) mat(i, j) = rng.uniform(-bound, bound);
      }
    };
    fill(m.w1(), dim, hidden);
    fill(m.w2(), hidden, hidden);
    fill(m.w3(), hidden, dim);
    return m;
  }

  std::size_t dim() const { return dim_; }
  std::size_t hidden() const { return hidden_; }
  ClassLabel training_class() const { return training_class_; }
  const Hyperparams& hyperparams() const { return hp_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& parameters() { return params_; }

  using MatMap = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
  using VecMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  MatMap w1() { return {params_.data() + off_w1(), ei(hidden_), ei(dim_)}; }
  VecMap b1() { return {params_.data() + off_b1(), ei(hidden_)}; }
  MatMap w2() { return {params_.data() + off_w2(), ei(hidden_), ei(hidden_)}; }
  VecMap b2() { return {params_.data() + off_b2(), ei(hidden_)}; }
  MatMap w3() { return {params_.data() + off_w3(), ei(dim_), ei(hidden_)}; }
  VecMap b3() { return {params_.data() + off_b3(), ei(dim_)}; }
  ConstMatMap w1() const { return {params_.data() + off_w1(), ei(hidden_), ei(dim_)}; }
  ConstVecMap b1() const { return {params_.data() + off_b1(), ei(hidden_)}; }
  ConstMatMap w2() const { return {params_.data() + off_w2(), ei(hidden_), ei(hidden_)}; }
  ConstVecMap b2() const { return {params_.data() + off_b2(), ei(hidden_)}; }
  ConstMatMap w3() const { return {params_.data() + off_w3(), ei(dim_), ei(hidden_)}; }
  ConstVecMap b3() const { return {params_.data() + off_b3(), ei(dim_)}; }

  struct Activations {
    Eigen::VectorXd input, h1, h2, output;
  };

  Activations forward(const Eigen::VectorXd& z) const {
    require(static_cast<std::size_t>(z.size()) == dim_, "predict_next: latent dimension mismatch");
    Activations a;
    a.input = z;
    a.h1 = (w1() * z + b1()).array().tanh();
    a.h2 = (w2() * a.h1 + b2()).array().tanh();
    a.output = w3() * a.h2 + b3();
    return a;
  }

  // Accumulates d loss / d params into grad given d loss / d output.
  void backward(const Activations& a, const Eigen::VectorXd& grad_out, Eigen::VectorXd& grad) const {
    MatMap gw1(grad.data() + off_w1(), ei(hidden_), ei(dim_));
    VecMap gb1(grad.data() + off_b1(), ei(hidden_));
    MatMap gw2(grad.data() + off_w2(), ei(hidden_), ei(hidden_));
    VecMap gb2(grad.data() + off_b2(), ei(hidden_));
    MatMap gw3(grad.data() + off_w3(), ei(dim_), ei(hidden_));
    VecMap gb3(grad.data() + off_b3(), ei(dim_));
    gw3.noalias() += grad_out * a.h2.transpose();
    gb3 += grad_out;
    const Eigen::VectorXd g2 = ((w3().transpose() * grad_out).array() * (1.0 - a.h2.array().square())).matrix();
    gw2.noalias() += g2 * a.h1.transpose();
    gb2 += g2;
    const Eigen::VectorXd g1 = ((w2().transpose() * g2).array() * (1.0 - a.h1.array().square())).matrix();
    gw1.noalias() += g1 * a.input.transpose();
    gb1 += g1;
  }

  // Round parameters to float32, the precision of the checkpoint blob.
  void round_to_checkpoint_precision() {
    for (auto& v : params_) v = static_cast<double>(static_cast<float>(v));
  }

  bool all_finite() const { return params_.allFinite(); }

 private:
  static Eigen::Index ei(std::size_t v) { return static_cast<Eigen::Index>(v); }
  std::size_t off_w1() const { return 0; }
  std::size_t off_b1() const { return hidden_ * dim_; }
  std::size_t off_w2() const { return off_b1() + hidden_; }
  std::size_t off_b2() const { return off_w2() + hidden_ * hidden_; }
  std::size_t off_w3() const { return off_b2() + hidden_; }
  std::size_t off_b3() const { return off_w3() + dim_ * hidden_; }

  std::size_t dim_ = 0, hidden_ = 0;
  ClassLabel training_class_ = ClassLabel::Success;
  Hyperparams hp_;
  Eigen::VectorXd params_;
};

inline LatentVector predict_next(const TrainedModel& model, const LatentVector& z) {
  return LatentVector(model.forward(z.values).output);
}

// A (frame_t, frame_t+1) pair with its codec latents, pre-encoded once.
struct FramePair {
  std::vector<double> current;
  std::vector<double> next;
  Eigen::VectorXd z_current;
  Eigen::VectorXd z_next;

  static FramePair make(const Codec& codec, const Frame& f0, const Frame& f1,
                        PixelTarget target = PixelTarget::Codec) {
    require(codec.matches(f0) && codec.matches(f1), "frame pair does not match codec dimensions");
    auto z0 = codec.encode(f0).values, z1 = codec.encode(f1).values;
    return {pixels(codec, f0, z0, target), pixels(codec, f1, z1, target), std::move(z0), std::move(z1)};
  }

  static std::vector<double> pixels(const Codec& codec, const Frame& f, const Eigen::VectorXd& z, PixelTarget target) {
    return target == PixelTarget::Raw ? to_double(f) : codec.broadcast(codec.decode_means(z));
  }
};

// Evaluates the composite loss (and optionally its parameter gradient).
class LossFunction {
 public:
  LossFunction(const Codec& codec, double center_weight = 0.1, bool hinge_cross = false)
      : codec_(&codec),
        center_weight_(center_weight),
        hinge_cross_(hinge_cross),
        center_mask_(center_weights(codec.frame_width(), codec.frame_height())) {
    require(FeatureDistance::supports(codec.frame_width(), codec.frame_height()) && codec.frame_width() >= 7 &&
                codec.frame_height() >= 7,
            "loss: frames must be at least 7x7");
  }

  static LossFunction for_model(const Codec& codec, const TrainedModel& model) {
    return LossFunction(codec, model.hyperparams().center_weight, model.hyperparams().hinge_cross);
  }

  // Breakdown for a given predicted latent (no network involved).
  LossBreakdown evaluate_prediction(const Eigen::VectorXd& z_hat, const FramePair& pair,
                                    Eigen::VectorXd* grad_z = nullptr, LossWeights wt = {}) const {
    const std::size_t w = codec_->frame_width(), h = codec_->frame_height(), n = w * h;
    const Eigen::VectorXd means = codec_->decode_means(z_hat);
    const std::vector<double> pred = codec_->broadcast(means);
    const bool want = grad_z != nullptr;

    LossBreakdown out;
    const double mse_next = mse(pred, pair.next);
    const double mse_cur = mse(pred, pair.current);
    const auto ss = ssim_with_grad({pred, w, h}, {pair.next, w, h}, want);
    out.rec = 0.5 * mse_next + 0.5 * (1.0 - ss.value);
    const double cross_raw = mse_cur - mse_next;
    const bool cross_active = !hinge_cross_ || cross_raw > 0.0;
    out.cross = cross_active ? cross_raw : 0.0;
    out.latent = (z_hat - pair.z_next).squaredNorm();
    const auto fd = features_.evaluate({pred, w, h}, {pair.next, w, h}, want);
    out.feature = fd.value;
    double center = 0.0;
    for (std::size_t i = 0; i < n; ++i) center += center_mask_[i] * (pred[i] - pair.next[i]) * (pred[i] - pair.next[i]);
    out.center = center;
    out.hyb = out.latent + out.feature + center_weight_ * out.center;
    out.total = compose_total(out.rec, out.cross, out.hyb);

    if (want) {
      // d total / d pred pixel
      const double inv_n = 1.0 / static_cast<double>(n);
      Eigen::VectorXd grad_means = Eigen::VectorXd::Zero(means.size());
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t i = y * w + x;
          const double d_next = 2.0 * (pred[i] - pair.next[i]) * inv_n;
          const double d_cur = 2.0 * (pred[i] - pair.current[i]) * inv_n;
          const double d_rec = 0.5 * d_next - 0.5 * ss.grad_a[i];
          const double d_cross = cross_active ? d_cur - d_next : 0.0;
          const double d_hyb = fd.grad_a[i] + center_weight_ * 2.0 * center_mask_[i] * (pred[i] - pair.next[i]);
          grad_means[static_cast<Eigen::Index>(codec_->patch_of(x, y))] +=
              wt.rec * d_rec + wt.cross * d_cross + wt.hyb * d_hyb;
        }
      }
      // Clamped patches pass no gradient.
      for (Eigen::Index j = 0; j < means.size(); ++j) {
        if (means[j] <= 0.0 || means[j] >= 1.0) grad_means[j] = 0.0;
      }
      *grad_z = codec_->projection() * grad_means + wt.hyb * 2.0 * (z_hat - pair.z_next);
    }
    return out;
  }

  LossBreakdown evaluate(const TrainedModel& model, const FramePair& pair, Eigen::VectorXd* grad = nullptr,
                         LossWeights wt = {}) const {
    const auto act = model.forward(pair.z_current);
    if (grad == nullptr) return evaluate_prediction(act.output, pair);
    Eigen::VectorXd grad_z;
    auto out = evaluate_prediction(act.output, pair, &grad_z, wt);
    model.backward(act, grad_z, *grad);
    return out;
  }

  const Codec& codec() const { return *codec_; }

 private:
  const Codec* codec_;
  double center_weight_;
  bool hinge_cross_;
  std::vector<double> center_mask_;
  FeatureDistance features_;
};

inline LossBreakdown loss_components(const TrainedModel& model, const Codec& codec, const Frame& frame_t,
                                     const Frame& frame_t1) {
  require(model.dim() == codec.latent_dim(), "loss_components: model and codec dimensions differ");
  return LossFunction::for_model(codec, model)
      .evaluate(model, FramePair::make(codec, frame_t, frame_t1, model.hyperparams().pixel_target));
}

struct GradientCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  Eigen::VectorXd analytic;
  Eigen::VectorXd numeric;
};

// Central finite differences on every parameter. Relative error per entry is
// |a - n| / max(|a|, |n|, 1e-8); the floor only matters for entries that are
// zero up to rounding (e.g. patches pinned by the decoder clamp).
inline GradientCheckResult gradient_check(const TrainedModel& model, const Codec& codec, const Frame& frame_t,
                                          const Frame& frame_t1, double epsilon,
                                          LossComponent component = LossComponent::Total) {
  require(epsilon > 0.0 && epsilon <= 1e-2, "gradient_check: epsilon must lie in (0, 1e-2]");
  const auto loss = LossFunction::for_model(codec, model);
  const auto pair = FramePair::make(codec, frame_t, frame_t1, model.hyperparams().pixel_target);
  GradientCheckResult r;
  r.analytic = Eigen::VectorXd::Zero(model.parameters().size());
  loss.evaluate(model, pair, &r.analytic, LossWeights::of(component));
  r.numeric.resize(r.analytic.size());
  TrainedModel probe = model;
  for (Eigen::Index k = 0; k < r.analytic.size(); ++k) {
    const double saved = probe.parameters()[k];
    probe.parameters()[k] = saved + epsilon;
    const double up = component_value(loss.evaluate(probe, pair), component);
    probe.parameters()[k] = saved - epsilon;
    const double down = component_value(loss.evaluate(probe, pair), component);
    probe.parameters()[k] = saved;
    r.numeric[k] = (up - down) / (2.0 * epsilon);
  }
  constexpr double floor = 1e-8;
  for (Eigen::Index k = 0; k < r.analytic.size(); ++k) {
    const double a = r.analytic[k], n = r.numeric[k];
    const double err = std::abs(a - n);
    r.max_absolute_error = std::max(r.max_absolute_error, err);
    r.max_relative_error = std::max(r.max_relative_error, err / std::max({std::abs(a), std::abs(n), floor}));
  }
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double max_applied_grad = 0.0;
};

struct TrainingResult {
  TrainedModel model;
  std::vector<EpochRecord> history;
  double initial_train_loss = 0.0;
  double initial_val_loss = 0.0;
  std::size_t best_epoch = 0;  // 0 means the initialization was kept
  bool stopped_early = false;
};

namespace detail {

inline std::vector<FramePair> make_pairs(const Codec& codec, std::span<const Trajectory> trajectories,
                                         PixelTarget target) {
  std::vector<FramePair> pairs;
  for (const auto& t : trajectories) {
    std::vector<double> prev_px;
    Eigen::VectorXd prev_z;
    for (std::size_t i = 0; i < t.length(); ++i) {
      const auto& f = t.frame(i);
      require(codec.matches(f), "train: frame dimensions do not match codec");
      auto z = codec.encode(f).values;
      auto px = FramePair::pixels(codec, f, z, target);
      if (i > 0) pairs.push_back({std::move(prev_px), px, std::move(prev_z), z});
      prev_px = std::move(px);
      prev_z = std::move(z);
    }
  }
  return pairs;
}

inline double mean_loss(const LossFunction& loss, const TrainedModel& model, const std::vector<FramePair>& pairs,
                        const ParallelFor& pfor) {
  if (pairs.empty()) return 0.0;
  std::vector<double> values(pairs.size());
  pfor(pairs.size(), [&](std::size_t i) { values[i] = loss.evaluate(model, pairs[i]).total; });
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc / static_cast<double>(pairs.size());
}

}  // namespace detail

// AdamW with value clipping and early stopping on the validation loss.
// Trajectories are split 70/30 (validation_fraction) at trajectory level,
// frame-skipped, and cut into consecutive frame pairs. The returned model is
// the minimum-validation-loss checkpoint in float32 precision.
inline TrainingResult train(std::span<const Trajectory> dataset, const Codec& codec, const Hyperparams& hp,
                            const ParallelFor& pfor = ParallelFor{}) {
  hp.validate();
  require(!dataset.empty(), "train: empty dataset");
  const auto cls = dataset.front().truth_class();
  require(cls.has_value(), "train: trajectories must carry a class label");
  for (const auto& t : dataset) require(t.truth_class() == cls, "train: dataset mixes classes");
  require(*cls == ClassLabel::Success || *cls == ClassLabel::KnownFailure,
          "train: models are trained on Success or KnownFailure data only");

  std::vector<Trajectory> skipped;
  skipped.reserve(dataset.size());
  for (const auto& t : dataset) skipped.push_back(frame_skip(t, hp.skip));

  std::vector<std::size_t> order(skipped.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(hp.seed, 0x5911));
  split_rng.shuffle(std::span(order));
  std::size_t n_val = static_cast<std::size_t>(std::lround(hp.validation_fraction * static_cast<double>(order.size())));
  if (order.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, order.size() - 1);
  else n_val = 0;
  std::vector<Trajectory> train_set, val_set;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val_set : train_set).push_back(skipped[order[i]]);

  const auto train_pairs = detail::make_pairs(codec, train_set, hp.pixel_target);
  const auto val_pairs = detail::make_pairs(codec, val_set, hp.pixel_target);
  require(!train_pairs.empty(), "train: no frame pairs after skipping");
  const auto& selection_pairs = val_pairs.empty() ? train_pairs : val_pairs;

  TrainingResult result;
  result.model = TrainedModel::initialize(codec.latent_dim(), hp.hidden, *cls, hp);
  const LossFunction loss(codec, hp.center_weight, hp.hinge_cross);
  result.initial_train_loss = detail::mean_loss(loss, result.model, train_pairs, pfor);
  result.initial_val_loss = detail::mean_loss(loss, result.model, selection_pairs, pfor);
  if (hp.max_epochs == 0) return result;

  TrainedModel current = result.model;
  TrainedModel best = current;
  best.round_to_checkpoint_precision();
  double best_val = detail::mean_loss(loss, best, selection_pairs, pfor);
  result.initial_val_loss = best_val;
  const auto n_params = current.parameters().size();
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n_params), m2 = Eigen::VectorXd::Zero(n_params);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::size_t step = 0, since_best = 0;
  Rng shuffle_rng(derive_seed(hp.seed, 0xba7c));
  std::vector<std::size_t> idx(train_pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<Eigen::VectorXd> sample_grads;
  std::vector<double> sample_loss;

  for (std::size_t epoch = 1; epoch <= hp.max_epochs; ++epoch) {
    shuffle_rng.shuffle(std::span(idx));
    double epoch_loss = 0.0, max_applied = 0.0;
    for (std::size_t start = 0; start < idx.size(); start += hp.batch_size) {
      const std::size_t end = std::min(idx.size(), start + hp.batch_size);
      const std::size_t b = end - start;
      sample_grads.assign(b, Eigen::VectorXd());
      sample_loss.assign(b, 0.0);
      pfor(b, [&](std::size_t i) {
        sample_grads[i] = Eigen::VectorXd::Zero(n_params);
        sample_loss[i] = loss.evaluate(current, train_pairs[idx[start + i]], &sample_grads[i]).total;
      });
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(n_params);
      for (std::size_t i = 0; i < b; ++i) {
        grad += sample_grads[i];
        epoch_loss += sample_loss[i];
      }
      grad /= static_cast<double>(b);
      grad = grad.cwiseMax(-hp.clip_value).cwiseMin(hp.clip_value);
      max_applied = std::max(max_applied, grad.cwiseAbs().maxCoeff());

      ++step;
      m1 = kBeta1 * m1 + (1.0 - kBeta1) * grad;
      m2 = kBeta2 * m2 + (1.0 - kBeta2) * grad.cwiseProduct(grad);
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      auto& theta = current.parameters();
      theta *= 1.0 - hp.learning_rate * hp.weight_decay;
      theta.array() -= hp.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + kEps);
    }
    if (!current.all_finite()) throw NumericalError("train: parameters diverged");

    TrainedModel snapshot = current;
    snapshot.round_to_checkpoint_precision();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(idx.size());
    rec.val_loss = detail::mean_loss(loss, snapshot, selection_pairs, pfor);
    rec.max_applied_grad = max_applied;
    result.history.push_back(rec);

    if (rec.val_loss < best_val - hp.min_delta) {
      best_val = rec.val_loss;
      best = snapshot;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= hp.patience) {
      result.stopped_early = true;
      break;
    }
  }
  result.model = best;
  return result;
}

inline constexpr std::string_view kModelMagic = "DUALBAND-MODEL 1";

inline void write_model(std::ostream& out, const TrainedModel& m) {
  const auto& hp = m.hyperparams();
  out << kModelMagic << '\n'
      << "dim " << m.dim() << '\n'
      << "hidden " << m.hidden() << '\n'
      << "class " << to_string(m.training_class()) << '\n'
      << "learning_rate " << io::fmt(hp.learning_rate) << '\n'
      << "weight_decay " << io::fmt(hp.weight_decay) << '\n'
      << "batch_size " << hp.batch_size << '\n'
      << "clip_value " << io::fmt(hp.clip_value) << '\n'
      << "patience " << hp.patience << '\n'
      << "min_delta " << io::fmt(hp.min_delta) << '\n'
      << "max_epochs " << hp.max_epochs << '\n'
      << "validation_fraction " << io::fmt(hp.validation_fraction) << '\n'
      << "skip " << hp.skip << '\n'
      << "center_weight " << io::fmt(hp.center_weight) << '\n'
      << "hinge_cross " << (hp.hinge_cross ? 1 : 0) << '\n'
      << "pixel_target " << to_string(hp.pixel_target) << '\n'
      << "seed " << hp.seed << '\n'
      << "params " << m.parameters().size() << '\n'
      << "dtype f32le\n"
      << "end\n";
  for (double v : m.parameters()) io::write_f32_le(out, static_cast<float>(v));
}

inline TrainedModel read_model(std::istream& in) {
  const auto h = io::Header::read(in, kModelMagic);
  Hyperparams hp;
  hp.learning_rate = h.number("learning_rate");
  hp.weight_decay = h.number("weight_decay");
  hp.batch_size = h.integer("batch_size");
  hp.clip_value = h.number("clip_value");
  hp.patience = h.integer("patience");
  hp.min_delta = h.number("min_delta");
  hp.max_epochs = h.integer("max_epochs");
  hp.validation_fraction = h.number("validation_fraction");
  hp.skip = h.integer("skip");
  hp.center_weight = h.number("center_weight");
  hp.hinge_cross = h.integer("hinge_cross") != 0;
  hp.pixel_target = parse_pixel_target(h.get("pixel_target"));
  hp.seed = h.integer("seed");
  hp.hidden = h.integer("hidden");
  TrainedModel m(h.integer("dim"), hp.hidden, parse_class_label(h.get("class")), hp);
  if (h.integer("params") != static_cast<std::uint64_t>(m.parameters().size())) {
    throw FormatError("model checkpoint parameter count mismatch");
  }
  for (auto& v : m.parameters()) v = io::read_f32_le(in);
  if (!m.all_finite()) throw FormatError("model checkpoint contains non-finite parameters");
  return m;
}

inline std::string model_bytes(const TrainedModel& m) {
  std::ostringstream out(std::ios::binary);
  write_model(out, m);
  return out.str();
}

inline void save_model(const std::filesystem::path& path, const TrainedModel& m) { io::write_file(path, model_bytes(m)); }

inline TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open model checkpoint " + path.string());
  return read_model(in);
}

inline std::uint64_t model_checksum(const TrainedModel& m) { return io::fnv1a(model_bytes(m)); }

}  // namespace dualband
