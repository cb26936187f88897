#pragma once

// Run configuration and the five pipeline stages:
// simulate -> train -> calibrate -> monitor -> evaluate.
//
// Every stage reads the previous stage's artifacts from disk, so each one can
// be rerun on its own. Paths in the config are taken relative to the working
// directory. The config hash covers everything except paths and job count, so
// reports from two output directories compare byte for byte.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualband/conformal.hpp"
#include "dualband/core.hpp"
#include "dualband/error.hpp"
#include "dualband/eval.hpp"
#include "dualband/gauge_sim.hpp"
#include "dualband/io_util.hpp"
#include "dualband/parallel.hpp"
#include "dualband/scoring.hpp"
#include "dualband/tokenizer.hpp"
#include "dualband/trajectory_io.hpp"
#include "dualband/world_model.hpp"

namespace dualband {

// A stage could not run or did not finish; `stage` names it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunConfig {
  std::uint64_t seed = 2025;
  std::filesystem::path data_dir = "run/data";
  std::filesystem::path artifact_dir = "run/artifacts";
  std::filesystem::path report_dir = "run/reports";

  SimConfig sim;
  SplitCounts counts;

  std::size_t patch = 4;
  std::size_t latent_dim = 32;
  std::size_t downscale = 1;

  Hyperparams training;  // seed and skip are filled in from the run seed and scoring.skip

  ScoringOptions scoring;
  std::optional<double> shrinkage;
  std::optional<std::size_t> pca_rank;

  std::vector<Metric> metrics{kAllMetrics.begin(), kAllMetrics.end()};
  std::vector<double> alpha_grid{0.1, 0.05, 0.0};
  AmbiguityPolicy policy = AmbiguityPolicy::TreatAsSuccess;
  std::size_t histogram_bins = 30;

  std::size_t jobs = 1;

  RunConfig() { training.max_epochs = 40; }

  std::size_t frame_width() const { return sim.width / downscale; }
  std::size_t frame_height() const { return sim.height / downscale; }

  void validate() const {
    const auto check = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigurationError("config: " + msg);
    };
    check(!data_dir.empty() && !artifact_dir.empty() && !report_dir.empty(), "paths must be non-empty");
    check(sim.width > 0 && sim.height > 0, "frame size must be positive");
    check(sim.length >= 4, "simulator length must be >= 4");
    check(sim.frame_rate > 0, "frame rate must be positive");
    check(sim.noise_sigma >= 0, "noise must be non-negative");
    check(sim.ramp_fraction > 0 && sim.ramp_fraction <= 1, "ramp fraction must lie in (0,1]");
    check(sim.shadow_depth >= 0 && sim.shadow_depth <= 1, "shadow depth must lie in [0,1]");
    check(sim.glare_gain >= 0, "glare gain must be non-negative");
    check(downscale >= 1 && sim.width % downscale == 0 && sim.height % downscale == 0,
          "downscale must divide frame width and height");
    check(patch >= 1 && frame_width() % patch == 0 && frame_height() % patch == 0,
          "codec patch must divide the (downscaled) frame size");
    check(latent_dim >= 1 && latent_dim <= (frame_width() / patch) * (frame_height() / patch),
          "latent dim must lie in [1, patch grid size]");
    check(counts.train.ood == 0 && counts.val.ood == 0 && counts.calibration.ood == 0,
          "OOD trajectories may only appear in the test split");
    check(counts.train.success + counts.val.success >= 2 && counts.train.failure + counts.val.failure >= 2,
          "each model needs at least 2 train+val trajectories");
    check(counts.calibration.success >= 1 && counts.calibration.failure >= 1,
          "calibration needs trajectories of both nominal classes");
    check(scoring.skip >= 1, "skip must be >= 1");
    check(ceil_div(sim.length, scoring.skip) >= 3, "trajectories need at least 3 frames after skipping");
    check(scoring.std_window == 0 || scoring.std_window >= 2, "latent std window must be 0 or >= 2");
    if (shrinkage) check(*shrinkage >= 0, "shrinkage must be non-negative");
    if (pca_rank) check(*pca_rank >= 1 && *pca_rank <= latent_dim, "pca rank must lie in [1, latent dim]");
    check(!metrics.empty(), "metric list is empty");
    for (std::size_t i = 0; i < metrics.size(); ++i) {
      check(std::find(metrics.begin(), metrics.begin() + static_cast<std::ptrdiff_t>(i), metrics[i]) ==
                metrics.begin() + static_cast<std::ptrdiff_t>(i),
            "metric listed twice: " + std::string(to_string(metrics[i])));
    }
    check(!alpha_grid.empty(), "alpha grid is empty");
    for (double a : alpha_grid) check(a >= 0.0 && a <= 1.0, "alpha values must lie in [0,1]");
    check(histogram_bins >= 1, "histogram needs at least one bin");
    check(jobs >= 1, "jobs must be >= 1");
    try {
      hyperparams(ClassLabel::Success).validate();
    } catch (const InvalidInput& e) {
      throw ConfigurationError(std::string("config: ") + e.what());
    }
  }

  // Derived sub-seeds, one per consumer.
  std::uint64_t data_seed() const { return derive_seed(seed, io::fnv1a("data")); }
  std::uint64_t codec_seed() const { return derive_seed(seed, io::fnv1a("codec")); }

  Hyperparams hyperparams(ClassLabel cls) const {
    Hyperparams hp = training;
    hp.skip = scoring.skip;
    hp.seed = derive_seed(seed, io::fnv1a(cls == ClassLabel::Success ? "model/success" : "model/failure"));
    return hp;
  }
};

// ---- config file ----

namespace detail {

using nlohmann::json;

inline json counts_json(const ClassCounts& c) { return {{"success", c.success}, {"failure", c.failure}, {"ood", c.ood}}; }

// Content of the config that determines results (no paths, no job count).
inline json config_body(const RunConfig& c) {
  json metrics = json::array();
  for (auto m : c.metrics) metrics.push_back(std::string(to_string(m)));
  return {
      {"seed", c.seed},
      {"simulator",
       {{"width", c.sim.width},
        {"height", c.sim.height},
        {"length", c.sim.length},
        {"frame_rate", c.sim.frame_rate},
        {"noise_sigma", c.sim.noise_sigma},
        {"ramp_fraction", c.sim.ramp_fraction},
        {"blur_radius", c.sim.blur_radius},
        {"shadow_depth", c.sim.shadow_depth},
        {"glare_gain", c.sim.glare_gain},
        {"splits",
         {{"train", counts_json(c.counts.train)},
          {"val", counts_json(c.counts.val)},
          {"calibration", counts_json(c.counts.calibration)},
          {"test", counts_json(c.counts.test)}}}}},
      {"codec", {{"patch", c.patch}, {"latent_dim", c.latent_dim}, {"downscale", c.downscale}}},
      {"training",
       {{"learning_rate", c.training.learning_rate},
        {"weight_decay", c.training.weight_decay},
        {"batch_size", c.training.batch_size},
        {"clip_value", c.training.clip_value},
        {"patience", c.training.patience},
        {"min_delta", c.training.min_delta},
        {"max_epochs", c.training.max_epochs},
        {"validation_fraction", c.training.validation_fraction},
        {"hidden", c.training.hidden},
        {"center_weight", c.training.center_weight},
        {"hinge_cross", c.training.hinge_cross},
        {"pixel_target", std::string(to_string(c.training.pixel_target))}}},
      {"scoring",
       {{"skip", c.scoring.skip},
        {"std_window", c.scoring.std_window},
        {"latent_source", c.scoring.latent_source == LatentSource::Observed ? "observed" : "predicted"},
        {"shrinkage", c.shrinkage ? json(*c.shrinkage) : json(nullptr)},
        {"pca_rank", c.pca_rank ? json(*c.pca_rank) : json(nullptr)}}},
      {"metrics", metrics},
      {"alpha_grid", c.alpha_grid},
      {"ambiguity_policy", std::string(to_string(c.policy))},
      {"histogram_bins", c.histogram_bins},
  };
}

// Reads keys from one JSON object, rejecting any it does not know.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigurationError("config: '" + where_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigurationError("config: bad value for '" + where_ + key + "'");
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get_value(key, v);
    out = v;
  }

  const json* child(const char* key) {
    seen_.push_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ConfigurationError("config: unknown key '" + where_ + k + "'");
      }
    }
  }

 private:
  template <typename T>
  void get_value(const char* key, T& out) {
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigurationError("config: bad value for '" + where_ + key + "'");
    }
  }

  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

inline void read_counts(const json& j, const std::string& where, ClassCounts& c) {
  ObjectReader r(j, where);
  r.get("success", c.success);
  r.get("failure", c.failure);
  r.get("ood", c.ood);
  r.finish();
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  auto j = detail::config_body(c);
  j["paths"] = {{"data_dir", c.data_dir.generic_string()},
                {"artifact_dir", c.artifact_dir.generic_string()},
                {"report_dir", c.report_dir.generic_string()}};
  return j;
}

inline std::string config_hash(const RunConfig& c) { return io::hex64(io::fnv1a(detail::config_body(c).dump())); }

// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::ObjectReader;
  RunConfig c;
  ObjectReader top(j, "");
  top.get("seed", c.seed);
  if (const auto* p = top.child("paths")) {
    ObjectReader r(*p, "paths.");
    std::string data = c.data_dir.string(), art = c.artifact_dir.string(), rep = c.report_dir.string();
    r.get("data_dir", data);
    r.get("artifact_dir", art);
    r.get("report_dir", rep);
    r.finish();
    c.data_dir = data;
    c.artifact_dir = art;
    c.report_dir = rep;
  }
  if (const auto* s = top.child("simulator")) {
    ObjectReader r(*s, "simulator.");
    r.get("width", c.sim.width);
    r.get("height", c.sim.height);
    r.get("length", c.sim.length);
    r.get("frame_rate", c.sim.frame_rate);
    r.get("noise_sigma", c.sim.noise_sigma);
    r.get("ramp_fraction", c.sim.ramp_fraction);
    r.get("blur_radius", c.sim.blur_radius);
    r.get("shadow_depth", c.sim.shadow_depth);
    r.get("glare_gain", c.sim.glare_gain);
    if (const auto* sp = r.child("splits")) {
      ObjectReader rs(*sp, "simulator.splits.");
      for (auto [name, dest] : {std::pair<const char*, ClassCounts*>{"train", &c.counts.train},
                                {"val", &c.counts.val},
                                {"calibration", &c.counts.calibration},
                                {"test", &c.counts.test}}) {
        if (const auto* cj = rs.child(name)) detail::read_counts(*cj, std::string("simulator.splits.") + name + ".", *dest);
      }
      rs.finish();
    }
    r.finish();
  }
  if (const auto* s = top.child("codec")) {
    ObjectReader r(*s, "codec.");
    r.get("patch", c.patch);
    r.get("latent_dim", c.latent_dim);
    r.get("downscale", c.downscale);
    r.finish();
  }
  if (const auto* s = top.child("training")) {
    ObjectReader r(*s, "training.");
    auto& t = c.training;
    r.get("learning_rate", t.learning_rate);
    r.get("weight_decay", t.weight_decay);
    r.get("batch_size", t.batch_size);
    r.get("clip_value", t.clip_value);
    r.get("patience", t.patience);
    r.get("min_delta", t.min_delta);
    r.get("max_epochs", t.max_epochs);
    r.get("validation_fraction", t.validation_fraction);
    r.get("hidden", t.hidden);
    r.get("center_weight", t.center_weight);
    r.get("hinge_cross", t.hinge_cross);
    std::string target(to_string(t.pixel_target));
    r.get("pixel_target", target);
    if (target != "codec" && target != "raw") throw ConfigurationError("config: training.pixel_target must be 'codec' or 'raw'");
    t.pixel_target = parse_pixel_target(target);
    r.finish();
  }
  if (const auto* s = top.child("scoring")) {
    ObjectReader r(*s, "scoring.");
    r.get("skip", c.scoring.skip);
    r.get("std_window", c.scoring.std_window);
    std::string source = c.scoring.latent_source == LatentSource::Observed ? "observed" : "predicted";
    r.get("latent_source", source);
    if (source == "observed") {
      c.scoring.latent_source = LatentSource::Observed;
    } else if (source == "predicted") {
      c.scoring.latent_source = LatentSource::Predicted;
    } else {
      throw ConfigurationError("config: scoring.latent_source must be 'observed' or 'predicted'");
    }
    r.get_optional("shrinkage", c.shrinkage);
    r.get_optional("pca_rank", c.pca_rank);
    r.finish();
  }
  if (top.child("metrics")) {
    std::vector<std::string> names;
    top.get("metrics", names);
    c.metrics.clear();
    for (const auto& n : names) {
      try {
        c.metrics.push_back(parse_metric(n));
      } catch (const Error&) {
        throw ConfigurationError("config: unknown metric '" + n + "'");
      }
    }
  }
  top.get("alpha_grid", c.alpha_grid);
  if (top.child("ambiguity_policy")) {
    std::string p;
    top.get("ambiguity_policy", p);
    try {
      c.policy = parse_ambiguity_policy(p);
    } catch (const Error&) {
      throw ConfigurationError("config: unknown ambiguity policy '" + p + "'");
    }
  }
  top.get("histogram_bins", c.histogram_bins);
  top.finish();
  c.validate();
  return c;
}

inline RunConfig parse_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigurationError(std::string("config: not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---- artifact layout ----

struct ArtifactPaths {
  std::filesystem::path manifest, trajectories;
  std::filesystem::path codec, success_model, failure_model, success_history, failure_history;
  std::filesystem::path success_stats, failure_stats, thresholds, success_scores, failure_scores;
  std::filesystem::path events, input_events;
  std::filesystem::path accuracy, detection_time, histograms;

  explicit ArtifactPaths(const RunConfig& c)
      : manifest(c.data_dir / "manifest.tsv"),
        trajectories(c.data_dir / "trajectories"),
        codec(c.artifact_dir / "models" / "codec.txt"),
        success_model(c.artifact_dir / "models" / "success.ckpt"),
        failure_model(c.artifact_dir / "models" / "failure.ckpt"),
        success_history(c.artifact_dir / "models" / "success_history.txt"),
        failure_history(c.artifact_dir / "models" / "failure_history.txt"),
        success_stats(c.artifact_dir / "calibration" / "stats_success.txt"),
        failure_stats(c.artifact_dir / "calibration" / "stats_failure.txt"),
        thresholds(c.artifact_dir / "calibration" / "thresholds.txt"),
        success_scores(c.artifact_dir / "calibration" / "scores_success.txt"),
        failure_scores(c.artifact_dir / "calibration" / "scores_failure.txt"),
        events(c.artifact_dir / "events" / "events.txt"),
        input_events(c.artifact_dir / "events" / "input_events.txt"),
        accuracy(c.report_dir / "accuracy.txt"),
        detection_time(c.report_dir / "detection_time.txt"),
        histograms(c.report_dir / "histograms.txt") {}

  std::filesystem::path incomplete_marker(const RunConfig& c, std::string_view stage) const {
    return c.artifact_dir / (std::string(stage) + ".incomplete");
  }
};

inline std::map<std::string, std::string> provenance(const RunConfig& c) {
  return {{"config_hash", config_hash(c)}, {"seed", std::to_string(c.seed)}};
}

namespace detail {

inline std::string comment_header(const RunConfig& c, std::string_view title) {
  std::ostringstream out;
  out << "# " << title << '\n';
  for (const auto& [k, v] : provenance(c)) out << "# " << k << ' ' << v << '\n';
  return out.str();
}

inline void need(const std::filesystem::path& p, std::string_view stage, std::string_view what, std::string_view producer) {
  if (!std::filesystem::exists(p)) {
    throw StageError(std::string(stage), "missing " + std::string(what) + " " + p.generic_string() + "; run `" +
                                             std::string(producer) + "` first");
  }
}

inline std::string hash_line_value(const std::string& text, std::string_view key) {
  std::istringstream in(text);
  std::string line;
  const std::string prefix = "# " + std::string(key) + " ";
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  }
  return {};
}

}  // namespace detail

// ---- manifest ----

struct ManifestEntry {
  std::string id;
  std::string split;
  std::string path;  // relative to the data dir
  ClassLabel truth = ClassLabel::Success;
  ConditionKind kind = ConditionKind::Centered;
  std::optional<std::size_t> onset;  // raw frame index
  std::uint64_t seed = 0;
};

inline void write_manifest(std::ostream& out, std::span<const ManifestEntry> entries,
                           const std::map<std::string, std::string>& prov) {
  out << "# dualband manifest\n";
  for (const auto& [k, v] : prov) out << "# " << k << ' ' << v << '\n';
  out << "id\tsplit\tpath\tclass\tkind\tonset\tseed\n";
  for (const auto& e : entries) {
    out << e.id << '\t' << e.split << '\t' << e.path << '\t' << to_string(e.truth) << '\t' << to_string(e.kind) << '\t'
        << (e.onset ? std::to_string(*e.onset) : "none") << '\t' << e.seed << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(std::istream& in) {
  std::vector<ManifestEntry> out;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "id\tsplit\tpath\tclass\tkind\tonset\tseed") throw FormatError("manifest: bad column header");
      header = true;
      continue;
    }
    const auto p = io::split(line, '\t');
    if (p.size() != 7) throw FormatError("manifest: malformed row: " + line);
    ManifestEntry e;
    e.id = p[0];
    e.split = p[1];
    e.path = p[2];
    e.truth = parse_class_label(p[3]);
    e.kind = parse_condition_kind(p[4]);
    if (p[5] != "none") e.onset = io::parse_u64(p[5]);
    e.seed = io::parse_u64(p[6]);
    out.push_back(std::move(e));
  }
  if (!header) throw FormatError("manifest: missing column header");
  return out;
}

// ---- stages ----

namespace detail {

struct StageGuard {
  const RunConfig& config;
  std::string stage;
  std::filesystem::path marker;
  bool done = false;

  StageGuard(const RunConfig& c, std::string s) : config(c), stage(std::move(s)), marker(ArtifactPaths(c).incomplete_marker(c, stage)) {
    std::filesystem::create_directories(c.artifact_dir);
    io::write_file(marker, "stage " + stage + " started and has not finished; its outputs may be partial\n");
  }
  ~StageGuard() {
    if (done) {
      std::error_code ec;
      std::filesystem::remove(marker, ec);
    }
  }
  StageGuard(const StageGuard&) = delete;
  StageGuard& operator=(const StageGuard&) = delete;
};

inline std::vector<ManifestEntry> load_manifest_for(const RunConfig& c, std::string_view stage) {
  const ArtifactPaths paths(c);
  need(paths.manifest, stage, "dataset manifest", "simulate");
  std::ifstream in(paths.manifest);
  return read_manifest(in);
}

inline Trajectory load_entry(const RunConfig& c, const ManifestEntry& e) {
  auto t = load_trajectory(c.data_dir / e.path);
  return area_downscale(t, c.downscale);
}

inline std::vector<Trajectory> load_split(const RunConfig& c, std::span<const ManifestEntry> manifest,
                                          std::initializer_list<std::string_view> splits, ClassLabel cls,
                                          const ParallelFor& pfor, std::vector<const ManifestEntry*>* entries = nullptr) {
  std::vector<const ManifestEntry*> picked;
  for (const auto& e : manifest) {
    if (e.truth == cls && std::find(splits.begin(), splits.end(), e.split) != splits.end()) picked.push_back(&e);
  }
  std::vector<Trajectory> out(picked.size());
  pfor(picked.size(), [&](std::size_t i) { out[i] = load_entry(c, *picked[i]); });
  if (entries) *entries = std::move(picked);
  return out;
}

inline std::string history_text(const RunConfig& c, const TrainingResult& r, ClassLabel cls) {
  std::ostringstream out;
  out << comment_header(c, "training history, " + std::string(to_string(cls)) + " model");
  out << "# initial_train_loss " << io::fmt(r.initial_train_loss) << '\n'
      << "# initial_val_loss " << io::fmt(r.initial_val_loss) << '\n'
      << "# best_epoch " << r.best_epoch << '\n'
      << "# stopped_early " << (r.stopped_early ? 1 : 0) << '\n'
      << "epoch train val max_grad\n";
  for (const auto& e : r.history) {
    out << e.epoch << ' ' << io::fmt(e.train_loss) << ' ' << io::fmt(e.val_loss) << ' ' << io::fmt(e.max_applied_grad)
        << '\n';
  }
  return out.str();
}

}  // namespace detail

inline void stage_simulate(const RunConfig& c, const ParallelFor& pfor) {
  c.validate();
  detail::StageGuard guard(c, "simulate");
  const ArtifactPaths paths(c);
  auto plan = plan_dataset(c.counts, c.sim.length, c.data_seed());
  std::vector<ManifestEntry> entries(plan.size());
  pfor(plan.size(), [&](std::size_t i) {
    const auto& r = plan[i];
    auto& e = entries[i];
    e.id = r.id;
    e.split = r.split;
    e.path = "trajectories/" + r.id + ".traj";
    e.truth = r.truth;
    e.kind = r.kind;
    e.onset = r.onset;
    e.seed = r.seed;
    save_trajectory(c.data_dir / e.path, generate_trajectory(r.truth, c.sim, r.seed));
  });
  std::ostringstream out;
  write_manifest(out, entries, provenance(c));
  io::write_file(paths.manifest, out.str());
  guard.done = true;
}

inline void stage_train(const RunConfig& c, const ParallelFor& pfor) {
  c.validate();
  const auto manifest = detail::load_manifest_for(c, "train");
  detail::StageGuard guard(c, "train");
  const ArtifactPaths paths(c);
  const auto codec = build_codec(c.frame_width(), c.frame_height(), c.patch, c.latent_dim, c.codec_seed());
  save_codec(paths.codec, codec);
  for (auto cls : {ClassLabel::Success, ClassLabel::KnownFailure}) {
    const auto data = detail::load_split(c, manifest, {"train", "val"}, cls, pfor);
    if (data.empty()) throw StageError("train", "no train/val trajectories for class " + std::string(to_string(cls)));
    const auto result = train(data, codec, c.hyperparams(cls), pfor);
    const bool s = cls == ClassLabel::Success;
    save_model(s ? paths.success_model : paths.failure_model, result.model);
    io::write_file(s ? paths.success_history : paths.failure_history, detail::history_text(c, result, cls));
  }
  guard.done = true;
}

// Everything a detector needs, loaded from the artifact directory.
struct DetectorBundle {
  Codec codec;
  TrainedModel success_model, failure_model;
  CalibrationStats success_stats, failure_stats;
  std::vector<ThresholdRecord> thresholds;

  const TrainedModel& model(ClassLabel cls) const { return cls == ClassLabel::Success ? success_model : failure_model; }
  const CalibrationStats& stats(ClassLabel cls) const { return cls == ClassLabel::Success ? success_stats : failure_stats; }

  ScoringContext context(const RunConfig& c, Metric metric, ClassLabel cls) const {
    ScoringContext ctx;
    ctx.metric = metric;
    ctx.codec = &codec;
    ctx.model = &model(cls);
    ctx.stats = &stats(cls);
    ctx.options = c.scoring;
    return ctx;
  }
};

namespace detail {

inline TrainedModel load_model_for(const std::filesystem::path& p, std::string_view stage) {
  need(p, stage, "model checkpoint", stage == "calibrate" ? "train" : "train` and `calibrate");
  return load_model(p);
}

inline CalibrationStats load_stats_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.generic_string());
  return read_stats(in);
}

inline std::string stats_text(const CalibrationStats& s) {
  std::ostringstream out;
  write_stats(out, s);
  return out.str();
}

}  // namespace detail

inline void stage_calibrate(const RunConfig& c, const ParallelFor& pfor) {
  c.validate();
  const ArtifactPaths paths(c);
  const auto manifest = detail::load_manifest_for(c, "calibrate");
  detail::need(paths.codec, "calibrate", "codec", "train");
  DetectorBundle b;
  b.codec = load_codec(paths.codec);
  b.success_model = detail::load_model_for(paths.success_model, "calibrate");
  b.failure_model = detail::load_model_for(paths.failure_model, "calibrate");
  if (b.codec.seed() != c.codec_seed() || b.codec.latent_dim() != c.latent_dim) {
    throw StageError("calibrate", "codec on disk does not match the config; rerun `train`");
  }
  detail::StageGuard guard(c, "calibrate");

  // Gaussian fits from each class's training data.
  for (auto cls : {ClassLabel::Success, ClassLabel::KnownFailure}) {
    const auto data = detail::load_split(c, manifest, {"train", "val"}, cls, pfor);
    const auto latents = stats_latents(b.codec, &b.model(cls), c.scoring.latent_source, data, c.scoring.skip);
    auto stats = fit_calibration_stats(latents, c.shrinkage, c.pca_rank);
    io::write_file(cls == ClassLabel::Success ? paths.success_stats : paths.failure_stats, detail::stats_text(stats));
    (cls == ClassLabel::Success ? b.success_stats : b.failure_stats) = detail::load_stats_file(
        cls == ClassLabel::Success ? paths.success_stats : paths.failure_stats);
  }

  // Calibration videos are trimmed to one length so none weighs more.
  std::vector<const ManifestEntry*> s_entries, f_entries;
  const auto cal_s = detail::load_split(c, manifest, {"calibration"}, ClassLabel::Success, pfor, &s_entries);
  const auto cal_f = detail::load_split(c, manifest, {"calibration"}, ClassLabel::KnownFailure, pfor, &f_entries);
  std::vector<Trajectory> all(cal_s);
  all.insert(all.end(), cal_f.begin(), cal_f.end());
  all = trim_to_common_length(all);

  std::vector<ThresholdRecord> records;
  std::ostringstream dump_s, dump_f;
  dump_s << detail::comment_header(c, "calibration scores, success model") << "id pair metric score\n";
  dump_f << detail::comment_header(c, "calibration scores, failure model") << "id pair metric score\n";
  const auto checksum = [&](ClassLabel cls) { return io::hex64(model_checksum(b.model(cls))); };
  for (auto metric : c.metrics) {
    for (auto cls : {ClassLabel::Success, ClassLabel::KnownFailure}) {
      const bool s = cls == ClassLabel::Success;
      const std::size_t offset = s ? 0 : cal_s.size(), count = s ? cal_s.size() : cal_f.size();
      const auto& entries = s ? s_entries : f_entries;
      const auto ctx = b.context(c, metric, cls);
      std::vector<TrajectoryScore> scores(count);
      pfor(count, [&](std::size_t i) { scores[i] = score_trajectory(ctx, all[offset + i]); });
      std::vector<double> aggregates;
      for (std::size_t i = 0; i < count; ++i) {
        write_score_lines(s ? dump_s : dump_f, entries[i]->id, scores[i]);
        aggregates.push_back(scores[i].aggregate);
      }
      for (double alpha : c.alpha_grid) {
        ThresholdRecord r;
        r.threshold = calibrate_threshold(aggregates, alpha, metric, cls);
        r.codec_seed = b.codec.seed();
        r.model_checksum = uses_model(metric) || c.scoring.latent_source == LatentSource::Predicted ? checksum(cls) : "none";
        records.push_back(r);
      }
    }
  }
  std::ostringstream out;
  auto prov = provenance(c);
  prov["success_model"] = checksum(ClassLabel::Success);
  prov["failure_model"] = checksum(ClassLabel::KnownFailure);
  prov["success_stats"] = io::hex64(io::fnv1a(detail::stats_text(b.success_stats)));
  prov["failure_stats"] = io::hex64(io::fnv1a(detail::stats_text(b.failure_stats)));
  prov["calibration_length"] = std::to_string(all.front().length());
  write_thresholds(out, records, prov);
  io::write_file(paths.success_scores, dump_s.str());
  io::write_file(paths.failure_scores, dump_f.str());
  io::write_file(paths.thresholds, out.str());
  guard.done = true;
}

// Loads and cross-checks every artifact monitoring depends on.
inline DetectorBundle load_detectors(const RunConfig& c, std::string_view stage = "monitor") {
  const ArtifactPaths paths(c);
  detail::need(paths.codec, stage, "codec", "train");
  DetectorBundle b;
  b.codec = load_codec(paths.codec);
  b.success_model = detail::load_model_for(paths.success_model, stage);
  b.failure_model = detail::load_model_for(paths.failure_model, stage);
  detail::need(paths.thresholds, stage, "thresholds", "calibrate");
  detail::need(paths.success_stats, stage, "calibration stats", "calibrate");
  detail::need(paths.failure_stats, stage, "calibration stats", "calibrate");
  b.success_stats = detail::load_stats_file(paths.success_stats);
  b.failure_stats = detail::load_stats_file(paths.failure_stats);

  std::ifstream in(paths.thresholds);
  const auto header = io::Header::read(in, kThresholdsMagic);
  in.seekg(0);
  b.thresholds = read_thresholds(in);
  const auto stale = [&](const std::string& what) {
    throw StageError(std::string(stage), what + " differs from the one thresholds were calibrated with; rerun `calibrate`");
  };
  if (header.get("config_hash") != config_hash(c)) stale("config");
  if (header.get("success_model") != io::hex64(model_checksum(b.success_model))) stale("success model checkpoint");
  if (header.get("failure_model") != io::hex64(model_checksum(b.failure_model))) stale("failure model checkpoint");
  if (header.get("success_stats") != io::hex64(io::fnv1a(detail::stats_text(b.success_stats)))) stale("success stats");
  if (header.get("failure_stats") != io::hex64(io::fnv1a(detail::stats_text(b.failure_stats)))) stale("failure stats");
  for (const auto& r : b.thresholds) {
    if (r.codec_seed != b.codec.seed()) stale("codec");
  }
  return b;
}

// Events for one trajectory: every configured metric and alpha.
inline std::vector<EventRecord> monitor_trajectory(const RunConfig& c, const DetectorBundle& b, const std::string& id,
                                                   const Trajectory& trajectory) {
  const auto skipped = frame_skip(trajectory, c.scoring.skip);
  std::vector<EventRecord> out;
  for (auto metric : c.metrics) {
    const auto s = score_pairs(b.context(c, metric, ClassLabel::Success), skipped);
    const auto f = score_pairs(b.context(c, metric, ClassLabel::KnownFailure), skipped);
    for (double alpha : c.alpha_grid) {
      const auto ts = find_threshold(b.thresholds, metric, ClassLabel::Success, alpha);
      const auto tf = find_threshold(b.thresholds, metric, ClassLabel::KnownFailure, alpha);
      if (!ts || !tf) {
        throw StageError("monitor", "no threshold for " + std::string(to_string(metric)) + " at alpha " + io::fmt(alpha) +
                                        "; rerun `calibrate`");
      }
      EventRecord r;
      r.id = id;
      r.metric = metric;
      r.alpha = alpha;
      r.truth = trajectory.truth_class();
      r.onset = skipped.truth_onset();
      r.skip = c.scoring.skip;
      r.frame_rate = trajectory.frame_rate();
      r.event = monitor_series(s, f, ts->eta, tf->eta, c.policy);
      out.push_back(std::move(r));
    }
  }
  return out;
}

// Monitors the test split, or the trajectory files under `input` when given.
// Returns the records written.
inline std::vector<EventRecord> stage_monitor(const RunConfig& c, const ParallelFor& pfor,
                                              const std::optional<std::filesystem::path>& input = std::nullopt) {
  c.validate();
  const ArtifactPaths paths(c);
  std::vector<std::pair<std::string, std::filesystem::path>> sources;
  if (input) {
    if (std::filesystem::is_directory(*input)) {
      for (const auto& e : std::filesystem::directory_iterator(*input)) {
        if (e.is_regular_file() && e.path().extension() == ".traj") sources.push_back({e.path().stem().string(), e.path()});
      }
      std::sort(sources.begin(), sources.end());
    } else if (std::filesystem::is_regular_file(*input)) {
      sources.push_back({input->stem().string(), *input});
    } else {
      throw StageError("monitor", "input " + input->generic_string() + " does not exist");
    }
    if (sources.empty()) throw StageError("monitor", "no .traj files under " + input->generic_string());
  } else {
    for (const auto& e : detail::load_manifest_for(c, "monitor")) {
      if (e.split == "test") sources.push_back({e.id, c.data_dir / e.path});
    }
  }
  const auto bundle = load_detectors(c);
  detail::StageGuard guard(c, "monitor");
  std::vector<std::vector<EventRecord>> per(sources.size());
  pfor(sources.size(), [&](std::size_t i) {
    auto t = area_downscale(load_trajectory(sources[i].second), c.downscale);
    if (!bundle.codec.matches(t.frame(0))) {
      throw StageError("monitor", sources[i].first + ": frame size does not match the codec");
    }
    per[i] = monitor_trajectory(c, bundle, sources[i].first, t);
  });
  std::vector<EventRecord> records;
  for (auto& v : per) records.insert(records.end(), v.begin(), v.end());
  std::ostringstream out;
  write_events(out, records, provenance(c));
  io::write_file(input ? paths.input_events : paths.events, out.str());
  guard.done = true;
  return records;
}

inline constexpr std::string_view kOnsetNote =
    "reference time: simulator ground-truth onset stands in for human-observer time; "
    "success rows are measured against the end of the stream";

// `report_alphas` narrows the reports to part of the calibrated grid without touching the config hash.
inline void stage_evaluate(const RunConfig& c, const ParallelFor& pfor = ParallelFor{},
                           const std::optional<std::vector<double>>& report_alphas = std::nullopt) {
  (void)pfor;
  c.validate();
  const std::vector<double> alphas = report_alphas.value_or(c.alpha_grid);
  if (alphas.empty()) throw ConfigurationError("evaluate: empty alpha grid");
  for (double a : alphas) {
    if (std::find(c.alpha_grid.begin(), c.alpha_grid.end(), a) == c.alpha_grid.end()) {
      throw ConfigurationError("evaluate: alpha " + io::fmt(a) + " is not in the calibrated grid");
    }
  }
  const ArtifactPaths paths(c);
  detail::need(paths.events, "evaluate", "event records", "monitor");
  const auto events_text = io::read_file(paths.events);
  std::istringstream in(events_text);
  const auto header = io::Header::read(in, kEventsMagic);
  if (header.get("config_hash") != config_hash(c)) {
    throw StageError("evaluate", "event records come from a different config; rerun `monitor`");
  }
  in.seekg(0);
  const auto records = read_events(in);
  detail::need(paths.thresholds, "evaluate", "thresholds", "calibrate");
  std::vector<ThresholdRecord> thresholds;
  {
    std::ifstream tin(paths.thresholds);
    thresholds = read_thresholds(tin);
  }
  detail::StageGuard guard(c, "evaluate");

  {
    std::ostringstream out;
    out << detail::comment_header(c, "accuracy (%) per class, label after the whole stream");
    out << "# ambiguity_policy " << to_string(c.policy) << '\n';
    const auto settled = accuracy_report(records, alphas, LabelBasis::Settled);
    const auto at_k = accuracy_report(records, alphas, LabelBasis::AtDetection);
    write_accuracy_table(out, settled);
    out << "\n# label at the detection time\n";
    write_accuracy_table(out, at_k);
    out << "\n# records\n";
    write_accuracy_records(out, settled);
    write_accuracy_records(out, at_k);
    io::write_file(paths.accuracy, out.str());
  }
  {
    std::ostringstream out;
    out << detail::comment_header(c, "detection time minus reference, seconds (mean +- standard error)");
    out << "# " << kOnsetNote << '\n';
    const auto rows = detection_time_report(records, alphas);
    write_delta_table(out, rows);
    out << "\n# records\n";
    write_delta_records(out, rows);
    io::write_file(paths.detection_time, out.str());
  }
  {
    std::ostringstream out;
    out << detail::comment_header(c, "per-trajectory maximum score histograms by truth class");
    for (auto metric : c.metrics) {
      for (auto cls : {ClassLabel::Success, ClassLabel::KnownFailure}) {
        for (double alpha : alphas) {
          const auto t = find_threshold(thresholds, metric, cls, alpha);
          if (!t) throw StageError("evaluate", "thresholds do not cover the configured metrics and alphas; rerun `calibrate`");
          std::map<std::string, std::vector<double>> by_class;
          for (const auto& r : records) {
            if (r.metric != metric || r.alpha != alpha || !r.truth) continue;
            by_class[std::string(to_string(*r.truth))].push_back(
                cls == ClassLabel::Success ? r.event.final_score_success : r.event.final_score_fail);
          }
          if (by_class.empty()) continue;
          const std::string label = std::string(to_string(metric)) + " model=" + std::string(to_string(cls)) +
                                    " alpha=" + io::fmt(alpha);
          write_histogram(out, label, histogram_export(by_class, t->eta, c.histogram_bins));
        }
      }
    }
    io::write_file(paths.histograms, out.str());
  }
  guard.done = true;
}

inline void run_pipeline(const RunConfig& c, const ParallelFor& pfor) {
  stage_simulate(c, pfor);
  stage_train(c, pfor);
  stage_calibrate(c, pfor);
  stage_monitor(c, pfor);
  stage_evaluate(c, pfor);
}

}  // namespace dualband
