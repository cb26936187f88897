#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dualband/pipeline.hpp"

using namespace dualband;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_prefix(const std::string& text, std::string_view prefix) {
  std::istringstream in(text);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += line.rfind(prefix, 0) == 0;
  return n;
}

RunConfig tiny(const fs::path& root) {
  RunConfig c;
  c.seed = 7;
  c.data_dir = root / "data";
  c.artifact_dir = root / "art";
  c.report_dir = root / "rep";
  c.sim.width = 32;
  c.sim.height = 24;
  c.sim.length = 24;
  c.sim.blur_radius = 2;
  c.counts.train = {3, 3, 0};
  c.counts.val = {1, 1, 0};
  c.counts.calibration = {6, 6, 0};
  c.counts.test = {3, 3, 4};
  c.latent_dim = 8;
  c.training.hidden = 8;
  c.training.max_epochs = 2;
  c.histogram_bins = 5;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dualband_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// One full tiny run shared by the read-only checks below.
class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fresh_dir("shared"));
    config_ = new RunConfig(tiny(*root_));
    run_pipeline(*config_, ParallelFor{1});
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete config_;
    delete root_;
  }
  static fs::path* root_;
  static RunConfig* config_;
};
fs::path* PipelineRun::root_ = nullptr;
RunConfig* PipelineRun::config_ = nullptr;

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DUALBAND_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_config(const fs::path& p, const RunConfig& c) { io::write_file(p, config_to_json(c).dump(2)); }

}  // namespace

TEST(Config, JsonRoundTripPreservesHash) {
  auto c = tiny("/x");
  c.shrinkage = 0.25;
  c.training.pixel_target = PixelTarget::Raw;
  const auto back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.data_dir, c.data_dir);
  EXPECT_EQ(back.training.pixel_target, PixelTarget::Raw);
  EXPECT_EQ(*back.shrinkage, 0.25);
}

TEST(Config, HashIgnoresPathsAndJobs) {
  auto a = tiny("/a");
  auto b = tiny("/b");
  b.jobs = 4;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 8;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  auto j = config_to_json(tiny("/x"));
  j["training"]["learning_rat"] = 0.1;
  EXPECT_THROW(config_from_json(j), ConfigurationError);
  EXPECT_THROW(parse_config("{not json"), ConfigurationError);
  EXPECT_THROW(parse_config(R"({"alpha_grid": [1.5]})"), ConfigurationError);
  EXPECT_THROW(parse_config(R"({"metrics": ["nope"]})"), ConfigurationError);
  EXPECT_THROW(parse_config(R"({"scoring": {"skip": 0}})"), ConfigurationError);
  EXPECT_THROW(load_config("/nonexistent/dualband.json"), ConfigurationError);
  auto c = tiny("/x");
  c.downscale = 5;  // 32 is not divisible by 5
  EXPECT_THROW(c.validate(), ConfigurationError);
}

TEST(Config, DefaultFileMatchesBuiltInDefaults) {
  const auto c = load_config(fs::path(DUALBAND_SOURCE_DIR) / "configs" / "default.json");
  EXPECT_EQ(config_hash(c), config_hash(RunConfig{}));
}

TEST(Manifest, RoundTrip) {
  std::vector<ManifestEntry> in{{"train_s0", "train", "trajectories/train_s0.traj", ClassLabel::Success,
                                 ConditionKind::Centered, std::nullopt, 11},
                                {"test_o3", "test", "trajectories/test_o3.traj", ClassLabel::OOD, ConditionKind::Glare, 40,
                                 99}};
  std::stringstream s;
  write_manifest(s, in, {{"seed", "1"}});
  const auto out = read_manifest(s);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].id, "test_o3");
  EXPECT_EQ(out[1].kind, ConditionKind::Glare);
  EXPECT_EQ(*out[1].onset, 40u);
  EXPECT_FALSE(out[0].onset);
  std::stringstream bad("train_s0\ttrain\n");
  EXPECT_THROW(read_manifest(bad), FormatError);
}

TEST_F(PipelineRun, WritesEveryArtifactAndNoMarkers) {
  const ArtifactPaths p(*config_);
  for (const auto& f : {p.manifest, p.codec, p.success_model, p.failure_model, p.success_history, p.failure_history,
                        p.success_stats, p.failure_stats, p.thresholds, p.events, p.accuracy, p.detection_time,
                        p.histograms}) {
    EXPECT_TRUE(fs::exists(f)) << f;
  }
  for (const auto* s : {"simulate", "train", "calibrate", "monitor", "evaluate"}) {
    EXPECT_FALSE(fs::exists(p.incomplete_marker(*config_, s))) << s;
  }
  std::ifstream m(p.manifest);
  EXPECT_EQ(read_manifest(m).size(), 30u);
}

TEST_F(PipelineRun, ThresholdAndHistogramCounts) {
  const ArtifactPaths p(*config_);
  // 7 metrics x 2 models x 3 alphas
  std::ifstream in(p.thresholds);
  EXPECT_EQ(read_thresholds(in).size(), 42u);
  const auto h = slurp(p.histograms);
  EXPECT_EQ(count_prefix(h, "histogram "), 42u);
  EXPECT_NE(h.find("bins=5"), std::string::npos);
}

TEST_F(PipelineRun, EventsCoverTestSplitPerMetricAndAlpha) {
  std::ifstream in(ArtifactPaths(*config_).events);
  const auto events = read_events(in);
  EXPECT_EQ(events.size(), 10u * 7u * 3u);
  for (const auto& r : events) {
    ASSERT_TRUE(r.truth);
    EXPECT_EQ(r.onset.has_value(), *r.truth != ClassLabel::Success);
    EXPECT_GE(r.event.detected_time, 1u);
  }
}

TEST_F(PipelineRun, ReportsCarryProvenance) {
  const ArtifactPaths p(*config_);
  const std::string hash = "# config_hash " + config_hash(*config_);
  for (const auto& f : {p.accuracy, p.detection_time, p.histograms}) {
    EXPECT_NE(slurp(f).find(hash), std::string::npos) << f;
  }
}

TEST_F(PipelineRun, MonitorInputWritesSeparateEvents) {
  const auto dir = *root_ / "extra";
  fs::create_directories(dir);
  save_trajectory(dir / "one.traj", generate_trajectory(ClassLabel::OOD, config_->sim, 4242));
  save_trajectory(dir / "two.traj", generate_trajectory(ClassLabel::Success, config_->sim, 4243));
  const auto before = slurp(ArtifactPaths(*config_).events);
  const auto recs = stage_monitor(*config_, ParallelFor{1}, dir);
  EXPECT_EQ(recs.size(), 2u * 7u * 3u);
  EXPECT_EQ(recs.front().id, "one");
  EXPECT_TRUE(fs::exists(ArtifactPaths(*config_).input_events));
  EXPECT_EQ(slurp(ArtifactPaths(*config_).events), before);
  EXPECT_THROW(stage_monitor(*config_, ParallelFor{1}, *root_ / "missing"), StageError);
}

TEST_F(PipelineRun, StaleCalibrationIsRejected) {
  auto other = *config_;
  other.scoring.std_window = 5;  // changes the config hash but not the models
  try {
    stage_monitor(other, ParallelFor{1});
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_NE(std::string(e.what()).find("calibrate"), std::string::npos);
  }
}

TEST(Pipeline, MissingCheckpointNamesProducer) {
  const auto root = fresh_dir("missing");
  const auto c = tiny(root);
  stage_simulate(c, ParallelFor{1});
  try {
    stage_monitor(c, ParallelFor{1});
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "monitor");
    EXPECT_NE(std::string(e.what()).find("train"), std::string::npos);
  }
  EXPECT_THROW(stage_calibrate(c, ParallelFor{1}), StageError);
  EXPECT_THROW(stage_evaluate(c), StageError);
  fs::remove_all(root);
}

TEST(Pipeline, FailedStageLeavesIncompleteMarker) {
  const auto root = fresh_dir("marker");
  const auto c = tiny(root);
  stage_simulate(c, ParallelFor{1});
  io::write_file(c.data_dir / "trajectories" / "train_f0.traj", "truncated");
  EXPECT_THROW(stage_train(c, ParallelFor{1}), FormatError);
  EXPECT_TRUE(fs::exists(ArtifactPaths(c).incomplete_marker(c, "train")));
  EXPECT_FALSE(fs::exists(ArtifactPaths(c).incomplete_marker(c, "simulate")));
  fs::remove_all(root);
}

TEST(Pipeline, ReportsAreByteIdenticalAcrossDirectoriesAndJobs) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  auto ca = tiny(a), cb = tiny(b);
  cb.jobs = 2;
  run_pipeline(ca, ParallelFor{1});
  run_pipeline(cb, ParallelFor{2});
  const ArtifactPaths pa(ca), pb(cb);
  EXPECT_EQ(slurp(pa.accuracy), slurp(pb.accuracy));
  EXPECT_EQ(slurp(pa.detection_time), slurp(pb.detection_time));
  EXPECT_EQ(slurp(pa.histograms), slurp(pb.histograms));
  EXPECT_EQ(slurp(pa.thresholds), slurp(pb.thresholds));
  EXPECT_EQ(slurp(pa.success_model), slurp(pb.success_model));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, ExitCodes) {
  const auto root = fresh_dir("cli");
  const auto cfg = root / "config.json";
  write_config(cfg, tiny(root));
  EXPECT_EQ(run_cli("default-config"), 0);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("simulate --config " + (root / "absent.json").string()), 2);
  io::write_file(root / "bad.json", R"({"seed": 1, "colour": "red"})");
  EXPECT_EQ(run_cli("simulate --config " + (root / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("monitor --config " + cfg.string()), 3);  // nothing simulated yet
  EXPECT_EQ(run_cli("simulate --config " + cfg.string()), 0);
  EXPECT_EQ(run_cli("train --config " + cfg.string()), 0);
  EXPECT_EQ(run_cli("evaluate --config " + cfg.string()), 3);
  EXPECT_EQ(run_cli("calibrate --config " + cfg.string()), 0);
  EXPECT_EQ(run_cli("monitor --config " + cfg.string()), 0);
  EXPECT_EQ(run_cli("evaluate --config " + cfg.string() + " --alpha-grid 0.1,0.05"), 0);
  EXPECT_TRUE(fs::exists(root / "rep" / "accuracy.txt"));
  EXPECT_EQ(run_cli("evaluate --config " + cfg.string() + " --alpha-grid 0.2"), 2);
  EXPECT_EQ(run_cli("monitor --config " + cfg.string() + " --input " + (root / "data" / "trajectories").string()), 0);
  EXPECT_TRUE(fs::exists(root / "art" / "events" / "input_events.txt"));
  fs::remove_all(root);
}
