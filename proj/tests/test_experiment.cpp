#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace dualconv;
using testing_support::TempDir;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// Eight 8x8 synthetic images, small enough for every mode to run in seconds.
ExperimentConfig smoke(const std::string& out) {
  ExperimentConfig c;
  c.format = "synthetic";
  c.shape = "8x8x8";
  c.test_subset = 4;
  c.kernel = 3;
  c.filters = 32;
  c.patterns = 200;
  c.beta = 1e-3;
  c.epochs = 200;
  c.batch = 4;
  c.ray_iters = 200;
  c.log_every = 20;
  c.ablation_sizes = {25, 50, 100, 200};
  c.clusters = 4;
  c.triptychs = 2;
  c.seed = 5;
  c.out = out;
  return c;
}

ExperimentConfig tiny_gap(const std::string& out) {
  ExperimentConfig c;
  c.format = "synthetic";
  c.shape = "1x3x3";
  c.test_subset = 1;
  c.kernel = 2;
  c.enumerate = true;
  c.beta = 1e-2;
  c.ray_iters = 300;
  c.dual_iters = 3000;
  c.epochs = 3000;
  c.batch = 0;
  c.schedule = "cosine";
  c.restarts = 3;
  c.log_every = 100;
  c.out = out;
  return c;
}

}  // namespace

TEST(ExperimentConfig, FileThenOverrides) {
  TempDir dir("cfg");
  std::ofstream(dir.file("a.cfg")) << "# comment\nkernel = 5\n\nnoise=exponential  # trailing\nlambda=2\n"
                                      "ablation-sizes=10,20\nresidual=true\n";
  ExperimentConfig c = ExperimentConfig::from_file(dir.file("a.cfg"));
  EXPECT_EQ(c.kernel, 5);
  EXPECT_EQ(c.noise, "exponential");
  EXPECT_EQ(c.lambda, 2.0);
  EXPECT_TRUE(c.residual);
  EXPECT_EQ(c.ablation_sizes, (std::vector<Eigen::Index>{10, 20}));
  c.set("kernel", "3");  // command line wins
  c.set("lr_primal", "0.5");
  EXPECT_EQ(c.kernel, 3);
  EXPECT_EQ(c.lr_primal, 0.5);
  EXPECT_NO_THROW(c.validate());

  // to_text is itself a valid config file.
  std::ofstream(dir.file("b.cfg")) << c.to_text();
  EXPECT_EQ(ExperimentConfig::from_file(dir.file("b.cfg")).to_text(), c.to_text());
}

TEST(ExperimentConfig, RejectsUnknownAndMalformed) {
  ExperimentConfig c;
  EXPECT_THROW(c.set("no-such-key", "1"), std::invalid_argument);
  EXPECT_THROW(c.set("kernel", "three"), std::invalid_argument);
  EXPECT_THROW(c.set("noise", "poisson"), std::invalid_argument);
  EXPECT_THROW(c.set("residual", "maybe"), std::invalid_argument);
  c.set("loss", "huber");
  EXPECT_THROW(c.validate(), NotImplementedError);
  c = ExperimentConfig{};
  c.kernel = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Experiment, GapModeEmitsEveryArtifact) {
  TempDir dir("gap");
  const ExperimentConfig c = smoke(dir.file("run"));
  const GapResult g = mode_gap(c);
  for (const char* f : {"metrics.csv", "timing.csv", "config.txt", "gap.json", "normalization.json", "dual.bin",
                        "patterns.bin", "primal.bin", "primal_triptych_0.pgm", "dual_triptych_1.pgm"}) {
    EXPECT_TRUE(std::filesystem::exists(dir.file("run/") + f)) << f;
  }
  EXPECT_TRUE(std::isfinite(g.primal_avg));
  EXPECT_TRUE(std::isfinite(g.dual_avg));
  const auto j = nlohmann::json::parse(slurp(dir.file("run/gap.json")));
  EXPECT_EQ(j.at("relative_gap").get<double>(), g.relative_gap);
  EXPECT_EQ(ExperimentConfig::from_file(dir.file("run/config.txt")).to_text(), c.to_text());
}

TEST(Experiment, MetricsAreReproducibleByteForByte) {
  TempDir dir("repro");
  ExperimentConfig a = smoke(dir.file("a"));
  ExperimentConfig b = smoke(dir.file("b"));
  a.dual_iters = b.dual_iters = 50;
  mode_gap(a);
  mode_gap(b);
  const std::string ma = slurp(dir.file("a/metrics.csv"));
  EXPECT_GT(ma.size(), 100u);
  EXPECT_EQ(ma, slurp(dir.file("b/metrics.csv")));
  EXPECT_EQ(slurp(dir.file("a/gap.json")), slurp(dir.file("b/gap.json")));
  EXPECT_EQ(slurp(dir.file("a/dual.bin")), slurp(dir.file("b/dual.bin")));
}

TEST(Experiment, AveragedObjectiveIsRawOverPixels) {
  TempDir dir("avg");
  const ExperimentConfig c = smoke(dir.file("run"));
  mode_gap(c);
  const auto rows = csv_rows(dir.file("run/metrics.csv"));
  ASSERT_FALSE(rows.empty());
  for (const auto& r : rows) {
    ASSERT_EQ(r.size(), 9u);
    const double scale = r[1] == "train" ? 8.0 * 64.0 : 4.0 * 64.0;
    const double avg = std::stod(r[3]), raw = std::stod(r[4]);
    EXPECT_NEAR(avg * scale, raw, 1e-12 * std::max(1.0, std::abs(raw))) << r[0] << ' ' << r[2];
    if (r[1] == "test") EXPECT_EQ(std::stod(r[5]), 0.0);
    EXPECT_GE(std::stod(r[8]), 0.0);
  }
}

TEST(Experiment, TriptychMiddlePanelIsTheCleanImage) {
  TempDir dir("trip");
  const ExperimentConfig c = smoke(dir.file("run"));
  mode_train_primal(c);
  const Dataset ds = load_dataset(c);
  for (std::size_t i = 0; i < 2; ++i) {
    const ImageTensor t = load_pgm(dir.file("run/primal_triptych_" + std::to_string(i) + ".pgm"));
    ASSERT_EQ(t.rows(), 8u);
    ASSERT_EQ(t.cols(), 24u);
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t q = 0; q < 8; ++q) EXPECT_NEAR(t(0, r, 8 + q), ds.test(i, r, q), 0.5 / 255.0 + 1e-12);
    }
  }
}

TEST(Experiment, TinyInstanceClosesTheGap) {
  TempDir dir("tiny");
  const GapResult g = mode_gap(tiny_gap(dir.file("run")));
  EXPECT_LE(g.relative_gap, 1e-2) << "primal " << g.primal_avg << " dual " << g.dual_avg;
  // The dual optimum lower-bounds any primal point; the mapped primal attains it.
  EXPECT_LE(g.dual_avg, g.primal_avg + 1e-12);
  EXPECT_NEAR(g.mapped_primal_avg, g.dual_avg, 1e-6 * g.dual_avg);
}

TEST(Experiment, AblationIsMonotoneInPatternCount) {
  TempDir dir("ablate");
  const auto rows = mode_ablate_patterns(smoke(dir.file("run")));
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GT(rows[i].patterns, rows[i - 1].patterns);
    EXPECT_LE(rows[i].objective_avg, rows[i - 1].objective_avg + 1e-12);
  }
  EXPECT_EQ(csv_rows(dir.file("run/ablation.csv")).size(), 4u);
}

TEST(Experiment, RobustnessRunsBothNoiseModels) {
  TempDir dir("robust");
  const auto rows = mode_robustness(smoke(dir.file("run")));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].noise, "gaussian");
  EXPECT_EQ(rows[1].noise, "exponential");
  EXPECT_EQ(rows[1].parameter, 1.15);
  EXPECT_EQ(csv_rows(dir.file("run/robustness.csv")).size(), 2u);
}

TEST(Experiment, InterpretAndDenoiseReuseSavedWeights) {
  TempDir dir("reuse");
  ExperimentConfig c = smoke(dir.file("dual"));
  const DualRun trained = mode_train_dual(c);

  ExperimentConfig ic = smoke(dir.file("interp"));
  ic.weights = dir.file("dual");
  ic.stack = true;
  ic.dual_iters = 50;
  const InterpretResult r = mode_interpret(ic);
  EXPECT_EQ(r.active_groups, trained.active_groups);
  EXPECT_EQ(r.responses, static_cast<std::size_t>(trained.active_groups));
  EXPECT_LE(r.distinct_codes, 4 * 64);
  const auto j = nlohmann::json::parse(slurp(dir.file("interp/interpret.json")));
  EXPECT_TRUE(j.contains("block2"));
  EXPECT_TRUE(std::filesystem::exists(dir.file("interp/block1_labels_0.pgm")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("interp/block2_labels_0.pgm")));

  // Denoising the same noisy test images reproduces the training-time test MSE.
  ExperimentConfig dc = smoke(dir.file("den"));
  dc.weights = dir.file("dual");
  const auto rows = mode_denoise(dc);
  ASSERT_EQ(rows.size(), 4u);
  double mean = 0.0;
  for (const auto& row : rows) mean += row.mse / 4.0;
  EXPECT_NEAR(mean, trained.test.mse, 1e-12);

  ExperimentConfig missing = smoke(dir.file("none"));
  EXPECT_THROW(mode_denoise(missing), std::invalid_argument);
}
