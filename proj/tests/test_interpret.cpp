#include "support.hpp"

#include <gtest/gtest.h>

#include <complex>
#include <numbers>
#include <set>

using namespace dualconv;
using testing_support::random_images;

namespace {

struct Trained {
  PatchMatrix patches;
  SignPatternSet set;
  DualWeights weights;
};

Trained trained(std::uint64_t seed, Eigen::Index patterns = 40) {
  Trained t;
  const ImageTensor img = random_images(1, 6, 6, seed);
  t.patches = extract_patches(img, ConvSpec::odd(3));
  t.set = sample_patterns(t.patches, patterns, seed);
  DualConfig cfg;
  cfg.beta = 1e-2;
  cfg.max_iters = 300;
  t.weights = train_dual_prox(t.patches, flatten_targets(img), t.set, cfg).weights;
  return t;
}

// Codes built by hand from a list of bit rows.
ClusterCodes codes_from(const std::vector<std::vector<int>>& rows) {
  ClusterCodes c;
  const auto L = static_cast<Eigen::Index>(rows.front().size());
  for (Eigen::Index j = 0; j < L; ++j) c.groups.push_back(j);
  c.pixels = static_cast<Eigen::Index>(rows.size());
  c.words = (L + 63) / 64;
  c.bits.assign(static_cast<std::size_t>(c.pixels * c.words), 0);
  for (Eigen::Index p = 0; p < c.pixels; ++p) {
    for (Eigen::Index j = 0; j < L; ++j) {
      if (rows[static_cast<std::size_t>(p)][static_cast<std::size_t>(j)]) {
        c.bits[static_cast<std::size_t>(p * c.words + j / 64)] |= std::uint64_t{1} << (j % 64);
      }
    }
  }
  return c;
}

ClusterCodes random_codes(Eigen::Index pixels, Eigen::Index length, std::uint64_t seed, int distinct = 0) {
  Engine eng = make_engine(seed);
  std::bernoulli_distribution coin(0.4);
  std::vector<std::vector<int>> pool;
  const int n = distinct > 0 ? distinct : static_cast<int>(pixels);
  for (int i = 0; i < n; ++i) {
    std::vector<int> r(static_cast<std::size_t>(length));
    for (auto& b : r) b = coin(eng);
    pool.push_back(r);
  }
  std::vector<std::vector<int>> rows;
  for (Eigen::Index p = 0; p < pixels; ++p) rows.push_back(pool[static_cast<std::size_t>(p % n)]);
  return codes_from(rows);
}

// Inertia of a labeling with centroids at the cluster means.
double inertia_of(const ClusterCodes& c, const std::vector<int>& labels, int K) {
  Matrix sums = Matrix::Zero(K, c.length());
  Vector mass = Vector::Zero(K);
  for (Eigen::Index p = 0; p < c.pixels; ++p) {
    sums.row(labels[static_cast<std::size_t>(p)]) += c.dense(p).transpose();
    mass[labels[static_cast<std::size_t>(p)]] += 1.0;
  }
  double total = 0.0;
  for (Eigen::Index p = 0; p < c.pixels; ++p) {
    const int k = labels[static_cast<std::size_t>(p)];
    total += (c.dense(p).transpose() - sums.row(k) / mass[k]).squaredNorm();
  }
  return total;
}

}  // namespace

TEST(ClusterCodes, ZeroWeightsGiveEmptyCodes) {
  const Trained t = trained(1);
  const ClusterCodes c = cluster_codes(DualWeights::zeros(t.set.count(), 9), t.set, t.patches);
  EXPECT_EQ(c.length(), 0);
  EXPECT_EQ(c.pixels, t.patches.size());
  for (Eigen::Index p = 1; p < c.pixels; ++p) EXPECT_TRUE(c.same(0, p));
}

TEST(ClusterCodes, BitsAreTheMasksOfActiveGroups) {
  const Trained t = trained(2);
  const ClusterCodes c = cluster_codes(t.weights, t.set, t.patches);
  ASSERT_GT(c.length(), 0);
  for (Eigen::Index j = 0; j < c.length(); ++j) {
    const Eigen::Index i = c.groups[static_cast<std::size_t>(j)];
    EXPECT_GT((t.weights.w.col(i) - t.weights.z.col(i)).norm(), 1e-8);
    for (Eigen::Index p = 0; p < c.pixels; ++p) {
      EXPECT_EQ(c.test(p, j), t.patches.rows.row(p).dot(t.set.generators.col(i)) >= 0.0);
    }
  }
  // Recomputing masks from the generators gives the same codes.
  const ClusterCodes again = cluster_codes(t.weights, t.set.without_masks(), t.patches);
  EXPECT_EQ(again.bits, c.bits);
}

TEST(ClusterCodes, EqualPatchesShareCodes) {
  // A constant interior: every fully-inside patch is identical.
  const ImageTensor img(1, 5, 5, 0.7);
  const PatchMatrix p = extract_patches(img, ConvSpec::odd(3));
  const SignPatternSet set = sample_patterns(p, 30, 3);
  DualWeights W = DualWeights::zeros(set.count(), 9);
  Engine eng = make_engine(4);
  W.w = testing_support::random_matrix(9, set.count(), eng);
  const ClusterCodes c = cluster_codes(W, set, p);
  std::vector<Eigen::Index> inside;
  for (Eigen::Index q = 0; q < p.size(); ++q) {
    const auto o = p.origin(q);
    if (o.row >= 1 && o.row <= 3 && o.col >= 1 && o.col <= 3) inside.push_back(q);
  }
  for (Eigen::Index q : inside) EXPECT_TRUE(c.same(inside.front(), q));
}

TEST(ClusterCodes, SizeMismatchThrows) {
  const Trained t = trained(3);
  EXPECT_THROW(cluster_codes(DualWeights::zeros(t.set.count() + 1, 9), t.set, t.patches), std::invalid_argument);
}

TEST(KMeans, DistinctCodesAsClustersGiveZeroInertia) {
  const ClusterCodes c = random_codes(60, 10, 5, 6);
  const ClusterAssignment a = kmeans(c, 6, 1);
  EXPECT_EQ(a.inertia, 0.0);
  std::set<int> used(a.labels.begin(), a.labels.end());
  EXPECT_EQ(used.size(), 6u);
}

TEST(KMeans, OneClusterIsTheMean) {
  const ClusterCodes c = random_codes(40, 12, 6);
  const ClusterAssignment a = kmeans(c, 1, 2);
  Vector mean = Vector::Zero(12);
  for (Eigen::Index p = 0; p < c.pixels; ++p) mean += c.dense(p);
  mean /= 40.0;
  EXPECT_LT((a.centroids.row(0).transpose() - mean).cwiseAbs().maxCoeff(), 1e-12);
  double total = 0.0;
  for (Eigen::Index p = 0; p < c.pixels; ++p) total += (c.dense(p) - mean).squaredNorm();
  EXPECT_NEAR(a.inertia, total, 1e-9);
}

TEST(KMeans, BeatsRandomLabelings) {
  const ClusterCodes c = random_codes(80, 16, 7);
  const int K = 5;
  const ClusterAssignment a = kmeans(c, K, 3);
  EXPECT_NEAR(a.inertia, inertia_of(c, a.labels, K), 1e-9);
  Engine eng = make_engine(8);
  std::uniform_int_distribution<int> pick(0, K - 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> labels(80);
    for (Eigen::Index p = 0; p < 80; ++p) labels[static_cast<std::size_t>(p)] = static_cast<int>(p % K);
    std::shuffle(labels.begin(), labels.end(), eng);
    labels[static_cast<std::size_t>(pick(eng))] = pick(eng);
    std::vector<int> seen(K, 0);
    for (int l : labels) seen[static_cast<std::size_t>(l)] = 1;
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) continue;
    EXPECT_LE(a.inertia, inertia_of(c, labels, K) + 1e-9);
  }
}

TEST(KMeans, InertiaNeverIncreasesAndSeedIsReproducible) {
  const ClusterCodes c = random_codes(200, 30, 9);
  const ClusterAssignment a = kmeans(c, 8, 4);
  for (std::size_t i = 1; i < a.inertia_history.size(); ++i) {
    EXPECT_LE(a.inertia_history[i], a.inertia_history[i - 1] + 1e-9);
  }
  const ClusterAssignment b = kmeans(c, 8, 4);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.inertia, b.inertia);
}

TEST(KMeans, MoreClustersThanCodesStillWorks) {
  const ClusterCodes c = random_codes(10, 4, 10, 2);
  const ClusterAssignment a = kmeans(c, 5, 1);
  EXPECT_EQ(a.inertia, 0.0);
  EXPECT_THROW(kmeans(c, 0, 1), std::invalid_argument);
}

TEST(FrequencyMagnitude, DeltaIsFlatZeroIsZero) {
  Vector delta = Vector::Zero(9);
  delta[4] = 1.0;
  const ImageTensor f = frequency_magnitude(delta, 3, 8, 8);
  for (double v : f.values()) EXPECT_NEAR(v, 1.0, 1e-12);
  const ImageTensor z = frequency_magnitude(Vector::Zero(9), 3, 8, 8);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(FrequencyMagnitude, FirstDifferenceIsTwoSine) {
  Vector d = Vector::Zero(9);
  d[3] = 1.0;
  d[4] = -1.0;
  const std::size_t h = 6, w = 8;
  const ImageTensor f = frequency_magnitude(d, 3, h, w, false);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double freq = static_cast<double>((c + w - w / 2) % w) / static_cast<double>(w);
      EXPECT_NEAR(f(0, r, c), 2.0 * std::abs(std::sin(std::numbers::pi * freq)), 1e-12);
    }
  }
}

TEST(FrequencyMagnitude, MatchesDirectDftAndIgnoresShifts) {
  Engine eng = make_engine(11);
  const Vector filt = testing_support::random_vector(9, eng);
  const std::size_t h = 5, w = 7;
  const ImageTensor f = frequency_magnitude(filt, 3, h, w, false);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      std::complex<double> s = 0.0;
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          const double ang = -2.0 * std::numbers::pi * (static_cast<double>(a * r) / h + static_cast<double>(b * c) / w);
          s += filt[a * 3 + b] * std::polar(1.0, ang);
        }
      }
      EXPECT_NEAR(f(0, (r + h / 2) % h, (c + w / 2) % w), std::abs(s), 1e-12);
    }
  }
  // Moving a 2x2 filter around inside the 3x3 window only changes phase.
  Vector a = Vector::Zero(9), b = Vector::Zero(9);
  a[0] = 1; a[1] = -2; a[3] = 0.5; a[4] = 3;
  b[4] = 1; b[5] = -2; b[7] = 0.5; b[8] = 3;
  const ImageTensor fa = frequency_magnitude(a, 3, 8, 8), fb = frequency_magnitude(b, 3, 8, 8);
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_NEAR(fa.values()[i], fb.values()[i], 1e-12);
}

TEST(FrequencyMagnitude, RejectsBadShapes) {
  EXPECT_THROW(frequency_magnitude(Vector::Zero(8), 3, 8, 8), std::invalid_argument);
  EXPECT_THROW(frequency_magnitude(Vector::Zero(25), 5, 4, 8), std::invalid_argument);
}

TEST(FilterFrequencyResponse, OnePerActiveGroupNormalized) {
  const Trained t = trained(12);
  const auto resp = filter_frequency_response(t.weights, 3, 8, 8);
  EXPECT_EQ(resp.size(), active_difference_groups(t.weights, 1e-8).size());
  for (const auto& r : resp) {
    double peak = 0.0;
    for (double v : r.magnitude.values()) peak = std::max(peak, v);
    EXPECT_NEAR(peak, 1.0, 1e-12);
  }
}

TEST(GreedyStack, IdentityFirstBlockLeavesInputsAndNeverHurts) {
  const ImageTensor clean = random_images(2, 6, 6, 13);
  ImageTensor noisy = clean;
  Engine eng = make_engine(14);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (double& v : noisy.values()) v += nd(eng);

  Block identity;
  identity.residual = true;
  identity.primal = PrimalWeights::zeros(1, 9);
  const Block before = identity;

  StackConfig cfg;
  cfg.patterns = 60;
  cfg.dual_cfg.beta = 1e-2;
  cfg.dual_cfg.max_iters = 300;
  const StackResult r = greedy_stack(identity, noisy, clean, cfg);
  for (std::size_t i = 0; i < noisy.size(); ++i) EXPECT_EQ(r.block1_output.values()[i], noisy.values()[i]);
  EXPECT_EQ(identity.primal->u, before.primal->u);
  EXPECT_EQ(r.codes1.length(), 0);
  EXPECT_GT(r.codes2.pixels, 0);

  // The zero second block reproduces block 1, so training can only help.
  const double single = 0.5 * (flatten_targets(noisy) - flatten_targets(clean)).squaredNorm();
  EXPECT_LE(r.objective, single + 1e-9);
  const Vector stacked = r.block2.forward(extract_patches(r.block1_output, cfg.spec));
  EXPECT_LE(0.5 * (stacked - flatten_targets(clean)).squaredNorm(), single + 1e-9);
}

TEST(GreedyStack, ShapeMismatchThrows) {
  Block b;
  b.primal = PrimalWeights::zeros(1, 9);
  EXPECT_THROW(greedy_stack(b, random_images(1, 4, 4, 1), random_images(1, 4, 5, 1), StackConfig{}),
               std::invalid_argument);
}
