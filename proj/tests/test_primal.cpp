#include "support.hpp"

#include <gtest/gtest.h>

using namespace dualconv;
using testing_support::random_images;
using testing_support::random_vector;

namespace {

struct Problem {
  ImageTensor images;
  PatchMatrix patches;
  Vector targets;
};

Problem problem(std::uint64_t seed, int k = 3) {
  Problem s{random_images(2, 5, 4, seed), {}, {}};
  s.patches = extract_patches(s.images, ConvSpec::odd(k));
  s.targets = flatten_targets(random_images(2, 5, 4, seed + 1000));
  return s;
}

// Sum over units of relu(conv(u_j)) v_j, one direct convolution at a time.
Vector direct_forward(const PrimalWeights& w, const ImageTensor& img, const ConvSpec& spec) {
  Vector out = Vector::Zero(static_cast<Eigen::Index>(img.size()));
  for (Eigen::Index j = 0; j < w.units(); ++j) {
    out += flatten_targets(conv2d_direct(img, w.u.col(j), spec)).cwiseMax(0.0) * w.v[j];
  }
  return out;
}

double flat_get(const PrimalWeights& w, Eigen::Index i) {
  return i < w.u.size() ? w.u.data()[i] : w.v[i - w.u.size()];
}

double& flat_ref(PrimalWeights& w, Eigen::Index i) {
  return i < w.u.size() ? w.u.data()[i] : w.v[i - w.u.size()];
}

}  // namespace

TEST(KaimingInit, DeterministicAndBounded) {
  const PrimalWeights a = init_kaiming_uniform(40, 3, 7);
  EXPECT_EQ(a, init_kaiming_uniform(40, 3, 7));
  EXPECT_FALSE(a == init_kaiming_uniform(40, 3, 8));
  EXPECT_LE(a.u.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 9.0));
  EXPECT_LE(a.v.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 40.0));
  EXPECT_THROW(init_kaiming_uniform(0, 3, 1), std::invalid_argument);
}

TEST(KaimingInit, MomentsMatchUniform) {
  const PrimalWeights w = init_kaiming_uniform(20000, 3, 1);
  const double bound = std::sqrt(6.0 / 9.0);
  const double n = static_cast<double>(w.u.size());
  const double mean = w.u.sum() / n;
  const double var = w.u.squaredNorm() / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4.0 * bound / std::sqrt(3.0 * n));
  EXPECT_NEAR(var, bound * bound / 3.0, 0.01 * bound * bound / 3.0);
}

TEST(PrimalForward, MatchesDirectConvolution) {
  for (int k : {1, 3, 5}) {
    const Problem s = problem(3, k);
    const PrimalWeights w = init_kaiming_uniform(7, k, 11);
    const Vector got = primal_forward(w, s.patches);
    EXPECT_LT((got - direct_forward(w, s.images, s.patches.spec)).cwiseAbs().maxCoeff(), 1e-12) << "k=" << k;
  }
}

TEST(PrimalForward, DeadUnitsAndResidual) {
  ImageTensor img(1, 3, 3, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const PatchMatrix p = extract_patches(img, ConvSpec::odd(3));
  PrimalWeights w = PrimalWeights::zeros(2, 9);
  w.u.setConstant(-1.0);  // nonnegative image: every pre-activation <= 0
  w.v << 3.0, -2.0;
  EXPECT_TRUE(primal_forward(w, p).isZero(0.0));
  EXPECT_EQ(primal_forward(w, p, true), flatten_targets(img));
}

TEST(PrimalForward, ShapeChecks) {
  const Problem s = problem(4);
  EXPECT_THROW(primal_forward(init_kaiming_uniform(3, 5, 1), s.patches), std::invalid_argument);
  EXPECT_THROW(primal_objective(init_kaiming_uniform(3, 3, 1), s.patches, Vector::Zero(3), 0.0),
               std::invalid_argument);
}

TEST(PrimalObjective, ZeroWeightsGiveHalfTargetNorm) {
  const Problem s = problem(5);
  EXPECT_DOUBLE_EQ(primal_objective(PrimalWeights::zeros(4, 9), s.patches, s.targets, 0.3),
                   0.5 * s.targets.squaredNorm());
}

TEST(PrimalGradient, MatchesFiniteDifferences) {
  for (bool residual : {false, true}) {
    const Problem s = problem(6);
    const PrimalWeights w = init_kaiming_uniform(5, 3, 2);
    const double beta = 0.05;
    const PrimalWeights g = primal_gradient(w, s.patches, s.targets, beta, residual);
    const Eigen::Index n = w.u.size() + w.v.size();
    for (Eigen::Index i = 0; i < n; ++i) {
      PrimalWeights lo = w, hi = w;
      const double h = 1e-6;
      flat_ref(lo, i) -= h;
      flat_ref(hi, i) += h;
      const double fd = (primal_objective(hi, s.patches, s.targets, beta, residual) -
                         primal_objective(lo, s.patches, s.targets, beta, residual)) /
                        (2 * h);
      EXPECT_NEAR(flat_get(g, i), fd, 1e-5 * std::max(1.0, std::abs(fd))) << "coord " << i;
    }
  }
}

TEST(PrimalGradient, ZeroWeightsAndRegularizerOnly) {
  const Problem s = problem(7);
  const PrimalWeights z = PrimalWeights::zeros(3, 9);
  const PrimalWeights g0 = primal_gradient(z, s.patches, s.targets, 1.0);
  EXPECT_TRUE(g0.u.isZero(0.0));
  EXPECT_TRUE(g0.v.isZero(0.0));

  // Perfect fit: only beta * w remains.
  const PrimalWeights w = init_kaiming_uniform(3, 3, 4);
  const Vector fit = primal_forward(w, s.patches);
  const PrimalWeights g = primal_gradient(w, s.patches, fit, 0.7);
  EXPECT_LT((g.u - 0.7 * w.u).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((g.v - 0.7 * w.v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AdamStep, FirstStepIsSignedLearningRate) {
  PrimalWeights w = init_kaiming_uniform(4, 3, 1);
  const PrimalWeights before = w;
  Engine eng = make_engine(5);
  PrimalWeights g{testing_support::random_matrix(9, 4, eng), random_vector(4, eng)};
  AdamState st = AdamState::like(w);
  adam_step(st, w, g, 1e-3);
  const Matrix du = w.u - before.u;
  for (Eigen::Index i = 0; i < du.size(); ++i) {
    const double gi = g.u.data()[i];
    EXPECT_NEAR(du.data()[i], -1e-3 * gi / (std::abs(gi) + AdamState::epsilon), 1e-15);
  }
  EXPECT_EQ(st.step, 1);
}

TEST(AdamStep, ZeroGradientLeavesWeights) {
  PrimalWeights w = init_kaiming_uniform(4, 3, 1);
  const PrimalWeights before = w;
  AdamState st = AdamState::like(w);
  for (int i = 0; i < 5; ++i) adam_step(st, w, PrimalWeights::zeros(4, 9), 1e-2);
  EXPECT_EQ(w, before);
}

TEST(TrainPrimal, DecreasesAndIsDeterministic) {
  const Problem s = problem(8);
  PrimalConfig cfg;
  cfg.filters = 16;
  cfg.beta = 1e-3;
  cfg.learning_rate = 1e-2;
  cfg.max_iters = 300;
  cfg.seed = 3;
  const PrimalResult a = train_primal(s.patches, s.targets, cfg);
  EXPECT_LT(a.history.back().objective, 0.5 * a.history.front().objective);
  EXPECT_EQ(a.weights, train_primal(s.patches, s.targets, cfg).weights);

  cfg.batch_size = 10;
  cfg.max_iters = 50;
  const PrimalResult b = train_primal(s.patches, s.targets, cfg);
  EXPECT_EQ(b.weights, train_primal(s.patches, s.targets, cfg).weights);
  EXPECT_LT(b.history.back().objective, b.history.front().objective);
}

TEST(TrainPrimal, ZeroTargetsShrinkOutput) {
  const Problem s = problem(9);
  PrimalConfig cfg;
  cfg.filters = 8;
  cfg.beta = 1e-2;
  cfg.learning_rate = 1e-2;
  cfg.max_iters = 1000;
  const PrimalResult r = train_primal(s.patches, Vector::Zero(s.targets.size()), cfg);
  EXPECT_LT(r.history.back().objective, 1e-2 * r.history.front().objective);
}

TEST(TrainPrimal, DivergenceIsReported) {
  const Problem s = problem(10);
  PrimalConfig cfg;
  cfg.filters = 8;
  cfg.learning_rate = 1e4;
  cfg.max_iters = 20;
  EXPECT_THROW(train_primal(s.patches, s.targets, cfg), DivergenceError);
}

TEST(Rescale, FunctionIsInvariant) {
  const Problem s = problem(11);
  const PrimalWeights w = init_kaiming_uniform(6, 3, 2);
  Engine eng = make_engine(3);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  Vector gam(6);
  for (auto& g : gam) g = u(eng);
  const PrimalWeights r = rescale_weights(w, gam);
  EXPECT_LT((primal_forward(r, s.patches) - primal_forward(w, s.patches)).cwiseAbs().maxCoeff(), 1e-12);
  gam[2] = 0.0;
  EXPECT_THROW(rescale_weights(w, gam), std::invalid_argument);
  gam[2] = -1.0;
  EXPECT_THROW(rescale_weights(w, gam), std::invalid_argument);
}

TEST(Rescale, BalancedRegularizerIsGridMinimum) {
  const PrimalWeights w = init_kaiming_uniform(5, 3, 6);
  const PrimalWeights b = rescale_weights(w, balancing_gammas(w));
  double closed = 0.0;
  for (Eigen::Index j = 0; j < 5; ++j) closed += w.u.col(j).norm() * std::abs(w.v[j]);
  EXPECT_NEAR(primal_regularizer(b, 2.0), 2.0 * closed, 1e-12);
  for (Eigen::Index j = 0; j < 5; ++j) {
    EXPECT_NEAR(b.u.col(j).norm(), std::abs(b.v[j]), 1e-12);
    const double un = w.u.col(j).norm(), vn = std::abs(w.v[j]);
    double best = 1e300;
    for (int t = 0; t <= 20000; ++t) {
      const double g = std::exp(-5.0 + 10.0 * t / 20000.0);
      best = std::min(best, g * g * un * un + vn * vn / (g * g));
    }
    EXPECT_LE(2.0 * un * vn, best + 1e-12);
    EXPECT_NEAR(2.0 * un * vn, best, 1e-6);
  }
}

TEST(PrimalFile, RoundTrip) {
  testing_support::TempDir dir("primal");
  const PrimalWeights w = init_kaiming_uniform(7, 5, 3);
  save_primal(dir.file("w.bin"), w);
  EXPECT_EQ(load_primal(dir.file("w.bin")), w);
}
