#pragma once

// The finite convex dual of the two-layer conv net:
//
//   min  1/2 || sum_i D_i Y' (w_i - z_i) - x ||^2 + beta sum_i (||w_i|| + ||z_i||)
//   s.t. (2 D_i - I) Y' w_i >= 0,  (2 D_i - I) Y' z_i >= 0
//
// The cone constraints are handled by a hinge penalty rho * sum max(0, -c)
// (linear) or rho * sum max(0, -c)^2 (squared), with rho raised 10x per round
// until the summed violation drops below the feasibility tolerance. A final
// repair step moves each violating group along its own pattern generator,
// which is strictly inside its cone, so accepted solutions are exactly
// feasible and map onto primal weights with identical objective.

#include "error.hpp"
#include "primal.hpp"
#include "sign_patterns.hpp"
#include "tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualconv {

enum class Hinge { linear, squared };

struct DualWeights {
  Matrix w;  // k^2 x patterns
  Matrix z;  // k^2 x patterns

  static DualWeights zeros(Eigen::Index patterns, Eigen::Index dim) {
    return {Matrix::Zero(dim, patterns), Matrix::Zero(dim, patterns)};
  }

  Eigen::Index count() const noexcept { return w.cols(); }
  Eigen::Index dim() const noexcept { return w.rows(); }

  /// Pad with zero groups up to `patterns` (warm start on a superset of patterns).
  DualWeights extended(Eigen::Index patterns) const {
    DualWeights out = zeros(patterns, dim());
    out.w.leftCols(count()) = w;
    out.z.leftCols(count()) = z;
    return out;
  }
};

struct DualConfig {
  double beta = 1e-5;
  double rho = 1e2;
  Hinge hinge = Hinge::squared;
  double learning_rate = 1e-5;  // Adam backend only
  int max_iters = 1000;         // per penalty round
  double feasibility_tol = 1e-6;
  std::uint64_t seed = 0;
  double group_zero_tol = 1e-8;
  double rho_growth = 10.0;
  int max_rho_rounds = 10;
  bool continuation = true;
  double tolerance = 1e-10;  // prox backend: relative gradient-mapping stop
  bool momentum = true;      // prox backend: monotone FISTA
  bool reduce_paths = true;  // after repair, drop linearly dependent paths
  LrSchedule schedule = LrSchedule::constant;
  bool repair = true;
  int log_every = 1;

  void validate() const {
    if (beta < 0) throw std::invalid_argument("DualConfig: beta must be >= 0");
    if (!(rho > 0)) throw std::invalid_argument("DualConfig: rho must be > 0");
    if (max_iters < 1) throw std::invalid_argument("DualConfig: max_iters must be >= 1");
    if (!(rho_growth >= 1)) throw std::invalid_argument("DualConfig: rho_growth must be >= 1");
  }
};

struct DualRecord {
  int iteration;
  double objective;  // penalized, at the round's rho
  double violation;  // linear-hinge sum
  Eigen::Index active_groups;
  double rho;
};

struct DualSolution;

/// Called with every logged record and the weights it describes.
using DualObserver = std::function<void(const DualRecord&, const DualWeights&)>;

struct DualSolution {
  DualWeights weights;
  std::vector<DualRecord> history;
  Eigen::Index active_groups = 0;
  double rho = 0.0;
  double violation = 0.0;
};

inline double group_soft_threshold_scale(double norm, double threshold) {
  return norm > threshold ? 1.0 - threshold / norm : 0.0;
}

/// prox of threshold * ||.||_2: (1 - threshold / ||v||)_+ v.
inline Vector group_soft_threshold(const Vector& v, double threshold) {
  return group_soft_threshold_scale(v.norm(), threshold) * v;
}

/// Evaluates the penalized dual objective and its gradient. Holds the patch
/// rows, targets and the mask of every pattern over those rows.
class DualProblem {
 public:
  DualProblem(const PatchMatrix& patches, Vector targets, const SignPatternSet& set)
      : y_(patches.rows), x_(std::move(targets)), generators_(set.generators) {
    if (x_.size() != y_.rows()) throw std::invalid_argument("DualProblem: target length != P");
    if (set.dim() != y_.cols()) throw std::invalid_argument("DualProblem: generator dimension != k^2");
    if (set.masks && set.masks->pixels() == y_.rows() && set.masks->patterns() == set.count()) {
      masks_ = *set.masks;
    } else {
      masks_ = compute_masks(set.generators, patches);
    }
  }

  Eigen::Index patterns() const noexcept { return generators_.cols(); }
  Eigen::Index dim() const noexcept { return y_.cols(); }
  Eigen::Index pixels() const noexcept { return y_.rows(); }
  const Vector& targets() const noexcept { return x_; }
  const MaskTable& masks() const noexcept { return masks_; }
  const Matrix& generators() const noexcept { return generators_; }
  const RowMatrix& rows() const noexcept { return y_; }

  void check(const DualWeights& W) const {
    if (W.w.rows() != dim() || W.z.rows() != dim() || W.w.cols() != patterns() || W.z.cols() != patterns()) {
      throw std::invalid_argument("DualProblem: weights must be k^2 x patterns");
    }
  }

  struct Eval {
    Vector residual;
    double data = 0.0;
    double penalty = 0.0;    // rho * hinge
    double violation = 0.0;  // linear hinge sum, unweighted
    DualWeights gradient;    // of data + penalty, when requested
  };

  /// Smooth part (data fit + rho * hinge) and, optionally, its gradient.
  /// Works in row x column tiles so no P x patterns temporary is formed.
  Eval evaluate(const DualWeights& W, double rho, Hinge hinge, bool with_gradient) const {
    check(W);
    const auto wa = nonzero_columns(W.w);
    const auto za = nonzero_columns(W.z);
    const Matrix aw = gather(W.w, wa);
    const Matrix az = gather(W.z, za);

    Eval e;
    Vector pred = Vector::Zero(pixels());
    Matrix pre;
    double viol = 0.0, pen = 0.0;
    for (Eigen::Index r0 = 0; r0 < pixels(); r0 += kRowBlock) {
      const Eigen::Index nr = std::min(kRowBlock, pixels() - r0);
      const auto yb = y_.middleRows(r0, nr);
      auto side = [&](const Matrix& A, const std::vector<Eigen::Index>& groups, double sgn) {
        for (Eigen::Index c0 = 0; c0 < A.cols(); c0 += kColBlock) {
          const Eigen::Index nc = std::min(kColBlock, A.cols() - c0);
          pre.noalias() = yb * A.middleCols(c0, nc);
          for (Eigen::Index j = 0; j < nc; ++j) {
            const std::uint64_t* bits = masks_.row(groups[static_cast<std::size_t>(c0 + j)]);
            const double* q = pre.col(j).data();
            for (Eigen::Index p = 0; p < nr; ++p) {
              const double s = sign_of(bits, r0 + p);
              pred[r0 + p] += sgn * 0.5 * (s + 1.0) * q[p];
              const double neg = std::min(s * q[p], 0.0);
              viol -= neg;
              pen += hinge == Hinge::squared ? neg * neg : -neg;
            }
          }
        }
      };
      side(aw, wa, 1.0);
      side(az, za, -1.0);
    }
    e.residual = pred - x_;
    e.data = 0.5 * e.residual.squaredNorm();
    e.violation = viol;
    e.penalty = rho * pen;
    if (!with_gradient) return e;

    // Data part Y'^T (mask_i .* r) for every pattern; hinge part only for
    // live columns, and only for tiles where some constraint is violated.
    Matrix data_grad = Matrix::Zero(dim(), patterns());
    Matrix hw = Matrix::Zero(dim(), aw.cols());
    Matrix hz = Matrix::Zero(dim(), az.cols());
    Matrix coeff;
    for (Eigen::Index r0 = 0; r0 < pixels(); r0 += kRowBlock) {
      const Eigen::Index nr = std::min(kRowBlock, pixels() - r0);
      const auto yb = y_.middleRows(r0, nr);
      const double* r = e.residual.data() + r0;
      for (Eigen::Index c0 = 0; c0 < patterns(); c0 += kColBlock) {
        const Eigen::Index nc = std::min(kColBlock, patterns() - c0);
        coeff.resize(nr, nc);
        for (Eigen::Index j = 0; j < nc; ++j) {
          const std::uint64_t* bits = masks_.row(c0 + j);
          double* out = coeff.col(j).data();
          for (Eigen::Index p = 0; p < nr; ++p) out[p] = 0.5 * (sign_of(bits, r0 + p) + 1.0) * r[p];
        }
        data_grad.middleCols(c0, nc).noalias() += yb.transpose() * coeff;
      }
      auto side = [&](const Matrix& A, const std::vector<Eigen::Index>& groups, Matrix& H) {
        for (Eigen::Index c0 = 0; c0 < A.cols(); c0 += kColBlock) {
          const Eigen::Index nc = std::min(kColBlock, A.cols() - c0);
          pre.noalias() = yb * A.middleCols(c0, nc);
          coeff.resize(nr, nc);
          bool any = false;
          for (Eigen::Index j = 0; j < nc; ++j) {
            const std::uint64_t* bits = masks_.row(groups[static_cast<std::size_t>(c0 + j)]);
            const double* q = pre.col(j).data();
            double* out = coeff.col(j).data();
            for (Eigen::Index p = 0; p < nr; ++p) {
              const double s = sign_of(bits, r0 + p);
              const double neg = std::min(s * q[p], 0.0);
              // d/dw rho c^2 = 2 rho c s y;  d/dw rho max(0,-c) = -rho s y
              out[p] = hinge == Hinge::squared ? 2.0 * rho * s * neg : (neg < 0.0 ? -rho * s : 0.0);
              any = any || neg < 0.0;
            }
          }
          if (any) H.middleCols(c0, nc).noalias() += yb.transpose() * coeff;
        }
      };
      side(aw, wa, hw);
      side(az, za, hz);
    }
    e.gradient = {data_grad, -data_grad};
    scatter_add(hw, wa, e.gradient.w);
    scatter_add(hz, za, e.gradient.z);
    return e;
  }

  /// sum_i c_i D_i Y' g_i: the prediction when every group sits on its own
  /// generator ray (w_i = c_i g_i for c_i > 0, z_i = -c_i g_i otherwise).
  Vector ray_predict(const Vector& c) const {
    std::vector<Eigen::Index> live;
    for (Eigen::Index i = 0; i < patterns(); ++i) {
      if (c[i] != 0.0) live.push_back(i);
    }
    const Matrix A = gather(generators_, live);
    Vector pred = Vector::Zero(pixels());
    Matrix pre;
    for (Eigen::Index r0 = 0; r0 < pixels(); r0 += kRowBlock) {
      const Eigen::Index nr = std::min(kRowBlock, pixels() - r0);
      for (Eigen::Index c0 = 0; c0 < A.cols(); c0 += kColBlock) {
        const Eigen::Index nc = std::min(kColBlock, A.cols() - c0);
        pre.noalias() = y_.middleRows(r0, nr) * A.middleCols(c0, nc);
        for (Eigen::Index j = 0; j < nc; ++j) {
          const Eigen::Index i = live[static_cast<std::size_t>(c0 + j)];
          const std::uint64_t* bits = masks_.row(i);
          const double* q = pre.col(j).data();
          for (Eigen::Index p = 0; p < nr; ++p) pred[r0 + p] += c[i] * 0.5 * (sign_of(bits, r0 + p) + 1.0) * q[p];
        }
      }
    }
    return pred;
  }

  /// d/dc_i of 1/2 ||ray_predict(c) - x||^2 given the residual: g_i' Y'^T (mask_i .* r).
  Vector ray_gradient(const Vector& residual) const {
    Vector grad = Vector::Zero(patterns());
    Matrix pre;
    for (Eigen::Index r0 = 0; r0 < pixels(); r0 += kRowBlock) {
      const Eigen::Index nr = std::min(kRowBlock, pixels() - r0);
      const double* r = residual.data() + r0;
      for (Eigen::Index c0 = 0; c0 < patterns(); c0 += kColBlock) {
        const Eigen::Index nc = std::min(kColBlock, patterns() - c0);
        pre.noalias() = y_.middleRows(r0, nr) * generators_.middleCols(c0, nc);
        for (Eigen::Index j = 0; j < nc; ++j) {
          const std::uint64_t* bits = masks_.row(c0 + j);
          const double* q = pre.col(j).data();
          double acc = 0.0;
          for (Eigen::Index p = 0; p < nr; ++p) acc += 0.5 * (sign_of(bits, r0 + p) + 1.0) * q[p] * r[p];
          grad[c0 + j] += acc;
        }
      }
    }
    return grad;
  }

  Vector predict(const DualWeights& W) const {
    Eval e = evaluate(W, 1.0, Hinge::linear, false);
    return e.residual + x_;
  }

  double group_norms(const DualWeights& W) const {
    return W.w.colwise().norm().sum() + W.z.colwise().norm().sum();
  }

  double objective(const DualWeights& W, double beta, double rho, Hinge hinge) const {
    const Eval e = evaluate(W, rho, hinge, false);
    return e.data + beta * group_norms(W) + e.penalty;
  }

  /// Summed constraint violation (linear: sum max(0,-c); squared: sum max(0,-c)^2).
  double violation(const DualWeights& W, Hinge hinge = Hinge::linear) const {
    check(W);
    double total = 0.0;
    auto side = [&](const Matrix& M) {
      for (Eigen::Index i = 0; i < patterns(); ++i) {
        if (M.col(i).isZero(0.0)) continue;
        const std::uint64_t* bits = masks_.row(i);
        const double* v = M.col(i).data();
        for (Eigen::Index p = 0; p < pixels(); ++p) {
          const double neg = std::min(sign_of(bits, p) * preactivation(y_, p, v), 0.0);
          total += hinge == Hinge::squared ? neg * neg : -neg;
        }
      }
    };
    side(W.w);
    side(W.z);
    return total;
  }

  Eigen::Index active_groups(const DualWeights& W, double tol) const {
    Eigen::Index n = 0;
    for (Eigen::Index i = 0; i < patterns(); ++i) {
      if (std::max(W.w.col(i).norm(), W.z.col(i).norm()) > tol) ++n;
    }
    return n;
  }

  /// Move every violating group along its generator until all of its
  /// constraints hold. Generators satisfy their own cone, so this terminates
  /// in one step per group.
  void repair(DualWeights& W) const {
    check(W);
    auto side = [&](Matrix& M) {
      for (Eigen::Index i = 0; i < patterns(); ++i) {
        if (M.col(i).isZero(0.0)) continue;
        const double* g = generators_.col(i).data();
        double step = 0.0;
        for (Eigen::Index p = 0; p < pixels(); ++p) {
          const double s = masks_.test(i, p) ? 1.0 : -1.0;
          const double c = s * preactivation(y_, p, M.col(i).data());
          if (c >= 0.0) continue;
          const double cg = s * preactivation(y_, p, g);
          if (cg > 0.0) step = std::max(step, -c / cg);
        }
        if (step > 0.0) M.col(i) += (step * (1.0 + 1e-9)) * generators_.col(i);
      }
    };
    side(W.w);
    side(W.z);
  }

  /// Contribution of one path to the prediction: sign * D_i Y' v.
  Vector path_contribution(Eigen::Index pattern, const Vector& v, double sign) const {
    Vector a = Vector::Zero(pixels());
    const Vector q = y_ * v;
    masked_axpy(pattern, sign, q, a);
    return a;
  }

  /// While more than P paths (w_i or z_i columns) are live, their
  /// contributions are linearly dependent. Rescale them along a null vector,
  /// in the direction that does not raise sum ||.||, until one hits zero.
  /// Nonnegative rescaling keeps every cone constraint and the prediction.
  void reduce_paths(DualWeights& W) const {
    check(W);
    struct Path {
      Matrix* side;
      Eigen::Index col;
      double sign;
    };
    std::vector<Path> paths;
    for (Eigen::Index i = 0; i < patterns(); ++i) {
      if (!W.w.col(i).isZero(0.0)) paths.push_back({&W.w, i, 1.0});
      if (!W.z.col(i).isZero(0.0)) paths.push_back({&W.z, i, -1.0});
    }
    const Eigen::Index P = pixels();
    while (static_cast<Eigen::Index>(paths.size()) > P) {
      const Eigen::Index n = P + 1;
      Matrix A(P, n);
      Vector norms(n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const Path& path = paths[static_cast<std::size_t>(j)];
        const Vector v = path.side->col(path.col);
        A.col(j) = path_contribution(path.col, v, path.sign);
        norms[j] = v.norm();
      }
      const Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeFullV);
      Vector lambda = svd.matrixV().col(n - 1);
      if (lambda.dot(norms) > 0.0) lambda = -lambda;

      double t = std::numeric_limits<double>::infinity();
      Eigen::Index hit = 0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (lambda[j] < 0.0 && -1.0 / lambda[j] < t) {
          t = -1.0 / lambda[j];
          hit = j;
        }
      }
      for (Eigen::Index j = 0; j < n; ++j) {
        const Path& path = paths[static_cast<std::size_t>(j)];
        const double scale = j == hit ? 0.0 : std::max(0.0, 1.0 + t * lambda[j]);
        path.side->col(path.col) *= scale;
      }
      std::erase_if(paths, [](const Path& p) { return p.side->col(p.col).isZero(0.0); });
    }
  }

 private:
  static constexpr Eigen::Index kRowBlock = 1024;
  static constexpr Eigen::Index kColBlock = 64;

  static double sign_of(const std::uint64_t* bits, Eigen::Index p) noexcept {
    return static_cast<double>(static_cast<int>((bits[p >> 6] >> (p & 63)) & 1u) * 2 - 1);
  }

  static std::vector<Eigen::Index> nonzero_columns(const Matrix& M) {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < M.cols(); ++i) {
      if (!M.col(i).isZero(0.0)) out.push_back(i);
    }
    return out;
  }

  static Matrix gather(const Matrix& M, const std::vector<Eigen::Index>& cols) {
    Matrix out(M.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = M.col(cols[j]);
    return out;
  }

  static void scatter_add(const Matrix& src, const std::vector<Eigen::Index>& cols, Matrix& dst) {
    for (std::size_t j = 0; j < cols.size(); ++j) dst.col(cols[j]) += src.col(static_cast<Eigen::Index>(j));
  }

  template <class Col>
  void masked_axpy(Eigen::Index pattern, double alpha, const Col& values, Vector& out) const {
    const std::uint64_t* bits = masks_.row(pattern);
    for (Eigen::Index w = 0; w < masks_.words(); ++w) {
      std::uint64_t word = bits[w];
      while (word) {
        const Eigen::Index p = w * 64 + std::countr_zero(word);
        out[p] += alpha * values[p];
        word &= word - 1;
      }
    }
  }

  RowMatrix y_;
  Vector x_;
  Matrix generators_;
  MaskTable masks_;
};

// ---------------------------------------------------------------------------
// Free-function surface.

inline Vector dual_predict(const DualWeights& W, const SignPatternSet& set, const PatchMatrix& patches) {
  if (W.w.rows() != patches.dim() || W.w.cols() != set.count() || W.z.rows() != W.w.rows() ||
      W.z.cols() != W.w.cols()) {
    throw std::invalid_argument("dual_predict: weights must be k^2 x pattern count");
  }
  return apply_masks(set, patches, W.w - W.z);
}

/// sum_i d_i^(p) y_p^T (w_i - z_i): the prediction at one pixel, read as a
/// linear filter selected by the pixel's activation code.
inline double dual_predict_pixel(const DualWeights& W, const SignPatternSet& set, const PatchMatrix& patches,
                                 Eigen::Index p) {
  double out = 0.0;
  for (Eigen::Index i = 0; i < set.count(); ++i) {
    const bool on = set.masks ? set.masks->test(i, p) : mask_bit(patches.rows, p, set.generators.col(i).data());
    if (on) out += patches.rows.row(p).dot(W.w.col(i) - W.z.col(i));
  }
  return out;
}

inline double dual_objective(const DualWeights& W, const SignPatternSet& set, const PatchMatrix& patches,
                             const Vector& targets, const DualConfig& cfg) {
  cfg.validate();
  return DualProblem(patches, targets, set).objective(W, cfg.beta, cfg.rho, cfg.hinge);
}

/// Objective with the penalty dropped (the value the constrained program sees
/// at a feasible point).
inline double dual_objective_unpenalized(const DualWeights& W, const SignPatternSet& set,
                                         const PatchMatrix& patches, const Vector& targets, double beta) {
  const DualProblem prob(patches, targets, set);
  const auto e = prob.evaluate(W, 1.0, Hinge::linear, false);
  return e.data + beta * prob.group_norms(W);
}

inline double constraint_violation(const DualWeights& W, const SignPatternSet& set, const PatchMatrix& patches,
                                   Hinge hinge = Hinge::linear) {
  const DualProblem prob(patches, Vector::Zero(patches.size()), set);
  return prob.violation(W, hinge);
}

/// Full (sub)gradient of the penalized objective; the group-norm subgradient
/// at zero is taken as 0.
inline DualWeights dual_gradient(const DualProblem& prob, const DualWeights& W, double beta, double rho,
                                 Hinge hinge) {
  auto e = prob.evaluate(W, rho, hinge, true);
  for (Eigen::Index i = 0; i < W.count(); ++i) {
    const double nw = W.w.col(i).norm();
    const double nz = W.z.col(i).norm();
    if (nw > 0.0) e.gradient.w.col(i) += (beta / nw) * W.w.col(i);
    if (nz > 0.0) e.gradient.z.col(i) += (beta / nz) * W.z.col(i);
  }
  return std::move(e.gradient);
}

namespace detail {

inline void prox_groups(DualWeights& W, double threshold) {
  for (Eigen::Index i = 0; i < W.count(); ++i) {
    W.w.col(i) *= group_soft_threshold_scale(W.w.col(i).norm(), threshold);
    W.z.col(i) *= group_soft_threshold_scale(W.z.col(i).norm(), threshold);
  }
}

inline double inner(const DualWeights& a, const DualWeights& b) {
  return (a.w.array() * b.w.array()).sum() + (a.z.array() * b.z.array()).sum();
}

inline double squared_norm(const DualWeights& a) { return a.w.squaredNorm() + a.z.squaredNorm(); }

inline DualWeights lincomb(const DualWeights& a, double alpha, const DualWeights& b, double beta) {
  return {alpha * a.w + beta * b.w, alpha * a.z + beta * b.z};
}

struct Recorder {
  const DualProblem& prob;
  const DualConfig& cfg;
  std::vector<DualRecord>& history;
  int iteration = 0;

  /// Advances the global iteration counter; true when this one is logged.
  bool tick() {
    ++iteration;
    return iteration % std::max(1, cfg.log_every) == 0;
  }

  const DualObserver* observer = nullptr;
  double initial = 0.0;      // objective at the starting point
  double round_start = 0.0;  // objective when the current rho round began

  // Raising rho legitimately inflates the objective of an infeasible point, so
  // the reference is whichever of the two is larger.
  bool diverged(double f) const {
    return !std::isfinite(f) || f > 10.0 * std::max({initial, round_start, 1e-300});
  }

  void log(const DualWeights& W, double objective, double violation, double rho) {
    history.push_back({iteration, objective, violation, prob.active_groups(W, cfg.group_zero_tol), rho});
    if (observer && *observer) (*observer)(history.back(), W);
  }
};

/// Monotone FISTA with backtracking at fixed rho. Returns the final objective.
inline double prox_round(const DualProblem& prob, DualWeights& x, const DualConfig& cfg, double rho,
                         double& lipschitz, Recorder& rec) {
  const double beta = cfg.beta;
  auto total = [&](const DualWeights& W, double smooth) { return smooth + beta * prob.group_norms(W); };

  auto ex = prob.evaluate(x, rho, Hinge::squared, false);
  double fx = total(x, ex.data + ex.penalty);
  double vx = ex.violation;
  rec.round_start = fx;
  DualWeights y = x;
  DualWeights prev = x;
  double t = 1.0;
  double grad_scale = -1.0;
  int stalled = 0;

  for (int k = 1; k <= cfg.max_iters; ++k) {
    auto ey = prob.evaluate(y, rho, Hinge::squared, true);
    const double fy = ey.data + ey.penalty;
    if (grad_scale < 0.0) grad_scale = std::max(1.0, std::sqrt(squared_norm(ey.gradient)));

    DualWeights cand;
    double fc = 0.0;
    double vc = 0.0;
    double step_norm = 0.0;
    for (int bt = 0; bt < 200; ++bt) {
      cand = lincomb(y, 1.0, ey.gradient, -1.0 / lipschitz);
      prox_groups(cand, beta / lipschitz);
      const auto ec = prob.evaluate(cand, rho, Hinge::squared, false);
      fc = ec.data + ec.penalty;
      vc = ec.violation;
      const DualWeights d = lincomb(cand, 1.0, y, -1.0);
      step_norm = std::sqrt(squared_norm(d));
      const double model = fy + inner(ey.gradient, d) + 0.5 * lipschitz * step_norm * step_norm;
      if (fc <= model + 1e-14 * std::abs(fy)) break;
      lipschitz *= 2.0;
    }
    const double Fc = total(cand, fc);

    DualWeights next = Fc <= fx ? cand : x;
    const double Fnext = std::min(Fc, fx);
    if (cfg.momentum) {
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      if (Fc > fx) {
        t = 1.0;
        y = next;
      } else {
        y = lincomb(next, 1.0, lincomb(cand, 1.0, next, -1.0), t / tn);
        y = lincomb(y, 1.0, lincomb(next, 1.0, x, -1.0), (t - 1.0) / tn);
        t = tn;
      }
    } else {
      y = next;
    }
    const double decrease = fx - Fnext;
    if (Fc <= fx) vx = vc;
    prev = std::move(x);
    x = std::move(next);
    fx = Fnext;
    if (rec.tick()) rec.log(x, fx, vx, rho);

    if (rec.diverged(fx)) throw DivergenceError("train_dual_prox: objective diverged", rec.iteration, fx);
    const double mapping = lipschitz * step_norm;
    if (mapping <= cfg.tolerance * grad_scale) break;
    stalled = decrease <= 1e-16 * std::max(1.0, std::abs(fx)) ? stalled + 1 : 0;
    if (stalled >= 50) break;
    lipschitz *= 0.95;
  }
  return fx;
}

struct AdamMoments {
  DualWeights m1, m2;
  long step = 0;
};

inline double adam_round(const DualProblem& prob, DualWeights& x, const DualConfig& cfg, double rho,
                         AdamMoments& moments, Recorder& rec) {
  constexpr double b1 = AdamState::beta1;
  constexpr double b2 = AdamState::beta2;
  double fx = prob.objective(x, cfg.beta, rho, cfg.hinge);
  rec.round_start = fx;
  for (int k = 1; k <= cfg.max_iters; ++k) {
    double lr = cfg.learning_rate;
    if (cfg.schedule == LrSchedule::cosine) {
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * (k - 1) / static_cast<double>(cfg.max_iters)));
    }
    const DualWeights g = dual_gradient(prob, x, cfg.beta, rho, cfg.hinge);
    ++moments.step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(moments.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(moments.step));
    auto update = [&](Matrix& param, Matrix& m, Matrix& v, const Matrix& grad) {
      m = b1 * m + (1.0 - b1) * grad;
      v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
      param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + AdamState::epsilon);
    };
    update(x.w, moments.m1.w, moments.m2.w, g.w);
    update(x.z, moments.m1.z, moments.m2.z, g.z);

    if (rec.tick() || k == cfg.max_iters) {
      const auto ev = prob.evaluate(x, rho, cfg.hinge, false);
      fx = ev.data + ev.penalty + cfg.beta * prob.group_norms(x);
      if (rec.diverged(fx)) throw DivergenceError("train_dual_adam: objective diverged", rec.iteration, fx);
      rec.log(x, fx, ev.violation, rho);
    }
  }
  return fx;
}

/// Shared continuation / repair / acceptance loop around one backend round.
template <class Round>
DualSolution solve_with_continuation(const DualProblem& prob, const DualConfig& cfg, const DualWeights* init,
                                     const DualObserver& observer, Round&& round) {
  cfg.validate();
  DualSolution sol;
  sol.weights = init ? *init : DualWeights::zeros(prob.patterns(), prob.dim());
  prob.check(sol.weights);
  Recorder rec{prob, cfg, sol.history, 0, &observer};

  const DualWeights start = sol.weights;
  const double start_violation = prob.violation(start);
  const bool start_feasible = start_violation == 0.0;
  rec.initial = prob.objective(start, cfg.beta, cfg.rho, cfg.hinge);
  rec.log(start, rec.initial, start_violation, cfg.rho);

  double rho = cfg.rho;
  const int rounds = cfg.continuation ? std::max(1, cfg.max_rho_rounds) : 1;
  for (int r = 0; r < rounds; ++r) {
    round(sol.weights, rho, rec);
    if (prob.violation(sol.weights) <= cfg.feasibility_tol) break;
    if (r + 1 < rounds) rho *= cfg.rho_growth;
  }
  if (cfg.repair) prob.repair(sol.weights);
  if (cfg.repair && cfg.reduce_paths) prob.reduce_paths(sol.weights);

  if (start_feasible) {
    const auto unpen = [&](const DualWeights& W) {
      return prob.evaluate(W, 1.0, Hinge::linear, false).data + cfg.beta * prob.group_norms(W);
    };
    // Never hand back something worse than the feasible point we started at.
    if (unpen(sol.weights) > unpen(start)) sol.weights = start;
  }
  sol.rho = rho;
  sol.violation = prob.violation(sol.weights);
  sol.active_groups = prob.active_groups(sol.weights, cfg.group_zero_tol);
  ++rec.iteration;
  rec.log(sol.weights, prob.objective(sol.weights, cfg.beta, rho, cfg.hinge), sol.violation, rho);
  return sol;
}

}  // namespace detail

/// Proximal gradient backend: smooth part uses the squared hinge, the group
/// norms go through their exact prox. Objective is monotone within each rho
/// round.
inline DualSolution train_dual_prox(const DualProblem& prob, const DualConfig& cfg,
                                    const DualWeights* init = nullptr, const DualObserver& observer = {}) {
  if (cfg.hinge != Hinge::squared) {
    throw std::invalid_argument("train_dual_prox: the prox backend needs the squared hinge");
  }
  double lipschitz = 1.0;
  return detail::solve_with_continuation(prob, cfg, init, observer, [&](DualWeights& W, double rho,
                                                                      detail::Recorder& rec) {
    detail::prox_round(prob, W, cfg, rho, lipschitz, rec);
  });
}

inline DualSolution train_dual_prox(const PatchMatrix& patches, const Vector& targets, const SignPatternSet& set,
                                    const DualConfig& cfg) {
  return train_dual_prox(DualProblem(patches, targets, set), cfg);
}

/// Adam on the subgradient of the penalized objective (either hinge).
/// Moments restart with every penalty round: second moments collected at the
/// old rho badly underestimate the new curvature.
inline DualSolution train_dual_adam(const DualProblem& prob, const DualConfig& cfg,
                                    const DualWeights* init = nullptr, const DualObserver& observer = {}) {
  return detail::solve_with_continuation(prob, cfg, init, observer, [&](DualWeights& W, double rho,
                                                                      detail::Recorder& rec) {
    detail::AdamMoments moments{DualWeights::zeros(prob.patterns(), prob.dim()),
                                DualWeights::zeros(prob.patterns(), prob.dim()), 0};
    detail::adam_round(prob, W, cfg, rho, moments, rec);
  });
}

inline DualSolution train_dual_adam(const PatchMatrix& patches, const Vector& targets, const SignPatternSet& set,
                                    const DualConfig& cfg) {
  return train_dual_adam(DualProblem(patches, targets, set), cfg);
}

/// w_i = max(c_i, 0) g_i, z_i = max(-c_i, 0) g_i.
inline DualWeights ray_weights(const Matrix& generators, const Vector& c) {
  if (c.size() != generators.cols()) throw std::invalid_argument("ray_weights: one coefficient per pattern");
  DualWeights W = DualWeights::zeros(generators.cols(), generators.rows());
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    if (c[i] > 0.0) W.w.col(i) = c[i] * generators.col(i);
    if (c[i] < 0.0) W.z.col(i) = -c[i] * generators.col(i);
  }
  return W;
}

/// Called after every ray-fit iteration with (iteration, coefficients, objective).
using RayObserver = std::function<void(int, const Vector&, double)>;

struct RayFit {
  DualWeights weights;
  Vector coeff;                 // c_i: w_i = max(c_i, 0) g_i, z_i = max(-c_i, 0) g_i
  std::vector<double> history;  // objective per iteration, starting point first
};

/// Best combination of the patterns' own generators. Each g_i lies in its own
/// cone, so every such point is feasible and the problem in c is a weighted
/// lasso: 1/2 ||sum_i c_i D_i Y' g_i - x||^2 + beta sum_i ||g_i|| |c_i|.
/// Monotone FISTA with backtracking; `init` warm-starts c (shorter vectors are
/// zero-padded). Useful as a feasible starting point for the full problem.
inline RayFit fit_generator_rays(const DualProblem& prob, double beta, int max_iters, double tolerance = 1e-9,
                                 const Vector* init = nullptr, const RayObserver& observer = {}) {
  const Matrix& G = prob.generators();
  const Vector gnorm = G.colwise().norm().transpose();
  const Eigen::Index n = prob.patterns();
  auto smooth = [&](const Vector& c) { return 0.5 * (prob.ray_predict(c) - prob.targets()).squaredNorm(); };
  auto reg = [&](const Vector& c) { return beta * gnorm.cwiseProduct(c.cwiseAbs()).sum(); };

  RayFit fit;
  Vector x = Vector::Zero(n);
  if (init) x.head(std::min(n, init->size())) = init->head(std::min(n, init->size()));
  double fx = smooth(x) + reg(x);
  fit.history.push_back(fx);
  if (observer) observer(0, x, fx);
  Vector y = x;
  double t = 1.0;
  double L = 1.0;
  double grad_scale = -1.0;
  for (int k = 0; k < max_iters; ++k) {
    const Vector ry = prob.ray_predict(y) - prob.targets();
    const double fy = 0.5 * ry.squaredNorm();
    const Vector grad = prob.ray_gradient(ry);
    if (grad_scale < 0.0) grad_scale = std::max(1.0, grad.norm());
    Vector cand;
    double fc = 0.0;
    for (int bt = 0; bt < 200; ++bt) {
      cand = y - grad / L;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double thr = beta * gnorm[i] / L;
        cand[i] = std::copysign(std::max(std::abs(cand[i]) - thr, 0.0), cand[i]);
      }
      fc = smooth(cand);
      const Vector d = cand - y;
      if (fc <= fy + grad.dot(d) + 0.5 * L * d.squaredNorm() + 1e-14 * std::abs(fy)) break;
      L *= 2.0;
    }
    const double Fc = fc + reg(cand);
    const double step = L * (cand - y).norm();
    if (Fc <= fx) {
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      y = cand + ((t - 1.0) / tn) * (cand - x);
      t = tn;
      const double decrease = fx - Fc;
      x = std::move(cand);
      fx = Fc;
      fit.history.push_back(fx);
      if (observer) observer(k + 1, x, fx);
      if (decrease <= tolerance * std::max(std::abs(fx), 1e-300) && step <= 1e-6 * grad_scale) break;
    } else {
      y = x;  // restart momentum
      t = 1.0;
      fit.history.push_back(fx);
      if (observer) observer(k + 1, x, fx);
      if (step <= tolerance * grad_scale) break;
    }
    L *= 0.95;
  }
  fit.coeff = x;
  fit.weights = ray_weights(G, x);
  prob.repair(fit.weights);  // guards against rounding right at a boundary
  return fit;
}

/// (u, v) = (w / sqrt||w||, sqrt||w||) for each live w_i, and
/// (z / sqrt||z||, -sqrt||z||) for each live z_i. The minus sign on the z
/// branch is what makes (Y'u)_+ v reproduce -D_i Y' z_i.
inline PrimalWeights dual_to_primal(const DualWeights& W, double group_zero_tol = 1e-8) {
  std::vector<std::pair<Vector, double>> units;
  for (Eigen::Index i = 0; i < W.count(); ++i) {
    const double nw = W.w.col(i).norm();
    if (nw > group_zero_tol) units.emplace_back(W.w.col(i) / std::sqrt(nw), std::sqrt(nw));
    const double nz = W.z.col(i).norm();
    if (nz > group_zero_tol) units.emplace_back(W.z.col(i) / std::sqrt(nz), -std::sqrt(nz));
  }
  PrimalWeights out = PrimalWeights::zeros(static_cast<Eigen::Index>(units.size()), W.dim());
  for (std::size_t j = 0; j < units.size(); ++j) {
    out.u.col(static_cast<Eigen::Index>(j)) = units[j].first;
    out.v[static_cast<Eigen::Index>(j)] = units[j].second;
  }
  return out;
}

inline PrimalWeights dual_to_primal(const DualSolution& sol, double group_zero_tol = 1e-8) {
  return dual_to_primal(sol.weights, group_zero_tol);
}

inline void save_dual(const std::string& path, const DualWeights& W) {
  std::vector<double> body(static_cast<std::size_t>(W.w.size() + W.z.size()));
  std::copy(W.w.data(), W.w.data() + W.w.size(), body.begin());
  std::copy(W.z.data(), W.z.data() + W.z.size(), body.begin() + W.w.size());
  binio::write_flat(path, static_cast<std::uint64_t>(W.count()), static_cast<std::uint64_t>(W.dim()), body);
}

inline DualWeights load_dual(const std::string& path) {
  const auto f = binio::read_flat(path);
  binio::expect_body(f, 2 * f.count * f.dim, path);
  const auto n = static_cast<Eigen::Index>(f.count);
  const auto d = static_cast<Eigen::Index>(f.dim);
  DualWeights W;
  W.w = Eigen::Map<const Matrix>(f.body.data(), d, n);
  W.z = Eigen::Map<const Matrix>(f.body.data() + d * n, d, n);
  return W;
}

inline void write_history_csv(const std::string& path, const std::vector<DualRecord>& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "iter,objective,violation,active_groups\n";
  os.precision(17);
  for (const auto& r : history) {
    os << r.iteration << ',' << r.objective << ',' << r.violation << ',' << r.active_groups << '\n';
  }
}

}  // namespace dualconv
