#pragma once

// The non-convex two-layer network: m first-layer k x k filters u_j, ReLU,
// then a 1x1 conv with scalar weights v_j. Optional identity skip connection.

#include "binary_io.hpp"
#include "error.hpp"
#include "rng.hpp"
#include "tensor.hpp"

#include <algorithm>
#include <functional>
#include <numbers>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualconv {

struct PrimalWeights {
  Matrix u;  // k^2 x m, one filter per column
  Vector v;  // m

  Eigen::Index units() const noexcept { return v.size(); }
  Eigen::Index dim() const noexcept { return u.rows(); }

  static PrimalWeights zeros(Eigen::Index m, Eigen::Index dim) {
    return {Matrix::Zero(dim, m), Vector::Zero(m)};
  }

  friend bool operator==(const PrimalWeights& a, const PrimalWeights& b) {
    return a.u.rows() == b.u.rows() && a.u.cols() == b.u.cols() && a.v.size() == b.v.size() && a.u == b.u &&
           a.v == b.v;
  }
};

struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;

  PrimalWeights m1;
  PrimalWeights m2;
  long step = 0;

  static AdamState like(const PrimalWeights& w) {
    return {PrimalWeights::zeros(w.units(), w.dim()), PrimalWeights::zeros(w.units(), w.dim()), 0};
  }
};

enum class LrSchedule { constant, cosine };

struct PrimalConfig {
  Eigen::Index filters = 512;
  double beta = 1e-5;
  double learning_rate = 1e-3;
  int max_iters = 1000;        // epochs when batch_size < P, else full-batch steps
  Eigen::Index batch_size = 0;  // patch rows per step; 0 = full batch
  bool residual = false;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::constant;
  int log_every = 1;

  void validate() const {
    if (filters < 1) throw std::invalid_argument("PrimalConfig: filters must be >= 1");
    if (beta < 0) throw std::invalid_argument("PrimalConfig: beta must be >= 0");
    if (max_iters < 1) throw std::invalid_argument("PrimalConfig: max_iters must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("PrimalConfig: learning_rate must be > 0");
  }
};

/// Kaiming-uniform with ReLU gain folded in: bound sqrt(6 / fan_in).
/// fan_in is k^2 for the first layer and m for the 1x1 output layer.
inline PrimalWeights init_kaiming_uniform(Eigen::Index m, int k, std::uint64_t seed) {
  if (m < 1) throw std::invalid_argument("init_kaiming_uniform: m must be >= 1");
  const Eigen::Index dim = static_cast<Eigen::Index>(k) * k;
  const double ubound = std::sqrt(6.0 / static_cast<double>(dim));
  const double vbound = std::sqrt(6.0 / static_cast<double>(m));
  Engine eng = make_engine(seed, 0);
  std::uniform_real_distribution<double> uu(-ubound, ubound);
  std::uniform_real_distribution<double> uv(-vbound, vbound);
  PrimalWeights w = PrimalWeights::zeros(m, dim);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index t = 0; t < dim; ++t) w.u(t, j) = uu(eng);
  }
  for (Eigen::Index j = 0; j < m; ++j) w.v[j] = uv(eng);
  return w;
}

inline void check_shapes(const PrimalWeights& w, const PatchMatrix& patches) {
  if (w.u.rows() != patches.dim() || w.u.cols() != w.v.size()) {
    throw std::invalid_argument("primal: weight shape does not match patch dimension");
  }
}

/// sum_j (Y' u_j)_+ v_j, plus the input pixels when `residual`.
inline Vector primal_forward(const PrimalWeights& w, const PatchMatrix& patches, bool residual = false) {
  check_shapes(w, patches);
  Vector out = Vector::Zero(patches.size());
  if (w.units() > 0) out.noalias() = (patches.rows * w.u).cwiseMax(0.0) * w.v;
  if (residual) out += patches.center();
  return out;
}

inline double primal_regularizer(const PrimalWeights& w, double beta) {
  return 0.5 * beta * (w.u.squaredNorm() + w.v.squaredNorm());
}

inline double primal_objective(const PrimalWeights& w, const PatchMatrix& patches, const Vector& targets,
                               double beta, bool residual = false) {
  if (targets.size() != patches.size()) throw std::invalid_argument("primal_objective: target length != P");
  const Vector r = primal_forward(w, patches, residual) - targets;
  return 0.5 * r.squaredNorm() + primal_regularizer(w, beta);
}

namespace detail {

/// Gradient of 0.5 * scale * ||f(y) - targets||^2 + beta/2 ||W||^2, where y
/// may be a minibatch of patch rows and `skip` its identity path.
inline PrimalWeights primal_gradient_rows(const PrimalWeights& w, const RowMatrix& y, const Vector& targets,
                                          const Vector* skip, double beta, double scale) {
  PrimalWeights g{beta * w.u, beta * w.v};
  if (w.units() == 0) return g;
  const Matrix pre = y * w.u;
  const Matrix act = pre.cwiseMax(0.0);
  Vector r = act * w.v - targets;
  if (skip) r += *skip;
  r *= scale;
  g.v.noalias() += act.transpose() * r;
  // ReLU derivative at exactly zero is taken as 0.
  Matrix back = (pre.array() > 0.0).cast<double>().matrix();
  back.array().colwise() *= r.array();
  back.array().rowwise() *= w.v.transpose().array();
  g.u.noalias() += y.transpose() * back;
  return g;
}

}  // namespace detail

inline PrimalWeights primal_gradient(const PrimalWeights& w, const PatchMatrix& patches, const Vector& targets,
                                     double beta, bool residual = false) {
  check_shapes(w, patches);
  if (targets.size() != patches.size()) throw std::invalid_argument("primal_gradient: target length != P");
  const Vector skip = residual ? patches.center() : Vector();
  return detail::primal_gradient_rows(w, patches.rows, targets, residual ? &skip : nullptr, beta, 1.0);
}

/// One bias-corrected Adam update in place.
inline void adam_step(AdamState& state, PrimalWeights& w, const PrimalWeights& grad, double lr) {
  if (state.step < 0) throw std::invalid_argument("adam_step: negative step counter");
  constexpr double b1 = AdamState::beta1;
  constexpr double b2 = AdamState::beta2;
  ++state.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + AdamState::epsilon);
  };
  update(w.u, state.m1.u, state.m2.u, grad.u);
  update(w.v, state.m1.v, state.m2.v, grad.v);
}

/// u_j <- gamma_j u_j, v_j <- v_j / gamma_j. Leaves the network function unchanged.
inline PrimalWeights rescale_weights(const PrimalWeights& w, const Vector& gammas) {
  if (gammas.size() != w.units()) throw std::invalid_argument("rescale_weights: one gamma per unit");
  for (Eigen::Index j = 0; j < gammas.size(); ++j) {
    if (!(gammas[j] > 0.0)) throw std::invalid_argument("rescale_weights: gammas must be > 0");
  }
  PrimalWeights out = w;
  for (Eigen::Index j = 0; j < gammas.size(); ++j) {
    out.u.col(j) *= gammas[j];
    out.v[j] /= gammas[j];
  }
  return out;
}

/// Per-unit gamma minimizing ||gamma u||^2 + (v / gamma)^2, i.e. sqrt(|v| / ||u||).
/// Units with u = 0 or v = 0 keep gamma = 1.
inline Vector balancing_gammas(const PrimalWeights& w) {
  Vector g = Vector::Ones(w.units());
  for (Eigen::Index j = 0; j < w.units(); ++j) {
    const double un = w.u.col(j).norm();
    const double vn = std::abs(w.v[j]);
    if (un > 0.0 && vn > 0.0) g[j] = std::sqrt(vn / un);
  }
  return g;
}

struct PrimalRecord {
  int iteration;
  double objective;
};

struct PrimalResult {
  PrimalWeights weights;
  std::vector<PrimalRecord> history;
};

/// Called after each logged iteration with the current weights.
using PrimalObserver = std::function<void(int, const PrimalWeights&, double)>;

/// Adam on the exact regularized objective. Minibatches are patch rows drawn
/// from a seeded per-epoch shuffle; the data gradient is scaled by P / B so
/// it estimates the full-batch gradient.
inline PrimalResult train_primal(const PatchMatrix& patches, const Vector& targets, const PrimalConfig& cfg,
                                 const PrimalObserver& observer = {}) {
  cfg.validate();
  if (targets.size() != patches.size()) throw std::invalid_argument("train_primal: target length != P");
  const Eigen::Index pixels = patches.size();
  const Eigen::Index batch = (cfg.batch_size <= 0 || cfg.batch_size >= pixels) ? pixels : cfg.batch_size;
  const bool full = batch == pixels;

  PrimalResult result;
  result.weights = init_kaiming_uniform(cfg.filters, patches.spec.k, cfg.seed);
  AdamState state = AdamState::like(result.weights);
  const Vector skip = cfg.residual ? patches.center() : Vector();

  const double initial = primal_objective(result.weights, patches, targets, cfg.beta, cfg.residual);
  result.history.push_back({0, initial});
  if (observer) observer(0, result.weights, initial);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(pixels));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  RowMatrix ybatch(batch, patches.dim());
  Vector tbatch(batch);
  Vector sbatch(batch);

  for (int it = 1; it <= cfg.max_iters; ++it) {
    double lr = cfg.learning_rate;
    if (cfg.schedule == LrSchedule::cosine) {
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * (it - 1) / static_cast<double>(cfg.max_iters)));
    }
    if (full) {
      const auto g = detail::primal_gradient_rows(result.weights, patches.rows, targets,
                                                  cfg.residual ? &skip : nullptr, cfg.beta, 1.0);
      adam_step(state, result.weights, g, lr);
    } else {
      Engine eng = make_engine(cfg.seed, 1000 + static_cast<std::uint64_t>(it));
      std::shuffle(order.begin(), order.end(), eng);
      for (Eigen::Index start = 0; start + batch <= pixels; start += batch) {
        for (Eigen::Index b = 0; b < batch; ++b) {
          const Eigen::Index p = order[static_cast<std::size_t>(start + b)];
          ybatch.row(b) = patches.rows.row(p);
          tbatch[b] = targets[p];
          if (cfg.residual) sbatch[b] = skip[p];
        }
        const double scale = static_cast<double>(pixels) / static_cast<double>(batch);
        const auto g = detail::primal_gradient_rows(result.weights, ybatch, tbatch,
                                                    cfg.residual ? &sbatch : nullptr, cfg.beta, scale);
        adam_step(state, result.weights, g, lr);
      }
    }
    if (it % std::max(1, cfg.log_every) == 0 || it == cfg.max_iters) {
      const double obj = primal_objective(result.weights, patches, targets, cfg.beta, cfg.residual);
      if (!std::isfinite(obj) || obj > 10.0 * initial) {
        throw DivergenceError("train_primal: objective diverged", it, obj);
      }
      result.history.push_back({it, obj});
      if (observer) observer(it, result.weights, obj);
    }
  }
  return result;
}

inline void save_primal(const std::string& path, const PrimalWeights& w) {
  std::vector<double> body(static_cast<std::size_t>(w.u.size() + w.v.size()));
  std::copy(w.u.data(), w.u.data() + w.u.size(), body.begin());
  std::copy(w.v.data(), w.v.data() + w.v.size(), body.begin() + w.u.size());
  binio::write_flat(path, static_cast<std::uint64_t>(w.units()), static_cast<std::uint64_t>(w.dim()), body);
}

inline PrimalWeights load_primal(const std::string& path) {
  const auto f = binio::read_flat(path);
  binio::expect_body(f, f.count * f.dim + f.count, path);
  const auto m = static_cast<Eigen::Index>(f.count);
  const auto d = static_cast<Eigen::Index>(f.dim);
  PrimalWeights w;
  w.u = Eigen::Map<const Matrix>(f.body.data(), d, m);
  w.v = Eigen::Map<const Vector>(f.body.data() + d * m, m);
  return w;
}

}  // namespace dualconv
