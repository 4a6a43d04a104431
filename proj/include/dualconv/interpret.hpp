#pragma once

// Reading a trained dual network: which patterns fire at each pixel (binary
// codes), clustering of those codes, frequency responses of the learned
// filters, and greedy stacking of blocks.

#include "dual.hpp"
#include "primal.hpp"
#include "sign_patterns.hpp"
#include "tensor.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <bit>
#include <complex>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace dualconv {

/// One bit string per pixel; bit j is the mask of active group groups[j].
struct ClusterCodes {
  std::vector<Eigen::Index> groups;
  Eigen::Index pixels = 0;
  Eigen::Index words = 0;
  std::vector<std::uint64_t> bits;

  Eigen::Index length() const noexcept { return static_cast<Eigen::Index>(groups.size()); }
  const std::uint64_t* row(Eigen::Index p) const noexcept { return bits.data() + p * words; }
  bool test(Eigen::Index p, Eigen::Index j) const noexcept { return (row(p)[j >> 6] >> (j & 63)) & 1u; }
  bool same(Eigen::Index p, Eigen::Index q) const noexcept {
    return std::equal(row(p), row(p) + words, row(q));
  }

  Vector dense(Eigen::Index p) const {
    Vector out(length());
    for (Eigen::Index j = 0; j < length(); ++j) out[j] = test(p, j) ? 1.0 : 0.0;
    return out;
  }
};

/// Groups with ||w_i - z_i|| > tol, in pattern order. The difference is what
/// enters the prediction.
inline std::vector<Eigen::Index> active_difference_groups(const DualWeights& W, double tol) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < W.count(); ++i) {
    if ((W.w.col(i) - W.z.col(i)).norm() > tol) out.push_back(i);
  }
  return out;
}

inline ClusterCodes cluster_codes(const DualWeights& W, const SignPatternSet& set, const PatchMatrix& patches,
                                  double group_zero_tol = 1e-8) {
  if (W.count() != set.count()) throw std::invalid_argument("cluster_codes: weights and pattern set differ in size");
  ClusterCodes codes;
  codes.groups = active_difference_groups(W, group_zero_tol);
  codes.pixels = patches.size();
  codes.words = (codes.length() + 63) / 64;
  codes.bits.assign(static_cast<std::size_t>(codes.pixels * codes.words), 0);
  const bool stored = set.masks && set.masks->pixels() == patches.size();
  for (Eigen::Index j = 0; j < codes.length(); ++j) {
    const Eigen::Index i = codes.groups[static_cast<std::size_t>(j)];
    const double* g = set.generators.col(i).data();
    for (Eigen::Index p = 0; p < codes.pixels; ++p) {
      const bool on = stored ? set.masks->test(i, p) : mask_bit(patches.rows, p, g);
      if (on) codes.bits[static_cast<std::size_t>(p * codes.words + (j >> 6))] |= std::uint64_t{1} << (j & 63);
    }
  }
  return codes;
}

inline ClusterCodes cluster_codes(const DualSolution& sol, const SignPatternSet& set, const PatchMatrix& patches,
                                  double group_zero_tol = 1e-8) {
  return cluster_codes(sol.weights, set, patches, group_zero_tol);
}

// ---------------------------------------------------------------------------
// k-means on binary codes.

struct ClusterAssignment {
  std::vector<int> labels;  // per pixel
  Matrix centroids;         // K x code length
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after every Lloyd iteration
};

namespace detail {

/// Distinct codes with their multiplicities; Lloyd on these is the same as
/// Lloyd on every pixel, just cheaper.
struct UniqueCodes {
  std::vector<Eigen::Index> representative;  // a pixel holding each distinct code
  std::vector<double> weight;
  std::vector<Eigen::Index> of_pixel;  // pixel -> distinct code index
};

inline UniqueCodes unique_codes(const ClusterCodes& codes) {
  UniqueCodes u;
  u.of_pixel.resize(static_cast<std::size_t>(codes.pixels));
  std::unordered_multimap<std::uint64_t, Eigen::Index> seen;
  for (Eigen::Index p = 0; p < codes.pixels; ++p) {
    const std::uint64_t h = hash_words(codes.row(p), codes.words);
    Eigen::Index found = -1;
    auto [lo, hi] = seen.equal_range(h);
    for (auto it = lo; it != hi; ++it) {
      if (codes.same(p, u.representative[static_cast<std::size_t>(it->second)])) {
        found = it->second;
        break;
      }
    }
    if (found < 0) {
      found = static_cast<Eigen::Index>(u.representative.size());
      u.representative.push_back(p);
      u.weight.push_back(0.0);
      seen.emplace(h, found);
    }
    u.weight[static_cast<std::size_t>(found)] += 1.0;
    u.of_pixel[static_cast<std::size_t>(p)] = found;
  }
  return u;
}

/// ||code(p) - c||^2 = ||c||^2 + sum over set bits of (1 - 2 c_j).
inline double code_distance(const ClusterCodes& codes, Eigen::Index p, const Matrix& centroids, Eigen::Index k,
                            double centroid_sq) {
  double d = centroid_sq;
  const std::uint64_t* bits = codes.row(p);
  for (Eigen::Index w = 0; w < codes.words; ++w) {
    std::uint64_t word = bits[w];
    while (word) {
      const Eigen::Index j = w * 64 + std::countr_zero(word);
      d += 1.0 - 2.0 * centroids(k, j);
      word &= word - 1;
    }
  }
  return std::max(d, 0.0);
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding, deterministic per seed. An empty
/// cluster is reseeded with the point farthest from its own centroid.
/// Throws std::logic_error if inertia ever increases (it cannot, by design).
inline ClusterAssignment kmeans(const ClusterCodes& codes, int K, std::uint64_t seed, int max_iters = 100) {
  if (K < 1) throw std::invalid_argument("kmeans: K must be >= 1");
  if (codes.pixels < 1) throw std::invalid_argument("kmeans: no codes");
  const auto uc = detail::unique_codes(codes);
  const auto U = static_cast<Eigen::Index>(uc.representative.size());
  const Eigen::Index L = codes.length();
  Engine eng = make_engine(seed, 0x6b6d);

  Matrix centroids = Matrix::Zero(K, L);
  Vector sq = Vector::Zero(K);
  auto set_centroid = [&](Eigen::Index k, Eigen::Index u) {
    centroids.row(k) = codes.dense(uc.representative[static_cast<std::size_t>(u)]).transpose();
    sq[k] = centroids.row(k).squaredNorm();
  };
  auto dist = [&](Eigen::Index u, Eigen::Index k) {
    return detail::code_distance(codes, uc.representative[static_cast<std::size_t>(u)], centroids, k, sq[k]);
  };

  // k-means++: first center by weight, then by weight * D^2.
  std::vector<double> d2(static_cast<std::size_t>(U), std::numeric_limits<double>::infinity());
  {
    std::discrete_distribution<Eigen::Index> first(uc.weight.begin(), uc.weight.end());
    set_centroid(0, first(eng));
    for (Eigen::Index k = 1; k < K; ++k) {
      double total = 0.0;
      std::vector<double> p(static_cast<std::size_t>(U));
      for (Eigen::Index u = 0; u < U; ++u) {
        d2[static_cast<std::size_t>(u)] = std::min(d2[static_cast<std::size_t>(u)], dist(u, k - 1));
        p[static_cast<std::size_t>(u)] = uc.weight[static_cast<std::size_t>(u)] * d2[static_cast<std::size_t>(u)];
        total += p[static_cast<std::size_t>(u)];
      }
      if (total > 0.0) {
        std::discrete_distribution<Eigen::Index> next(p.begin(), p.end());
        set_centroid(k, next(eng));
      } else {
        set_centroid(k, 0);  // fewer distinct codes than clusters
      }
    }
  }

  ClusterAssignment out;
  std::vector<Eigen::Index> label(static_cast<std::size_t>(U), -1);
  std::vector<double> own(static_cast<std::size_t>(U));
  double previous = std::numeric_limits<double>::infinity();

  for (int it = 0; it < std::max(1, max_iters); ++it) {
    bool changed = false;
    for (Eigen::Index u = 0; u < U; ++u) {
      Eigen::Index best = 0;
      double bd = dist(u, 0);
      for (Eigen::Index k = 1; k < K; ++k) {
        const double d = dist(u, k);
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      if (label[static_cast<std::size_t>(u)] != best) changed = true;
      label[static_cast<std::size_t>(u)] = best;
    }

    // Update step, then reseed any empty cluster.
    Matrix sums = Matrix::Zero(K, L);
    Vector mass = Vector::Zero(K);
    for (Eigen::Index u = 0; u < U; ++u) {
      const Eigen::Index k = label[static_cast<std::size_t>(u)];
      const double wt = uc.weight[static_cast<std::size_t>(u)];
      mass[k] += wt;
      const std::uint64_t* bits = codes.row(uc.representative[static_cast<std::size_t>(u)]);
      for (Eigen::Index w = 0; w < codes.words; ++w) {
        std::uint64_t word = bits[w];
        while (word) {
          sums(k, w * 64 + std::countr_zero(word)) += wt;
          word &= word - 1;
        }
      }
    }
    for (Eigen::Index k = 0; k < K; ++k) {
      if (mass[k] > 0.0) {
        centroids.row(k) = sums.row(k) / mass[k];
        sq[k] = centroids.row(k).squaredNorm();
      }
    }
    for (Eigen::Index k = 0; k < K; ++k) {
      if (mass[k] > 0.0) continue;
      Eigen::Index far = -1;
      double fd = 0.0;
      for (Eigen::Index u = 0; u < U; ++u) {
        const Eigen::Index lk = label[static_cast<std::size_t>(u)];
        if (mass[lk] <= uc.weight[static_cast<std::size_t>(u)]) continue;  // would empty its cluster
        const double d = dist(u, lk);
        if (d > fd) {
          fd = d;
          far = u;
        }
      }
      if (far < 0) continue;  // every point already sits on a centroid
      const Eigen::Index from = label[static_cast<std::size_t>(far)];
      const double wt = uc.weight[static_cast<std::size_t>(far)];
      const Vector code = codes.dense(uc.representative[static_cast<std::size_t>(far)]);
      centroids.row(from) = (centroids.row(from) * mass[from] - wt * code.transpose()) / (mass[from] - wt);
      sq[from] = centroids.row(from).squaredNorm();
      mass[from] -= wt;
      set_centroid(k, far);
      mass[k] = wt;
      label[static_cast<std::size_t>(far)] = k;
      changed = true;
    }

    double inertia = 0.0;
    for (Eigen::Index u = 0; u < U; ++u) {
      own[static_cast<std::size_t>(u)] = dist(u, label[static_cast<std::size_t>(u)]);
      inertia += uc.weight[static_cast<std::size_t>(u)] * own[static_cast<std::size_t>(u)];
    }
    if (inertia > previous + 1e-9 * std::max(1.0, previous)) {
      throw std::logic_error("kmeans: inertia increased between iterations");
    }
    out.inertia_history.push_back(inertia);
    previous = inertia;
    if (!changed) break;
  }

  out.centroids = std::move(centroids);
  out.inertia = previous;
  out.labels.resize(static_cast<std::size_t>(codes.pixels));
  for (Eigen::Index p = 0; p < codes.pixels; ++p) {
    out.labels[static_cast<std::size_t>(p)] =
        static_cast<int>(label[static_cast<std::size_t>(uc.of_pixel[static_cast<std::size_t>(p)])]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frequency responses.

/// |DFT| of a k x k filter (row-major) zero-padded into an h x w grid, with
/// the zero frequency moved to (h/2, w/2). Returned as a 1 x h x w tensor.
inline ImageTensor frequency_magnitude(const Vector& filter, int k, std::size_t h, std::size_t w,
                                       bool normalize = true) {
  if (filter.size() != static_cast<Eigen::Index>(k) * k) {
    throw std::invalid_argument("frequency_magnitude: filter length != k^2");
  }
  if (static_cast<std::size_t>(k) > std::min(h, w)) {
    throw std::invalid_argument("frequency_magnitude: kernel larger than the output grid");
  }
  using Complex = std::complex<double>;
  std::vector<std::vector<Complex>> grid(h, std::vector<Complex>(w));
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) grid[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = filter[r * k + c];
  }
  Eigen::FFT<double> fft;
  std::vector<Complex> out;
  for (auto& row : grid) {
    fft.fwd(out, row);
    row = out;
  }
  std::vector<Complex> col(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) col[r] = grid[r][c];
    fft.fwd(out, col);
    for (std::size_t r = 0; r < h; ++r) grid[r][c] = out[r];
  }
  ImageTensor mag(1, h, w);
  double peak = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double m = std::abs(grid[r][c]);
      mag(0, (r + h / 2) % h, (c + w / 2) % w) = m;
      peak = std::max(peak, m);
    }
  }
  if (normalize && peak > 0.0) {
    for (double& v : mag.values()) v /= peak;
  }
  return mag;
}

struct FrequencyResponse {
  Eigen::Index group;
  ImageTensor magnitude;  // 1 x h x w, in [0, 1]
};

/// One normalized response per active group, for its effective filter
/// w_i - z_i (the part that reaches the prediction).
inline std::vector<FrequencyResponse> filter_frequency_response(const DualWeights& W, int k, std::size_t h,
                                                                std::size_t w, double group_zero_tol = 1e-8) {
  std::vector<FrequencyResponse> out;
  for (Eigen::Index i : active_difference_groups(W, group_zero_tol)) {
    out.push_back({i, frequency_magnitude(W.w.col(i) - W.z.col(i), k, h, w)});
  }
  return out;
}

inline std::vector<FrequencyResponse> filter_frequency_response(const DualSolution& sol, int k, std::size_t h,
                                                                std::size_t w, double group_zero_tol = 1e-8) {
  return filter_frequency_response(sol.weights, k, h, w, group_zero_tol);
}

// ---------------------------------------------------------------------------
// Greedy stacking.

struct DualBlock {
  SignPatternSet set;
  DualWeights weights;
};

/// A trained block: either primal or dual weights, plus its geometry.
struct Block {
  ConvSpec spec = ConvSpec::odd(3);
  bool residual = false;
  std::optional<PrimalWeights> primal;
  std::optional<DualBlock> dual;

  Vector forward(const PatchMatrix& patches) const {
    Vector out;
    if (primal) {
      out = primal_forward(*primal, patches, false);
    } else if (dual) {
      // Masks stored with the set belong to the training patches.
      out = dual_predict(dual->weights, dual->set.without_masks(), patches);
    } else {
      throw std::logic_error("Block: no weights");
    }
    if (residual) out += patches.center();
    return out;
  }

  ImageTensor apply(const ImageTensor& input) const {
    const PatchMatrix patches = extract_patches(input, spec);
    return reshape_like(forward(patches), patches);
  }

  /// Codes of a dual block on `input`; empty for primal blocks.
  ClusterCodes codes(const ImageTensor& input, double group_zero_tol = 1e-8) const {
    if (!dual) return {};
    return cluster_codes(dual->weights, dual->set.without_masks(), extract_patches(input, spec), group_zero_tol);
  }
};

struct StackConfig {
  bool dual = true;
  bool residual = true;
  ConvSpec spec = ConvSpec::odd(3);
  Eigen::Index patterns = 800;
  std::uint64_t seed = 0;
  DualConfig dual_cfg;
  PrimalConfig primal_cfg;
};

struct StackResult {
  Block block2;
  ImageTensor block1_output;
  ClusterCodes codes1;
  ClusterCodes codes2;
  double objective = 0.0;  // block 2 training objective (unpenalized for dual)
};

/// Trains a second block on the first block's output against the same
/// targets. Block 1 is left untouched.
inline StackResult greedy_stack(const Block& block1, const ImageTensor& inputs, const ImageTensor& targets,
                                const StackConfig& cfg) {
  if (!inputs.same_shape(targets)) throw std::invalid_argument("greedy_stack: inputs and targets differ in shape");
  StackResult out;
  out.block1_output = block1.apply(inputs);
  out.codes1 = block1.codes(inputs, cfg.dual_cfg.group_zero_tol);

  const PatchMatrix patches = extract_patches(out.block1_output, cfg.spec);
  Vector x = flatten_targets(targets);
  out.block2.spec = cfg.spec;
  out.block2.residual = cfg.residual;
  if (cfg.dual) {
    if (cfg.residual) x -= patches.center();
    SignPatternSet set = sample_patterns(patches, cfg.patterns, cfg.seed);
    const DualProblem prob(patches, x, set);
    DualSolution sol = train_dual_prox(prob, cfg.dual_cfg);
    out.objective = prob.evaluate(sol.weights, 1.0, Hinge::linear, false).data +
                    cfg.dual_cfg.beta * prob.group_norms(sol.weights);
    out.block2.dual = DualBlock{std::move(set), std::move(sol.weights)};
  } else {
    PrimalConfig pc = cfg.primal_cfg;
    pc.residual = cfg.residual;
    PrimalResult res = train_primal(patches, x, pc);
    out.objective = res.history.back().objective;
    out.block2.primal = std::move(res.weights);
  }
  out.codes2 = out.block2.codes(out.block1_output, cfg.dual_cfg.group_zero_tol);
  return out;
}

}  // namespace dualconv
