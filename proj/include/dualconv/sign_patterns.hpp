#pragma once

// ReLU activation patterns over a patch matrix. A pattern is stored by a
// generator direction g; its mask is 1{Y' g >= 0} (ties count as active).
// Masks are only materialized when asked for, since at MNIST scale a mask is
// as long as the number of output pixels.

#include "binary_io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

#include <Eigen/SVD>

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dualconv {

/// Packed bit masks, one row of `pixels` bits per pattern.
class MaskTable {
 public:
  MaskTable() = default;
  MaskTable(Eigen::Index patterns, Eigen::Index pixels)
      : patterns_(patterns), pixels_(pixels), words_((pixels + 63) / 64),
        bits_(static_cast<std::size_t>(patterns * words_), 0) {}

  Eigen::Index patterns() const noexcept { return patterns_; }
  Eigen::Index pixels() const noexcept { return pixels_; }

  bool test(Eigen::Index i, Eigen::Index p) const noexcept {
    return (row(i)[p >> 6] >> (p & 63)) & 1u;
  }
  void set(Eigen::Index i, Eigen::Index p) noexcept { row(i)[p >> 6] |= std::uint64_t{1} << (p & 63); }

  const std::uint64_t* row(Eigen::Index i) const noexcept { return bits_.data() + i * words_; }
  std::uint64_t* row(Eigen::Index i) noexcept { return bits_.data() + i * words_; }
  Eigen::Index words() const noexcept { return words_; }

  bool same_row(Eigen::Index i, const MaskTable& other, Eigen::Index j) const noexcept {
    return std::equal(row(i), row(i) + words_, other.row(j));
  }

  /// Expand pattern i into a 0/1 vector.
  Vector dense(Eigen::Index i) const {
    Vector out(pixels_);
    for (Eigen::Index p = 0; p < pixels_; ++p) out[p] = test(i, p) ? 1.0 : 0.0;
    return out;
  }

  std::size_t popcount(Eigen::Index i) const noexcept {
    std::size_t n = 0;
    for (Eigen::Index w = 0; w < words_; ++w) n += static_cast<std::size_t>(std::popcount(row(i)[w]));
    return n;
  }

  /// Keep only the listed patterns, in order.
  MaskTable select(const std::vector<Eigen::Index>& keep) const {
    MaskTable out(static_cast<Eigen::Index>(keep.size()), pixels_);
    for (std::size_t j = 0; j < keep.size(); ++j) {
      std::copy(row(keep[j]), row(keep[j]) + words_, out.row(static_cast<Eigen::Index>(j)));
    }
    return out;
  }

  friend bool operator==(const MaskTable&, const MaskTable&) = default;

 private:
  Eigen::Index patterns_ = 0;
  Eigen::Index pixels_ = 0;
  Eigen::Index words_ = 0;
  std::vector<std::uint64_t> bits_;
};

/// Pre-activation of pixel p for direction g. Fixed summation order so every
/// code path that derives a mask bit agrees bit-for-bit.
inline double preactivation(const RowMatrix& patches, Eigen::Index p, const double* g) {
  double s = 0.0;
  const double* y = patches.data() + p * patches.cols();
  for (Eigen::Index t = 0; t < patches.cols(); ++t) s += y[t] * g[t];
  return s;
}

inline bool mask_bit(const RowMatrix& patches, Eigen::Index p, const double* g) {
  return preactivation(patches, p, g) >= 0.0;
}

struct SignPatternSet {
  /// k^2 x count, one generator per column.
  Matrix generators;
  /// Masks over the patch matrix the set was built on, when materialized.
  std::optional<MaskTable> masks;

  Eigen::Index count() const noexcept { return generators.cols(); }
  Eigen::Index dim() const noexcept { return generators.rows(); }

  /// First `n` patterns (nested subsets for ablations).
  SignPatternSet prefix(Eigen::Index n) const {
    if (n > count()) throw std::out_of_range("SignPatternSet::prefix beyond count");
    SignPatternSet out;
    out.generators = generators.leftCols(n);
    if (masks) {
      std::vector<Eigen::Index> keep(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) keep[static_cast<std::size_t>(i)] = i;
      out.masks = masks->select(keep);
    }
    return out;
  }

  SignPatternSet without_masks() const { return SignPatternSet{generators, std::nullopt}; }
};

/// Masks of every pattern in `set` evaluated on `patches`.
inline MaskTable compute_masks(const Matrix& generators, const PatchMatrix& patches) {
  if (generators.rows() != patches.dim()) throw std::invalid_argument("compute_masks: dimension mismatch");
  MaskTable table(generators.cols(), patches.size());
  for (Eigen::Index i = 0; i < generators.cols(); ++i) {
    const double* g = generators.col(i).data();
    for (Eigen::Index p = 0; p < patches.size(); ++p) {
      if (mask_bit(patches.rows, p, g)) table.set(i, p);
    }
  }
  return table;
}

inline SignPatternSet materialize(const SignPatternSet& set, const PatchMatrix& patches) {
  return SignPatternSet{set.generators, compute_masks(set.generators, patches)};
}

namespace detail {

inline Vector draw_generator(std::uint64_t seed, std::uint64_t draw, Eigen::Index dim) {
  Engine eng = make_engine(seed, draw);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector g(dim);
  for (Eigen::Index t = 0; t < dim; ++t) g[t] = normal(eng);
  return g;
}

inline std::uint64_t hash_words(const std::uint64_t* w, Eigen::Index n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < n; ++i) h = mix_seed(h, w[i]);
  return h;
}

}  // namespace detail

/// Draw `requested` standard-normal generators and keep one per distinct mask.
/// Draw d uses its own stream (seed, d), so the result does not depend on
/// evaluation order.
inline SignPatternSet sample_patterns(const PatchMatrix& patches, Eigen::Index requested, std::uint64_t seed) {
  if (requested < 1) throw std::invalid_argument("sample_patterns: requested must be >= 1");
  const Eigen::Index dim = patches.dim();
  const Eigen::Index pixels = patches.size();

  MaskTable scratch(1, pixels);
  MaskTable kept(requested, pixels);
  std::vector<Vector> gens;
  std::unordered_multimap<std::uint64_t, Eigen::Index> seen;

  for (Eigen::Index d = 0; d < requested; ++d) {
    Vector g = detail::draw_generator(seed, static_cast<std::uint64_t>(d), dim);
    std::fill(scratch.row(0), scratch.row(0) + scratch.words(), 0);
    for (Eigen::Index p = 0; p < pixels; ++p) {
      if (mask_bit(patches.rows, p, g.data())) scratch.set(0, p);
    }
    const auto h = detail::hash_words(scratch.row(0), scratch.words());
    bool duplicate = false;
    auto [lo, hi] = seen.equal_range(h);
    for (auto it = lo; it != hi; ++it) {
      if (kept.same_row(it->second, scratch, 0)) {
        duplicate = true;
        break;
      }
    }
    if (duplicate) continue;
    const auto slot = static_cast<Eigen::Index>(gens.size());
    std::copy(scratch.row(0), scratch.row(0) + scratch.words(), kept.row(slot));
    seen.emplace(h, slot);
    gens.push_back(std::move(g));
  }

  SignPatternSet out;
  out.generators.resize(dim, static_cast<Eigen::Index>(gens.size()));
  std::vector<Eigen::Index> keep(gens.size());
  for (std::size_t i = 0; i < gens.size(); ++i) {
    out.generators.col(static_cast<Eigen::Index>(i)) = gens[i];
    keep[i] = static_cast<Eigen::Index>(i);
  }
  out.masks = kept.select(keep);
  return out;
}

/// Dense random-direction enumeration for tiny instances (P <= 64). With
/// enough draws on generic data this recovers every cell of the arrangement.
inline SignPatternSet enumerate_patterns_exact(const PatchMatrix& patches, Eigen::Index draws = 1'000'000,
                                               std::uint64_t seed = 0x5eedULL) {
  if (patches.size() > 64) {
    throw std::invalid_argument("enumerate_patterns_exact: P = " + std::to_string(patches.size()) +
                                " exceeds 64");
  }
  if (draws < 100'000) throw std::invalid_argument("enumerate_patterns_exact: draws must be >= 1e5");
  const Eigen::Index dim = patches.dim();
  const Eigen::Index pixels = patches.size();

  std::unordered_map<std::uint64_t, Eigen::Index> seen;
  std::vector<Vector> gens;
  std::vector<std::uint64_t> keys;
  for (Eigen::Index d = 0; d < draws; ++d) {
    Vector g = detail::draw_generator(seed, static_cast<std::uint64_t>(d), dim);
    std::uint64_t key = 0;
    for (Eigen::Index p = 0; p < pixels; ++p) {
      if (mask_bit(patches.rows, p, g.data())) key |= std::uint64_t{1} << p;
    }
    if (seen.emplace(key, static_cast<Eigen::Index>(gens.size())).second) {
      gens.push_back(std::move(g));
      keys.push_back(key);
    }
  }

  SignPatternSet out;
  out.generators.resize(dim, static_cast<Eigen::Index>(gens.size()));
  MaskTable table(static_cast<Eigen::Index>(gens.size()), pixels);
  for (std::size_t i = 0; i < gens.size(); ++i) {
    out.generators.col(static_cast<Eigen::Index>(i)) = gens[i];
    for (Eigen::Index p = 0; p < pixels; ++p) {
      if ((keys[i] >> p) & 1u) table.set(static_cast<Eigen::Index>(i), p);
    }
  }
  out.masks = std::move(table);
  return out;
}

/// Upper bound 2r (e (P-1) / r)^r on the number of patterns.
inline double pattern_count_bound(Eigen::Index pixels, Eigen::Index rank) {
  if (rank < 1) throw std::invalid_argument("pattern_count_bound: rank must be >= 1");
  if (pixels < 2) throw std::invalid_argument("pattern_count_bound: P must be >= 2");
  const double r = static_cast<double>(rank);
  return 2.0 * r * std::pow(std::numbers::e * static_cast<double>(pixels - 1) / r, r);
}

/// Numerical rank: singular values above 1e-10 * sigma_max.
inline Eigen::Index matrix_rank(const RowMatrix& m) {
  if (m.size() == 0) return 0;
  const Matrix dense = m;
  Eigen::BDCSVD<Matrix> svd(dense);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s[0] == 0.0) return 0;
  const double tol = 1e-10 * s[0];
  return static_cast<Eigen::Index>((s.array() > tol).count());
}

/// sum_i D_i Y' weights_i. Uses the stored masks when present, otherwise
/// recomputes each mask bit from its generator; both paths share one
/// accumulation order and therefore agree exactly.
inline Vector apply_masks(const SignPatternSet& set, const PatchMatrix& patches, const Matrix& weights) {
  if (weights.rows() != patches.dim() || weights.cols() != set.count() || set.dim() != patches.dim()) {
    throw std::invalid_argument("apply_masks: weights must be k^2 x pattern count");
  }
  if (set.masks && set.masks->pixels() != patches.size()) {
    throw std::invalid_argument("apply_masks: stored masks do not match patch count");
  }
  Vector out = Vector::Zero(patches.size());
  for (Eigen::Index i = 0; i < set.count(); ++i) {
    if (weights.col(i).isZero(0.0)) continue;
    const double* w = weights.col(i).data();
    const double* g = set.generators.col(i).data();
    for (Eigen::Index p = 0; p < patches.size(); ++p) {
      const bool on = set.masks ? set.masks->test(i, p) : mask_bit(patches.rows, p, g);
      if (on) out[p] += preactivation(patches.rows, p, w);
    }
  }
  return out;
}

inline void save_patterns(const std::string& path, const SignPatternSet& set) {
  binio::write_flat(path, static_cast<std::uint64_t>(set.count()), static_cast<std::uint64_t>(set.dim()),
                    std::span<const double>(set.generators.data(), static_cast<std::size_t>(set.generators.size())));
}

inline SignPatternSet load_patterns(const std::string& path) {
  auto f = binio::read_flat(path);
  binio::expect_body(f, f.count * f.dim, path);
  SignPatternSet set;
  set.generators = Eigen::Map<const Matrix>(f.body.data(), static_cast<Eigen::Index>(f.dim),
                                            static_cast<Eigen::Index>(f.count));
  return set;
}

}  // namespace dualconv
