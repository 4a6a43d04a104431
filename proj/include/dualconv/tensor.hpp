#pragma once

// Image stacks, zero-padded patch extraction (im2col) and a direct
// nested-loop convolution used as an independent check on the patch path.
//
// Layout is fixed everywhere: images n-major, pixels row-major inside an
// image, kernel window flattened row-major. Convolution is cross-correlation
// (no kernel flip).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualconv {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ImageTensor {
 public:
  ImageTensor() = default;

  ImageTensor(std::size_t count, std::size_t rows, std::size_t cols, double fill = 0.0)
      : count_(count), rows_(rows), cols_(cols), data_(count * rows * cols, fill) {
    check_shape();
    check_finite();
  }

  ImageTensor(std::size_t count, std::size_t rows, std::size_t cols, std::vector<double> data)
      : count_(count), rows_(rows), cols_(cols), data_(std::move(data)) {
    check_shape();
    if (data_.size() != count_ * rows_ * cols_) {
      throw std::invalid_argument("ImageTensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape");
    }
    check_finite();
  }

  std::size_t count() const noexcept { return count_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t pixels_per_image() const noexcept { return rows_ * cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double operator()(std::size_t n, std::size_t r, std::size_t c) const {
    return data_[index(n, r, c)];
  }
  double& operator()(std::size_t n, std::size_t r, std::size_t c) { return data_[index(n, r, c)]; }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }

  /// A copy of images [first, first + n).
  ImageTensor slice(std::size_t first, std::size_t n) const {
    if (first + n > count_) throw std::out_of_range("ImageTensor::slice out of range");
    std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(first * pixels_per_image()),
                            data_.begin() + static_cast<std::ptrdiff_t>((first + n) * pixels_per_image()));
    return ImageTensor(n, rows_, cols_, std::move(out));
  }

  bool same_shape(const ImageTensor& other) const noexcept {
    return count_ == other.count_ && rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t index(std::size_t n, std::size_t r, std::size_t c) const noexcept {
    return (n * rows_ + r) * cols_ + c;
  }

  void check_shape() const {
    if (count_ == 0 || rows_ == 0 || cols_ == 0) {
      throw std::invalid_argument("ImageTensor: N, h, w must all be >= 1");
    }
  }

  void check_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) throw std::invalid_argument("ImageTensor: non-finite entry");
    }
  }

  std::size_t count_ = 0;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Kernel geometry: stride 1, zero padding chosen so output size == input size.
struct ConvSpec {
  int k = 1;
  int pad_before = 0;  // rows above / columns left of the image
  int pad_after = 0;

  /// Odd kernel with symmetric padding (k-1)/2. Even k is rejected.
  static ConvSpec odd(int k) {
    if (k < 1) throw std::invalid_argument("ConvSpec: kernel size must be >= 1");
    if (k % 2 == 0) throw std::invalid_argument("ConvSpec: kernel size must be odd, got " + std::to_string(k));
    return ConvSpec{k, (k - 1) / 2, (k - 1) / 2};
  }

  /// Any k >= 1. Even kernels pad one extra row/column after the image.
  static ConvSpec same(int k) {
    if (k < 1) throw std::invalid_argument("ConvSpec: kernel size must be >= 1");
    return ConvSpec{k, (k - 1) / 2, k / 2};
  }

  int taps() const noexcept { return k * k; }
  /// Column of the patch matrix holding the output pixel's own input value.
  int center_tap() const noexcept { return pad_before * k + pad_before; }

  void validate() const {
    if (k < 1) throw std::invalid_argument("ConvSpec: kernel size must be >= 1");
    if (pad_before < 0 || pad_after < 0 || pad_before + pad_after != k - 1) {
      throw std::invalid_argument("ConvSpec: padding must total k-1 (stride-1 same convolution)");
    }
  }

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct PixelIndex {
  std::size_t image;
  std::size_t row;
  std::size_t col;
};

/// Nhw x k^2 matrix: row p is the zero-padded window around output pixel p.
struct PatchMatrix {
  RowMatrix rows;
  ConvSpec spec;
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  Eigen::Index size() const noexcept { return rows.rows(); }
  Eigen::Index dim() const noexcept { return rows.cols(); }

  PixelIndex origin(Eigen::Index p) const {
    const auto up = static_cast<std::size_t>(p);
    const std::size_t per_image = height * width;
    return {up / per_image, (up % per_image) / width, up % width};
  }

  /// Flattened input pixels (the identity path of a residual block).
  Vector center() const { return rows.col(spec.center_tap()); }
};

inline PatchMatrix extract_patches(const ImageTensor& images, const ConvSpec& spec) {
  spec.validate();
  if (images.empty()) throw std::invalid_argument("extract_patches: empty tensor");
  const auto h = images.rows();
  const auto w = images.cols();
  const auto limit = std::min(h, w) + static_cast<std::size_t>(spec.pad_before + spec.pad_after);
  if (static_cast<std::size_t>(spec.k) > limit) {
    throw std::invalid_argument("extract_patches: kernel larger than padded image");
  }

  PatchMatrix out;
  out.spec = spec;
  out.count = images.count();
  out.height = h;
  out.width = w;
  out.rows = RowMatrix::Zero(static_cast<Eigen::Index>(images.size()), spec.taps());

  const int k = spec.k;
  Eigen::Index p = 0;
  for (std::size_t n = 0; n < images.count(); ++n) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c, ++p) {
        for (int dr = 0; dr < k; ++dr) {
          const auto rr = static_cast<std::ptrdiff_t>(r) + dr - spec.pad_before;
          if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h)) continue;
          for (int dc = 0; dc < k; ++dc) {
            const auto cc = static_cast<std::ptrdiff_t>(c) + dc - spec.pad_before;
            if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(w)) continue;
            out.rows(p, dr * k + dc) =
                images(n, static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
          }
        }
      }
    }
  }
  return out;
}

/// Nested-loop cross-correlation; never goes through the patch matrix.
inline ImageTensor conv2d_direct(const ImageTensor& images, std::span<const double> filter,
                                 const ConvSpec& spec) {
  spec.validate();
  if (filter.size() != static_cast<std::size_t>(spec.taps())) {
    throw std::invalid_argument("conv2d_direct: filter length " + std::to_string(filter.size()) +
                                " != k^2 = " + std::to_string(spec.taps()));
  }
  const auto h = static_cast<std::ptrdiff_t>(images.rows());
  const auto w = static_cast<std::ptrdiff_t>(images.cols());
  ImageTensor out(images.count(), images.rows(), images.cols());
  for (std::size_t n = 0; n < images.count(); ++n) {
    for (std::ptrdiff_t r = 0; r < h; ++r) {
      for (std::ptrdiff_t c = 0; c < w; ++c) {
        double acc = 0.0;
        for (int dr = 0; dr < spec.k; ++dr) {
          for (int dc = 0; dc < spec.k; ++dc) {
            const auto rr = r + dr - spec.pad_before;
            const auto cc = c + dc - spec.pad_before;
            if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
            acc += images(n, static_cast<std::size_t>(rr), static_cast<std::size_t>(cc)) *
                   filter[static_cast<std::size_t>(dr * spec.k + dc)];
          }
        }
        out(n, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
      }
    }
  }
  return out;
}

inline ImageTensor conv2d_direct(const ImageTensor& images, const Vector& filter, const ConvSpec& spec) {
  return conv2d_direct(images, std::span<const double>(filter.data(), static_cast<std::size_t>(filter.size())),
                       spec);
}

inline Vector flatten_targets(const ImageTensor& images) {
  const auto vals = images.values();
  return Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

inline ImageTensor reshape(const Vector& flat, std::size_t count, std::size_t rows, std::size_t cols) {
  return ImageTensor(count, rows, cols, std::vector<double>(flat.data(), flat.data() + flat.size()));
}

/// Reshape a per-pixel vector back into the image stack a PatchMatrix came from.
inline ImageTensor reshape_like(const Vector& flat, const PatchMatrix& patches) {
  return reshape(flat, patches.count, patches.height, patches.width);
}

/// alpha * a + beta * b.
inline ImageTensor elementwise(const ImageTensor& a, const ImageTensor& b, double alpha, double beta) {
  if (!a.same_shape(b)) throw std::invalid_argument("elementwise: shape mismatch");
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i] + beta * bv[i];
  return ImageTensor(a.count(), a.rows(), a.cols(), std::move(out));
}

}  // namespace dualconv
