#pragma once

// Dataset plumbing: IDX and PGM readers/writers, dataset normalization,
// synthetic noise and image-quality metrics.

#include "error.hpp"
#include "rng.hpp"
#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace dualconv {

// ---------------------------------------------------------------------------
// IDX (MNIST container): big-endian u32 magic 0x00000803, u32 N, h, w, then
// N*h*w unsigned bytes. Bytes map to [0, 1] by /255.

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ostream& os, std::uint32_t v) {
  const char buf[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
  os.write(buf, 4);
}

inline unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

inline ImageTensor load_idx(const std::string& path) {
  const auto b = detail::read_all(path);
  if (b.size() < 4) throw TruncatedFileError(path + ": file shorter than the magic number");
  const std::uint32_t magic = detail::be32(b, 0);
  if (magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << path << ": bad magic 0x" << std::hex << magic << " at offset 0 (expected 0x803)";
    throw BadMagicError(msg.str());
  }
  if (b.size() < 16) throw TruncatedFileError(path + ": truncated header");
  const std::uint64_t n = detail::be32(b, 4);
  const std::uint64_t h = detail::be32(b, 8);
  const std::uint64_t w = detail::be32(b, 12);
  if (n == 0 || h == 0 || w == 0) throw FormatError(path + ": zero dimension in header");
  constexpr std::uint64_t limit = std::uint64_t{1} << 40;
  if (h > limit / w || n > limit / (h * w)) {
    throw DimensionOverflowError(path + ": N*h*w overflows the supported size");
  }
  const std::uint64_t total = n * h * w;
  if (b.size() - 16 < total) {
    throw TruncatedFileError(path + ": expected " + std::to_string(total) + " pixel bytes, found " +
                             std::to_string(b.size() - 16));
  }
  std::vector<double> data(total);
  for (std::uint64_t i = 0; i < total; ++i) data[i] = b[16 + i] / 255.0;
  return ImageTensor(n, h, w, std::move(data));
}

/// Values are clamped to [0, 1] and rounded to the nearest byte.
inline void save_idx(const std::string& path, const ImageTensor& images) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  detail::put_be32(os, kIdxImageMagic);
  detail::put_be32(os, static_cast<std::uint32_t>(images.count()));
  detail::put_be32(os, static_cast<std::uint32_t>(images.rows()));
  detail::put_be32(os, static_cast<std::uint32_t>(images.cols()));
  for (double v : images.values()) os.put(static_cast<char>(detail::quantize(v)));
  if (!os) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// PGM, binary (P5) with maxval 255 only.

namespace detail {

inline std::string pgm_token(const std::vector<unsigned char>& b, std::size_t& pos, const std::string& path) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::string tok;
  while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') tok.push_back(static_cast<char>(b[pos++]));
  if (tok.empty()) throw TruncatedFileError(path + ": truncated PGM header");
  return tok;
}

inline std::size_t pgm_number(const std::string& tok, const std::string& path) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw FormatError(path + ": expected a number in PGM header, got '" + tok + "'");
  }
  if (tok.size() > 9) throw DimensionOverflowError(path + ": PGM dimension too large");
  return std::stoul(tok);
}

}  // namespace detail

/// One image as a 1 x h x w tensor, bytes / 255.
inline ImageTensor load_pgm(const std::string& path) {
  const auto b = detail::read_all(path);
  std::size_t pos = 0;
  const std::string magic = detail::pgm_token(b, pos, path);
  if (magic != "P5") throw BadMagicError(path + ": not a binary PGM (magic '" + magic + "', expected P5)");
  const std::size_t w = detail::pgm_number(detail::pgm_token(b, pos, path), path);
  const std::size_t h = detail::pgm_number(detail::pgm_token(b, pos, path), path);
  const std::size_t maxval = detail::pgm_number(detail::pgm_token(b, pos, path), path);
  if (maxval != 255) throw FormatError(path + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (w == 0 || h == 0) throw FormatError(path + ": zero dimension");
  ++pos;  // the single whitespace byte before the raster
  if (pos > b.size() || b.size() - pos < w * h) throw TruncatedFileError(path + ": truncated PGM raster");
  std::vector<double> data(w * h);
  for (std::size_t i = 0; i < w * h; ++i) data[i] = b[pos + i] / 255.0;
  return ImageTensor(1, h, w, std::move(data));
}

/// Writes image `index` with [lo, hi] mapped linearly onto [0, 255]
/// (values outside are clamped).
inline void save_pgm(const std::string& path, const ImageTensor& images, double lo, double hi,
                     std::size_t index = 0) {
  if (index >= images.count()) throw std::out_of_range("save_pgm: image index out of range");
  if (!(hi > lo)) throw std::invalid_argument("save_pgm: need hi > lo");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "P5\n" << images.cols() << ' ' << images.rows() << "\n255\n";
  for (std::size_t r = 0; r < images.rows(); ++r) {
    for (std::size_t c = 0; c < images.cols(); ++c) {
      os.put(static_cast<char>(detail::quantize((images(index, r, c) - lo) / (hi - lo))));
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

/// Min-max scaling: the image's own [min, max] becomes [0, 255]. A constant
/// image has no range to stretch and is written as its value clamped to [0, 1].
inline void save_pgm(const std::string& path, const ImageTensor& images, std::size_t index = 0) {
  if (index >= images.count()) throw std::out_of_range("save_pgm: image index out of range");
  const auto all = images.values();
  const auto first = all.begin() + static_cast<std::ptrdiff_t>(index * images.pixels_per_image());
  const auto [mn, mx] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(images.pixels_per_image()));
  if (*mx > *mn) {
    save_pgm(path, images, *mn, *mx, index);
  } else {
    save_pgm(path, images, 0.0, 1.0, index);
  }
}

/// Every *.pgm in a directory, sorted by file name, stacked into one tensor.
inline ImageTensor load_pgm_dir(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
  }
  if (files.empty()) throw std::runtime_error(dir + ": no .pgm files");
  std::sort(files.begin(), files.end());
  std::vector<double> data;
  std::size_t h = 0, w = 0;
  for (const auto& f : files) {
    const ImageTensor img = load_pgm(f.string());
    if (h == 0) {
      h = img.rows();
      w = img.cols();
    } else if (img.rows() != h || img.cols() != w) {
      throw FormatError(f.string() + ": size differs from the other images in " + dir);
    }
    data.insert(data.end(), img.values().begin(), img.values().end());
  }
  return ImageTensor(files.size(), h, w, std::move(data));
}

// ---------------------------------------------------------------------------
// Normalization.

enum class NormalizationMode { scalar, per_pixel };

/// Affine map x -> (x - mean) / std. Scalar mode holds one mean/std; per-pixel
/// mode holds one per pixel position (positions with zero spread keep std 1).
struct Normalization {
  NormalizationMode mode = NormalizationMode::scalar;
  std::vector<double> mean{0.0};
  std::vector<double> std{1.0};

  double mean_at(std::size_t pixel) const { return mode == NormalizationMode::scalar ? mean[0] : mean[pixel]; }
  double std_at(std::size_t pixel) const { return mode == NormalizationMode::scalar ? std[0] : std[pixel]; }
};

inline Normalization fit_normalization(const ImageTensor& images,
                                       NormalizationMode mode = NormalizationMode::scalar) {
  Normalization out;
  out.mode = mode;
  if (mode == NormalizationMode::scalar) {
    const auto v = images.values();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    if (!(var > 0.0)) throw std::domain_error("normalize_dataset: dataset has zero variance");
    out.mean = {mean};
    out.std = {std::sqrt(var)};
    return out;
  }
  const std::size_t hw = images.pixels_per_image();
  const auto n = static_cast<double>(images.count());
  out.mean.assign(hw, 0.0);
  out.std.assign(hw, 0.0);
  const auto v = images.values();
  for (std::size_t i = 0; i < v.size(); ++i) out.mean[i % hw] += v[i] / n;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = v[i] - out.mean[i % hw];
    out.std[i % hw] += d * d / n;
  }
  bool any = false;
  for (double& s : out.std) {
    s = std::sqrt(s);
    if (s > 0.0) {
      any = true;
    } else {
      s = 1.0;
    }
  }
  if (!any) throw std::domain_error("normalize_dataset: dataset has zero variance");
  return out;
}

inline ImageTensor apply_normalization(const ImageTensor& images, const Normalization& norm) {
  ImageTensor out = images;
  const std::size_t hw = images.pixels_per_image();
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - norm.mean_at(i % hw)) / norm.std_at(i % hw);
  return out;
}

inline ImageTensor unnormalize(const ImageTensor& images, const Normalization& norm) {
  ImageTensor out = images;
  const std::size_t hw = images.pixels_per_image();
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] * norm.std_at(i % hw) + norm.mean_at(i % hw);
  return out;
}

struct NormalizedData {
  ImageTensor images;
  Normalization stats;
};

/// Fits statistics on `images` and applies them. Reuse `stats` with
/// apply_normalization for held-out data.
inline NormalizedData normalize_dataset(const ImageTensor& images,
                                        NormalizationMode mode = NormalizationMode::scalar) {
  Normalization stats = fit_normalization(images, mode);
  return {apply_normalization(images, stats), std::move(stats)};
}

// ---------------------------------------------------------------------------
// Noise. One engine per call, pixels drawn in raster order.

inline constexpr std::uint64_t kNoiseStream = 0x6e6f697365;

inline ImageTensor add_gaussian_noise(const ImageTensor& images, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("add_gaussian_noise: sigma must be >= 0");
  ImageTensor out = images;
  if (sigma == 0.0) return out;
  Engine eng = make_engine(seed, kNoiseStream);
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& v : out.values()) v += dist(eng);
  return out;
}

/// Exponential(rate lambda) noise, mean 1/lambda. `center` subtracts the mean.
inline ImageTensor add_exponential_noise(const ImageTensor& images, double lambda, std::uint64_t seed,
                                         bool center = false) {
  if (!(lambda > 0.0)) throw std::invalid_argument("add_exponential_noise: lambda must be > 0");
  ImageTensor out = images;
  Engine eng = make_engine(seed, kNoiseStream + 1);
  std::exponential_distribution<double> dist(lambda);
  const double shift = center ? 1.0 / lambda : 0.0;
  for (double& v : out.values()) v += dist(eng) - shift;
  return out;
}

// ---------------------------------------------------------------------------
// Metrics.

inline double mse(const ImageTensor& prediction, const ImageTensor& reference) {
  if (!prediction.same_shape(reference)) throw std::invalid_argument("mse: shape mismatch");
  const auto a = prediction.values();
  const auto b = reference.values();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / mse). Identical images give +infinity. A non-positive
/// peak means "use the reference's max - min".
inline double psnr(const ImageTensor& prediction, const ImageTensor& reference, double peak = 0.0) {
  const double err = mse(prediction, reference);
  if (peak <= 0.0) {
    const auto [mn, mx] = std::minmax_element(reference.values().begin(), reference.values().end());
    peak = *mx - *mn;
  }
  if (err == 0.0) return std::numeric_limits<double>::infinity();
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be > 0 (constant reference?)");
  return 10.0 * std::log10(peak * peak / err);
}

}  // namespace dualconv
