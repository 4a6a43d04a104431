#pragma once

#include <dualconv/dualconv.hpp>

#include <filesystem>
#include <random>
#include <string>

namespace testing_support {

using namespace dualconv;

inline ImageTensor random_images(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  ImageTensor out(n, h, w);
  Engine eng = make_engine(seed, 99);
  std::normal_distribution<double> nd;
  for (double& v : out.values()) v = nd(eng);
  return out;
}

inline Vector random_vector(Eigen::Index n, Engine& eng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = nd(eng);
  return v;
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Engine& eng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = nd(eng);
  }
  return m;
}

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("dualconv_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
