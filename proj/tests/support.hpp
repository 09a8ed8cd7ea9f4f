#pragma once

// Independent reference implementations and small fixtures shared by the test
// binaries. Nothing here calls into the library code under test.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Mat = Eigen::MatrixXd;

// Bilinear resample, half-pixel centres, edge clamp; coded per output pixel.
inline Mat bilinear(const Mat& in, int oh, int ow) {
  const int ih = static_cast<int>(in.rows());
  const int iw = static_cast<int>(in.cols());
  Mat out(oh, ow);
  auto src = [](int o, int n_in, int n_out) {
    double s = (o + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
    if (s < 0) s = 0;
    if (s > n_in - 1) s = n_in - 1;
    return s;
  };
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double sy = src(y, ih, oh), sx = src(x, iw, ow);
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const int y1 = std::min(y0 + 1, ih - 1), x1 = std::min(x0 + 1, iw - 1);
      const double fy = sy - y0, fx = sx - x0;
      const double top = in(y0, x0) * (1 - fx) + in(y0, x1) * fx;
      const double bot = in(y1, x0) * (1 - fx) + in(y1, x1) * fx;
      out(y, x) = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

inline double hard_loss(const Mat& attn, const Mat& seg) {
  double s = 0;
  for (int i = 0; i < attn.rows(); ++i)
    for (int j = 0; j < attn.cols(); ++j) s += (seg(i, j) - attn(i, j)) * (seg(i, j) - attn(i, j));
  return s / static_cast<double>(attn.rows() * attn.cols());
}

inline double soft_loss(const Mat& attn, const Mat& seg) {
  double s = 0;
  for (int i = 0; i < attn.rows(); ++i)
    for (int j = 0; j < attn.cols(); ++j) {
      const double b_inv = seg(i, j) > 0 ? 0.0 : 1.0;
      s += (seg(i, j) - attn(i, j)) * (seg(i, j) - attn(i, j)) * b_inv;
    }
  return s / static_cast<double>(attn.rows() * attn.cols());
}

// Unbiased MMD^2, kernel (x.y/d + 1)^3, every sum an explicit loop.
inline double mmd(const Mat& x, const Mat& y) {
  const int m = static_cast<int>(x.rows()), n = static_cast<int>(y.rows()), d = static_cast<int>(x.cols());
  auto k = [d](const Mat& a, int i, const Mat& b, int j) {
    double dot = 0;
    for (int c = 0; c < d; ++c) dot += a(i, c) * b(j, c);
    const double v = dot / d + 1.0;
    return v * v * v;
  };
  double sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (i != j) sxx += k(x, i, x, j);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) syy += k(y, i, y, j);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) sxy += k(x, i, y, j);
  return sxx / (m * (m - 1.0)) + syy / (n * (n - 1.0)) - 2.0 * sxy / (static_cast<double>(m) * n);
}

// Central differences of a scalar function of a matrix.
inline Mat numeric_gradient(const std::function<double(const Mat&)>& f, const Mat& at, double h = 1e-3) {
  Mat g(at.rows(), at.cols());
  Mat x = at;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

// Max elementwise relative error with a small absolute floor.
inline double relative_error(const Mat& a, const Mat& b, double floor = 1e-8) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a.data()[i]), std::abs(b.data()[i]), floor});
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / scale);
  }
  return worst;
}

// Norm-wise relative error, robust to individual near-zero entries.
inline double norm_relative_error(const Mat& a, const Mat& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

inline Mat uniform(int rows, int cols, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline Mat gaussian(int rows, int cols, std::mt19937_64& rng, double mean = 0.0, double sd = 1.0) {
  std::normal_distribution<double> n(mean, sd);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace oracle

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("textloc_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace testing_support
