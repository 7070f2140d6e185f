#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "driftlab/error.hpp"

namespace driftlab {

// Dense row-major matrix of doubles. Batches are stored one sample per row.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, errc::invalid_argument, "matrix data length != rows*cols");
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      require(row.size() == c, errc::invalid_argument, "ragged initializer");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.values().begin(), m.values().end(), [](double v) { return std::isfinite(v); });
}

inline void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m)) fail(errc::invalid_argument, std::string(what) + " contains non-finite values");
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// a * b. The i-k-j order is fixed, so results are reproducible bit for bit.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    fail(errc::invalid_argument, "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                     " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  Matrix c(n, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict crow = pc + i * m;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = pa[i * inner + k];
      if (aik == 0.0) continue;
      const double* __restrict brow = pb + k * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// a * b^T (e.g. batch * W^T for row-per-sample layouts).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) fail(errc::invalid_argument, "matmul_nt: inner dimension mismatch");
  return matmul(a, transpose(b));
}

// a^T * b (e.g. weight gradients: grad_out^T * layer_input).
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) fail(errc::invalid_argument, "matmul_tn: inner dimension mismatch");
  const std::size_t inner = a.rows(), n = a.cols(), m = b.cols();
  Matrix c(n, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  for (std::size_t k = 0; k < inner; ++k) {
    const double* __restrict brow = pb + k * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double aki = pa[k * n + i];
      if (aki == 0.0) continue;
      double* __restrict crow = pc + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

inline Matrix matvec_rows(const Matrix& w, std::span<const double> x) {
  require(w.cols() == x.size(), errc::invalid_argument, "matvec: dimension mismatch");
  Matrix y(w.rows(), 1);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double s = 0.0;
    const auto r = w.row(i);
    for (std::size_t k = 0; k < x.size(); ++k) s += r[k] * x[k];
    y(i, 0) = s;
  }
  return y;
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return std::sqrt(s);
}

// Counter-based generator: output k is a SplitMix64 finalisation of key + k * golden.
// Streams derived with split() have unrelated keys, so parallel seeds share no state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed), key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    require(n > 0, errc::invalid_argument, "uniform_index: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do r = next_u64();
    while (r >= limit);
    return r % n;
  }

  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  RngStream split(std::uint64_t tag) const noexcept {
    RngStream child(0);
    child.seed_ = seed_;
    child.key_ = mix(key_ ^ mix(tag + 0x3c6ef372fe94f82bULL));
    return child;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix gaussian_init(std::size_t rows, std::size_t cols, double std_dev, RngStream& rng) {
  if (rows == 0 || cols == 0) fail(errc::invalid_argument, "gaussian_init: dimensions must be >= 1");
  if (!(std_dev > 0.0) || !std::isfinite(std_dev)) fail(errc::invalid_argument, "gaussian_init: std must be > 0");
  Matrix m(rows, cols);
  for (double& v : m.values()) v = std_dev * rng.normal();
  return m;
}

// q-th quantile with linear interpolation between order statistics,
// h = q (n - 1). Uses selection on a scratch copy instead of a full sort.
inline double percentile(std::span<const double> values, double q) {
  if (values.empty()) fail(errc::invalid_argument, "percentile of empty list");
  if (!(q >= 0.0 && q <= 1.0)) fail(errc::invalid_argument, "percentile: q must lie in [0, 1]");
  std::vector<double> scratch(values.begin(), values.end());
  const double h = q * static_cast<double>(scratch.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(lo), scratch.end());
  const double below = scratch[lo];
  if (frac == 0.0 || lo + 1 >= scratch.size()) return below;
  const double above = *std::min_element(scratch.begin() + static_cast<std::ptrdiff_t>(lo) + 1, scratch.end());
  return below + frac * (above - below);
}

}  // namespace driftlab
