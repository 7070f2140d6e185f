#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "driftlab/error.hpp"
#include "driftlab/numerics.hpp"

namespace driftlab {

struct Dataset {
  Matrix x;  // one sample per row
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return x.rows(); }
};

inline constexpr std::array<double, 3> cifar_mean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> cifar_std{0.2470, 0.2435, 0.2616};
inline constexpr std::size_t cifar_record = 3073;
inline constexpr std::size_t cifar_pixels = 3072;

// Raw records of one or more binary batch files, label byte first.
struct CifarRaw {
  std::vector<std::uint8_t> bytes;
  std::size_t count() const noexcept { return bytes.size() / cifar_record; }
};

inline void append_cifar_file(const std::filesystem::path& p, CifarRaw& raw) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(errc::io_error, "cannot open " + p.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() % cifar_record != 0)
    fail(errc::format_error, p.string() + ": size " + std::to_string(buf.size()) + " is not a multiple of 3073");
  for (std::size_t r = 0; r < buf.size(); r += cifar_record)
    if (buf[r] > 9) fail(errc::format_error, p.string() + ": label byte " + std::to_string(buf[r]) + " > 9");
  raw.bytes.insert(raw.bytes.end(), buf.begin(), buf.end());
}

// `path` is a single batch file or a directory; a directory contributes its
// data_batch_*.bin files (train) or test_batch.bin (test) in name order.
inline CifarRaw read_cifar_raw(const std::filesystem::path& path, bool test_split = false) {
  CifarRaw raw;
  std::error_code ec;
  if (std::filesystem::is_directory(path, ec)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      const std::string name = e.path().filename().string();
      const bool is_test = name == "test_batch.bin";
      const bool is_train = name.rfind("data_batch_", 0) == 0 && e.path().extension() == ".bin";
      if ((test_split && is_test) || (!test_split && is_train)) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) fail(errc::io_error, "no CIFAR-10 batch files in " + path.string());
    for (const auto& f : files) append_cifar_file(f, raw);
  } else {
    append_cifar_file(path, raw);
  }
  return raw;
}

inline void decode_cifar_record(const std::uint8_t* rec, std::span<double> out) {
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < 1024; ++i) {
      const double v = static_cast<double>(rec[1 + ch * 1024 + i]) / 255.0;
      out[ch * 1024 + i] = (v - cifar_mean[ch]) / cifar_std[ch];
    }
}

// Picks subset_size records by a seeded partial shuffle (all of them, in file
// order, when subset_size is at least the record count).
inline Dataset cifar_subset(const CifarRaw& raw, std::size_t subset_size, RngStream& rng) {
  const std::size_t n = raw.count();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const std::size_t take = std::min(subset_size, n);
  if (take < n)
    for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
  Dataset d;
  d.classes = 10;
  d.x = Matrix(take, cifar_pixels);
  d.labels.resize(take);
  for (std::size_t i = 0; i < take; ++i) {
    const std::uint8_t* rec = raw.bytes.data() + idx[i] * cifar_record;
    d.labels[i] = rec[0];
    decode_cifar_record(rec, d.x.row(i));
  }
  return d;
}

inline Dataset load_cifar10(const std::filesystem::path& path, std::size_t subset_size, RngStream& rng, bool test_split = false) {
  if (subset_size == 0) {
    Dataset empty;
    empty.classes = 10;
    empty.x = Matrix(0, cifar_pixels);
    return empty;
  }
  return cifar_subset(read_cifar_raw(path, test_split), subset_size, rng);
}

// Gaussian class clusters: class means N(0, margin^2 / d) per coordinate, unit noise.
inline Dataset synthetic_classes(std::size_t n, std::size_t d, std::size_t classes, double margin, RngStream& rng) {
  if (d < 1 || classes < 2) fail(errc::invalid_argument, "synthetic dataset needs d >= 1 and at least 2 classes");
  Matrix mu(classes, d);
  const double scale = margin / std::sqrt(static_cast<double>(d));
  for (double& v : mu.values()) v = scale * rng.normal();
  Dataset ds;
  ds.classes = classes;
  ds.x = Matrix(n, d);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(rng.uniform_index(classes));
  for (std::size_t i = 0; i < n; ++i) {
    auto row = ds.x.row(i);
    const auto m = mu.row(static_cast<std::size_t>(ds.labels[i]));
    for (std::size_t j = 0; j < d; ++j) row[j] = m[j] + rng.normal();
  }
  return ds;
}

inline Dataset slice(const Dataset& d, std::size_t begin, std::size_t end) {
  Dataset out;
  out.classes = d.classes;
  out.x = Matrix(end - begin, d.x.cols());
  for (std::size_t i = begin; i < end; ++i) {
    std::copy(d.x.row(i).begin(), d.x.row(i).end(), out.x.row(i - begin).begin());
    out.labels.push_back(d.labels[i]);
  }
  return out;
}

inline Matrix gaussian_batch(std::size_t rows, std::size_t cols, RngStream& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

// Rows drawn with replacement; targets are class indices in one column.
inline std::pair<Matrix, Matrix> sample_batch(const Dataset& d, std::size_t batch, RngStream& rng) {
  if (d.size() == 0) fail(errc::invalid_argument, "cannot sample from an empty dataset");
  Matrix x(batch, d.x.cols()), y(batch, 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto i = static_cast<std::size_t>(rng.uniform_index(d.size()));
    std::copy(d.x.row(i).begin(), d.x.row(i).end(), x.row(b).begin());
    y(b, 0) = d.labels[i];
  }
  return {std::move(x), std::move(y)};
}

}  // namespace driftlab
