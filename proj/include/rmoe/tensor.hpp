#pragma once

// Dense double-precision vectors/matrices, elementwise nonlinearities and a
// portable seeded PRNG. Row-major, no strides, no views.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rmoe {

/// Raised on contract violations (shape mismatch, malformed input).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a numeric computation diverges (NaN/Inf loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

class Vec {
 public:
  Vec() = default;
  explicit Vec(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vec(std::initializer_list<double> xs) : data_(xs) {}
  explicit Vec(std::vector<double> xs) : data_(std::move(xs)) {}

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  void fill(double x) { std::fill(data_.begin(), data_.end(), x); }

  bool operator==(const Vec&) const = default;

 private:
  std::vector<double> data_;
};

class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error("Mat: data length " + std::to_string(data_.size()) +
                  " does not match shape " + std::to_string(rows_) + "x" +
                  std::to_string(cols_));
    }
  }
  Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw Error("Mat: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  double* row(std::size_t r) noexcept { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const noexcept { return data_.data() + r * cols_; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }

  void fill(double x) { std::fill(data_.begin(), data_.end(), x); }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// PRNG

/// splitmix64 finalizer. Used to expand seeds and to derive child seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Child seed for stream `index` of a parent seed. Streams for distinct
/// indices are decorrelated by two splitmix64 rounds.
constexpr std::uint64_t split_seed(std::uint64_t parent, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(parent) ^ (index * 0xD1B54A32D192ED03ULL + 1));
}

/// xoshiro256** (Blackman & Vigna), state expanded from the seed with
/// splitmix64. Bit-identical on every platform; all derived distributions
/// are implemented here rather than through <random> distributions, whose
/// output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) {
      x += 0x9E3779B97F4A7C15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
      s = z ^ (z >> 31);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n). Lemire's method with rejection.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n == 0) return 0;
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      const __uint128_t m = static_cast<__uint128_t>(x) * n;
      if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached second variate).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& xs) noexcept {
    for (std::size_t i = xs.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t s_[4];
};

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw Error(what);
}
}  // namespace detail

/// W x + b.
inline Vec affine(const Mat& w, const Vec& x, const Vec& b) {
  if (w.cols() != x.size() || w.rows() != b.size()) {
    std::ostringstream os;
    os << "affine: shape mismatch W " << w.shape_string() << ", x " << x.size() << ", b "
       << b.size();
    throw Error(os.str());
  }
  Vec out(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double* wr = w.row(i);
    double acc = b[i];
    for (std::size_t j = 0; j < w.cols(); ++j) acc += wr[j] * x[j];
    out[i] = acc;
  }
  return out;
}

/// out += W x (no shape checks; internal hot path).
inline void matvec_acc(const Mat& w, std::span<const double> x, std::span<double> out) noexcept {
  const std::size_t cols = w.cols();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double* wr = w.row(i);
    // Four independent partial sums; the summation order is fixed.
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t j = 0;
    for (; j + 4 <= cols; j += 4) {
      a0 += wr[j] * x[j];
      a1 += wr[j + 1] * x[j + 1];
      a2 += wr[j + 2] * x[j + 2];
      a3 += wr[j + 3] * x[j + 3];
    }
    for (; j < cols; ++j) a0 += wr[j] * x[j];
    out[i] += (a0 + a1) + (a2 + a3);
  }
}

/// out += W^T y.
inline void matvec_t_acc(const Mat& w, std::span<const double> y, std::span<double> out) noexcept {
  const std::size_t cols = w.cols();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double yi = y[i];
    if (yi == 0.0) continue;
    const double* wr = w.row(i);
    for (std::size_t j = 0; j < cols; ++j) out[j] += wr[j] * yi;
  }
}

/// G += y x^T.
inline void outer_acc(Mat& g, std::span<const double> y, std::span<const double> x) noexcept {
  const std::size_t cols = g.cols();
  for (std::size_t i = 0; i < g.rows(); ++i) {
    const double yi = y[i];
    if (yi == 0.0) continue;
    double* gr = g.row(i);
    for (std::size_t j = 0; j < cols; ++j) gr[j] += yi * x[j];
  }
}

inline double sigmoid(double x) noexcept {
  // Split on sign so exp never overflows.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Vec sigmoid_vec(const Vec& x) {
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

inline Vec tanh_vec(const Vec& x) {
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return out;
}

/// Max-subtracted softmax.
inline Vec softmax_vec(const Vec& x) {
  detail::require(!x.empty(), "softmax_vec: empty input");
  const double mx = *std::max_element(x.begin(), x.end());
  Vec out(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

/// Uniform Glorot/Xavier: entries i.i.d. on (-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))).
inline Mat glorot_init(std::size_t rows, std::size_t cols, Rng& rng) {
  detail::require(rows >= 1 && cols >= 1, "glorot_init: rows and cols must be >= 1");
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (auto& v : m.span()) {
    // uniform() is in [0,1); map to the open interval by rejecting the edge.
    double u = rng.uniform();
    while (u == 0.0) u = rng.uniform();
    v = bound * (2.0 * u - 1.0);
  }
  return m;
}

inline bool all_finite(std::span<const double> xs) noexcept {
  return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace rmoe
