#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tokmerge {

// Error hierarchy. ConfigError maps to CLI exit code 2, NumericError to 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Dense row-major matrix of doubles. Rows are tokens, columns are channels.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) noexcept { return std::sqrt(dot(a, a)); }

// Cosine similarity; defined as 0 when either vector has zero norm.
inline double cosine_from(double ab, double aa, double bb) noexcept {
  if (aa == 0.0 || bb == 0.0) return 0.0;
  // One square root of the product keeps equal cosines bit-identical
  // (sqrt(2) * sqrt(2) != 2); fall back when the product overflows.
  const double p = aa * bb;
  return std::isfinite(p) ? ab / std::sqrt(p) : ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline double cosine(std::span<const double> a, std::span<const double> b) noexcept {
  const double ab = dot(a, b), aa = dot(a, a), bb = dot(b, b);
  if (std::isfinite(ab) && std::isfinite(aa) && std::isfinite(bb)) return cosine_from(ab, aa, bb);
  // Squares overflowed: rescale both vectors to unit max magnitude.
  double ma = 0.0, mb = 0.0;
  for (double v : a) ma = std::max(ma, std::fabs(v));
  for (double v : b) mb = std::max(mb, std::fabs(v));
  if (!std::isfinite(ma) || !std::isfinite(mb)) return std::numeric_limits<double>::quiet_NaN();
  if (ma == 0.0 || mb == 0.0) return 0.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] / ma, y = b[i] / mb;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  return cosine_from(sab, saa, sbb);
}

// Frobenius-norm relative error ||a - b|| / ||b||.
inline double relative_error(const Matrix& a, const Matrix& reference) {
  if (a.rows() != reference.rows() || a.cols() != reference.cols())
    throw ConfigError("relative_error: shape mismatch");
  double num = 0.0;
  double den = 0.0;
  auto av = a.values();
  auto rv = reference.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - rv[i];
    num += d * d;
    den += rv[i] * rv[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : INFINITY;
  return std::sqrt(num / den);
}

// Rows of `src` selected by `index`, in order.
inline Matrix gather_rows(const Matrix& src, std::span<const std::size_t> index) {
  Matrix out(index.size(), src.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto from = src.row(index[i]);
    std::copy(from.begin(), from.end(), out.row(i).begin());
  }
  return out;
}

inline void check_finite(const Matrix& m, const char* what) {
  for (double v : m.values())
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

// SplitMix64 finalizer, used to derive independent RNG substreams.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for the substream identified by (master, a, b). Independent of
// thread scheduling because it depends only on the identifiers.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                    std::uint64_t b = 0) noexcept {
  return mix64(mix64(mix64(master) ^ (a + 0x51ed270b27ac4f1dULL)) ^ (b + 0x2545f4914f6cdd1dULL));
}

// floor(x) robust to representation error in products like 1024 * (1 - 0.9).
inline long long floor_tolerant(double x) noexcept {
  return static_cast<long long>(std::floor(x + 1e-9));
}

inline long long ceil_tolerant(double x) noexcept {
  return static_cast<long long>(std::ceil(x - 1e-9));
}

// Runs fn(i) for i in [0, count) over up to `threads` workers. Each index
// is processed exactly once; callers write to disjoint outputs so results
// do not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(threads, count);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// FNV-1a over the bit patterns of the values; used for bit-exact checksums.
inline std::uint64_t checksum(std::span<const double> values) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace tokmerge
