#pragma once

// Reference implementations used by the tests. They are written
// independently of the library (plain loops, long double accumulation,
// exhaustive search) and only share the data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "tokmerge/tokmerge.hpp"

namespace oracle {

using tokmerge::Matrix;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

inline tokmerge::PointCloud random_cloud(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  tokmerge::PointCloud c{Matrix(n, 3), Matrix(n, dim)};
  for (auto& v : c.coords.values()) v = u(rng);
  for (auto& v : c.feats.values()) v = u(rng);
  return c;
}

// Patch set over points 0..n-1 in index order.
inline tokmerge::PatchSet identity_patches(std::size_t n, std::size_t t) {
  tokmerge::SerializedOrder order;
  order.perm.resize(n);
  std::iota(order.perm.begin(), order.perm.end(), std::size_t{0});
  return tokmerge::partition(order, t);
}

inline long double naive_cos(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    ab += static_cast<long double>(a(i, c)) * b(j, c);
    aa += static_cast<long double>(a(i, c)) * a(i, c);
    bb += static_cast<long double>(b(j, c)) * b(j, c);
  }
  if (aa == 0 || bb == 0) return 0;
  long double r = ab / std::sqrt(aa * bb);
  return std::clamp(r, -1.0L, 1.0L);
}

// Global energy by a direct double loop over tokens and patch centroids.
inline std::vector<double> naive_global_energy(const Matrix& feats, const tokmerge::PatchSet& patches) {
  const std::size_t k = patches.count();
  Matrix centroids(k, feats.cols());
  for (std::size_t p = 0; p < k; ++p) {
    std::vector<long double> acc(feats.cols(), 0);
    std::size_t count = 0;
    for (std::size_t s = 0; s < patches.patch_size(); ++s) {
      if (patches.padded(p, s)) continue;
      const std::size_t i = patches.patch(p)[s];
      for (std::size_t c = 0; c < feats.cols(); ++c) acc[c] += feats(i, c);
      ++count;
    }
    for (std::size_t c = 0; c < feats.cols(); ++c) centroids(p, c) = static_cast<double>(acc[c] / count);
  }
  std::vector<double> e(feats.rows());
  for (std::size_t i = 0; i < feats.rows(); ++i) {
    long double s = 0;
    for (std::size_t p = 0; p < k; ++p) s += naive_cos(feats, i, centroids, p);
    e[i] = static_cast<double>(-s / k);
  }
  return e;
}

// Multi-head softmax attention with explicit loops; rows are tokens.
inline Matrix naive_attention(const Matrix& x, const tokmerge::AttnParams& p) {
  const std::size_t n = x.rows(), d = p.d_model, hd = p.head_dim;
  auto proj = [&](const Matrix& w) {
    Matrix out(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        long double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += static_cast<long double>(x(i, c)) * w(c, j);
        out(i, j) = static_cast<double>(s);
      }
    return out;
  };
  const Matrix q = proj(p.wq), k = proj(p.wk), v = proj(p.wv);
  Matrix heads(n, d);
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<long double> w(n);
      long double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        long double s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += static_cast<long double>(q(i, h * hd + c)) * k(j, h * hd + c);
        w[j] = s / std::sqrt(static_cast<long double>(hd));
        mx = std::max(mx, w[j]);
      }
      long double z = 0;
      for (auto& s : w) z += (s = std::exp(s - mx));
      for (std::size_t c = 0; c < hd; ++c) {
        long double o = 0;
        for (std::size_t j = 0; j < n; ++j) o += w[j] / z * v(j, h * hd + c);
        heads(i, h * hd + c) = static_cast<double>(o);
      }
    }
  }
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      long double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += static_cast<long double>(heads(i, c)) * p.wo(c, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

// Zero-noise patch of `slots` rows made of `objects` contiguous runs of
// equal length; every run repeats one random feature vector.
inline Matrix object_patch(std::size_t slots, std::size_t objects, std::size_t dim, std::uint64_t seed) {
  const Matrix bases = random_matrix(objects, dim, seed);
  Matrix m(slots, dim);
  const std::size_t run = slots / objects;
  for (std::size_t s = 0; s < slots; ++s) {
    const std::size_t o = std::min(objects - 1, s / run);
    for (std::size_t c = 0; c < dim; ++c) m(s, c) = bases(o, c);
  }
  return m;
}

// Exhaustive best-pair matching over alternating src (even) / dst (odd)
// slots: repeatedly take the globally most similar (unused src, dst) pair,
// ties to the lowest src, then lowest dst. Similarities in {-1,0,1}^d are
// compared exactly as sign(dot) * dot^2 / (|a|^2 |b|^2) in integers.
struct ExactSim {
  long long dot = 0, den = 1;  // similarity = sign(dot) * dot^2 / den (den > 0), 0 if zero norm
  bool zero = true;

  // -1, 0, 1 comparing this to o.
  int compare(const ExactSim& o) const {
    auto num = [](const ExactSim& s) -> long long { return s.zero ? 0 : (s.dot < 0 ? -1 : 1) * s.dot * s.dot; };
    const long long a = num(*this) * (o.zero ? 1 : o.den);
    const long long b = num(o) * (zero ? 1 : den);
    return a < b ? -1 : (a > b ? 1 : 0);
  }
};

inline ExactSim exact_sim(const std::vector<std::vector<int>>& v, std::size_t a, std::size_t b) {
  long long ab = 0, aa = 0, bb = 0;
  for (std::size_t c = 0; c < v[a].size(); ++c) {
    ab += v[a][c] * v[b][c];
    aa += v[a][c] * v[a][c];
    bb += v[b][c] * v[b][c];
  }
  if (aa == 0 || bb == 0) return {};
  return {ab, aa * bb, false};
}

// Returns target[s]: dst slot for merged sources, s otherwise.
inline std::vector<std::ptrdiff_t> tome_oracle(const std::vector<std::vector<int>>& v, double r) {
  const std::size_t n = v.size();
  std::vector<std::ptrdiff_t> target(n);
  for (std::size_t s = 0; s < n; ++s) target[s] = static_cast<std::ptrdiff_t>(s);
  const auto merges = static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
  if (n < 2) return target;
  std::vector<bool> used(n, false);
  for (std::size_t m = 0; m < merges; ++m) {
    bool found = false;
    std::size_t bs = 0, bd = 0;
    ExactSim best;
    for (std::size_t s = 0; s < n; s += 2) {
      if (used[s]) continue;
      for (std::size_t d = 1; d < n; d += 2) {
        const ExactSim sim = exact_sim(v, s, d);
        if (!found || sim.compare(best) > 0) {
          found = true;
          best = sim;
          bs = s;
          bd = d;
        }
      }
    }
    if (!found) break;
    used[bs] = true;
    target[bs] = static_cast<std::ptrdiff_t>(bd);
  }
  return target;
}

// Voxel grid by hashing integer cell keys; returns per-voxel mean coords in
// first-occurrence order.
inline std::vector<std::array<double, 3>> voxel_means(const Matrix& coords, double size) {
  struct Acc {
    std::size_t first;
    std::array<long double, 3> sum{};
    std::size_t n = 0;
  };
  std::vector<std::pair<std::array<long long, 3>, Acc>> buckets;
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    std::array<long long, 3> key;
    for (int a = 0; a < 3; ++a) key[a] = static_cast<long long>(std::floor(coords(i, a) / size));
    auto it = std::find_if(buckets.begin(), buckets.end(), [&](const auto& b) { return b.first == key; });
    if (it == buckets.end()) {
      buckets.push_back({key, Acc{i}});
      it = buckets.end() - 1;
    }
    for (int a = 0; a < 3; ++a) it->second.sum[a] += coords(i, a);
    ++it->second.n;
  }
  std::vector<std::array<double, 3>> out;
  for (const auto& [key, acc] : buckets) {
    std::array<double, 3> m;
    for (int a = 0; a < 3; ++a) m[a] = static_cast<double>(acc.sum[a] / acc.n);
    out.push_back(m);
  }
  return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    m = std::max(m, std::fabs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace oracle
