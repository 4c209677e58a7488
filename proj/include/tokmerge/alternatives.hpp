#pragma once

#include <map>
#include <numeric>
#include <random>
#include <tuple>

#include "tokmerge/merge.hpp"

namespace tokmerge {

// ---------------------------------------------------------------------------
// Downsampling baselines

enum class Sampler { random_drop, fps, voxel_grid };

struct SamplerConfig {
  Sampler method = Sampler::random_drop;
  double keep_fraction = 0.2;  // random_drop, fps
  double voxel_size = 0.05;    // voxel_grid, meters
  std::uint64_t seed = 0;
};

// Reduced cloud plus, for every input point, the output point representing it.
struct Downsampled {
  PointCloud cloud;
  std::vector<std::size_t> source;      // output point -> an input index it came from
  std::vector<std::size_t> assignment;  // input point -> output point (voxel_grid only)
};

inline std::size_t keep_count(std::size_t n, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw ConfigError("keep fraction must lie in (0, 1]");
  const auto k = ceil_tolerant(keep_fraction * static_cast<double>(n));
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(1LL, k)), 1, n);
}

// Uniform sample of ceil(keep * N) indices without replacement, returned in
// ascending index order.
inline Downsampled random_drop(const PointCloud& cloud, double keep_fraction, std::uint64_t seed) {
  const std::size_t n = cloud.size();
  const std::size_t k = keep_count(n, keep_fraction);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return {subset(cloud, idx), idx, {}};
}

// Greedy farthest point sampling in selection order. Each step adds the
// point with the largest distance to the selected set (ties: lowest index).
inline std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t k, std::size_t start = 0) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n) throw ConfigError("fps: k must lie in [1, N]");
  if (start >= n) throw ConfigError("fps: start index out of range");
  std::vector<double> min_d2(n, INFINITY);
  std::vector<std::size_t> chosen{start};
  chosen.reserve(k);
  std::size_t last = start;
  while (chosen.size() < k) {
    std::size_t best = n;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double d = cloud.coords(i, a) - cloud.coords(last, a);
        d2 += d * d;
      }
      min_d2[i] = std::min(min_d2[i], d2);
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    chosen.push_back(best);
    last = best;
  }
  return chosen;
}

inline Downsampled fps_downsample(const PointCloud& cloud, double keep_fraction) {
  auto idx = fps(cloud, keep_count(cloud.size(), keep_fraction), 0);
  return {subset(cloud, idx), idx, {}};
}

inline std::array<long long, 3> voxel_of(const PointCloud& cloud, std::size_t i, double voxel_size) {
  return {static_cast<long long>(std::floor(cloud.coords(i, 0) / voxel_size)),
          static_cast<long long>(std::floor(cloud.coords(i, 1) / voxel_size)),
          static_cast<long long>(std::floor(cloud.coords(i, 2) / voxel_size))};
}

// One point per occupied voxel of a grid anchored at the origin. Output
// coordinates and features are per-voxel means; voxels are numbered by
// first occurrence in input order.
inline Downsampled voxel_downsample(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0)) throw ConfigError("voxel size must be > 0");
  std::map<std::array<long long, 3>, std::size_t> slot;
  Downsampled out;
  out.assignment.resize(cloud.size());
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    auto [it, inserted] = slot.try_emplace(voxel_of(cloud, i, voxel_size), counts.size());
    if (inserted) {
      counts.push_back(0);
      out.source.push_back(i);
    }
    out.assignment[i] = it->second;
    ++counts[it->second];
  }
  out.cloud = {Matrix(counts.size(), 3), Matrix(counts.size(), cloud.dim())};
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const std::size_t o = out.assignment[i];
    for (int a = 0; a < 3; ++a) out.cloud.coords(o, a) += cloud.coords(i, a);
    for (std::size_t c = 0; c < cloud.dim(); ++c) out.cloud.feats(o, c) += cloud.feats(i, c);
  }
  for (std::size_t o = 0; o < counts.size(); ++o) {
    const double inv = static_cast<double>(counts[o]);
    for (auto& v : out.cloud.coords.row(o)) v /= inv;
    for (auto& v : out.cloud.feats.row(o)) v /= inv;
  }
  return out;
}

inline Downsampled downsample(const PointCloud& cloud, const SamplerConfig& cfg) {
  switch (cfg.method) {
    case Sampler::random_drop: return random_drop(cloud, cfg.keep_fraction, cfg.seed);
    case Sampler::fps: return fps_downsample(cloud, cfg.keep_fraction);
    case Sampler::voxel_grid: return voxel_downsample(cloud, cfg.voxel_size);
  }
  throw ConfigError("unknown sampler");
}

// ---------------------------------------------------------------------------
// Attention-replacement mixers

inline constexpr std::size_t kAvgPoolKernel = 127;

// Centered moving average with stride 1; windows are clipped at the ends.
inline Matrix avg_pool_mixer(const Matrix& seq, std::size_t kernel = kAvgPoolKernel) {
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("avg_pool: kernel must be odd");
  const std::size_t n = seq.rows();
  const std::size_t half = kernel / 2;
  Matrix out(n, seq.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n - 1, i + half);
    auto o = out.row(i);
    for (std::size_t j = lo; j <= hi; ++j) {
      auto r = seq.row(j);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += r[c];
    }
    const double inv = static_cast<double>(hi - lo + 1);
    for (auto& v : o) v /= inv;
  }
  return out;
}

// Gather order of reshape(M, N) -> transpose -> flatten: output position
// j * M + i reads input position i * N + j.
inline std::vector<std::size_t> shuffle_permutation(std::size_t m, std::size_t n) {
  std::vector<std::size_t> perm(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) perm[j * m + i] = i * n + j;
  return perm;
}

// Largest divisor of n not above sqrt(n); 1 for primes.
inline std::size_t shuffle_rows_for(std::size_t n) {
  std::size_t best = 1;
  for (std::size_t m = 1; m * m <= n; ++m)
    if (n % m == 0) best = m;
  return best;
}

inline Matrix shuffle_pool_mixer(const Matrix& seq, std::size_t m, std::size_t n,
                                 std::size_t kernel = kAvgPoolKernel) {
  if (m == 0 || n == 0 || m * n != seq.rows())
    throw ConfigError("shuffle_pool: sequence length " + std::to_string(seq.rows()) +
                      " is not M * N = " + std::to_string(m) + " * " + std::to_string(n));
  const auto perm = shuffle_permutation(m, n);
  const Matrix pooled = avg_pool_mixer(gather_rows(seq, perm), kernel);
  Matrix out(seq.rows(), seq.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto r = pooled.row(i);
    std::copy(r.begin(), r.end(), out.row(perm[i]).begin());
  }
  return out;
}

// Pooling kernel and stride for PoolAttn: ceil(log2 T), at least 1.
inline std::size_t pool_window(std::size_t tokens) {
  if (tokens <= 1) return 1;
  return std::max<std::size_t>(1, std::bit_width(tokens - 1));
}

inline std::size_t pooled_length(std::size_t tokens) {
  const std::size_t w = pool_window(tokens);
  return (tokens + w - 1) / w;
}

// Strided average pooling, attention over the pooled tokens, then each
// pooled output duplicated back over its window.
inline Matrix pool_attn_mixer(const Matrix& patch, const AttnParams& params, std::size_t window = 0,
                              OpCounter* counter = nullptr) {
  const std::size_t n = patch.rows();
  if (n == 0) throw ConfigError("pool_attn: empty patch");
  const std::size_t w = window ? window : pool_window(n);
  const std::size_t m = (n + w - 1) / w;
  Matrix pooled(m, patch.cols());
  for (std::size_t p = 0; p < m; ++p) {
    const std::size_t lo = p * w;
    const std::size_t hi = std::min(n, lo + w);
    auto o = pooled.row(p);
    for (std::size_t i = lo; i < hi; ++i) {
      auto r = patch.row(i);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += r[c];
    }
    for (auto& v : o) v /= static_cast<double>(hi - lo);
  }
  const Matrix y = attention_rows(pooled, params, counter);
  Matrix out(n, y.cols());
  for (std::size_t i = 0; i < n; ++i) {
    auto r = y.row(i / w);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

struct ProgressiveMerge {
  Matrix merged;
  MergeMap map;
};

// Chain graph over adjacent tokens; the top floor(fraction * (n - 1)) edges
// by cosine similarity (ties: lower edge index) are contracted with
// union-find. Each cluster is a contiguous run whose destination is its
// first slot.
inline ProgressiveMerge progressive_tome(const Matrix& seq, double edge_fraction = 0.8) {
  const std::size_t n = seq.rows();
  if (n < 2) throw ConfigError("progressive_tome: sequence needs >= 2 tokens");
  if (!(edge_fraction >= 0.0 && edge_fraction <= 1.0))
    throw ConfigError("progressive_tome: edge fraction must lie in [0, 1]");
  std::vector<std::pair<double, std::size_t>> edges;
  for (std::size_t e = 0; e + 1 < n; ++e) edges.emplace_back(cosine(seq.row(e), seq.row(e + 1)), e);
  std::stable_sort(edges.begin(), edges.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  const auto take = static_cast<std::size_t>(
      std::max(0LL, floor_tolerant(edge_fraction * static_cast<double>(n - 1))));

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t a = find(edges[i].second);
    const std::size_t b = find(edges[i].second + 1);
    parent[std::max(a, b)] = std::min(a, b);  // root stays the lowest slot
  }
  std::vector<std::ptrdiff_t> target(n);
  for (std::size_t s = 0; s < n; ++s) target[s] = static_cast<std::ptrdiff_t>(find(s));
  ProgressiveMerge out{Matrix(), MergeMap::from_targets(target)};
  out.merged = merge_apply(seq, out.map);
  return out;
}

enum class Mixer { avg_pool, shuffle_pool, pool_attn, progressive_tome, projection };

// Replacement for the attention of one patch (valid rows only).
inline Matrix apply_mixer(Mixer mixer, const Matrix& x, const AttnParams& p,
                          OpCounter* counter = nullptr) {
  std::uint64_t* macs = counter ? &counter->projection_macs : nullptr;
  switch (mixer) {
    case Mixer::avg_pool: return matmul(avg_pool_mixer(matmul(x, p.wv, macs)), p.wo, macs);
    case Mixer::shuffle_pool: {
      const std::size_t m = shuffle_rows_for(x.rows());
      return matmul(shuffle_pool_mixer(matmul(x, p.wv, macs), m, x.rows() / m), p.wo, macs);
    }
    case Mixer::pool_attn: return pool_attn_mixer(x, p, 0, counter);
    case Mixer::progressive_tome: {
      if (x.rows() < 2) return attention_rows(x, p, counter);
      const auto pm = progressive_tome(x);
      return unmerge(attention_rows(pm.merged, p, counter), pm.map);
    }
    case Mixer::projection: return matmul(matmul(x, p.wv, macs), p.wo, macs);
  }
  throw ConfigError("unknown mixer");
}

}  // namespace tokmerge
