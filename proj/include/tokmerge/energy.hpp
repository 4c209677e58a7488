#pragma once

#include "tokmerge/attention.hpp"

namespace tokmerge {

// Representation fed to similarity computations.
enum class Metric { q, k, v, raw };
enum class Assignment { bin_local, global_similar };
enum class EnergyScope { global, local };
// Matcher used when a patch's rate is <= 0.5. Rates above 0.5 always use bins.
enum class Matcher { spatial, tome };

struct MergePolicy {
  double tau = 0.2;
  double r = 0.8;        // moderate rate, applied when E(P) > tau
  double r_plus = 0.97;  // aggressive rate otherwise
  Metric metric = Metric::v;
  bool per_head = true;
  Metric energy_metric = Metric::raw;
  EnergyScope energy_scope = EnergyScope::global;
  std::size_t local_width = 0;  // local energy neighborhood; 0 = whole patch
  std::size_t fixed_bins = 0;   // 0 = dynamic K = floor(T (1 - rate))
  Assignment assignment = Assignment::bin_local;
  Matcher matcher = Matcher::spatial;
  bool proportional_attention = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(r >= 0.0 && r < r_plus && r_plus < 1.0))
      throw ConfigError("merge policy requires 0 <= r < r_plus < 1 (r=" + std::to_string(r) +
                        ", r_plus=" + std::to_string(r_plus) + ")");
    if (!(tau >= -1.0 && tau <= 1.0)) throw ConfigError("merge policy requires tau in [-1, 1]");
  }
};

struct EnergyField {
  std::vector<double> token_energy;  // indexed by point
  std::vector<double> patch_energy;  // indexed by patch
  Matrix centroids;                  // patches x d_feat
};

// Mean of each patch's non-padded rows.
inline Matrix patch_centroids(const Matrix& feats, const PatchSet& patches) {
  Matrix c(patches.count(), feats.cols());
  for (std::size_t k = 0; k < patches.count(); ++k) {
    auto row = c.row(k);
    const auto idx = patches.valid_points(k);
    for (auto i : idx) {
      auto f = feats.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += f[j];
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (auto& v : row) v *= inv;
  }
  return c;
}

// E(x_i) = -(1/K) sum_j cos(x_i, centroid_j) over every centroid: each token
// is joined to all patch centroids in the bipartite graph. The counter
// records exactly N * K * d_feat dot-product multiply-accumulates.
inline std::vector<double> global_energy(const Matrix& feats, const Matrix& centroids,
                                         OpCounter* counter = nullptr) {
  if (centroids.rows() == 0) throw ConfigError("global_energy: no centroids");
  if (centroids.cols() != feats.cols()) throw ConfigError("global_energy: width mismatch");
  std::vector<double> csq(centroids.rows());
  for (std::size_t j = 0; j < centroids.rows(); ++j) csq[j] = dot(centroids.row(j), centroids.row(j));
  std::vector<double> e(feats.rows());
  const double inv_k = 1.0 / static_cast<double>(centroids.rows());
  for (std::size_t i = 0; i < feats.rows(); ++i) {
    auto x = feats.row(i);
    const double xsq = dot(x, x);
    double sum = 0.0;
    for (std::size_t j = 0; j < centroids.rows(); ++j)
      sum += std::clamp(cosine_from(dot(x, centroids.row(j)), xsq, csq[j]), -1.0, 1.0);
    e[i] = -sum * inv_k;
  }
  if (counter) counter->graph_macs += feats.rows() * centroids.rows() * feats.cols();
  return e;
}

// Patch-local comparison mode: E(x_i) = -mean cos(x_i, x_j) over the other
// valid tokens of the same patch within `width` slots (0 = whole patch).
// A token without neighbors gets 0.
inline std::vector<double> local_energy(const Matrix& feats, const PatchSet& patches,
                                        std::size_t width = 0) {
  std::vector<double> e(feats.rows(), 0.0);
  for (std::size_t k = 0; k < patches.count(); ++k) {
    const auto idx = patches.valid_points(k);
    const std::size_t n = idx.size();
    const std::size_t w = width == 0 ? n : width;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t lo = s >= w ? s - w : 0;
      const std::size_t hi = std::min(n - 1, s + w);
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t t = lo; t <= hi; ++t) {
        if (t == s) continue;
        sum += std::clamp(cosine(feats.row(idx[s]), feats.row(idx[t])), -1.0, 1.0);
        ++count;
      }
      e[idx[s]] = count ? -sum / static_cast<double>(count) : 0.0;
    }
  }
  return e;
}

inline std::vector<double> patch_energy(std::span<const double> token_energy,
                                        const PatchSet& patches) {
  if (token_energy.size() != patches.point_count())
    throw ConfigError("patch_energy: energy count differs from point count");
  std::vector<double> out(patches.count());
  for (std::size_t k = 0; k < patches.count(); ++k) {
    const auto idx = patches.valid_points(k);
    double s = 0.0;
    for (auto i : idx) s += token_energy[i];
    out[k] = s / static_cast<double>(idx.size());
  }
  return out;
}

inline EnergyField compute_energy(const Matrix& feats, const PatchSet& patches,
                                  const MergePolicy& policy, OpCounter* counter = nullptr) {
  EnergyField f;
  f.centroids = patch_centroids(feats, patches);
  f.token_energy = policy.energy_scope == EnergyScope::global
                       ? global_energy(feats, f.centroids, counter)
                       : local_energy(feats, patches, policy.local_width);
  f.patch_energy = patch_energy(f.token_energy, patches);
  return f;
}

// Moderate rate r where E(P) > tau (strict), aggressive r_plus otherwise.
inline std::vector<double> adaptive_rates(std::span<const double> patch_energy,
                                          const MergePolicy& policy) {
  policy.validate();
  std::vector<double> rates(patch_energy.size());
  for (std::size_t k = 0; k < rates.size(); ++k)
    rates[k] = patch_energy[k] > policy.tau ? policy.r : policy.r_plus;
  return rates;
}

}  // namespace tokmerge
