#pragma once

#include <random>

#include "tokmerge/energy.hpp"

namespace tokmerge {

// Many-to-one assignment of a patch's slots to surviving destination slots.
// Clusters are numbered by ascending destination slot. Padded slots belong
// to no cluster (owner -1).
class MergeMap {
 public:
  MergeMap() = default;

  // `target[s]` is the destination slot of slot s (itself for destinations),
  // or -1 for padded slots.
  static MergeMap from_targets(std::span<const std::ptrdiff_t> target) {
    MergeMap m;
    const std::size_t slots = target.size();
    m.owner_.assign(slots, -1);
    std::vector<std::ptrdiff_t> cluster_of_dst(slots, -1);
    for (std::size_t s = 0; s < slots; ++s) {
      if (target[s] == static_cast<std::ptrdiff_t>(s)) {
        cluster_of_dst[s] = static_cast<std::ptrdiff_t>(m.dst_slots_.size());
        m.dst_slots_.push_back(s);
      }
    }
    m.cluster_size_.assign(m.dst_slots_.size(), 0);
    for (std::size_t s = 0; s < slots; ++s) {
      const auto t = target[s];
      if (t < 0) continue;
      if (static_cast<std::size_t>(t) >= slots || cluster_of_dst[t] < 0)
        throw ConfigError("merge map: slot " + std::to_string(s) + " targets a non-destination");
      m.owner_[s] = cluster_of_dst[t];
      ++m.cluster_size_[cluster_of_dst[t]];
    }
    return m;
  }

  static MergeMap identity(std::size_t valid, std::size_t slots) {
    std::vector<std::ptrdiff_t> t(slots, -1);
    for (std::size_t s = 0; s < valid; ++s) t[s] = static_cast<std::ptrdiff_t>(s);
    return from_targets(t);
  }

  std::size_t slots() const noexcept { return owner_.size(); }
  std::size_t kept_count() const noexcept { return dst_slots_.size(); }
  std::size_t valid_count() const noexcept {
    std::size_t n = 0;
    for (auto c : cluster_size_) n += c;
    return n;
  }
  std::span<const std::size_t> dst_slots() const noexcept { return dst_slots_; }
  std::span<const std::size_t> cluster_size() const noexcept { return cluster_size_; }
  std::ptrdiff_t owner(std::size_t slot) const noexcept { return owner_[slot]; }
  bool is_destination(std::size_t slot) const noexcept {
    return owner_[slot] >= 0 && dst_slots_[owner_[slot]] == slot;
  }
  // Destination slot that `slot` merges into (itself for destinations), -1 if padded.
  std::ptrdiff_t assign(std::size_t slot) const noexcept {
    return owner_[slot] < 0 ? -1 : static_cast<std::ptrdiff_t>(dst_slots_[owner_[slot]]);
  }

  bool operator==(const MergeMap&) const = default;

 private:
  std::vector<std::size_t> dst_slots_;
  std::vector<std::ptrdiff_t> owner_;
  std::vector<std::size_t> cluster_size_;
};

namespace detail {

// Squared row norms.
inline std::vector<double> row_norms(const Matrix& m) {
  std::vector<double> n(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) n[i] = dot(m.row(i), m.row(i));
  return n;
}

inline double cos_with_norms(const Matrix& m, std::size_t a, std::size_t b,
                             const std::vector<double>& sq_norms) {
  return cosine_from(dot(m.row(a), m.row(b)), sq_norms[a], sq_norms[b]);
}

inline std::size_t valid_rows(std::size_t valid, const Matrix& metric) {
  if (valid > metric.rows()) throw ConfigError("merge: valid count exceeds metric rows");
  return valid;
}

}  // namespace detail

// Classic bipartite soft matching. Alternate valid slots form the source
// (even) and destination (odd) sets; every source finds its most similar
// destination (ties: lowest slot), and the floor(r * n) sources with the
// highest best-similarity (ties: lowest source slot) merge into it.
inline MergeMap tome_match(const Matrix& metric, double r, std::size_t valid,
                           std::size_t slots) {
  if (r < 0.0) throw ConfigError("tome_match: rate must be >= 0");
  if (r > 0.5)
    throw ConfigError("tome_match: rate " + std::to_string(r) +
                      " exceeds the 0.5 limit of alternating src/dst matching; use spatial_match");
  const std::size_t n = detail::valid_rows(valid, metric);
  if (slots < n) throw ConfigError("tome_match: slots < valid");
  const auto merges = static_cast<std::size_t>(std::max(0LL, floor_tolerant(r * static_cast<double>(n))));

  std::vector<std::ptrdiff_t> target(slots, -1);
  for (std::size_t s = 0; s < n; ++s) target[s] = static_cast<std::ptrdiff_t>(s);
  if (merges == 0 || n < 2) return MergeMap::from_targets(target);

  const auto norms = detail::row_norms(metric);
  struct Candidate {
    std::size_t src, dst;
    double sim;
  };
  std::vector<Candidate> cands;
  for (std::size_t s = 0; s < n; s += 2) {
    Candidate best{s, 0, -INFINITY};
    for (std::size_t d = 1; d < n; d += 2) {
      const double sim = detail::cos_with_norms(metric, s, d, norms);
      if (sim > best.sim) best = {s, d, sim};
    }
    cands.push_back(best);
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.sim > b.sim; });
  for (std::size_t i = 0; i < std::min(merges, cands.size()); ++i)
    target[cands[i].src] = static_cast<std::ptrdiff_t>(cands[i].dst);
  return MergeMap::from_targets(target);
}

inline MergeMap tome_match(const Matrix& metric, double r) {
  return tome_match(metric, r, metric.rows(), metric.rows());
}

// K contiguous bins over the valid slots, sizes differing by at most one,
// with one destination slot per bin.
struct BinLayout {
  std::vector<std::size_t> bounds;  // K + 1 entries; bin b = [bounds[b], bounds[b+1])
  std::vector<std::size_t> dst_in_bin;

  std::size_t bins() const noexcept { return dst_in_bin.size(); }
  std::size_t bin_of(std::size_t slot) const noexcept {
    auto it = std::upper_bound(bounds.begin(), bounds.end(), slot);
    return static_cast<std::size_t>(it - bounds.begin()) - 1;
  }
};

// Bin count for a patch of nominal size T: floor(T (1 - rate)) in dynamic
// mode, the policy constant in fixed mode. Zero is a configuration error.
inline std::size_t bin_count(std::size_t patch_size, double rate, const MergePolicy& policy) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("merge rate must lie in [0, 1)");
  const long long k = policy.fixed_bins
                          ? static_cast<long long>(policy.fixed_bins)
                          : floor_tolerant(static_cast<double>(patch_size) * (1.0 - rate));
  if (k <= 0)
    throw ConfigError("K = 0: merge rate " + std::to_string(rate) + " leaves no bins for patch size " +
                      std::to_string(patch_size) + " (K = floor(T * (1 - r)))");
  return static_cast<std::size_t>(k);
}

// Bins over `valid` slots of a patch with nominal size `patch_size`. K is
// clamped to the valid count (short final patches). Destinations are drawn
// uniformly within each bin from `rng`.
inline BinLayout make_bins(std::size_t valid, std::size_t patch_size, double rate,
                           const MergePolicy& policy, std::mt19937_64& rng) {
  if (valid == 0) throw ConfigError("make_bins: patch has no valid slots");
  const std::size_t k = std::min(bin_count(patch_size, rate, policy), valid);
  BinLayout layout;
  layout.bounds.resize(k + 1);
  for (std::size_t b = 0; b <= k; ++b) layout.bounds[b] = b * valid / k;
  layout.dst_in_bin.resize(k);
  for (std::size_t b = 0; b < k; ++b) {
    std::uniform_int_distribution<std::size_t> pick(layout.bounds[b], layout.bounds[b + 1] - 1);
    layout.dst_in_bin[b] = pick(rng);
  }
  return layout;
}

inline BinLayout make_bins(std::size_t patch_size, double rate, const MergePolicy& policy,
                           std::mt19937_64& rng) {
  return make_bins(patch_size, patch_size, rate, policy, rng);
}

// Every non-destination slot merges into its own bin's destination
// (bin_local), or into the most similar destination over all bins
// (global_similar; ties to the lowest destination slot). kept_count == K.
inline MergeMap spatial_match(const Matrix& metric, const BinLayout& layout, Assignment assignment,
                              std::size_t slots) {
  const std::size_t n = layout.bounds.back();
  detail::valid_rows(n, metric);
  if (slots < n) throw ConfigError("spatial_match: slots < valid");
  std::vector<std::ptrdiff_t> target(slots, -1);
  std::vector<std::uint8_t> is_dst(n, 0);
  for (auto d : layout.dst_in_bin) is_dst[d] = 1;
  if (assignment == Assignment::bin_local) {
    for (std::size_t s = 0; s < n; ++s)
      target[s] = static_cast<std::ptrdiff_t>(layout.dst_in_bin[layout.bin_of(s)]);
  } else {
    const auto norms = detail::row_norms(metric);
    for (std::size_t s = 0; s < n; ++s) {
      if (is_dst[s]) {
        target[s] = static_cast<std::ptrdiff_t>(s);
        continue;
      }
      std::size_t best = layout.dst_in_bin.front();
      double best_sim = -INFINITY;
      for (auto d : layout.dst_in_bin) {  // ascending slot order
        const double sim = detail::cos_with_norms(metric, s, d, norms);
        if (sim > best_sim) {
          best_sim = sim;
          best = d;
        }
      }
      target[s] = static_cast<std::ptrdiff_t>(best);
    }
  }
  return MergeMap::from_targets(target);
}

inline MergeMap spatial_match(const Matrix& metric, const BinLayout& layout,
                              Assignment assignment = Assignment::bin_local) {
  return spatial_match(metric, layout, assignment, layout.bounds.back());
}

// Unweighted mean of each cluster (destination plus its sources).
inline Matrix merge_apply(const Matrix& feats, const MergeMap& map) {
  if (feats.rows() != map.slots()) throw ConfigError("merge_apply: rows differ from map slots");
  Matrix out(map.kept_count(), feats.cols());
  for (std::size_t s = 0; s < map.slots(); ++s) {
    const auto c = map.owner(s);
    if (c < 0) continue;
    auto o = out.row(static_cast<std::size_t>(c));
    auto f = feats.row(s);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] += f[j];
  }
  for (std::size_t c = 0; c < map.kept_count(); ++c) {
    const double inv = static_cast<double>(map.cluster_size()[c]);
    for (auto& v : out.row(c)) v /= inv;
  }
  return out;
}

// Copies each cluster's row back to all of its slots; padded slots get zeros.
inline Matrix unmerge(const Matrix& merged, const MergeMap& map) {
  if (merged.rows() != map.kept_count()) throw ConfigError("unmerge: rows differ from kept count");
  Matrix out(map.slots(), merged.cols());
  for (std::size_t s = 0; s < map.slots(); ++s) {
    const auto c = map.owner(s);
    if (c < 0) continue;
    auto r = merged.row(static_cast<std::size_t>(c));
    std::copy(r.begin(), r.end(), out.row(s).begin());
  }
  return out;
}

namespace detail {

inline Matrix column_slice(const Matrix& m, std::size_t col, std::size_t width) {
  Matrix out(m.rows(), width);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i).subspan(col, width);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

inline void write_columns(Matrix& dst, const Matrix& src, std::size_t col) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    auto r = src.row(i);
    std::copy(r.begin(), r.end(), dst.row(i).begin() + static_cast<std::ptrdiff_t>(col));
  }
}

inline const Matrix& select_metric(Metric metric, const Matrix& raw, const Projections& qkv) {
  switch (metric) {
    case Metric::q: return qkv.q;
    case Metric::k: return qkv.k;
    case Metric::v: return qkv.v;
    case Metric::raw: break;
  }
  return raw;
}

}  // namespace detail

// One patch's merge map under `policy` at `rate`. A map that keeps every
// valid slot is returned as the identity.
inline MergeMap build_merge_map(const Matrix& metric, std::size_t patch_size, double rate,
                                const MergePolicy& policy, std::uint64_t seed) {
  const std::size_t n = metric.rows();
  if (policy.matcher == Matcher::tome && rate <= 0.5) return tome_match(metric, rate, n, n);
  const std::size_t k = std::min(bin_count(patch_size, rate, policy), n);
  if (k == n) return MergeMap::identity(n, n);
  std::mt19937_64 rng(seed);
  return spatial_match(metric, make_bins(n, patch_size, rate, policy, rng), policy.assignment, n);
}

// Maps for a patch's valid rows: one per head when policy.per_head is set
// (each from that head's slice of the metric), otherwise a single map.
inline std::vector<MergeMap> build_patch_maps(const Matrix& x, const Projections& qkv,
                                              const AttnParams& params, std::size_t patch_size,
                                              double rate, const MergePolicy& policy,
                                              std::uint64_t seed) {
  const Matrix& metric = detail::select_metric(policy.metric, x, qkv);
  std::vector<MergeMap> maps;
  if (!policy.per_head) {
    maps.push_back(build_merge_map(metric, patch_size, rate, policy, derive_seed(seed, 0)));
    return maps;
  }
  for (std::size_t h = 0; h < params.heads; ++h)
    maps.push_back(build_merge_map(detail::column_slice(metric, h * params.head_dim, params.head_dim),
                                   patch_size, rate, policy, derive_seed(seed, h)));
  return maps;
}

// Merged representation of x under per-head (or shared) maps. With per-head
// maps every head must keep the same number of tokens.
inline Matrix merged_tokens(const Matrix& x, std::span<const MergeMap> maps, std::size_t heads) {
  if (maps.size() == 1) return merge_apply(x, maps.front());
  if (maps.size() != heads || x.cols() % heads != 0)
    throw ConfigError("merged_tokens: need one map per head");
  const std::size_t width = x.cols() / heads;
  const std::size_t kept = maps.front().kept_count();
  Matrix out(kept, x.cols());
  for (std::size_t h = 0; h < heads; ++h) {
    if (maps[h].kept_count() != kept) throw ConfigError("merged_tokens: heads keep different counts");
    detail::write_columns(out, merge_apply(detail::column_slice(x, h * width, width), maps[h]),
                          h * width);
  }
  return out;
}

struct MergedAttention {
  Matrix out;                   // valid rows x d_model
  std::vector<MergeMap> maps;   // one per head, or one shared
};

// Attn(x) ~ unmerge(Attn(merge(x))) over a patch's valid rows: q, k and v
// are merged through the same map, attention runs on the reduced set, and
// the result is copied back before the output projection.
inline MergedAttention merged_attention(const Matrix& x, std::size_t patch_size,
                                        const AttnParams& params, const MergePolicy& policy,
                                        double rate, std::uint64_t seed,
                                        OpCounter* counter = nullptr) {
  if (x.cols() != params.d_model) throw ConfigError("merged_attention: width differs from d_model");
  if (x.rows() == 0) return {Matrix(0, params.d_model), {}};
  const Projections qkv = project_qkv(x, params, counter);
  MergedAttention result;
  result.maps = build_patch_maps(x, qkv, params, patch_size, rate, policy, seed);

  Matrix heads(x.rows(), params.d_model);
  const std::size_t d = params.head_dim;
  for (std::size_t h = 0; h < params.heads; ++h) {
    const MergeMap& map = result.maps[policy.per_head ? h : 0];
    const std::size_t col = h * d;
    const Matrix q = merge_apply(detail::column_slice(qkv.q, col, d), map);
    const Matrix k = merge_apply(detail::column_slice(qkv.k, col, d), map);
    const Matrix v = merge_apply(detail::column_slice(qkv.v, col, d), map);
    std::vector<double> bias;
    if (policy.proportional_attention)
      for (auto size : map.cluster_size()) bias.push_back(std::log(static_cast<double>(size)));
    Matrix merged_out(map.kept_count(), d);
    attend_head(q, k, v, 0, d, bias, merged_out, 0, counter);
    detail::write_columns(heads, unmerge(merged_out, map), col);
  }
  result.out = matmul(heads, params.wo, counter ? &counter->projection_macs : nullptr);
  return result;
}

// Slot-level variant: `patch` has T rows and `pad_mask` flags padded slots,
// which get zero output.
inline Matrix merged_attention(const Matrix& patch, std::span<const std::uint8_t> pad_mask,
                               const AttnParams& params, const MergePolicy& policy, double rate,
                               std::uint64_t seed, OpCounter* counter = nullptr) {
  std::vector<std::size_t> live;
  for (std::size_t s = 0; s < patch.rows(); ++s)
    if (pad_mask.empty() || !pad_mask[s]) live.push_back(s);
  Matrix out(patch.rows(), params.d_model);
  if (live.empty()) return out;
  const auto r = merged_attention(gather_rows(patch, live), patch.rows(), params, policy, rate,
                                  seed, counter);
  for (std::size_t i = 0; i < live.size(); ++i) {
    auto row = r.out.row(i);
    std::copy(row.begin(), row.end(), out.row(live[i]).begin());
  }
  return out;
}

}  // namespace tokmerge
