#pragma once

#include <optional>

#include "tokmerge/alternatives.hpp"

namespace tokmerge {

// ---------------------------------------------------------------------------
// FLOPs model. One multiply-accumulate counts as 2 FLOPs; softmax and
// normalization count as 5 FLOPs per score entry.

inline constexpr std::uint64_t kFlopsPerMac = 2;
inline constexpr std::uint64_t kSoftmaxFlopsPerEntry = 5;
inline constexpr const char* kFlopsConvention =
    "1 MAC = 2 FLOPs; softmax = 5 FLOPs per score entry; QKV and output projections at full "
    "token count; scores and weighted sum at kept^2";

struct AttentionFlops {
  std::uint64_t qkv = 0;       // 3 * 2 * T * d^2
  std::uint64_t scores = 0;    // q.k^T plus weighted sum: 2 * 2 * kept^2 * d
  std::uint64_t softmax = 0;   // 5 * heads * kept^2
  std::uint64_t output = 0;    // 2 * T * d^2

  std::uint64_t total() const noexcept { return qkv + scores + softmax + output; }
};

inline AttentionFlops attention_flops_breakdown(std::uint64_t tokens, std::uint64_t d_model,
                                                std::uint64_t heads, std::uint64_t kept) {
  if (kept > tokens) throw ConfigError("attention_flops: kept exceeds token count");
  AttentionFlops f;
  f.qkv = 3 * kFlopsPerMac * tokens * d_model * d_model;
  f.scores = 2 * kFlopsPerMac * kept * kept * d_model;
  f.softmax = kSoftmaxFlopsPerEntry * heads * kept * kept;
  f.output = kFlopsPerMac * tokens * d_model * d_model;
  return f;
}

inline std::uint64_t attention_flops(std::uint64_t tokens, std::uint64_t d_model,
                                     std::uint64_t heads, std::uint64_t kept) {
  return attention_flops_breakdown(tokens, d_model, heads, kept).total();
}

inline std::uint64_t mlp_flops(std::uint64_t tokens, std::uint64_t d_model, std::uint64_t hidden) {
  return 2 * kFlopsPerMac * tokens * d_model * hidden;
}

// Averaging q, k and v into kept clusters: one add per valid element and
// one divide per kept element, for each of the three sets.
inline std::uint64_t merge_overhead_flops(std::uint64_t valid, std::uint64_t kept,
                                          std::uint64_t d_model) {
  return kept < valid ? 3 * (valid + kept) * d_model : 0;
}

// Global graph: N * K cosine products of width d_feat.
inline std::uint64_t graph_flops(std::uint64_t tokens, std::uint64_t patches, std::uint64_t d_feat) {
  return kFlopsPerMac * tokens * patches * d_feat;
}

struct PatchLoad {
  std::size_t valid = 0;
  std::size_t kept = 0;
};

struct LayerPlan {
  std::size_t d_model = 0;
  std::size_t heads = 1;
  std::size_t graph_width = 0;  // feature width of the energy graph
  bool graph = true;            // energy graph evaluated in this layer
  std::size_t mlp_hidden = 0;   // 0 = no MLP
  std::vector<PatchLoad> patches;

  std::size_t tokens() const noexcept {
    std::size_t n = 0;
    for (const auto& p : patches) n += p.valid;
    return n;
  }
};

struct LayerFlops {
  std::uint64_t dense_attention_flops = 0;
  std::uint64_t merged_attention_flops = 0;
  std::uint64_t graph_flops = 0;
  std::uint64_t merge_overhead_flops = 0;
  std::uint64_t dense_mlp_flops = 0;
  std::uint64_t merged_mlp_flops = 0;

  std::uint64_t dense_total() const noexcept { return dense_attention_flops + dense_mlp_flops; }
  std::uint64_t merged_total() const noexcept {
    return merged_attention_flops + graph_flops + merge_overhead_flops + merged_mlp_flops;
  }
};

struct FlopsReport {
  std::vector<LayerFlops> layers;
  std::uint64_t dense_flops = 0;
  std::uint64_t merged_flops = 0;
  double reduction_factor = 1.0;

  void finalize() {
    dense_flops = merged_flops = 0;
    for (const auto& l : layers) {
      dense_flops += l.dense_total();
      merged_flops += l.merged_total();
    }
    reduction_factor = merged_flops ? static_cast<double>(dense_flops) / static_cast<double>(merged_flops)
                                    : 1.0;
  }
};

inline LayerFlops layer_flops(const LayerPlan& plan) {
  LayerFlops f;
  for (const auto& p : plan.patches) {
    f.dense_attention_flops += attention_flops(p.valid, plan.d_model, plan.heads, p.valid);
    f.merged_attention_flops += attention_flops(p.valid, plan.d_model, plan.heads, p.kept);
    f.merge_overhead_flops += merge_overhead_flops(p.valid, p.kept, plan.d_model);
  }
  if (plan.graph)
    f.graph_flops = graph_flops(plan.tokens(), plan.patches.size(),
                                plan.graph_width ? plan.graph_width : plan.d_model);
  if (plan.mlp_hidden)
    f.dense_mlp_flops = f.merged_mlp_flops = mlp_flops(plan.tokens(), plan.d_model, plan.mlp_hidden);
  return f;
}

inline FlopsReport pipeline_flops(std::span<const LayerPlan> plans) {
  FlopsReport r;
  for (const auto& p : plans) r.layers.push_back(layer_flops(p));
  r.finalize();
  return r;
}

// Kept count of a patch merged at `rate` through bins (K clamped to valid).
inline std::size_t kept_for_rate(std::size_t valid, std::size_t patch_size, double rate,
                                 const MergePolicy& policy) {
  return std::min(valid, bin_count(patch_size, rate, policy));
}

// Patch loads for `tokens` tokens cut into patches of `patch_size`, with the
// first `aggressive` patches at r_plus and the rest at r.
inline std::vector<PatchLoad> uniform_loads(std::size_t tokens, std::size_t patch_size,
                                            const MergePolicy& policy, std::size_t aggressive) {
  std::vector<PatchLoad> loads;
  for (std::size_t begin = 0; begin < tokens; begin += patch_size) {
    const std::size_t valid = std::min(patch_size, tokens - begin);
    const double rate = loads.size() < aggressive ? policy.r_plus : policy.r;
    loads.push_back({valid, kept_for_rate(valid, patch_size, rate, policy)});
  }
  return loads;
}

struct StageShape {
  std::size_t d_model;
  std::size_t heads;
  std::size_t depth;
  std::size_t downsample_level;  // tokens = N / 4^level
};

// Five-stage encoder (widths 32..512) with a four-stage decoder, grid pooling
// modelled as 4x token reduction per level, every layer merged. The
// aggressive share of patches per layer is `aggressive_fraction`.
inline std::vector<LayerPlan> ptv3_like_preset(std::size_t tokens, const MergePolicy& policy,
                                               double aggressive_fraction,
                                               std::size_t patch_size = 1024) {
  static constexpr StageShape stages[] = {
      {32, 2, 2, 0},   {64, 4, 2, 1},   {128, 8, 2, 2}, {256, 16, 6, 3}, {512, 32, 2, 4},
      {256, 16, 2, 3}, {128, 8, 2, 2},  {64, 4, 2, 1},  {64, 4, 2, 0},
  };
  std::vector<LayerPlan> plans;
  for (const auto& s : stages) {
    const std::size_t n = std::max<std::size_t>(1, tokens >> (2 * s.downsample_level));
    const std::size_t count = (n + patch_size - 1) / patch_size;
    const auto aggressive = static_cast<std::size_t>(
        std::ceil(std::clamp(aggressive_fraction, 0.0, 1.0) * static_cast<double>(count)));
    for (std::size_t l = 0; l < s.depth; ++l) {
      LayerPlan p;
      p.d_model = s.d_model;
      p.heads = s.heads;
      p.graph_width = s.d_model;
      p.patches = uniform_loads(n, patch_size, policy, aggressive);
      plans.push_back(std::move(p));
    }
  }
  return plans;
}

// ---------------------------------------------------------------------------
// Transfer entropy under a Gaussian approximation, in nats.

// log(sigma) + log(2 pi) / 2 + 1/2, with sigma the standard deviation of all
// scalar entries pooled together (population normalization).
inline double gaussian_entropy(std::span<const double> values) {
  if (values.size() < 2) throw NumericError("gaussian_entropy: need at least 2 values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sigma = std::sqrt(ss / static_cast<double>(values.size()));
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw NumericError("gaussian_entropy: degenerate distribution (sigma = 0)");
  return std::log(sigma) + 0.5 * std::log(2.0 * M_PI) + 0.5;
}

inline double gaussian_entropy(const Matrix& m) { return gaussian_entropy(m.values()); }

struct TEEntry {
  double h_orig = 0.0;
  double h_merged = 0.0;
  double te_nats = 0.0;        // H(orig) - H(merged)
  double transfer_rate = 0.0;  // |TE / H(orig)|
};

inline TEEntry transfer_entropy(const Matrix& orig, const Matrix& merged) {
  TEEntry e;
  e.h_orig = gaussian_entropy(orig);
  e.h_merged = gaussian_entropy(merged);
  e.te_nats = e.h_orig - e.h_merged;
  if (e.h_orig != 0.0)
    e.transfer_rate = std::fabs(e.te_nats / e.h_orig);
  else
    e.transfer_rate = e.te_nats == 0.0 ? 0.0 : INFINITY;
  return e;
}

// Three merging scenarios per layer: A original -> moderate (rate r on every
// patch, no graph), B original -> adaptive (energy-driven r / r_plus),
// C moderate -> aggressive (r_plus on every patch).
struct TEScenarioLayer {
  std::size_t layer = 0;
  TEEntry a, b, c;
};

struct TEReport {
  std::vector<TEScenarioLayer> layers;
};

inline Matrix metric_features(const Matrix& x, const AttnParams& params, Metric metric) {
  switch (metric) {
    case Metric::q: return matmul(x, params.wq);
    case Metric::k: return matmul(x, params.wk);
    case Metric::v: return matmul(x, params.wv);
    case Metric::raw: break;
  }
  return x;
}

// Valid rows of every patch, concatenated in serialized order.
inline Matrix serialized_rows(const Matrix& x, const PatchSet& patches) {
  Matrix out(patches.point_count(), x.cols());
  std::size_t r = 0;
  for (std::size_t k = 0; k < patches.count(); ++k)
    for (auto i : patches.valid_points(k)) {
      auto row = x.row(i);
      std::copy(row.begin(), row.end(), out.row(r++).begin());
    }
  return out;
}

// Merged token set of a whole layer: every patch's valid rows merged at its
// rate, patches concatenated in order.
inline Matrix merged_layer_tokens(const Matrix& x, const PatchSet& patches, const AttnParams& params,
                                  std::span<const double> rates, const MergePolicy& policy,
                                  std::size_t layer, unsigned threads) {
  std::vector<Matrix> blocks(patches.count());
  parallel_for(patches.count(), threads, [&](std::size_t k) {
    const Matrix rows = gather_rows(x, patches.valid_points(k));
    const Projections qkv = project_qkv(rows, params);
    const auto maps = build_patch_maps(rows, qkv, params, patches.patch_size(), rates[k], policy,
                                       derive_seed(policy.seed, layer, k));
    blocks[k] = merged_tokens(rows, maps, params.heads);
  });
  std::size_t total = 0;
  for (const auto& b : blocks) total += b.rows();
  Matrix out(total, x.cols());
  std::size_t r = 0;
  for (const auto& b : blocks)
    for (std::size_t i = 0; i < b.rows(); ++i, ++r) {
      auto row = b.row(i);
      std::copy(row.begin(), row.end(), out.row(r).begin());
    }
  return out;
}

// `layer_inputs[l]` holds the features entering layer l of `stack`.
inline TEReport layerwise_te(std::span<const Matrix> layer_inputs, const PatchSet& patches,
                             const LayerStack& stack, const MergePolicy& policy,
                             unsigned threads = 1) {
  // r == r_plus is allowed here so a zero-rate sweep point stays expressible.
  if (!(policy.r >= 0.0 && policy.r <= policy.r_plus && policy.r_plus < 1.0))
    throw ConfigError("layerwise_te requires 0 <= r <= r_plus < 1");
  if (layer_inputs.size() != stack.depth())
    throw ConfigError("layerwise_te: " + std::to_string(layer_inputs.size()) +
                      " snapshots for a stack of depth " + std::to_string(stack.depth()));
  TEReport report;
  for (std::size_t l = 0; l < stack.depth(); ++l) {
    const Matrix& x = layer_inputs[l];
    const auto& params = stack.layers[l];
    const EnergyField field =
        compute_energy(metric_features(x, params, policy.energy_metric), patches, policy);
    std::vector<double> adaptive(patches.count());
    for (std::size_t k = 0; k < adaptive.size(); ++k)
      adaptive[k] = field.patch_energy[k] > policy.tau ? policy.r : policy.r_plus;
    const std::vector<double> moderate(patches.count(), policy.r);
    const std::vector<double> aggressive(patches.count(), policy.r_plus);

    // Same serialized row order as the merged sets, so identity merges give TE == 0 exactly.
    const Matrix orig = serialized_rows(x, patches);
    const Matrix m_mod = merged_layer_tokens(x, patches, params, moderate, policy, l, threads);
    const Matrix m_ada = merged_layer_tokens(x, patches, params, adaptive, policy, l, threads);
    const Matrix m_agg = merged_layer_tokens(x, patches, params, aggressive, policy, l, threads);
    report.layers.push_back(
        {l, transfer_entropy(orig, m_mod), transfer_entropy(orig, m_ada), transfer_entropy(m_mod, m_agg)});
  }
  return report;
}

}  // namespace tokmerge
