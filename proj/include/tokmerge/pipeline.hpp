#pragma once

#include <chrono>
#include <set>

#include "tokmerge/analysis.hpp"

namespace tokmerge {

enum class ModeKind { dense, merged, mixer, baseline };

struct Mode {
  ModeKind kind = ModeKind::dense;
  Mixer mixer = Mixer::avg_pool;
  Sampler sampler = Sampler::random_drop;

  std::string name() const {
    switch (kind) {
      case ModeKind::dense: return "dense";
      case ModeKind::merged: return "merged";
      case ModeKind::mixer:
        switch (mixer) {
          case Mixer::avg_pool: return "mixer:avg_pool";
          case Mixer::shuffle_pool: return "mixer:shuffle_pool";
          case Mixer::pool_attn: return "mixer:pool_attn";
          case Mixer::progressive_tome: return "mixer:progressive_tome";
          case Mixer::projection: return "mixer:projection";
        }
        break;
      case ModeKind::baseline:
        switch (sampler) {
          case Sampler::random_drop: return "baseline:random_drop";
          case Sampler::fps: return "baseline:fps";
          case Sampler::voxel_grid: return "baseline:voxel_grid";
        }
        break;
    }
    return "?";
  }

  static Mode parse(std::string_view text) {
    static const std::vector<Mode> all = {
        {ModeKind::dense},
        {ModeKind::merged},
        {ModeKind::mixer, Mixer::avg_pool},
        {ModeKind::mixer, Mixer::shuffle_pool},
        {ModeKind::mixer, Mixer::pool_attn},
        {ModeKind::mixer, Mixer::progressive_tome},
        {ModeKind::mixer, Mixer::projection},
        {ModeKind::baseline, Mixer::avg_pool, Sampler::random_drop},
        {ModeKind::baseline, Mixer::avg_pool, Sampler::fps},
        {ModeKind::baseline, Mixer::avg_pool, Sampler::voxel_grid},
    };
    for (const auto& m : all)
      if (m.name() == text) return m;
    std::string known;
    for (const auto& m : all) known += (known.empty() ? "" : ", ") + m.name();
    throw ConfigError("unknown mode '" + std::string(text) + "' (expected one of: " + known + ")");
  }

  bool operator==(const Mode& o) const { return name() == o.name(); }
};

struct RunConfig {
  std::string input_path;  // empty: generate `scene`
  SceneSpec scene;
  Curve curve = Curve::morton;
  unsigned grid_bits = 10;
  std::size_t patch_size = 1024;
  std::size_t depth = 2;
  std::size_t heads = 4;
  bool mlp = false;
  std::uint64_t seed = 0;  // master seed: weights, bins, samplers
  MergePolicy policy;
  Mode mode;
  SamplerConfig sampler;
  unsigned threads = 1;

  void validate() const {
    if (grid_bits < 1 || grid_bits > kMaxGridBits) throw ConfigError("grid bits must lie in [1, 21]");
    if (patch_size < 2) throw ConfigError("patch size must be >= 2");
    if (depth == 0) throw ConfigError("depth must be >= 1");
    if (heads == 0) throw ConfigError("heads must be >= 1");
    if (mode.kind == ModeKind::merged) {
      // Bin-count check first so an over-aggressive rate is reported as K = 0.
      bin_count(patch_size, policy.r, policy);
      bin_count(patch_size, policy.r_plus, policy);
      policy.validate();
    }
    if (mode.kind == ModeKind::baseline) {
      if (sampler.method != Sampler::voxel_grid) keep_count(1, sampler.keep_fraction);
      else if (!(sampler.voxel_size > 0.0)) throw ConfigError("voxel size must be > 0");
    }
  }
};

struct LayerRecord {
  std::size_t layer = 0;
  std::uint64_t checksum = 0;
  std::size_t kept_tokens = 0;
  std::size_t aggressive_patches = 0;
  std::optional<TEEntry> te;
};

struct BenchRecord {
  std::string mode;
  std::uint64_t seed = 0;
  std::size_t points = 0;
  std::size_t patches = 0;
  std::vector<LayerRecord> layers;
  FlopsReport flops;
  double elapsed_seconds = 0.0;
  Matrix final_feats;  // final-layer features in original point order

  std::uint64_t combined_checksum() const {
    std::vector<double> bits;
    for (const auto& l : layers) bits.push_back(std::bit_cast<double>(l.checksum));
    return checksum(bits);
  }
};

inline PointCloud load_input(const RunConfig& cfg) {
  return cfg.input_path.empty() ? generate_scene(cfg.scene) : load_cloud(cfg.input_path);
}

namespace detail {

inline std::uint64_t weight_seed(std::uint64_t master) { return derive_seed(master, 0x77); }

// Dense-reference plan for one layer over a partition: every patch kept whole.
inline LayerPlan dense_plan(const PatchSet& patches, const AttnParams& p, std::size_t mlp_hidden) {
  LayerPlan plan;
  plan.d_model = p.d_model;
  plan.heads = p.heads;
  plan.graph = false;
  plan.mlp_hidden = mlp_hidden;
  for (std::size_t k = 0; k < patches.count(); ++k)
    plan.patches.push_back({patches.valid(k), patches.valid(k)});
  return plan;
}

inline std::uint64_t mixer_attention_flops(Mixer mixer, std::uint64_t n, const AttnParams& p) {
  const std::uint64_t d = p.d_model;
  switch (mixer) {
    case Mixer::avg_pool:
    case Mixer::shuffle_pool:
      return 2 * kFlopsPerMac * n * d * d + n * d * std::min<std::uint64_t>(kAvgPoolKernel, n);
    case Mixer::pool_attn: {
      const std::uint64_t m = (n + pool_window(n) - 1) / pool_window(n);
      return attention_flops(m, d, p.heads, m) + n * d;
    }
    case Mixer::progressive_tome: break;  // data dependent; computed by the caller
    case Mixer::projection: return 2 * kFlopsPerMac * n * d * d;
  }
  return 0;
}

// Final features of a reduced cloud copied to every original point from
// its nearest reduced point (ties: lowest reduced index).
inline Matrix upsample_nearest(const PointCloud& full, const PointCloud& reduced, const Matrix& feats,
                               unsigned threads) {
  Matrix out(full.size(), feats.cols());
  parallel_for(full.size(), threads, [&](std::size_t i) {
    std::size_t best = 0;
    double best_d2 = INFINITY;
    for (std::size_t j = 0; j < reduced.size(); ++j) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double d = full.coords(i, a) - reduced.coords(j, a);
        d2 += d * d;
      }
      if (d2 < best_d2) {
        best_d2 = d2;
        best = j;
      }
    }
    auto r = feats.row(best);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  });
  return out;
}

template <typename Fn>
auto with_context(std::size_t layer, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError("layer " + std::to_string(layer) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError("layer " + std::to_string(layer) + ": " + e.what());
  }
}

}  // namespace detail

// Executes the configured mode over the whole stack. Output depends only
// on the configuration (not on cfg.threads).
inline BenchRecord run(const RunConfig& cfg, const PointCloud& cloud) {
  cfg.validate();
  cloud.validate();
  const auto start = std::chrono::steady_clock::now();
  const LayerStack stack =
      make_stack(cfg.depth, cloud.dim(), cfg.heads, detail::weight_seed(cfg.seed), cfg.mlp);
  const std::size_t mlp_hidden = cfg.mlp ? 4 * cloud.dim() : 0;
  MergePolicy policy = cfg.policy;
  policy.seed = cfg.seed;

  BenchRecord rec;
  rec.mode = cfg.mode.name();
  rec.seed = cfg.seed;
  rec.points = cloud.size();

  const PatchSet patches = partition(serialize(cloud, cfg.curve, cfg.grid_bits), cfg.patch_size);
  rec.patches = patches.count();

  if (cfg.mode.kind == ModeKind::baseline) {
    SamplerConfig sc = cfg.sampler;
    sc.method = cfg.mode.sampler;
    sc.seed = derive_seed(cfg.seed, 0x5a);
    const Downsampled ds = downsample(cloud, sc);
    const PatchSet reduced = partition(serialize(ds.cloud, cfg.curve, cfg.grid_bits), cfg.patch_size);
    const auto snaps = run_stack(ds.cloud.feats, reduced, stack, cfg.threads);
    for (std::size_t l = 0; l < stack.depth(); ++l) {
      // Reference counts from the full cloud, mode counts from the reduced one.
      LayerFlops f = layer_flops(detail::dense_plan(patches, stack.layers[l], mlp_hidden));
      const LayerFlops g = layer_flops(detail::dense_plan(reduced, stack.layers[l], mlp_hidden));
      f.merged_attention_flops = g.dense_attention_flops;
      f.merged_mlp_flops = g.dense_mlp_flops;
      rec.flops.layers.push_back(f);
      LayerRecord lr{l, checksum(snaps[l].values()), ds.cloud.size(), 0, std::nullopt};
      if (l == 0) lr.te = transfer_entropy(cloud.feats, ds.cloud.feats);
      rec.layers.push_back(lr);
    }
    rec.final_feats = detail::upsample_nearest(cloud, ds.cloud, snaps.back(), cfg.threads);
  } else {
    Matrix x = cloud.feats;
    for (std::size_t l = 0; l < stack.depth(); ++l) {
      const AttnParams& params = stack.layers[l];
      LayerPlan plan = detail::dense_plan(patches, params, mlp_hidden);
      LayerRecord lr{l, 0, 0, 0, std::nullopt};
      std::optional<LayerFlops> measured;

      Matrix y = detail::with_context(l, [&]() -> Matrix {
        switch (cfg.mode.kind) {
          case ModeKind::dense:
            lr.kept_tokens = cloud.size();
            return apply_patchwise(x, patches, cfg.threads, [&](std::size_t, const Matrix& rows) {
              return attention_rows(rows, params);
            });
          case ModeKind::merged: {
            const EnergyField field =
                compute_energy(metric_features(x, params, policy.energy_metric), patches, policy);
            const auto rates = adaptive_rates(field.patch_energy, policy);
            std::vector<Matrix> merged(patches.count());
            std::vector<std::size_t> kept(patches.count());
            Matrix out = apply_patchwise(x, patches, cfg.threads, [&](std::size_t k, const Matrix& rows) {
              auto r = merged_attention(rows, patches.patch_size(), params, policy, rates[k],
                                        derive_seed(policy.seed, l, k));
              kept[k] = r.maps.front().kept_count();
              merged[k] = merged_tokens(rows, r.maps, params.heads);
              return std::move(r.out);
            });
            plan.graph = policy.energy_scope == EnergyScope::global;
            plan.graph_width = x.cols();
            std::size_t total_kept = 0;
            for (std::size_t k = 0; k < patches.count(); ++k) {
              plan.patches[k].kept = kept[k];
              total_kept += kept[k];
              if (rates[k] == policy.r_plus) ++lr.aggressive_patches;
            }
            lr.kept_tokens = total_kept;
            Matrix all(total_kept, x.cols());
            std::size_t r = 0;
            for (const auto& b : merged)
              for (std::size_t i = 0; i < b.rows(); ++i, ++r) {
                auto row = b.row(i);
                std::copy(row.begin(), row.end(), all.row(r).begin());
              }
            lr.te = transfer_entropy(serialized_rows(x, patches), all);
            return out;
          }
          case ModeKind::mixer: {
            std::vector<std::uint64_t> flops(patches.count());
            std::vector<Matrix> reduced(patches.count());
            Matrix out = apply_patchwise(x, patches, cfg.threads, [&](std::size_t k, const Matrix& rows) {
              flops[k] = detail::mixer_attention_flops(cfg.mode.mixer, rows.rows(), params);
              if (cfg.mode.mixer == Mixer::progressive_tome && rows.rows() >= 2) {
                const auto pm = progressive_tome(rows);
                const std::uint64_t m = pm.map.kept_count();
                flops[k] = attention_flops(m, params.d_model, params.heads, m) +
                           graph_flops(rows.rows() - 1, 1, params.d_model) +
                           rows.rows() * params.d_model;
                reduced[k] = pm.merged;
              }
              return apply_mixer(cfg.mode.mixer, rows, params);
            });
            LayerFlops f = layer_flops(plan);
            f.merged_attention_flops = 0;
            for (auto v : flops) f.merged_attention_flops += v;
            measured = f;
            lr.kept_tokens = cloud.size();
            if (cfg.mode.mixer == Mixer::progressive_tome) {
              std::size_t total = 0;
              for (const auto& b : reduced) total += b.rows();
              if (total >= 2) {
                Matrix all(total, x.cols());
                std::size_t r = 0;
                for (const auto& b : reduced)
                  for (std::size_t i = 0; i < b.rows(); ++i, ++r) {
                    auto row = b.row(i);
                    std::copy(row.begin(), row.end(), all.row(r).begin());
                  }
                lr.kept_tokens = total;
                lr.te = transfer_entropy(serialized_rows(x, patches), all);
              }
            }
            return out;
          }
          case ModeKind::baseline: break;
        }
        throw ConfigError("unsupported mode");
      });

      add_inplace(x, y);
      if (stack.has_mlp()) add_inplace(x, apply_mlp(x, stack.mlps[l]));
      detail::with_context(l, [&] {
        check_finite(x, "layer output");
        return 0;
      });
      lr.checksum = checksum(x.values());
      rec.layers.push_back(lr);
      rec.flops.layers.push_back(measured ? *measured : layer_flops(plan));
    }
    rec.final_feats = std::move(x);
  }
  rec.flops.finalize();
  rec.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

inline BenchRecord run(const RunConfig& cfg) { return run(cfg, load_input(cfg)); }

struct ComparisonRow {
  std::string mode;
  std::uint64_t flops = 0;
  double reduction = 1.0;
  double te_rate = 0.0;  // mean transfer rate over layers that report one
  double rel_error = 0.0;
};

inline double mean_transfer_rate(const BenchRecord& rec) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& l : rec.layers)
    if (l.te) {
      sum += l.te->transfer_rate;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// Runs every configuration against a shared dense reference. All configs
// must name the same input and master seed, and modes must be distinct.
inline std::vector<ComparisonRow> compare(std::span<const RunConfig> configs) {
  if (configs.empty()) throw ConfigError("compare: no configurations");
  std::set<std::string> seen;
  for (const auto& c : configs) {
    if (!seen.insert(c.mode.name()).second)
      throw ConfigError("compare: mode '" + c.mode.name() + "' listed twice");
    const auto& f = configs.front();
    const bool same_input =
        c.input_path == f.input_path &&
        (!c.input_path.empty() ||
         (c.scene.object_count == f.scene.object_count &&
          c.scene.points_per_object == f.scene.points_per_object &&
          c.scene.feature_dim == f.scene.feature_dim && c.scene.noise_sigma == f.scene.noise_sigma &&
          c.scene.seed == f.scene.seed));
    if (!same_input || c.seed != f.seed)
      throw ConfigError("compare: configurations must share the input cloud and seed");
  }
  const PointCloud cloud = load_input(configs.front());
  RunConfig dense_cfg = configs.front();
  dense_cfg.mode = Mode{ModeKind::dense};
  const BenchRecord reference = run(dense_cfg, cloud);

  std::vector<ComparisonRow> rows;
  for (const auto& c : configs) {
    const BenchRecord rec = c.mode.kind == ModeKind::dense ? reference : run(c, cloud);
    rows.push_back({rec.mode, rec.flops.merged_flops, rec.flops.reduction_factor,
                    mean_transfer_rate(rec), relative_error(rec.final_feats, reference.final_feats)});
  }
  return rows;
}

}  // namespace tokmerge
