#pragma once

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tokmerge/tokmerge.hpp"

namespace tokmerge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

namespace detail {

template <typename E>
E lookup(const std::map<std::string, E>& table, const std::string& text, const char* what) {
  auto it = table.find(text);
  if (it != table.end()) return it->second;
  std::string known;
  for (const auto& [k, v] : table) known += (known.empty() ? "" : ", ") + k;
  throw ConfigError(std::string("unknown ") + what + " '" + text + "' (expected one of: " + known + ")");
}

inline Curve parse_curve(const std::string& s) {
  return lookup<Curve>({{"morton", Curve::morton}, {"hilbert", Curve::hilbert}}, s, "curve");
}
inline Metric parse_metric(const std::string& s) {
  return lookup<Metric>({{"q", Metric::q}, {"k", Metric::k}, {"v", Metric::v}, {"raw", Metric::raw}}, s,
                        "metric");
}
inline Assignment parse_assignment(const std::string& s) {
  return lookup<Assignment>(
      {{"bin_local", Assignment::bin_local}, {"global_similar", Assignment::global_similar}}, s,
      "assignment");
}
inline EnergyScope parse_scope(const std::string& s) {
  return lookup<EnergyScope>({{"global", EnergyScope::global}, {"local", EnergyScope::local}}, s,
                             "energy scope");
}
inline Matcher parse_matcher(const std::string& s) {
  return lookup<Matcher>({{"spatial", Matcher::spatial}, {"tome", Matcher::tome}}, s, "matcher");
}

// Writes to `path`, or to `fallback` when the path is empty or "-".
template <typename Fn>
void emit(const std::string& path, std::ostream& fallback, Fn&& write) {
  if (path.empty() || path == "-") {
    write(fallback);
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  write(f);
  f.flush();
  if (!f) throw ConfigError("write to '" + path + "' failed");
}

}  // namespace detail

struct SceneOptions {
  SceneSpec spec;

  void add(CLI::App* app) {
    app->add_option("--objects", spec.object_count, "Number of synthetic objects");
    app->add_option("--points", spec.points_per_object, "Points per object");
    app->add_option("--dim", spec.feature_dim, "Feature dimension");
    app->add_option("--sigma", spec.noise_sigma, "Feature noise standard deviation");
    app->add_option("--scene-seed", spec.seed, "Seed of the synthetic scene");
  }
};

// Flags shared by run, compare and analyze-te.
struct RunOptions {
  std::string input;
  SceneOptions scene;
  std::string curve = "morton";
  unsigned grid_bits = 10;
  std::size_t patch_size = 1024;
  std::size_t depth = 2;
  std::size_t heads = 4;
  bool mlp = false;
  double tau = 0.2;
  double rate = 0.8;
  double rate_plus = 0.97;
  std::string metric = "v";
  std::string energy_metric = "raw";
  bool per_head = true;
  std::size_t bins = 0;
  std::string assignment = "bin_local";
  std::string energy_scope = "global";
  std::size_t local_width = 0;
  std::string matcher = "spatial";
  bool proportional = false;
  double keep_fraction = 0.2;
  double voxel_size = 0.05;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--input", input, "Input cloud (.xyz or .ply); empty generates a scene");
    scene.add(app);
    app->add_option("--curve", curve, "Serialization curve: morton | hilbert");
    app->add_option("--grid-bits", grid_bits, "Quantization bits per axis")->check(CLI::Range(1u, 21u));
    app->add_option("--patch-size", patch_size, "Tokens per patch (T)");
    app->add_option("--depth", depth, "Attention layers in the stack");
    app->add_option("--heads", heads, "Attention heads");
    app->add_flag("--mlp,!--no-mlp", mlp, "Append an MLP block to every layer [default: off]");
    app->add_option("--tau", tau, "Energy threshold for the moderate branch");
    app->add_option("--rate", rate, "Moderate merge rate r");
    app->add_option("--rate-plus", rate_plus, "Aggressive merge rate r+");
    app->add_option("--metric", metric, "Merge similarity metric: q | k | v | raw");
    app->add_option("--energy-metric", energy_metric, "Features fed to the energy graph: q | k | v | raw");
    app->add_flag("--per-head,!--no-per-head", per_head, "Merge each head with its own map [default: on]");
    app->add_option("--bins", bins, "Fixed bin count K (0: K = floor(T(1-r)))");
    app->add_option("--assignment", assignment, "Source assignment: bin_local | global_similar");
    app->add_option("--energy-scope", energy_scope, "Energy graph: global | local");
    app->add_option("--local-width", local_width, "Local energy window (0: whole patch)");
    app->add_option("--matcher", matcher, "Matcher: spatial | tome");
    app->add_flag("--proportional,!--no-proportional", proportional,
                  "Bias attention by log cluster size [default: off]");
    app->add_option("--keep-fraction", keep_fraction, "Kept fraction for random_drop and fps baselines");
    app->add_option("--voxel-size", voxel_size, "Voxel edge for the voxel_grid baseline");
    app->add_option("--seed", seed, "Master seed (weights, bins, samplers)");
    app->add_option("--threads", threads, "Worker threads")->envname("TOKMERGE_THREADS");
    app->add_option("--out", out, "Output path ('-' or empty: stdout)");
  }

  RunConfig config(const std::string& mode) const {
    RunConfig c;
    c.input_path = input;
    c.scene = scene.spec;
    c.curve = detail::parse_curve(curve);
    c.grid_bits = grid_bits;
    c.patch_size = patch_size;
    c.depth = depth;
    c.heads = heads;
    c.mlp = mlp;
    c.seed = seed;
    c.policy.tau = tau;
    c.policy.r = rate;
    c.policy.r_plus = rate_plus;
    c.policy.metric = detail::parse_metric(metric);
    c.policy.energy_metric = detail::parse_metric(energy_metric);
    c.policy.per_head = per_head;
    c.policy.fixed_bins = bins;
    c.policy.assignment = detail::parse_assignment(assignment);
    c.policy.energy_scope = detail::parse_scope(energy_scope);
    c.policy.local_width = local_width;
    c.policy.matcher = detail::parse_matcher(matcher);
    c.policy.proportional_attention = proportional;
    c.policy.seed = seed;
    c.mode = Mode::parse(mode);
    c.sampler.keep_fraction = keep_fraction;
    c.sampler.voxel_size = voxel_size;
    c.threads = threads == 0 ? 1 : threads;
    return c;
  }
};

// Aggressive rate paired with a swept moderate rate: keeps the default
// pairing (0.8 -> 0.97) and maps 0 to 0, via 1 - (1 - rho)^alpha.
inline double paired_aggressive_rate(double rho) {
  static const double alpha = std::log(1.0 - 0.97) / std::log(1.0 - 0.8);
  return 1.0 - std::pow(1.0 - rho, alpha);
}

inline nlohmann::json analyze_te(const RunConfig& base, std::span<const double> rates) {
  if (rates.empty()) throw ConfigError("analyze-te: no rates given");
  const PointCloud cloud = load_input(base);
  cloud.validate();
  const PatchSet patches = partition(serialize(cloud, base.curve, base.grid_bits), base.patch_size);
  const LayerStack stack = make_stack(base.depth, cloud.dim(), base.heads,
                                      tokmerge::detail::weight_seed(base.seed), base.mlp);
  const auto snaps = run_stack(cloud.feats, patches, stack, base.threads);
  std::vector<Matrix> inputs{cloud.feats};
  for (std::size_t l = 0; l + 1 < snaps.size(); ++l) inputs.push_back(snaps[l]);

  nlohmann::json blocks = nlohmann::json::array();
  for (double rho : rates) {
    if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("analyze-te: rates must lie in [0, 1)");
    MergePolicy policy = base.policy;
    policy.r = rho;
    policy.r_plus = paired_aggressive_rate(rho);
    const TEReport report = layerwise_te(inputs, patches, stack, policy, base.threads);
    blocks.push_back({{"rate", rho}, {"rate_plus", policy.r_plus}, {"layers", to_json(report)}});
  }
  return {{"schema_version", kSchemaVersion}, {"seed", base.seed}, {"points", cloud.size()},
          {"rates", std::move(blocks)}};
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adaptive token merging for serialized point-cloud attention", "tokmerge"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML-style config file; flags override its values");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic multi-object scene as .xyz");
  SceneOptions gen_scene;
  std::string gen_out;
  gen_scene.add(gen);
  gen->add_option("--seed", gen_scene.spec.seed, "Scene seed (alias of --scene-seed)");
  gen->add_option("--out", gen_out, "Output path")->required();

  // serialize
  auto* ser = app.add_subcommand("serialize", "Print the serialized order and patch layout as CSV");
  std::string ser_input, ser_curve = "morton", ser_out;
  unsigned ser_bits = 10;
  std::size_t ser_patch = 1024;
  ser->add_option("--input", ser_input, "Input cloud (.xyz or .ply)")->required();
  ser->add_option("--curve", ser_curve, "Serialization curve: morton | hilbert");
  ser->add_option("--grid-bits", ser_bits, "Quantization bits per axis")->check(CLI::Range(1u, 21u));
  ser->add_option("--patch-size", ser_patch, "Tokens per patch (T)");
  ser->add_option("--out", ser_out, "Output path ('-' or empty: stdout)");

  // run
  auto* run_cmd = app.add_subcommand("run", "Run one mode over the stack and write a BenchRecord JSON");
  RunOptions run_opts;
  std::string run_mode = "merged";
  run_opts.add(run_cmd);
  run_cmd->add_option("--mode", run_mode,
                      "dense | merged | mixer:<avg_pool|shuffle_pool|pool_attn|progressive_tome|projection>"
                      " | baseline:<random_drop|fps|voxel_grid>");

  // compare
  auto* cmp = app.add_subcommand("compare", "Run several modes against a dense reference");
  RunOptions cmp_opts;
  std::vector<std::string> cmp_modes{"dense", "merged"};
  std::string cmp_format = "csv";
  cmp_opts.add(cmp);
  cmp->add_option("--modes", cmp_modes, "Comma-separated mode list")->delimiter(',');
  cmp->add_option("--format", cmp_format, "Output format")->check(CLI::IsMember({"csv", "json"}));

  // analyze-te
  auto* te = app.add_subcommand("analyze-te", "Per-layer transfer entropy for scenarios A/B/C");
  RunOptions te_opts;
  std::vector<double> te_rates{0.7};
  te_opts.add(te);
  te->add_option("--rates", te_rates, "Comma-separated moderate merge rates")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      const PointCloud cloud = generate_scene(gen_scene.spec);
      detail::emit(gen_out, out, [&](std::ostream& os) { write_cloud(os, cloud, CloudFormat::xyz); });
    } else if (ser->parsed()) {
      const PointCloud cloud = load_cloud(ser_input);
      const SerializedOrder order = serialize(cloud, detail::parse_curve(ser_curve), ser_bits);
      const PatchSet patches = partition(order, ser_patch);
      const auto cells = quantize(cloud.coords, ser_bits);
      detail::emit(ser_out, out, [&](std::ostream& os) {
        os << "rank,index,patch,code\n";
        for (std::size_t r = 0; r < order.perm.size(); ++r) {
          const std::size_t i = order.perm[r];
          os << r << ',' << i << ',' << r / ser_patch << ','
             << curve_encode(order.curve, cells[i], ser_bits) << '\n';
        }
      });
      err << patches.count() << " patches of " << ser_patch << " slots, "
          << patches.count() * ser_patch - cloud.size() << " padded\n";
    } else if (run_cmd->parsed()) {
      const BenchRecord rec = run(run_opts.config(run_mode));
      detail::emit(run_opts.out, out, [&](std::ostream& os) { os << to_json(rec).dump(2) << '\n'; });
    } else if (cmp->parsed()) {
      std::vector<RunConfig> configs;
      for (const auto& m : cmp_modes) configs.push_back(cmp_opts.config(m));
      const auto rows = compare(configs);
      detail::emit(cmp_opts.out, out, [&](std::ostream& os) {
        if (cmp_format == "json")
          os << to_json(std::span<const ComparisonRow>(rows)).dump(2) << '\n';
        else
          write_comparison_csv(os, rows);
      });
    } else if (te->parsed()) {
      RunConfig base = te_opts.config("dense");
      const auto report = analyze_te(base, te_rates);
      detail::emit(te_opts.out, out, [&](std::ostream& os) { os << report.dump(2) << '\n'; });
    }
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}

}  // namespace tokmerge::cli
