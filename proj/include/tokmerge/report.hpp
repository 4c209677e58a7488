#pragma once

#include <cstdio>
#include <ostream>

#include "json.hpp"
#include "tokmerge/pipeline.hpp"

namespace tokmerge {

inline constexpr int kSchemaVersion = 1;

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Non-finite doubles have no JSON representation; they are written as null.
inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const TEEntry& e) {
  return {{"h_orig", json_number(e.h_orig)},
          {"h_merged", json_number(e.h_merged)},
          {"te_nats", json_number(e.te_nats)},
          {"transfer_rate", json_number(e.transfer_rate)}};
}

inline nlohmann::json to_json(const LayerFlops& f) {
  return {{"dense_flops", f.dense_total()},
          {"merged_flops", f.merged_total()},
          {"dense_attention_flops", f.dense_attention_flops},
          {"merged_attention_flops", f.merged_attention_flops},
          {"graph_flops", f.graph_flops},
          {"merge_overhead_flops", f.merge_overhead_flops},
          {"dense_mlp_flops", f.dense_mlp_flops},
          {"merged_mlp_flops", f.merged_mlp_flops}};
}

inline nlohmann::json to_json(const FlopsReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    auto j = to_json(r.layers[l]);
    j["layer"] = l;
    layers.push_back(std::move(j));
  }
  return {{"schema_version", kSchemaVersion},
          {"convention", kFlopsConvention},
          {"dense_flops", r.dense_flops},
          {"merged_flops", r.merged_flops},
          {"reduction_factor", json_number(r.reduction_factor)},
          {"layers", std::move(layers)}};
}

inline nlohmann::json to_json(const TEReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"layer", l.layer}, {"te_a", to_json(l.a)}, {"te_b", to_json(l.b)},
                      {"te_c", to_json(l.c)}});
  return layers;
}

inline nlohmann::json to_json(const BenchRecord& rec) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < rec.layers.size(); ++l) {
    const auto& lr = rec.layers[l];
    nlohmann::json j = to_json(rec.flops.layers[l]);
    j["layer"] = lr.layer;
    j["checksum"] = hex64(lr.checksum);
    j["kept_tokens"] = lr.kept_tokens;
    j["aggressive_patches"] = lr.aggressive_patches;
    if (lr.te) {
      j["te_nats"] = json_number(lr.te->te_nats);
      j["transfer_rate"] = json_number(lr.te->transfer_rate);
      j["h_orig"] = json_number(lr.te->h_orig);
      j["h_merged"] = json_number(lr.te->h_merged);
    }
    layers.push_back(std::move(j));
  }
  return {{"schema_version", kSchemaVersion},
          {"mode", rec.mode},
          {"seed", rec.seed},
          {"points", rec.points},
          {"patches", rec.patches},
          {"checksum", hex64(rec.combined_checksum())},
          {"flops_convention", kFlopsConvention},
          {"dense_flops", rec.flops.dense_flops},
          {"merged_flops", rec.flops.merged_flops},
          {"reduction_factor", json_number(rec.flops.reduction_factor)},
          {"elapsed_seconds", rec.elapsed_seconds},
          {"layers", std::move(layers)}};
}

// 6 significant digits (printf %.6g).
inline std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline void write_comparison_csv(std::ostream& out, std::span<const ComparisonRow> rows) {
  out << "schema_version,mode,flops,reduction,te_rate,rel_error\n";
  for (const auto& r : rows)
    out << kSchemaVersion << ',' << r.mode << ',' << csv_number(static_cast<double>(r.flops)) << ','
        << csv_number(r.reduction) << ',' << csv_number(r.te_rate) << ',' << csv_number(r.rel_error)
        << '\n';
}

inline nlohmann::json to_json(std::span<const ComparisonRow> rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"mode", r.mode},
                   {"flops", r.flops},
                   {"reduction_factor", json_number(r.reduction)},
                   {"transfer_rate", json_number(r.te_rate)},
                   {"rel_error", json_number(r.rel_error)}});
  return {{"schema_version", kSchemaVersion}, {"rows", std::move(arr)}};
}

}  // namespace tokmerge
