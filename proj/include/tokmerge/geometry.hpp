#pragma once

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "tokmerge/common.hpp"

namespace tokmerge {

// Point coordinates (N x 3, meters) with per-point feature vectors (N x C).
struct PointCloud {
  Matrix coords;
  Matrix feats;

  std::size_t size() const noexcept { return coords.rows(); }
  std::size_t dim() const noexcept { return feats.cols(); }

  void validate() const {
    if (coords.rows() == 0 || coords.cols() != 3)
      throw ConfigError("point cloud needs N >= 1 points with 3 coordinates");
    if (feats.rows() != coords.rows() || feats.cols() == 0)
      throw ConfigError("point cloud feature matrix must be N x C with C >= 1");
    check_finite(coords, "point coordinates");
    check_finite(feats, "point features");
  }
};

inline PointCloud subset(const PointCloud& cloud, std::span<const std::size_t> index) {
  return {gather_rows(cloud.coords, index), gather_rows(cloud.feats, index)};
}

struct SceneSpec {
  std::size_t object_count = 4;
  std::size_t points_per_object = 1024;
  std::size_t feature_dim = 64;
  double noise_sigma = 0.05;
  std::uint64_t seed = 7;
};

namespace detail {

// Random unit vectors, made mutually orthogonal by Gram-Schmidt while the
// count fits in the dimension.
inline Matrix object_bases(std::size_t count, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix bases(count, dim);
  for (std::size_t o = 0; o < count; ++o) {
    auto b = bases.row(o);
    for (;;) {
      for (auto& v : b) v = normal(rng);
      if (o < dim) {
        for (std::size_t p = 0; p < o; ++p) {
          auto prev = bases.row(p);
          const double proj = dot(b, prev);
          for (std::size_t c = 0; c < dim; ++c) b[c] -= proj * prev[c];
        }
      }
      const double n = norm(b);
      if (n > 1e-6) {
        for (auto& v : b) v /= n;
        break;
      }
    }
  }
  return bases;
}

}  // namespace detail

// Objects are laid out in a row along x, object o filling the box
// [2o, 2o+1] x [0, 0.25] x [0, 0.25]. The flat boxes keep each object a
// contiguous run under Morton ordering. Points are stored object by object.
inline PointCloud generate_scene(const SceneSpec& spec) {
  if (spec.object_count == 0 || spec.points_per_object == 0 || spec.feature_dim == 0)
    throw ConfigError("generate_scene: object, point and feature counts must be >= 1");
  if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma))
    throw ConfigError("generate_scene: noise sigma must be a finite value >= 0");

  std::mt19937_64 rng(spec.seed);
  const Matrix bases = detail::object_bases(spec.object_count, spec.feature_dim, rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const std::size_t n = spec.object_count * spec.points_per_object;
  PointCloud cloud{Matrix(n, 3), Matrix(n, spec.feature_dim)};
  std::size_t i = 0;
  for (std::size_t o = 0; o < spec.object_count; ++o) {
    for (std::size_t p = 0; p < spec.points_per_object; ++p, ++i) {
      cloud.coords(i, 0) = 2.0 * static_cast<double>(o) + unit(rng);
      cloud.coords(i, 1) = 0.25 * unit(rng);
      cloud.coords(i, 2) = 0.25 * unit(rng);
      for (std::size_t c = 0; c < spec.feature_dim; ++c) {
        const double eps = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(rng) : 0.0;
        cloud.feats(i, c) = bases(o, c) + eps;
      }
    }
  }
  return cloud;
}

enum class CloudFormat { xyz, ply_ascii };

inline CloudFormat format_from_path(std::string_view path) {
  if (path.ends_with(".ply")) return CloudFormat::ply_ascii;
  return CloudFormat::xyz;
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double parse_value(std::string_view tok, const std::string& path, std::size_t line_no) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ConfigError(path + ":" + std::to_string(line_no) + ": cannot parse value '" +
                      std::string(tok) + "'");
  if (!std::isfinite(v))
    throw ConfigError(path + ":" + std::to_string(line_no) + ": non-finite value '" +
                      std::string(tok) + "'");
  return v;
}

// Coordinates scaled into [0, 1] by the bounding box (one scale for all axes).
inline Matrix normalized_coords(const Matrix& coords) {
  double lo[3], hi[3];
  for (int a = 0; a < 3; ++a) lo[a] = hi[a] = coords(0, a);
  for (std::size_t i = 0; i < coords.rows(); ++i)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], coords(i, a));
      hi[a] = std::max(hi[a], coords(i, a));
    }
  const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  Matrix out(coords.rows(), 3);
  for (std::size_t i = 0; i < coords.rows(); ++i)
    for (int a = 0; a < 3; ++a)
      out(i, a) = extent > 0.0 ? (coords(i, a) - lo[a]) / extent : 0.0;
  return out;
}

inline PointCloud assemble(const std::vector<std::vector<double>>& rows, const std::string& path) {
  if (rows.empty()) throw ConfigError(path + ": no points");
  const std::size_t width = rows.front().size();
  PointCloud cloud{Matrix(rows.size(), 3), Matrix()};
  const std::size_t c = width - 3;
  if (c > 0) cloud.feats = Matrix(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t a = 0; a < 3; ++a) cloud.coords(i, a) = rows[i][a];
    for (std::size_t k = 0; k < c; ++k) cloud.feats(i, k) = rows[i][3 + k];
  }
  if (c == 0) cloud.feats = normalized_coords(cloud.coords);
  cloud.validate();
  return cloud;
}

inline PointCloud read_xyz(std::istream& in, const std::string& path) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto toks = split_ws(line);
    if (toks.empty() || toks.front().starts_with("#")) continue;
    if (toks.size() < 3)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected at least 3 columns");
    if (!rows.empty() && toks.size() != rows.front().size())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": column count " +
                        std::to_string(toks.size()) + " differs from first row (" +
                        std::to_string(rows.front().size()) + ")");
    std::vector<double> row;
    row.reserve(toks.size());
    for (auto t : toks) row.push_back(parse_value(t, path, line_no));
    rows.push_back(std::move(row));
  }
  return assemble(rows, path);
}

inline PointCloud read_ply(std::istream& in, const std::string& path) {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    return ConfigError(path + ":" + std::to_string(line_no) + ": " + msg);
  };

  if (!std::getline(in, line) || (++line_no, split_ws(line) != std::vector<std::string_view>{"ply"}))
    throw fail("missing 'ply' magic");

  std::size_t vertex_count = 0;
  bool in_vertex = false;
  bool seen_vertex = false;
  std::size_t elements_before_vertex_lines = 0;
  std::vector<std::string> props;
  for (;;) {
    if (!std::getline(in, line)) throw fail("unterminated header");
    ++line_no;
    auto toks = split_ws(line);
    if (toks.empty() || toks[0] == "comment" || toks[0] == "obj_info") continue;
    if (toks[0] == "end_header") break;
    if (toks[0] == "format") {
      if (toks.size() < 2 || toks[1] != "ascii") throw fail("only ascii PLY is supported");
    } else if (toks[0] == "element") {
      if (toks.size() != 3) throw fail("malformed element line");
      in_vertex = toks[1] == "vertex";
      std::size_t count = 0;
      auto [p, ec] = std::from_chars(toks[2].data(), toks[2].data() + toks[2].size(), count);
      if (ec != std::errc()) throw fail("bad element count");
      if (in_vertex) {
        vertex_count = count;
        seen_vertex = true;
      } else if (!seen_vertex) {
        elements_before_vertex_lines += count;
      }
    } else if (toks[0] == "property") {
      if (in_vertex) {
        if (toks.size() != 3 || toks[1] == "list") throw fail("unsupported vertex property");
        props.emplace_back(toks[2]);
      }
    } else {
      throw fail("unknown header keyword '" + std::string(toks[0]) + "'");
    }
  }
  if (!seen_vertex || vertex_count == 0) throw fail("no vertex element");

  auto find = [&](std::string_view name) -> std::ptrdiff_t {
    auto it = std::find(props.begin(), props.end(), name);
    return it == props.end() ? -1 : it - props.begin();
  };
  const std::ptrdiff_t ix = find("x"), iy = find("y"), iz = find("z");
  if (ix < 0 || iy < 0 || iz < 0) throw fail("vertex element lacks x/y/z properties");
  std::vector<std::size_t> feature_cols;
  for (std::size_t p = 0; p < props.size(); ++p)
    if (static_cast<std::ptrdiff_t>(p) != ix && static_cast<std::ptrdiff_t>(p) != iy &&
        static_cast<std::ptrdiff_t>(p) != iz)
      feature_cols.push_back(p);

  for (std::size_t skipped = 0; skipped < elements_before_vertex_lines;) {
    if (!std::getline(in, line)) throw fail("truncated body");
    ++line_no;
    if (!split_ws(line).empty()) ++skipped;
  }

  std::vector<std::vector<double>> rows;
  rows.reserve(vertex_count);
  while (rows.size() < vertex_count) {
    if (!std::getline(in, line)) throw fail("expected " + std::to_string(vertex_count) +
                                            " vertices, found " + std::to_string(rows.size()));
    ++line_no;
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != props.size())
      throw fail("vertex has " + std::to_string(toks.size()) + " values, header declares " +
                 std::to_string(props.size()));
    std::vector<double> values;
    for (auto t : toks) values.push_back(parse_value(t, path, line_no));
    std::vector<double> row{values[ix], values[iy], values[iz]};
    for (auto c : feature_cols) row.push_back(values[c]);
    rows.push_back(std::move(row));
  }
  return assemble(rows, path);
}

}  // namespace detail

inline PointCloud load_cloud(const std::string& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  return format == CloudFormat::xyz ? detail::read_xyz(in, path) : detail::read_ply(in, path);
}

inline PointCloud load_cloud(const std::string& path) {
  return load_cloud(path, format_from_path(path));
}

inline PointCloud parse_cloud(const std::string& text, CloudFormat format,
                              const std::string& name = "<memory>") {
  std::istringstream in(text);
  return format == CloudFormat::xyz ? detail::read_xyz(in, name) : detail::read_ply(in, name);
}

// Values are printed with 17 significant digits so ascii files round-trip exactly.
inline void write_cloud(std::ostream& out, const PointCloud& cloud, CloudFormat format) {
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  if (format == CloudFormat::ply_ascii) {
    out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n"
        << "property double x\nproperty double y\nproperty double z\n";
    for (std::size_t c = 0; c < cloud.dim(); ++c) out << "property double f" << c << "\n";
    out << "end_header\n";
  }
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t a = 0; a < 3; ++a) {
      if (a) out << ' ';
      put(cloud.coords(i, a));
    }
    for (std::size_t c = 0; c < cloud.dim(); ++c) {
      out << ' ';
      put(cloud.feats(i, c));
    }
    out << '\n';
  }
}

inline void save_cloud(const std::string& path, const PointCloud& cloud, CloudFormat format) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  write_cloud(out, cloud, format);
  if (!out) throw ConfigError("write failed for " + path);
}

}  // namespace tokmerge
