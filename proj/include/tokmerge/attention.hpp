#pragma once

#include <random>

#include "tokmerge/serialization.hpp"

namespace tokmerge {

// Instrumented operation counts. Not thread-safe; give each worker its own
// and combine with operator+=.
struct OpCounter {
  std::uint64_t projection_macs = 0;
  std::uint64_t score_macs = 0;      // q.k products plus the weighted sum of v
  std::uint64_t softmax_entries = 0;
  std::uint64_t graph_macs = 0;
  std::uint64_t mlp_macs = 0;

  OpCounter& operator+=(const OpCounter& o) {
    projection_macs += o.projection_macs;
    score_macs += o.score_macs;
    softmax_entries += o.softmax_entries;
    graph_macs += o.graph_macs;
    mlp_macs += o.mlp_macs;
    return *this;
  }
};

struct AttnParams {
  std::size_t d_model = 0;
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  Matrix wq, wk, wv, wo;  // d_model x d_model, applied as x * W

  void validate() const {
    if (d_model == 0 || heads == 0 || heads * head_dim != d_model)
      throw ConfigError("attention: d_model must equal heads * head_dim");
    for (const Matrix* w : {&wq, &wk, &wv, &wo}) {
      if (w->rows() != d_model || w->cols() != d_model)
        throw ConfigError("attention: weight matrices must be d_model x d_model");
      check_finite(*w, "attention weights");
    }
  }
};

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = scale * normal(rng);
  return m;
}

// Seeded Gaussian weights scaled by 1/sqrt(d_model).
inline AttnParams make_attn_params(std::size_t d_model, std::size_t heads, std::uint64_t seed) {
  if (heads == 0 || d_model % heads != 0)
    throw ConfigError("attention: heads must divide d_model (d_model=" + std::to_string(d_model) +
                      ", heads=" + std::to_string(heads) + ")");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  AttnParams p;
  p.d_model = d_model;
  p.heads = heads;
  p.head_dim = d_model / heads;
  p.wq = gaussian_matrix(d_model, d_model, scale, derive_seed(seed, 0));
  p.wk = gaussian_matrix(d_model, d_model, scale, derive_seed(seed, 1));
  p.wv = gaussian_matrix(d_model, d_model, scale, derive_seed(seed, 2));
  p.wo = gaussian_matrix(d_model, d_model, scale, derive_seed(seed, 3));
  return p;
}

inline AttnParams zero_attn_params(std::size_t d_model, std::size_t heads) {
  AttnParams p = make_attn_params(d_model, heads, 0);
  for (Matrix* w : {&p.wq, &p.wk, &p.wv, &p.wo}) *w = Matrix(d_model, d_model);
  return p;
}

// x * w, counting rows * in * out multiply-accumulates.
inline Matrix matmul(const Matrix& x, const Matrix& w, std::uint64_t* macs = nullptr) {
  if (x.cols() != w.rows()) throw ConfigError("matmul: inner dimensions differ");
  Matrix out(x.rows(), w.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double a = x(i, k);
      auto wr = w.row(k);
      for (std::size_t j = 0; j < w.cols(); ++j) o[j] += a * wr[j];
    }
  }
  if (macs) *macs += x.rows() * x.cols() * w.cols();
  return out;
}

struct Projections {
  Matrix q, k, v;
};

inline Projections project_qkv(const Matrix& x, const AttnParams& p, OpCounter* counter = nullptr) {
  std::uint64_t* macs = counter ? &counter->projection_macs : nullptr;
  return {matmul(x, p.wq, macs), matmul(x, p.wk, macs), matmul(x, p.wv, macs)};
}

// Scaled dot-product attention for one head over the column slice
// [col, col + head_dim) of q/k/v, writing into the same slice of `out`.
// `key_bias` (empty or one entry per key row) is added to the scores.
inline void attend_head(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t col,
                        std::size_t head_dim, std::span<const double> key_bias, Matrix& out,
                        std::size_t out_col, OpCounter* counter = nullptr) {
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<double> scores(nk);
  for (std::size_t i = 0; i < nq; ++i) {
    auto qi = q.row(i).subspan(col, head_dim);
    double peak = -INFINITY;
    for (std::size_t j = 0; j < nk; ++j) {
      double s = dot(qi, k.row(j).subspan(col, head_dim)) * inv_sqrt_d;
      if (!key_bias.empty()) s += key_bias[j];
      scores[j] = s;
      peak = std::max(peak, s);
    }
    if (!std::isfinite(peak)) throw NumericError("attention: non-finite score");
    double total = 0.0;
    for (auto& s : scores) {
      s = std::exp(s - peak);
      total += s;
    }
    auto o = out.row(i).subspan(out_col, head_dim);
    std::fill(o.begin(), o.end(), 0.0);
    for (std::size_t j = 0; j < nk; ++j) {
      const double w = scores[j] / total;
      auto vj = v.row(j).subspan(col, head_dim);
      for (std::size_t c = 0; c < head_dim; ++c) o[c] += w * vj[c];
    }
    for (double val : o)
      if (!std::isfinite(val)) throw NumericError("attention: non-finite output");
  }
  if (counter) {
    counter->score_macs += 2 * nq * nk * head_dim;
    counter->softmax_entries += nq * nk;
  }
}

// Multi-head attention over all rows of x (no padding). Returns n x d_model
// after the output projection.
inline Matrix attention_rows(const Matrix& x, const AttnParams& p, OpCounter* counter = nullptr) {
  const Projections qkv = project_qkv(x, p, counter);
  Matrix heads(x.rows(), p.d_model);
  for (std::size_t h = 0; h < p.heads; ++h)
    attend_head(qkv.q, qkv.k, qkv.v, h * p.head_dim, p.head_dim, {}, heads, h * p.head_dim,
                counter);
  return matmul(heads, p.wo, counter ? &counter->projection_macs : nullptr);
}

// Local attention within one patch. Masked (padded) slots are excluded from
// every softmax and receive zero output.
inline Matrix dense_patch_attention(const Matrix& patch, std::span<const std::uint8_t> pad_mask,
                                    const AttnParams& p, OpCounter* counter = nullptr) {
  if (patch.cols() != p.d_model) throw ConfigError("attention: feature width differs from d_model");
  if (!pad_mask.empty() && pad_mask.size() != patch.rows())
    throw ConfigError("attention: mask length differs from patch rows");
  std::vector<std::size_t> live;
  for (std::size_t s = 0; s < patch.rows(); ++s)
    if (pad_mask.empty() || !pad_mask[s]) live.push_back(s);
  Matrix out(patch.rows(), p.d_model);
  if (live.empty()) return out;
  const Matrix y = attention_rows(gather_rows(patch, live), p, counter);
  for (std::size_t i = 0; i < live.size(); ++i) {
    auto r = y.row(i);
    std::copy(r.begin(), r.end(), out.row(live[i]).begin());
  }
  return out;
}

struct MlpParams {
  Matrix w1;  // d_model x hidden
  Matrix w2;  // hidden x d_model
};

inline MlpParams make_mlp_params(std::size_t d_model, std::size_t hidden, std::uint64_t seed) {
  return {gaussian_matrix(d_model, hidden, 1.0 / std::sqrt(static_cast<double>(d_model)),
                          derive_seed(seed, 10)),
          gaussian_matrix(hidden, d_model, 1.0 / std::sqrt(static_cast<double>(hidden)),
                          derive_seed(seed, 11))};
}

inline Matrix apply_mlp(const Matrix& x, const MlpParams& m, OpCounter* counter = nullptr) {
  std::uint64_t* macs = counter ? &counter->mlp_macs : nullptr;
  Matrix h = matmul(x, m.w1, macs);
  for (auto& v : h.values()) v = std::max(0.0, v);
  return matmul(h, m.w2, macs);
}

// Attention blocks applied in sequence: x <- x + attn(x), then optionally
// x <- x + mlp(x).
struct LayerStack {
  std::vector<AttnParams> layers;
  std::vector<MlpParams> mlps;  // empty, or one per layer

  std::size_t depth() const noexcept { return layers.size(); }
  bool has_mlp() const noexcept { return !mlps.empty(); }

  void validate() const {
    if (layers.empty()) throw ConfigError("layer stack needs depth >= 1");
    for (const auto& l : layers) {
      l.validate();
      if (l.d_model != layers.front().d_model) throw ConfigError("layer widths differ");
    }
    if (!mlps.empty() && mlps.size() != layers.size())
      throw ConfigError("layer stack: one MLP per layer required");
  }
};

inline LayerStack make_stack(std::size_t depth, std::size_t d_model, std::size_t heads,
                             std::uint64_t seed, bool with_mlp = false) {
  if (depth == 0) throw ConfigError("layer stack needs depth >= 1");
  LayerStack s;
  for (std::size_t l = 0; l < depth; ++l) {
    s.layers.push_back(make_attn_params(d_model, heads, derive_seed(seed, 100 + l)));
    if (with_mlp) s.mlps.push_back(make_mlp_params(d_model, 4 * d_model, derive_seed(seed, 200 + l)));
  }
  return s;
}

// Evaluates fn(k, valid patch rows) for every patch and scatters the
// returned rows back to point order. Patches run concurrently; each point
// belongs to exactly one valid slot so writes never overlap.
template <typename PatchFn>
Matrix apply_patchwise(const Matrix& x, const PatchSet& patches, unsigned threads, PatchFn&& fn) {
  if (x.rows() != patches.point_count()) throw ConfigError("feature rows differ from point count");
  Matrix y(x.rows(), x.cols());
  parallel_for(patches.count(), threads, [&](std::size_t k) {
    const auto idx = patches.valid_points(k);
    const Matrix out = fn(k, gather_rows(x, idx));
    if (out.rows() != idx.size() || out.cols() != x.cols())
      throw ConfigError("patch kernel returned a mis-shaped block");
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto r = out.row(i);
      std::copy(r.begin(), r.end(), y.row(idx[i]).begin());
    }
  });
  return y;
}

inline void add_inplace(Matrix& x, const Matrix& y) {
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) xv[i] += yv[i];
}

// Applies every layer patch-wise with residual connections. Returns the
// features after each layer (snapshots[l] is the output of layer l).
inline std::vector<Matrix> run_stack(const Matrix& feats, const PatchSet& patches,
                                     const LayerStack& stack, unsigned threads = 1) {
  stack.validate();
  if (feats.cols() != stack.layers.front().d_model)
    throw ConfigError("run_stack: feature width " + std::to_string(feats.cols()) +
                      " differs from d_model " + std::to_string(stack.layers.front().d_model));
  std::vector<Matrix> snapshots;
  Matrix x = feats;
  for (std::size_t l = 0; l < stack.depth(); ++l) {
    const auto& params = stack.layers[l];
    add_inplace(x, apply_patchwise(x, patches, threads, [&](std::size_t, const Matrix& rows) {
                  return attention_rows(rows, params);
                }));
    if (stack.has_mlp()) add_inplace(x, apply_mlp(x, stack.mlps[l]));
    snapshots.push_back(x);
  }
  return snapshots;
}

}  // namespace tokmerge
