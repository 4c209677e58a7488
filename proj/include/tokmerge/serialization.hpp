#pragma once

#include <array>
#include <numeric>

#include "tokmerge/geometry.hpp"

namespace tokmerge {

enum class Curve { morton, hilbert };

inline constexpr unsigned kMaxGridBits = 21;

using GridCell = std::array<std::uint32_t, 3>;

inline void check_cell(const GridCell& cell, unsigned grid_bits) {
  if (grid_bits < 1 || grid_bits > kMaxGridBits)
    throw ConfigError("grid_bits must lie in [1, 21]");
  for (auto c : cell)
    if (c >> grid_bits) throw ConfigError("grid coordinate out of range for grid_bits");
}

// Bit-interleaved Z-order code: bit 3k holds x's bit k, 3k+1 y's, 3k+2 z's.
inline std::uint64_t morton_encode(const GridCell& cell, unsigned grid_bits) {
  check_cell(cell, grid_bits);
  std::uint64_t code = 0;
  for (unsigned k = 0; k < grid_bits; ++k)
    for (unsigned a = 0; a < 3; ++a)
      code |= static_cast<std::uint64_t>((cell[a] >> k) & 1U) << (3 * k + a);
  return code;
}

// 3D Hilbert index via Skilling's axes-to-transpose transform
// (AIP Conf. Proc. 707, 2004), then interleaving the transposed bits.
inline std::uint64_t hilbert_encode(const GridCell& cell, unsigned grid_bits) {
  check_cell(cell, grid_bits);
  std::uint32_t x[3] = {cell[0], cell[1], cell[2]};
  const std::uint32_t top = 1U << (grid_bits - 1);
  for (std::uint32_t q = top; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 0; i < 3; ++i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        const std::uint32_t t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  for (int i = 1; i < 3; ++i) x[i] ^= x[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t q = top; q > 1; q >>= 1)
    if (x[2] & q) t ^= q - 1;
  for (auto& v : x) v ^= t;

  std::uint64_t code = 0;
  for (int level = static_cast<int>(grid_bits) - 1; level >= 0; --level)
    for (int i = 0; i < 3; ++i) code = (code << 1) | ((x[i] >> level) & 1U);
  return code;
}

inline std::uint64_t curve_encode(Curve curve, const GridCell& cell, unsigned grid_bits) {
  return curve == Curve::morton ? morton_encode(cell, grid_bits) : hilbert_encode(cell, grid_bits);
}

struct SerializedOrder {
  std::vector<std::size_t> perm;  // serialized position -> original point index
  Curve curve = Curve::morton;
  unsigned grid_bits = 10;
};

// Grid cells over the bounding box, anchored at its min corner with one
// scale shared by all axes (set by the largest extent).
inline std::vector<GridCell> quantize(const Matrix& coords, unsigned grid_bits) {
  if (grid_bits < 1 || grid_bits > kMaxGridBits) throw ConfigError("grid_bits must lie in [1, 21]");
  const std::size_t n = coords.rows();
  std::array<double, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) lo[a] = hi[a] = coords(0, a);
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], coords(i, a));
      hi[a] = std::max(hi[a], coords(i, a));
    }
  const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  const double cells = static_cast<double>(1ULL << grid_bits);
  const auto max_cell = static_cast<std::uint32_t>((1ULL << grid_bits) - 1);
  std::vector<GridCell> out(n, GridCell{0, 0, 0});
  if (extent <= 0.0) return out;
  const double scale = cells / extent;
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) {
      const double c = std::floor((coords(i, a) - lo[a]) * scale);
      out[i][a] = std::min(max_cell, static_cast<std::uint32_t>(std::max(0.0, c)));
    }
  return out;
}

inline SerializedOrder serialize(const PointCloud& cloud, Curve curve, unsigned grid_bits) {
  if (cloud.size() == 0) throw ConfigError("serialize: empty cloud");
  const auto cells = quantize(cloud.coords, grid_bits);
  std::vector<std::uint64_t> codes(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) codes[i] = curve_encode(curve, cells[i], grid_bits);
  SerializedOrder order{std::vector<std::size_t>(cells.size()), curve, grid_bits};
  std::iota(order.perm.begin(), order.perm.end(), std::size_t{0});
  std::stable_sort(order.perm.begin(), order.perm.end(),
                   [&](std::size_t a, std::size_t b) { return codes[a] < codes[b]; });
  return order;
}

// Serialized sequence cut into ceil(N/T) patches of exactly T slots. The
// final patch is padded by repeating its last valid index; padded slots are
// flagged in pad_mask and must be ignored by every consumer.
class PatchSet {
 public:
  PatchSet() = default;
  PatchSet(std::vector<std::size_t> slots, std::size_t patch_size, std::size_t point_count)
      : slots_(std::move(slots)), patch_size_(patch_size), point_count_(point_count) {}

  std::size_t patch_size() const noexcept { return patch_size_; }
  std::size_t count() const noexcept { return patch_size_ ? slots_.size() / patch_size_ : 0; }
  std::size_t point_count() const noexcept { return point_count_; }

  // Non-padded slots of patch k; padding only ever occupies the tail.
  std::size_t valid(std::size_t k) const noexcept {
    const std::size_t begin = k * patch_size_;
    return std::min(patch_size_, point_count_ - begin);
  }
  bool padded(std::size_t k, std::size_t s) const noexcept { return s >= valid(k); }

  std::span<const std::size_t> patch(std::size_t k) const noexcept {
    return {slots_.data() + k * patch_size_, patch_size_};
  }
  std::span<const std::size_t> valid_points(std::size_t k) const noexcept {
    return {slots_.data() + k * patch_size_, valid(k)};
  }

  std::vector<std::uint8_t> pad_mask() const {
    std::vector<std::uint8_t> mask(slots_.size(), 0);
    for (std::size_t k = 0; k < count(); ++k)
      for (std::size_t s = valid(k); s < patch_size_; ++s) mask[k * patch_size_ + s] = 1;
    return mask;
  }

 private:
  std::vector<std::size_t> slots_;
  std::size_t patch_size_ = 0;
  std::size_t point_count_ = 0;
};

inline PatchSet partition(const SerializedOrder& order, std::size_t patch_size) {
  if (patch_size < 2) throw ConfigError("patch size must be >= 2");
  const std::size_t n = order.perm.size();
  if (n == 0) throw ConfigError("partition: empty order");
  const std::size_t k = (n + patch_size - 1) / patch_size;
  std::vector<std::size_t> slots(k * patch_size);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = order.perm[std::min(i, n - 1)];
  return PatchSet(std::move(slots), patch_size, n);
}

}  // namespace tokmerge
