#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "span/matrix.hpp"

namespace span {

// Grid position of one patch. Ordering is row-major: y first, then x.
struct Coord {
  std::int32_t x = 0;
  std::int32_t y = 0;

  friend constexpr bool operator==(const Coord&, const Coord&) = default;
  friend constexpr std::strong_ordering operator<=>(const Coord& a, const Coord& b) {
    if (auto c = a.y <=> b.y; c != 0) return c;
    return a.x <=> b.x;
  }
};

std::string to_string(const Coord& c);

// Canonical sparse 2-D map: coords sorted row-major and duplicate free, one
// feature row per coord, plus optional context-token rows of the same width.
template <class T>
struct SparseMap {
  std::vector<Coord> coords;
  Matrix<T> features;
  Matrix<T> context;

  std::size_t size() const noexcept { return coords.size(); }
  std::size_t feature_dim() const noexcept { return features.cols(); }
  std::size_t num_ctx() const noexcept { return context.rows(); }

  template <class U>
  SparseMap<U> cast() const {
    return SparseMap<U>{coords, features.template cast<U>(), context.template cast<U>()};
  }

  friend bool operator==(const SparseMap&, const SparseMap&) = default;
};

// Sorts into canonical order, permuting feature rows along. Context rows are
// zero-initialised with the feature width.
template <class T>
SparseMap<T> build_sparse_map(std::vector<Coord> coords, const Matrix<T>& features, std::size_t num_ctx = 0);

bool is_canonical(std::span<const Coord> coords);

struct DenseIndexGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  // cells[y * width + x] = 1-based token id, 0 for empty.
  std::vector<std::uint32_t> cells;

  std::uint32_t at(std::size_t y, std::size_t x) const noexcept { return cells[y * width + x]; }
};

DenseIndexGrid densify_index_grid(std::span<const Coord> coords);

template <class T>
DenseIndexGrid densify_index_grid(const SparseMap<T>& map) {
  return densify_index_grid(map.coords);
}

// Pixel rectangle as produced by a tissue contour.
struct Rect {
  std::int64_t start_x = 0;
  std::int64_t start_y = 0;
  std::int64_t w = 0;
  std::int64_t h = 0;

  friend bool operator==(const Rect&, const Rect&) = default;
};

// Snaps the start down to the step grid and grows the size by the removed amount.
Rect align_rect(const Rect& r, std::int64_t step);

// Grid coordinates of every full step x step tile inside an aligned rect, row-major.
std::vector<Coord> patchify_rect(const Rect& r, std::int64_t step);

// ".span" binary layout, little endian:
//   "SPAN" | u32 version | u32 N | u32 d | u32 num_ctx |
//   N x (i32 x, i32 y) | N*d f32 features | num_ctx*d f32 context
inline constexpr std::uint32_t kSpanFormatVersion = 1;

std::vector<std::uint8_t> serialize(const SparseMap<float>& map);
SparseMap<float> deserialize(std::span<const std::uint8_t> bytes);

void save_span_file(const std::filesystem::path& path, const SparseMap<float>& map);
SparseMap<float> load_span_file(const std::filesystem::path& path);

}  // namespace span
