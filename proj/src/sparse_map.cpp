#include "span/sparse_map.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>

#include "span/byte_io.hpp"
#include "span/error.hpp"

namespace span {

std::string to_string(const Coord& c) {
  return "(" + std::to_string(c.x) + "," + std::to_string(c.y) + ")";
}

bool is_canonical(std::span<const Coord> coords) {
  for (std::size_t i = 1; i < coords.size(); ++i)
    if (!(coords[i - 1] < coords[i])) return false;
  return true;
}

template <class T>
SparseMap<T> build_sparse_map(std::vector<Coord> coords, const Matrix<T>& features, std::size_t num_ctx) {
  if (coords.size() != features.rows())
    throw Error(ErrorCode::DimensionMismatch, std::to_string(coords.size()) + " coords vs " +
                                                  std::to_string(features.rows()) + " feature rows");
  for (const Coord& c : coords)
    if (c.x < 0 || c.y < 0) throw Error(ErrorCode::InvalidArgument, "negative coordinate " + to_string(c));

  std::vector<std::size_t> order(coords.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return coords[a] < coords[b]; });

  SparseMap<T> map;
  map.coords.reserve(coords.size());
  map.features = Matrix<T>(coords.size(), features.cols());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Coord c = coords[order[i]];
    if (i > 0 && map.coords.back() == c) throw Error(ErrorCode::DuplicateCoordinate, to_string(c));
    map.coords.push_back(c);
    std::copy_n(features.row(order[i]).data(), features.cols(), map.features.row(i).data());
  }
  map.context = Matrix<T>(num_ctx, features.cols());
  return map;
}

template SparseMap<float> build_sparse_map(std::vector<Coord>, const Matrix<float>&, std::size_t);
template SparseMap<double> build_sparse_map(std::vector<Coord>, const Matrix<double>&, std::size_t);

DenseIndexGrid densify_index_grid(std::span<const Coord> coords) {
  if (coords.empty()) throw Error(ErrorCode::EmptyMap, "cannot densify an empty map");
  std::int32_t max_x = 0, max_y = 0;
  for (const Coord& c : coords) {
    max_x = std::max(max_x, c.x);
    max_y = std::max(max_y, c.y);
  }
  DenseIndexGrid grid;
  grid.height = static_cast<std::size_t>(max_y) + 1;
  grid.width = static_cast<std::size_t>(max_x) + 1;
  grid.cells.assign(grid.height * grid.width, 0);
  for (std::size_t i = 0; i < coords.size(); ++i)
    grid.cells[static_cast<std::size_t>(coords[i].y) * grid.width + static_cast<std::size_t>(coords[i].x)] =
        static_cast<std::uint32_t>(i + 1);
  return grid;
}

Rect align_rect(const Rect& r, std::int64_t step) {
  if (step <= 0) throw Error(ErrorCode::InvalidArgument, "step must be positive");
  Rect out = r;
  out.w += r.start_x % step;
  out.h += r.start_y % step;
  out.start_x -= r.start_x % step;
  out.start_y -= r.start_y % step;
  return out;
}

std::vector<Coord> patchify_rect(const Rect& r, std::int64_t step) {
  if (step <= 0) throw Error(ErrorCode::InvalidArgument, "step must be positive");
  if (r.start_x % step != 0 || r.start_y % step != 0)
    throw Error(ErrorCode::Misaligned, "rect start (" + std::to_string(r.start_x) + "," +
                                           std::to_string(r.start_y) + ") is not a multiple of " +
                                           std::to_string(step));
  const std::int64_t cols = std::max<std::int64_t>(r.w, 0) / step;
  const std::int64_t rows = std::max<std::int64_t>(r.h, 0) / step;
  std::vector<Coord> out;
  out.reserve(static_cast<std::size_t>(cols * rows));
  for (std::int64_t j = 0; j < rows; ++j)
    for (std::int64_t i = 0; i < cols; ++i)
      out.push_back({static_cast<std::int32_t>(r.start_x / step + i), static_cast<std::int32_t>(r.start_y / step + j)});
  return out;
}

std::vector<std::uint8_t> serialize(const SparseMap<float>& map) {
  detail::ByteWriter w;
  w.bytes("SPAN", 4);
  w.u32(kSpanFormatVersion);
  w.u32(static_cast<std::uint32_t>(map.size()));
  w.u32(static_cast<std::uint32_t>(map.feature_dim()));
  w.u32(static_cast<std::uint32_t>(map.num_ctx()));
  for (const Coord& c : map.coords) {
    w.i32(c.x);
    w.i32(c.y);
  }
  for (float v : map.features.storage()) w.f32(v);
  for (float v : map.context.storage()) w.f32(v);
  return std::move(w.buffer());
}

SparseMap<float> deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (!r.magic("SPAN")) throw Error(ErrorCode::BadMagic, "not a .span stream");
  const std::uint32_t version = r.u32("version");
  if (version != kSpanFormatVersion)
    throw Error(ErrorCode::VersionUnsupported, "version " + std::to_string(version));
  const std::uint32_t n = r.u32("N");
  const std::uint32_t d = r.u32("d");
  const std::uint32_t num_ctx = r.u32("num_ctx");
  r.need(std::size_t{n} * 8, "coords");
  SparseMap<float> map;
  map.coords.resize(n);
  for (auto& c : map.coords) {
    c.x = r.i32("coords");
    c.y = r.i32("coords");
  }
  r.need(std::size_t{n} * d * 4, "features");
  map.features = Matrix<float>(n, d);
  for (float& v : map.features.storage()) v = r.f32("features");
  r.need(std::size_t{num_ctx} * d * 4, "context");
  map.context = Matrix<float>(num_ctx, d);
  for (float& v : map.context.storage()) v = r.f32("context");
  if (!is_canonical(map.coords)) throw Error(ErrorCode::InvalidArgument, "stream coordinates are not canonical");
  return map;
}

namespace detail {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path);
}

}  // namespace detail

void save_span_file(const std::filesystem::path& path, const SparseMap<float>& map) {
  detail::write_file(path.string(), serialize(map));
}

SparseMap<float> load_span_file(const std::filesystem::path& path) {
  return deserialize(detail::read_file(path.string()));
}

}  // namespace span
