#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "span/error.hpp"
#include "span/sparse_map.hpp"

using namespace span;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected span::Error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("build_sparse_map sorts rows into row-major order") {
  const auto m = build_sparse_map<float>({{1, 0}, {0, 0}}, Matrix<float>(2, 1, std::vector<float>{2, 1}));
  CHECK(m.coords == std::vector<Coord>{{0, 0}, {1, 0}});
  CHECK(m.features(0, 0) == 1.0f);
  CHECK(m.features(1, 0) == 2.0f);
  CHECK(is_canonical(m.coords));
}

TEST_CASE("build_sparse_map rejects duplicates and length mismatch") {
  CHECK(code_of([] { build_sparse_map<float>({{0, 0}, {0, 0}}, Matrix<float>(2, 1)); }) ==
        ErrorCode::DuplicateCoordinate);
  CHECK(code_of([] { build_sparse_map<float>({{0, 0}, {1, 0}}, Matrix<float>(3, 1)); }) ==
        ErrorCode::DimensionMismatch);
}

TEST_CASE("build_sparse_map zero-initialises context rows") {
  const auto m = build_sparse_map<float>({{5, 3}}, Matrix<float>(1, 2, std::vector<float>{7, 8}), 1);
  CHECK(m.size() == 1);
  CHECK(m.feature_dim() == 2);
  REQUIRE(m.num_ctx() == 1);
  CHECK(m.context(0, 0) == 0.0f);
  CHECK(m.context(0, 1) == 0.0f);
}

TEST_CASE("canonicalisation is idempotent") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto m = test::random_map<float>(rng, 12, 40, 3, 1);
    CHECK(build_sparse_map(m.coords, m.features, 1) == m);
  }
}

TEST_CASE("densify_index_grid examples") {
  SUBCASE("single cell") {
    const auto g = densify_index_grid(std::vector<Coord>{{5, 3}});
    CHECK(g.height == 4);
    CHECK(g.width == 6);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 6; ++x) CHECK(g.at(y, x) == ((y == 3 && x == 5) ? 1u : 0u));
  }
  SUBCASE("one row") {
    const auto g = densify_index_grid(std::vector<Coord>{{0, 0}, {1, 0}});
    CHECK(g.height == 1);
    CHECK(g.width == 2);
    CHECK(g.cells == std::vector<std::uint32_t>{1, 2});
  }
  SUBCASE("one column with a gap") {
    const auto g = densify_index_grid(std::vector<Coord>{{0, 0}, {0, 2}});
    CHECK(g.height == 3);
    CHECK(g.width == 1);
    CHECK(g.cells == std::vector<std::uint32_t>{1, 0, 2});
  }
  SUBCASE("empty") {
    CHECK(code_of([] { densify_index_grid(std::vector<Coord>{}); }) == ErrorCode::EmptyMap);
  }
}

TEST_CASE("densify then collect reproduces coords") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const auto m = test::random_map<float>(rng, 17, 60, 1);
    const auto g = densify_index_grid(m);
    std::vector<Coord> back;
    std::uint32_t expect = 1;
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x)
        if (const auto v = g.at(y, x); v != 0) {
          CHECK(v == expect++);
          back.push_back({static_cast<int>(x), static_cast<int>(y)});
        }
    CHECK(back == m.coords);
  }
}

TEST_CASE("align_rect traces") {
  CHECK(align_rect({300, 450, 500, 500}, 224) == Rect{224, 448, 576, 502});
  CHECK(align_rect({0, 0, 224, 224}, 224) == Rect{0, 0, 224, 224});
  CHECK(align_rect({223, 1, 1, 1}, 224) == Rect{0, 0, 224, 2});
}

TEST_CASE("align_rect is idempotent and keeps end points") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::int64_t> pos(0, 5000), size(1, 3000), step(1, 512);
  for (int t = 0; t < 500; ++t) {
    const Rect r{pos(rng), pos(rng), size(rng), size(rng)};
    const std::int64_t s = step(rng);
    const Rect a = align_rect(r, s);
    CHECK(align_rect(a, s) == a);
    CHECK(a.start_x + a.w == r.start_x + r.w);
    CHECK(a.start_y + a.h == r.start_y + r.h);
    CHECK(a.start_x % s == 0);
    CHECK(a.start_y % s == 0);
  }
}

TEST_CASE("patchify_rect") {
  CHECK(patchify_rect({0, 0, 448, 224}, 224) == std::vector<Coord>{{0, 0}, {1, 0}});
  CHECK(patchify_rect({0, 0, 100, 100}, 224).empty());
  CHECK(code_of([] { patchify_rect({1, 0, 448, 224}, 224); }) == ErrorCode::Misaligned);
}

TEST_CASE("patchify_rect counts only full tiles") {
  // 576 px wide holds 2 full tiles from x = 224; 502 px tall holds 2 full rows from y = 448.
  const auto tiles = patchify_rect({224, 448, 576, 502}, 224);
  const std::vector<Coord> expect{{1, 2}, {2, 2}, {1, 3}, {2, 3}};
  CHECK(tiles == expect);
}

TEST_CASE("serialize round trip is bit exact") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    auto m = test::random_map<float>(rng, 30, 100, 5, 2);
    for (float& v : m.context.storage()) v = std::normal_distribution<float>()(rng);
    const auto bytes = serialize(m);
    CHECK(bytes.size() == 4 + 16 + m.size() * 8 + (m.size() + 2) * 5 * 4);
    CHECK(deserialize(bytes) == m);
  }
}

TEST_CASE("serialize header layout") {
  const auto m = build_sparse_map<float>({{5, 3}}, Matrix<float>(1, 2, std::vector<float>{7, 8}), 1);
  const auto b = serialize(m);
  CHECK(std::string(b.begin(), b.begin() + 4) == "SPAN");
  CHECK(b[4] == kSpanFormatVersion);
  CHECK(b[8] == 1);   // N
  CHECK(b[12] == 2);  // d
  CHECK(b[16] == 1);  // num_ctx
  CHECK(b[20] == 5);  // x
  CHECK(b[24] == 3);  // y
}

TEST_CASE("deserialize errors") {
  const auto m = build_sparse_map<float>({{1, 2}, {3, 4}}, Matrix<float>(2, 3, 1.0f));
  auto bytes = serialize(m);
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK(code_of([&] { deserialize(bytes); }) == ErrorCode::BadMagic);
  }
  SUBCASE("version") {
    bytes[4] = 9;
    CHECK(code_of([&] { deserialize(bytes); }) == ErrorCode::VersionUnsupported);
  }
  SUBCASE("truncated features") {
    bytes.resize(bytes.size() - 3);
    CHECK(code_of([&] { deserialize(bytes); }) == ErrorCode::TruncatedStream);
  }
  SUBCASE("truncated header") {
    bytes.resize(6);
    CHECK(code_of([&] { deserialize(bytes); }) == ErrorCode::TruncatedStream);
  }
}
