#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "span/matrix.hpp"
#include "span/sparse_map.hpp"

namespace span::test {

inline std::vector<Coord> random_coords(std::mt19937_64& rng, int side, std::size_t n) {
  std::vector<Coord> all;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) all.push_back({x, y});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(n, all.size()));
  return all;
}

template <class T>
Matrix<T> random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix<T> m(rows, cols);
  std::normal_distribution<double> dist(0.0, scale);
  for (T& v : m.storage()) v = static_cast<T>(dist(rng));
  return m;
}

template <class T>
SparseMap<T> random_map(std::mt19937_64& rng, int side, std::size_t n, std::size_t dim, std::size_t num_ctx = 0) {
  auto coords = random_coords(rng, side, n);
  const auto feats = random_matrix<T>(rng, coords.size(), dim);
  return build_sparse_map(std::move(coords), feats, num_ctx);
}

template <class T>
SparseMap<T> full_map(int side, std::size_t dim) {
  std::vector<Coord> coords;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) coords.push_back({x, y});
  Matrix<T> f(coords.size(), dim, T(1));
  return build_sparse_map(std::move(coords), f);
}

// Same content, rows in a shuffled order (before canonicalisation).
template <class T>
std::pair<std::vector<Coord>, Matrix<T>> shuffled(const SparseMap<T>& m, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(m.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Coord> c;
  Matrix<T> f(m.size(), m.feature_dim());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    c.push_back(m.coords[perm[i]]);
    std::copy(m.features.row(perm[i]).begin(), m.features.row(perm[i]).end(), f.row(i).begin());
  }
  return {c, f};
}

}  // namespace span::test
