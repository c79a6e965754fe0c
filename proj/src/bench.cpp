#include "span/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "span/conv.hpp"
#include "span/error.hpp"
#include "span/oracles.hpp"
#include "span/sparse_map.hpp"

namespace span {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace {

template <class F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

BenchRow bench_one(double occupancy, int grid, const BenchSpec& spec) {
  if (!(occupancy > 0.0 && occupancy <= 1.0)) throw Error(ErrorCode::InvalidArgument, "occupancy must be in (0, 1]");
  if (grid < spec.kernel) throw Error(ErrorCode::InvalidArgument, "grid smaller than the kernel");
  std::mt19937_64 rng(spec.seed ^ (static_cast<std::uint64_t>(grid) << 20) ^
                      static_cast<std::uint64_t>(occupancy * 1e6));
  std::vector<Coord> cells;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) cells.push_back(Coord{x, y});
  std::shuffle(cells.begin(), cells.end(), rng);
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(occupancy * grid * grid)));
  cells.resize(n);

  std::normal_distribution<float> dist(0.0f, 1.0f);
  Matrix<float> feats(n, spec.dim);
  for (float& v : feats.storage()) v = dist(rng);
  const SparseMap<float> map = build_sparse_map(cells, feats);

  ConvSpec cs{spec.kernel, spec.stride, 1, spec.dim, spec.dim, ConvKind::forward};
  std::vector<float> w(static_cast<std::size_t>(spec.kernel * spec.kernel) * spec.dim * spec.dim);
  std::vector<float> b(spec.dim);
  for (float& v : w) v = 0.1f * dist(rng);
  for (float& v : b) v = 0.1f * dist(rng);
  const ConvParams<float> params{w, b, spec.dim, spec.dim};

  BenchRow row;
  row.occupancy = occupancy;
  row.grid = grid;
  row.n = n;
  std::vector<double> t_rb, t_sparse, t_dense;
  ConvRulebook rb;
  SparseMap<float> sparse_out;
  DenseTensor<float> dense_out;
  const std::size_t reps = std::max<std::size_t>(1, spec.repeats);
  for (std::size_t r = 0; r < reps; ++r) {
    t_rb.push_back(time_ms([&] { rb = build_conv_rulebook(map.coords, cs); }));
    t_sparse.push_back(time_ms([&] { sparse_out = sac_forward(map, rb, params); }));
    t_dense.push_back(time_ms([&] {
      const DenseTensor<float> in = embed_dense(map, static_cast<std::size_t>(grid), static_cast<std::size_t>(grid));
      dense_out = dense_conv_oracle(in, spec.kernel, spec.stride, 1, params);
    }));
  }
  row.rulebook_ms = median(t_rb);
  row.sparse_ms = median(t_sparse);
  row.dense_ms = median(t_dense);

  row.sparse_bytes = map.features.size() * sizeof(float) + map.coords.size() * sizeof(Coord) +
                     sparse_out.features.size() * sizeof(float) + sparse_out.coords.size() * sizeof(Coord) +
                     rb.total_pairs() * sizeof(RulePair);
  row.dense_bytes = static_cast<std::size_t>(grid) * static_cast<std::size_t>(grid) * spec.dim * sizeof(float) +
                    dense_out.bytes();

  for (std::size_t i = 0; i < sparse_out.size(); ++i) {
    const auto y = static_cast<std::size_t>(sparse_out.coords[i].y);
    const auto x = static_cast<std::size_t>(sparse_out.coords[i].x);
    if (y >= dense_out.height || x >= dense_out.width) continue;  // receptive field leaves the dense extent
    for (std::size_t c = 0; c < spec.dim; ++c)
      row.max_abs_diff =
          std::max(row.max_abs_diff, static_cast<double>(std::abs(sparse_out.features(i, c) - dense_out.at(y, x, c))));
  }
  return row;
}

std::vector<BenchRow> run_bench(const BenchSpec& spec) {
  std::vector<BenchRow> rows;
  for (int g : spec.sizes)
    for (double occ : spec.occupancies) rows.push_back(bench_one(occ, g, spec));
  return rows;
}

std::string bench_csv_header() {
  return "occupancy,grid,n,rulebook_ms,sparse_ms,dense_ms,sparse_bytes,dense_bytes,max_abs_diff";
}

std::string to_csv(const BenchRow& r) {
  std::ostringstream out;
  out << r.occupancy << ',' << r.grid << ',' << r.n << ',' << r.rulebook_ms << ',' << r.sparse_ms << ','
      << r.dense_ms << ',' << r.sparse_bytes << ',' << r.dense_bytes << ',' << r.max_abs_diff;
  return out.str();
}

}  // namespace span
