#pragma once

// Sparse-vs-dense SAC benchmark over an occupancy sweep. Timings are medians
// over the requested repeats.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace span {

struct BenchSpec {
  std::vector<double> occupancies{0.05, 0.25, 1.0};
  std::vector<int> sizes{128};
  std::size_t repeats = 5;
  int kernel = 3;
  int stride = 1;
  std::size_t dim = 16;
  std::uint64_t seed = 0;
};

struct BenchRow {
  double occupancy = 0.0;
  int grid = 0;
  std::size_t n = 0;
  double rulebook_ms = 0.0;
  double sparse_ms = 0.0;
  double dense_ms = 0.0;
  std::size_t sparse_bytes = 0;  // input + output features, coords and rulebook
  std::size_t dense_bytes = 0;   // dense input and output embeddings
  double max_abs_diff = 0.0;     // sparse vs dense at every sparse output site
};

BenchRow bench_one(double occupancy, int grid, const BenchSpec& spec);
std::vector<BenchRow> run_bench(const BenchSpec& spec);

std::string bench_csv_header();
std::string to_csv(const BenchRow& row);

double median(std::vector<double> values);

}  // namespace span
