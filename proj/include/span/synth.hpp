#pragma once

// Seeded synthetic stand-ins for slide data.
//
// classification: one tissue blob carrying an A-marker cluster (channel 0) and a
//   B-marker cluster (channel 1), each within cluster_radius of its centre. Label 1 iff the cluster centres lie within
//   Chebyshev distance [near_min, near_max]; label 0 iff >= far_min. Both classes
//   draw tissue, cluster sizes and noise from the same distributions, so no bag
//   statistic separates them.
// segmentation: one tissue blob with 1-3 tumour discs; tumour patches have their
//   signal channels shifted by blob_shift. Per-patch label = disc membership.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "span/sparse_map.hpp"

namespace span {

enum class TaskKind { classification, segmentation };

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::classification;
  int grid = 40;
  std::size_t num_maps = 2000;
  std::size_t feature_dim = 8;
  double min_occupancy = 0.125;  // tissue tokens / grid^2
  double max_occupancy = 0.375;
  double noise = 1.0;
  // classification
  int cluster_radius = 2;  // clusters lie within this Chebyshev radius of their centre
  int cluster_min = 15;
  int cluster_max = 25;
  int near_min = 5;
  int near_max = 6;
  int far_min = 14;
  double marker_amp = 3.0;
  // segmentation
  int min_blobs = 1;
  int max_blobs = 3;
  double min_radius = 2.0;
  double max_radius = 4.5;
  double blob_shift = 1.5;
  std::size_t signal_channels = 1;
  // splits
  double train_frac = 0.70;
  double val_frac = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

SyntheticTaskSpec default_task_spec(TaskKind kind);

struct Sample {
  std::string id;
  SparseMap<float> map;
  int label = 0;                    // classification
  std::vector<std::uint8_t> mask;   // segmentation, canonical order
};

struct Dataset {
  TaskKind kind = TaskKind::classification;
  std::vector<Sample> train, val, test;

  const std::vector<Sample>& split(const std::string& name) const;
};

Dataset generate_dataset(const SyntheticTaskSpec& spec);

// Writes <dir>/task.json, <dir>/manifest.tsv, <dir>/<split>/<id>.span (+ .mask).
void write_dataset(const std::string& dir, const SyntheticTaskSpec& spec, const Dataset& data);
Dataset read_dataset(const std::string& dir);

std::vector<std::uint8_t> serialize_mask(std::span<const std::uint8_t> mask);
std::vector<std::uint8_t> deserialize_mask(std::span<const std::uint8_t> bytes);

}  // namespace span
