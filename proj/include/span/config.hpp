#pragma once

// JSON documents for run, model and synthetic-task configuration. Unknown keys
// are rejected; missing keys keep their defaults. Schema: configs/schema.json.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "span/autodiff.hpp"
#include "span/model.hpp"
#include "span/synth.hpp"

namespace span {

enum class Precision { f32, f64 };

struct RunConfig {
  std::string data_dir;
  std::string out_dir = "run";
  ModelConfig model;
  AdamConfig adam;
  std::size_t epochs = 12;
  std::size_t batch_size = 8;
  std::string eval_split = "test";
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
};

std::string to_string(Precision p);
Precision parse_precision(const std::string& s);
std::string to_string(HeadKind h);
std::string to_string(SkipMode s);
std::string to_string(LossKind k);
std::string to_string(TaskKind k);

// Applies one ablation flag by name (no_sac, no_car, no_shift, no_ctx, no_rpb).
void apply_ablation(Ablation& a, const std::string& name);
std::vector<std::string> ablation_names(const Ablation& a);

std::string to_json(const ModelConfig& c, int indent = 2);
std::string to_json(const RunConfig& c, int indent = 2);
std::string to_json(const SyntheticTaskSpec& s, int indent = 2);

ModelConfig model_config_from_json(const std::string& text);
RunConfig run_config_from_json(const std::string& text);
SyntheticTaskSpec task_spec_from_json(const std::string& text);

RunConfig load_run_config(const std::string& path);
SyntheticTaskSpec load_task_spec(const std::string& path);

}  // namespace span
