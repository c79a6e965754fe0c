#pragma once

// Mini-batch training with best-on-validation checkpoint selection, evaluation
// metrics and the metrics file writer.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "span/config.hpp"
#include "span/model.hpp"
#include "span/synth.hpp"

namespace span {

struct EvalMetrics {
  TaskKind task = TaskKind::classification;
  std::size_t samples = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // classification
  double macro_f1 = 0.0;
  double dice = 0.0;      // segmentation, mean over maps
  double iou = 0.0;

  // Model-selection score: accuracy for classification, Dice for segmentation.
  double primary() const noexcept { return task == TaskKind::classification ? accuracy : dice; }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  EvalMetrics val;
  double seconds = 0.0;
};

struct TrainResult {
  std::size_t best_epoch = 0;  // 0 = initialisation
  EvalMetrics best_val;
  EvalMetrics eval;  // on RunConfig::eval_split with the selected parameters
  std::vector<EpochLog> epochs;
  double train_seconds = 0.0;
};

// Dice / IoU of one binary mask pair; both empty counts as a perfect match.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
double iou_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
double macro_f1(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes);

template <class T>
EvalMetrics evaluate(SpanModel<T>& model, const std::vector<Sample>& samples, TaskKind task);

using EpochCallback = std::function<void(const EpochLog&)>;

template <class T>
TrainResult fit(SpanModel<T>& model, const Dataset& data, const RunConfig& cfg, const EpochCallback& on_epoch = {});

// Model config with the dataset's feature width and task head filled in.
ModelConfig resolve_model_config(const RunConfig& cfg, const Dataset& data);

// key=value lines, then a JSON block holding the resolved config, build id and epoch log.
std::string format_metrics(const RunConfig& cfg, const TrainResult& result);
std::string format_eval_metrics(const RunConfig& cfg, const EvalMetrics& m, const std::string& split);

// Trains per cfg and writes <out_dir>/{checkpoint.spck, config.json, metrics.txt}.
TrainResult run_training(const RunConfig& cfg, const EpochCallback& on_epoch = {});
// Loads <run_dir>/{config.json, checkpoint.spck} and evaluates a split of data_dir.
EvalMetrics run_evaluation(const std::string& run_dir, const std::string& data_dir, const std::string& split);

std::string build_id();

}  // namespace span
