#include "span/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "span/checkpoint.hpp"
#include "span/error.hpp"
#include "span/losses.hpp"

namespace span {

std::string build_id() { return SPAN_BUILD_ID; }

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  std::size_t inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] && truth[i];
    p += pred[i] != 0;
    t += truth[i] != 0;
  }
  return p + t == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

double iou_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] && truth[i];
    uni += pred[i] || truth[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double macro_f1(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes) {
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const int k = static_cast<int>(c);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == k && truth[i] == k;
      fp += pred[i] == k && truth[i] != k;
      fn += pred[i] != k && truth[i] == k;
    }
    total += tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  return num_classes == 0 ? 0.0 : total / static_cast<double>(num_classes);
}

namespace {

template <class T>
SparseMap<T> as_precision(const SparseMap<float>& m) {
  if constexpr (std::is_same_v<T, float>) return m;
  else return m.template cast<T>();
}

template <class T>
std::vector<double> softmax(std::span<const T> z) {
  std::vector<double> p(z.begin(), z.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) sum += (v = std::exp(v - mx));
  for (double& v : p) v /= sum;
  return p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

template <class T>
EvalMetrics evaluate(SpanModel<T>& model, const std::vector<Sample>& samples, TaskKind task) {
  EvalMetrics m;
  m.task = task;
  m.samples = samples.size();
  if (samples.empty()) return m;
  if (task == TaskKind::classification) {
    std::vector<int> pred, truth;
    std::size_t correct = 0;
    for (const Sample& s : samples) {
      const std::vector<T> p = model.predict_proba(as_precision<T>(s.map));
      const int arg = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      pred.push_back(arg);
      truth.push_back(s.label);
      correct += arg == s.label;
      m.loss -= std::log(std::max(static_cast<double>(p[static_cast<std::size_t>(s.label)]), kProbClamp));
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    m.macro_f1 = macro_f1(pred, truth, model.config().num_classes);
  } else {
    for (const Sample& s : samples) {
      const SegmentationOutput<T> out = model.predict_segmentation(as_precision<T>(s.map));
      std::vector<std::uint8_t> pred(out.logits.rows());
      std::vector<double> fg(out.logits.rows());
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const std::vector<double> p = softmax<T>(out.logits.row(i));
        const std::size_t arg = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        pred[i] = arg == 1 ? 1 : 0;
        fg[i] = std::clamp(p.size() > 1 ? p[1] : 0.0, kProbClamp, 1.0 - kProbClamp);
      }
      m.dice += dice_score(pred, s.mask);
      m.iou += iou_score(pred, s.mask);
      m.loss += hybrid_loss(fg, s.mask, model.config().loss);
    }
    m.dice /= static_cast<double>(samples.size());
    m.iou /= static_cast<double>(samples.size());
  }
  m.loss /= static_cast<double>(samples.size());
  return m;
}

template <class T>
TrainResult fit(SpanModel<T>& model, const Dataset& data, const RunConfig& cfg, const EpochCallback& on_epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  const TaskKind task = data.kind;
  if ((task == TaskKind::classification) != (model.config().head == HeadKind::mil))
    throw Error(ErrorCode::ConfigError, "model head does not match the dataset task");
  if (data.train.empty() && cfg.epochs > 0) throw Error(ErrorCode::ConfigError, "training split is empty");
  const std::vector<Sample>& val = data.val.empty() ? data.train : data.val;

  TrainResult result;
  result.best_val = evaluate(model, val, task);
  std::vector<Matrix<T>> best = snapshot(model.params());

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto te = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const T seed = T(1) / static_cast<T>(end - start);
      model.params().zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = data.train[order[i]];
        const SparseMap<T> map = as_precision<T>(s.map);
        Tape<T> tape;
        const NodeId loss =
            task == TaskKind::classification ? model.mil_loss(tape, map, s.label) : model.unet_loss(tape, map, s.mask);
        loss_sum += static_cast<double>(tape.value(loss)(0, 0));
        tape.backward(loss, seed);
      }
      adam_step(model.params(), cfg.adam, ++step);
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size());
    log.val = evaluate(model, val, task);
    log.seconds = seconds_since(te);
    const bool better = log.val.primary() > result.best_val.primary() ||
                        (log.val.primary() == result.best_val.primary() && log.val.loss < result.best_val.loss);
    if (better) {
      result.best_val = log.val;
      result.best_epoch = epoch;
      best = snapshot(model.params());
    }
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  restore(model.params(), best);
  result.train_seconds = seconds_since(t0);
  result.eval = evaluate(model, data.split(cfg.eval_split), task);
  return result;
}

ModelConfig resolve_model_config(const RunConfig& cfg, const Dataset& data) {
  ModelConfig m = cfg.model;
  const Sample* any = !data.train.empty() ? &data.train.front()
                      : !data.val.empty() ? &data.val.front()
                      : !data.test.empty() ? &data.test.front()
                                           : nullptr;
  if (any == nullptr) throw Error(ErrorCode::ConfigError, "dataset is empty");
  m.in_dim = any->map.feature_dim();
  m.head = data.kind == TaskKind::classification ? HeadKind::mil : HeadKind::unet;
  m.seed = cfg.seed;
  m.validate();
  return m;
}

namespace {

nlohmann::json metrics_json(const EvalMetrics& m) {
  nlohmann::json j{{"samples", m.samples}, {"loss", m.loss}};
  if (m.task == TaskKind::classification) {
    j["accuracy"] = m.accuracy;
    j["macro_f1"] = m.macro_f1;
  } else {
    j["dice"] = m.dice;
    j["iou"] = m.iou;
  }
  return j;
}

void key_values(std::ostringstream& out, const std::string& prefix, const EvalMetrics& m) {
  out << prefix << "samples=" << m.samples << "\n" << prefix << "loss=" << m.loss << "\n";
  if (m.task == TaskKind::classification)
    out << prefix << "accuracy=" << m.accuracy << "\n" << prefix << "macro_f1=" << m.macro_f1 << "\n";
  else
    out << prefix << "dice=" << m.dice << "\n" << prefix << "iou=" << m.iou << "\n";
}

std::string joined_ablations(const Ablation& a) {
  std::string s;
  for (const auto& n : ablation_names(a)) s += (s.empty() ? "" : ",") + n;
  return s.empty() ? "none" : s;
}

}  // namespace

std::string format_metrics(const RunConfig& cfg, const TrainResult& r) {
  std::ostringstream out;
  out << std::setprecision(6);
  out << "task=" << to_string(r.eval.task) << "\n";
  out << "build_id=" << build_id() << "\n";
  out << "ablations=" << joined_ablations(cfg.model.ablation) << "\n";
  out << "precision=" << to_string(cfg.precision) << "\n";
  out << "epochs=" << cfg.epochs << "\n";
  out << "best_epoch=" << r.best_epoch << "\n";
  out << "train_seconds=" << r.train_seconds << "\n";
  key_values(out, "val_", r.best_val);
  out << "eval_split=" << cfg.eval_split << "\n";
  key_values(out, "", r.eval);

  nlohmann::json j;
  j["build_id"] = build_id();
  j["config"] = nlohmann::json::parse(to_json(cfg, -1));
  j["best_epoch"] = r.best_epoch;
  j["train_seconds"] = r.train_seconds;
  j["val"] = metrics_json(r.best_val);
  j["eval_split"] = cfg.eval_split;
  j["eval"] = metrics_json(r.eval);
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochLog& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val", metrics_json(e.val)},
                      {"seconds", e.seconds}});
  j["epochs"] = epochs;
  out << j.dump(2) << "\n";
  return out.str();
}

std::string format_eval_metrics(const RunConfig& cfg, const EvalMetrics& m, const std::string& split) {
  std::ostringstream out;
  out << std::setprecision(6);
  out << "task=" << to_string(m.task) << "\n";
  out << "build_id=" << build_id() << "\n";
  out << "ablations=" << joined_ablations(cfg.model.ablation) << "\n";
  out << "eval_split=" << split << "\n";
  key_values(out, "", m);
  nlohmann::json j;
  j["build_id"] = build_id();
  j["config"] = nlohmann::json::parse(to_json(cfg, -1));
  j["eval_split"] = split;
  j["eval"] = metrics_json(m);
  out << j.dump(2) << "\n";
  return out.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

template <class T>
TrainResult train_and_write(RunConfig cfg, const Dataset& data, const EpochCallback& on_epoch) {
  namespace fs = std::filesystem;
  cfg.model = resolve_model_config(cfg, data);
  SpanModel<T> model(cfg.model);
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + cfg.out_dir + ": " + ec.message());
  const TrainResult r = fit(model, data, cfg, on_epoch);
  save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.spck").string(), model.params());
  write_text(fs::path(cfg.out_dir) / "config.json", to_json(cfg) + "\n");
  write_text(fs::path(cfg.out_dir) / "metrics.txt", format_metrics(cfg, r));
  return r;
}

template <class T>
EvalMetrics load_and_evaluate(const RunConfig& cfg, const std::string& ckpt, const Dataset& data,
                              const std::string& split) {
  SpanModel<T> model(resolve_model_config(cfg, data));
  load_checkpoint(ckpt, model.params());
  return evaluate(model, data.split(split), data.kind);
}

}  // namespace

TrainResult run_training(const RunConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.data_dir.empty()) throw Error(ErrorCode::ConfigError, "data_dir is required");
  const Dataset data = read_dataset(cfg.data_dir);
  return cfg.precision == Precision::f32 ? train_and_write<float>(cfg, data, on_epoch)
                                         : train_and_write<double>(cfg, data, on_epoch);
}

EvalMetrics run_evaluation(const std::string& run_dir, const std::string& data_dir, const std::string& split) {
  namespace fs = std::filesystem;
  RunConfig cfg = load_run_config((fs::path(run_dir) / "config.json").string());
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  const Dataset data = read_dataset(cfg.data_dir);
  const std::string ckpt = (fs::path(run_dir) / "checkpoint.spck").string();
  const EvalMetrics m = cfg.precision == Precision::f32 ? load_and_evaluate<float>(cfg, ckpt, data, split)
                                                        : load_and_evaluate<double>(cfg, ckpt, data, split);
  write_text(fs::path(run_dir) / ("eval_" + split + ".txt"), format_eval_metrics(cfg, m, split));
  return m;
}

template EvalMetrics evaluate(SpanModel<float>&, const std::vector<Sample>&, TaskKind);
template EvalMetrics evaluate(SpanModel<double>&, const std::vector<Sample>&, TaskKind);
template TrainResult fit(SpanModel<float>&, const Dataset&, const RunConfig&, const EpochCallback&);
template TrainResult fit(SpanModel<double>&, const Dataset&, const RunConfig&, const EpochCallback&);

}  // namespace span
