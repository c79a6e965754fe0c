#include "span/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "span/error.hpp"

namespace span {

using nlohmann::json;

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw Error(ErrorCode::ConfigError, "precision must be f32 or f64, got '" + s + "'");
}

std::string to_string(HeadKind h) { return h == HeadKind::mil ? "mil" : "unet"; }

std::string to_string(SkipMode s) {
  switch (s) {
    case SkipMode::concat: return "concat";
    case SkipMode::add: return "add";
    case SkipMode::none: return "none";
  }
  return "?";
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::hybrid: return "hybrid";
    case LossKind::survival: return "survival";
  }
  return "?";
}

std::string to_string(TaskKind k) { return k == TaskKind::classification ? "classification" : "segmentation"; }

void apply_ablation(Ablation& a, const std::string& name) {
  if (name == "no_sac") a.no_sac = true;
  else if (name == "no_car") a.no_car = true;
  else if (name == "no_shift") a.no_shift = true;
  else if (name == "no_ctx") a.no_ctx = true;
  else if (name == "no_rpb") a.no_rpb = true;
  else throw Error(ErrorCode::ConfigError, "unknown ablation '" + name + "'");
}

std::vector<std::string> ablation_names(const Ablation& a) {
  std::vector<std::string> out;
  if (a.no_sac) out.emplace_back("no_sac");
  if (a.no_car) out.emplace_back("no_car");
  if (a.no_shift) out.emplace_back("no_shift");
  if (a.no_ctx) out.emplace_back("no_ctx");
  if (a.no_rpb) out.emplace_back("no_rpb");
  return out;
}

namespace {

json parse(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ConfigError, std::string("invalid JSON: ") + e.what());
  }
}

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, where + " must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (allowed.count(k) == 0) throw Error(ErrorCode::ConfigError, "unknown key '" + k + "' in " + where);
}

template <class V>
void read(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("bad value for '") + key + "': " + e.what());
  }
}

json model_json(const ModelConfig& c) {
  return json{{"in_dim", c.in_dim},
              {"dims", c.dims},
              {"window_side", c.window_side},
              {"heads", c.heads},
              {"car_pairs", c.car_pairs},
              {"num_ctx", c.num_ctx},
              {"head", to_string(c.head)},
              {"num_classes", c.num_classes},
              {"skip", to_string(c.skip)},
              {"ablations", ablation_names(c.ablation)},
              {"loss",
               {{"kind", to_string(c.loss.kind)},
                {"lambda", c.loss.lambda},
                {"dice_eps", c.loss.dice_eps},
                {"k_bins", c.loss.k_bins}}},
              {"seed", c.seed}};
}

ModelConfig model_from(const json& j) {
  only_keys(j,
            {"in_dim", "dims", "window_side", "heads", "car_pairs", "num_ctx", "head", "num_classes", "skip",
             "ablations", "loss", "seed"},
            "model");
  ModelConfig c;
  read(j, "in_dim", c.in_dim);
  read(j, "dims", c.dims);
  read(j, "window_side", c.window_side);
  read(j, "heads", c.heads);
  read(j, "car_pairs", c.car_pairs);
  read(j, "num_ctx", c.num_ctx);
  read(j, "num_classes", c.num_classes);
  read(j, "seed", c.seed);
  std::string s;
  if (j.contains("head")) {
    read(j, "head", s);
    if (s == "mil") c.head = HeadKind::mil;
    else if (s == "unet") c.head = HeadKind::unet;
    else throw Error(ErrorCode::ConfigError, "head must be mil or unet");
  }
  if (j.contains("skip")) {
    read(j, "skip", s);
    if (s == "concat") c.skip = SkipMode::concat;
    else if (s == "add") c.skip = SkipMode::add;
    else if (s == "none") c.skip = SkipMode::none;
    else throw Error(ErrorCode::ConfigError, "skip must be concat, add or none");
  }
  std::vector<std::string> ablations;
  read(j, "ablations", ablations);
  for (const auto& a : ablations) apply_ablation(c.ablation, a);
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    only_keys(l, {"kind", "lambda", "dice_eps", "k_bins"}, "model.loss");
    if (l.contains("kind")) {
      read(l, "kind", s);
      if (s == "ce") c.loss.kind = LossKind::ce;
      else if (s == "hybrid") c.loss.kind = LossKind::hybrid;
      else if (s == "survival") c.loss.kind = LossKind::survival;
      else throw Error(ErrorCode::ConfigError, "loss.kind must be ce, hybrid or survival");
    }
    read(l, "lambda", c.loss.lambda);
    read(l, "dice_eps", c.loss.dice_eps);
    read(l, "k_bins", c.loss.k_bins);
  }
  return c;
}

json task_json(const SyntheticTaskSpec& s) {
  return json{{"kind", to_string(s.kind)},
              {"grid", s.grid},
              {"num_maps", s.num_maps},
              {"feature_dim", s.feature_dim},
              {"min_occupancy", s.min_occupancy},
              {"max_occupancy", s.max_occupancy},
              {"noise", s.noise},
              {"cluster_min", s.cluster_min},
              {"cluster_max", s.cluster_max},
              {"cluster_radius", s.cluster_radius},
              {"near_min", s.near_min},
              {"near_max", s.near_max},
              {"far_min", s.far_min},
              {"marker_amp", s.marker_amp},
              {"min_blobs", s.min_blobs},
              {"max_blobs", s.max_blobs},
              {"min_radius", s.min_radius},
              {"max_radius", s.max_radius},
              {"blob_shift", s.blob_shift},
              {"signal_channels", s.signal_channels},
              {"train_frac", s.train_frac},
              {"val_frac", s.val_frac},
              {"seed", s.seed}};
}

SyntheticTaskSpec task_from(const json& j) {
  only_keys(j,
            {"kind", "grid", "num_maps", "feature_dim", "min_occupancy", "max_occupancy", "noise", "cluster_radius",
             "cluster_min", "cluster_max", "near_min", "near_max", "far_min", "marker_amp", "min_blobs", "max_blobs",
             "min_radius", "max_radius", "blob_shift", "signal_channels", "train_frac", "val_frac", "seed"},
            "task");
  TaskKind kind = TaskKind::classification;
  if (j.contains("kind")) {
    std::string s;
    read(j, "kind", s);
    if (s == "classification") kind = TaskKind::classification;
    else if (s == "segmentation") kind = TaskKind::segmentation;
    else throw Error(ErrorCode::ConfigError, "task kind must be classification or segmentation");
  }
  SyntheticTaskSpec t = default_task_spec(kind);
  read(j, "grid", t.grid);
  read(j, "num_maps", t.num_maps);
  read(j, "feature_dim", t.feature_dim);
  read(j, "min_occupancy", t.min_occupancy);
  read(j, "max_occupancy", t.max_occupancy);
  read(j, "noise", t.noise);
  read(j, "cluster_min", t.cluster_min);
  read(j, "cluster_max", t.cluster_max);
  read(j, "cluster_radius", t.cluster_radius);
  read(j, "near_min", t.near_min);
  read(j, "near_max", t.near_max);
  read(j, "far_min", t.far_min);
  read(j, "marker_amp", t.marker_amp);
  read(j, "min_blobs", t.min_blobs);
  read(j, "max_blobs", t.max_blobs);
  read(j, "min_radius", t.min_radius);
  read(j, "max_radius", t.max_radius);
  read(j, "blob_shift", t.blob_shift);
  read(j, "signal_channels", t.signal_channels);
  read(j, "train_frac", t.train_frac);
  read(j, "val_frac", t.val_frac);
  read(j, "seed", t.seed);
  t.validate();
  return t;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string to_json(const ModelConfig& c, int indent) { return model_json(c).dump(indent); }
std::string to_json(const SyntheticTaskSpec& s, int indent) { return task_json(s).dump(indent); }

std::string to_json(const RunConfig& c, int indent) {
  return json{{"data_dir", c.data_dir},
              {"out_dir", c.out_dir},
              {"model", model_json(c.model)},
              {"optimizer", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"eval_split", c.eval_split},
              {"seed", c.seed},
              {"precision", to_string(c.precision)}}
      .dump(indent);
}

ModelConfig model_config_from_json(const std::string& text) { return model_from(parse(text)); }
SyntheticTaskSpec task_spec_from_json(const std::string& text) { return task_from(parse(text)); }

RunConfig run_config_from_json(const std::string& text) {
  const json j = parse(text);
  only_keys(j, {"data_dir", "out_dir", "model", "optimizer", "epochs", "batch_size", "eval_split", "seed", "precision"},
            "run");
  RunConfig c;
  read(j, "data_dir", c.data_dir);
  read(j, "out_dir", c.out_dir);
  if (j.contains("model")) c.model = model_from(j.at("model"));
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    only_keys(o, {"lr", "beta1", "beta2", "eps"}, "optimizer");
    read(o, "lr", c.adam.lr);
    read(o, "beta1", c.adam.beta1);
    read(o, "beta2", c.adam.beta2);
    read(o, "eps", c.adam.eps);
  }
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "eval_split", c.eval_split);
  read(j, "seed", c.seed);
  if (j.contains("precision")) {
    std::string p;
    read(j, "precision", p);
    c.precision = parse_precision(p);
  }
  if (c.batch_size == 0) throw Error(ErrorCode::ConfigError, "batch_size must be positive");
  if (c.eval_split != "train" && c.eval_split != "val" && c.eval_split != "test")
    throw Error(ErrorCode::ConfigError, "eval_split must be train, val or test");
  return c;
}

RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_text(path)); }
SyntheticTaskSpec load_task_spec(const std::string& path) { return task_spec_from_json(read_text(path)); }

}  // namespace span
