// Acceptance runner: one PASS/FAIL line per criterion. Thresholds and
// tolerances are fixed here; --criteria selects a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "span/bench.hpp"
#include "span/config.hpp"
#include "span/error.hpp"
#include "span/losses.hpp"
#include "span/model.hpp"
#include "span/oracles.hpp"
#include "span/synth.hpp"
#include "span/train.hpp"

using namespace span;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

// ---- 1-4: oracle suites -----------------------------------------------------

constexpr double kConvSeconds = 30.0;
constexpr double kAttnSeconds = 30.0;
constexpr double kRulebookSeconds = 10.0;
constexpr double kGradSeconds = 120.0;

std::string describe(const CheckResult& r) {
  return r.name + " max_error=" + fmt(r.max_error) + " tol=" + fmt(r.tolerance) + " trials=" +
         std::to_string(r.trials);
}

Outcome criterion_conv_oracle(std::uint64_t seed) {
  const auto t0 = Clock::now();
  const CheckResult f32 = check_conv_oracle(200, seed, true);
  const CheckResult f64 = check_conv_oracle(200, seed + 1, false);
  const double secs = seconds_since(t0);
  const bool ok = f32.passed && f64.passed && f32.tolerance == 1e-5 && f64.tolerance == 1e-10 && secs < kConvSeconds;
  return {ok, describe(f32) + "; " + describe(f64) + "; seconds=" + fmt(secs)};
}

Outcome criterion_attention_oracle(std::uint64_t seed) {
  const auto t0 = Clock::now();
  const CheckResult r = check_attention_oracle(100, seed);
  const double secs = seconds_since(t0);
  return {r.passed && r.tolerance == 1e-5 && secs < kAttnSeconds, describe(r) + "; seconds=" + fmt(secs)};
}

Outcome criterion_rulebooks(std::uint64_t seed) {
  const auto t0 = Clock::now();
  const CheckResult conv = check_conv_rulebooks(200, seed);
  const CheckResult attn = check_attention_rulebooks(200, seed + 1);
  const double secs = seconds_since(t0);
  return {conv.passed && attn.passed && secs < kRulebookSeconds,
          describe(conv) + "; " + describe(attn) + "; seconds=" + fmt(secs)};
}

Outcome criterion_gradients(std::uint64_t seed) {
  const auto t0 = Clock::now();
  const std::vector<CheckResult> all = check_gradients(seed);
  const double secs = seconds_since(t0);
  bool ok = secs < kGradSeconds;
  double worst = 0.0;
  std::string worst_name, failed;
  for (const CheckResult& r : all) {
    ok = ok && r.passed && r.tolerance == 1e-4;
    if (!r.passed) failed += " " + r.name;
    if (r.max_error >= worst) {
      worst = r.max_error;
      worst_name = r.name;
    }
  }
  std::string d = std::to_string(all.size()) + " checks, worst " + worst_name + "=" + fmt(worst) +
                   " tol=1e-4; seconds=" + fmt(secs);
  if (!failed.empty()) d += "; failed:" + failed;
  return {ok, d};
}

// ---- 5-7: structure ---------------------------------------------------------

ModelConfig structure_config(HeadKind head, std::size_t num_stages, std::uint64_t seed) {
  ModelConfig c;
  c.in_dim = 3;
  c.dims.assign(num_stages, 4);
  c.window_side = 2;
  c.heads = 2;
  c.head = head;
  c.seed = seed;
  if (head == HeadKind::unet) c.loss.kind = LossKind::hybrid;
  return c;
}

template <class T>
SparseMap<T> random_sparse_map(std::mt19937_64& rng, int side, std::size_t n, std::size_t dim) {
  std::vector<Coord> all;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) all.push_back({x, y});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(n, all.size()));
  Matrix<T> f(all.size(), dim);
  std::normal_distribution<double> nd;
  for (T& v : f.storage()) v = static_cast<T>(nd(rng));
  return build_sparse_map(std::move(all), f);
}

void perturb(ParamStore<double>& store, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 0.1);
  for (auto& p : store.params())
    if (!p.frozen)
      for (double& v : p.value.storage()) v += nd(rng);
}

std::vector<std::size_t> stage_counts(const SparseMap<double>& m) {
  SpanModel<double> model(structure_config(HeadKind::mil, 3, 0));
  const EncoderOutput<double> enc = encoder_forward(m, model);
  std::vector<std::size_t> out{m.size()};
  for (const auto& s : enc.stage_maps) out.push_back(s.size());
  return out;
}

// Slack of one row plus one column of 2x2 blocks at the stage's input resolution.
constexpr int kTokenSide = 32;
constexpr double kTokenOccupancy = 0.30;
constexpr std::size_t kTokenLayouts = 50;

Outcome criterion_token_reduction(std::uint64_t seed) {
  std::vector<Coord> full;
  for (int y = 0; y < kTokenSide; ++y)
    for (int x = 0; x < kTokenSide; ++x) full.push_back({x, y});
  const auto dense = stage_counts(build_sparse_map(full, Matrix<double>(full.size(), 3, 1.0)));
  // dense[0] is the input; stage 0 is 1x1, stages 1 and 2 halve each side.
  const bool full_ok = dense.size() == 4 && dense[1] == 1024 && dense[2] == 256 && dense[3] == 64;
  std::string d = "full grid stages " + std::to_string(dense[1]) + "/" + std::to_string(dense[2]) + "/" +
                  std::to_string(dense[3]);

  SyntheticTaskSpec spec = default_task_spec(TaskKind::segmentation);
  spec.grid = kTokenSide;
  spec.min_occupancy = spec.max_occupancy = kTokenOccupancy;
  spec.num_maps = kTokenLayouts;
  spec.seed = seed;
  const Dataset layouts = generate_dataset(spec);
  bool sparse_ok = true;
  std::size_t checked = 0;
  double worst_excess = -1e9;
  for (const auto* split : {&layouts.train, &layouts.val, &layouts.test})
    for (const Sample& s : *split) {
      Matrix<double> f(s.map.size(), 3, 1.0);
      const auto counts = stage_counts(build_sparse_map(s.map.coords, f));
      int side = kTokenSide;
      for (std::size_t l = 2; l < counts.size(); ++l) {
        const std::size_t blocks_per_side = static_cast<std::size_t>((side + 1) / 2);
        const std::size_t bound = (counts[l - 1] + 3) / 4 + 2 * blocks_per_side;
        worst_excess = std::max(worst_excess, static_cast<double>(counts[l]) - static_cast<double>(bound));
        sparse_ok = sparse_ok && counts[l] <= bound;
        side = (side + 1) / 2;
      }
      ++checked;
    }
  d += "; " + std::to_string(checked) + " tissue layouts at occupancy " + fmt(kTokenOccupancy) +
       ", max(count - bound)=" + fmt(worst_excess);
  return {full_ok && sparse_ok && checked == kTokenLayouts, d};
}

Outcome criterion_round_trip(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SpanModel<double> model(structure_config(HeadKind::unet, 3, seed));
  perturb(model.params(), rng);
  std::size_t ok = 0;
  const std::size_t layouts = 100;
  for (std::size_t t = 0; t < layouts; ++t) {
    const int side = 4 + static_cast<int>(rng() % 29);
    const std::size_t n = 1 + rng() % static_cast<std::size_t>(side * side);
    const auto m = random_sparse_map<double>(rng, side, n, 3);
    const SegmentationOutput<double> seg = model.predict_segmentation(m);
    if (seg.coords == m.coords && seg.logits.rows() == m.size()) ++ok;
  }
  return {ok == layouts, std::to_string(ok) + "/" + std::to_string(layouts) + " layouts bit-equal"};
}

Outcome criterion_invariance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SpanModel<double> mil(structure_config(HeadKind::mil, 3, seed));
  SpanModel<double> unet(structure_config(HeadKind::unet, 3, seed + 1));
  perturb(mil.params(), rng);
  perturb(unet.params(), rng);
  const int period = unet.config().translation_period();
  std::size_t perm_ok = 0, trans_ok = 0;
  const std::size_t instances = 50;
  for (std::size_t t = 0; t < instances; ++t) {
    const auto m = random_sparse_map<double>(rng, 16, 20 + rng() % 100, 3);
    std::vector<std::size_t> order(m.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Coord> c;
    Matrix<double> f(m.size(), 3);
    for (std::size_t i = 0; i < order.size(); ++i) {
      c.push_back(m.coords[order[i]]);
      std::copy(m.features.row(order[i]).begin(), m.features.row(order[i]).end(), f.row(i).begin());
    }
    const auto shuffled = build_sparse_map(c, f);
    const auto a = unet.predict_segmentation(m), b = unet.predict_segmentation(shuffled);
    if (mil.predict_proba(m) == mil.predict_proba(shuffled) && a.coords == b.coords && a.logits == b.logits) ++perm_ok;

    const int k = 1 + static_cast<int>(t % 3);
    std::vector<Coord> moved;
    for (const Coord& p : m.coords) moved.push_back({p.x + k * period, p.y + k * period});
    const auto translated = build_sparse_map(moved, m.features);
    const auto tb = unet.predict_segmentation(translated);
    bool coords_shifted = tb.coords.size() == a.coords.size();
    for (std::size_t i = 0; coords_shifted && i < a.coords.size(); ++i)
      coords_shifted = tb.coords[i] == Coord{a.coords[i].x + k * period, a.coords[i].y + k * period};
    if (coords_shifted && tb.logits == a.logits && mil.predict_proba(translated) == mil.predict_proba(m)) ++trans_ok;
  }
  return {perm_ok == instances && trans_ok == instances,
          "permutation " + std::to_string(perm_ok) + "/50, translation by multiples of " + std::to_string(period) +
              " " + std::to_string(trans_ok) + "/50 (exact, double)"};
}

// ---- 8-10: desk-scale learning ----------------------------------------------

constexpr double kTrainSeconds = 600.0;
constexpr double kMilAccuracy = 0.95;
constexpr double kBaselineAccuracy = 0.75;
constexpr double kGap = 0.20;
constexpr double kUnetDice = 0.90;
constexpr double kSkipMargin = 0.01;
constexpr double kAblationMargin = 0.01;

SyntheticTaskSpec classification_task() { return default_task_spec(TaskKind::classification); }

SyntheticTaskSpec segmentation_task() { return default_task_spec(TaskKind::segmentation); }

RunConfig mil_run() {
  RunConfig c;
  c.model.dims = {16, 32, 32};
  c.model.window_side = 4;
  c.model.heads = 2;
  c.epochs = 20;
  c.batch_size = 8;
  c.adam.lr = 1e-3;
  return c;
}

RunConfig unet_run() {
  RunConfig c;
  c.model.head = HeadKind::unet;
  c.model.dims = {16, 32, 32};
  c.model.window_side = 4;
  c.model.heads = 2;
  c.model.loss.kind = LossKind::hybrid;
  c.model.loss.lambda = 0.75;
  c.epochs = 8;
  c.batch_size = 8;
  c.adam.lr = 1e-3;
  return c;
}

struct Trained {
  TrainResult result;
  std::string metrics;
};

class Datasets {
 public:
  const Dataset& classification() {
    if (!cls_) cls_ = generate_dataset(classification_task());
    return *cls_;
  }
  const Dataset& segmentation() {
    if (!seg_) seg_ = generate_dataset(segmentation_task());
    return *seg_;
  }

 private:
  std::optional<Dataset> cls_, seg_;
};

Trained train(RunConfig cfg, const Dataset& data, const std::string& label) {
  cfg.model = resolve_model_config(cfg, data);
  SpanModel<float> model(cfg.model);
  Trained t;
  t.result = fit(model, data, cfg, [&](const EpochLog& e) {
    std::fprintf(stderr, "  [%s] epoch %zu loss=%.4f val=%.4f (%.1f s)\n", label.c_str(), e.epoch, e.train_loss,
                 e.val.primary(), e.seconds);
  });
  t.metrics = format_metrics(cfg, t.result);
  std::fprintf(stderr, "  [%s] test=%.4f best_epoch=%zu train_seconds=%.1f\n", label.c_str(),
               t.result.eval.primary(), t.result.best_epoch, t.result.train_seconds);
  return t;
}

RunConfig with_ablations(RunConfig cfg, const std::vector<std::string>& names) {
  for (const auto& n : names) apply_ablation(cfg.model.ablation, n);
  return cfg;
}

// The full MIL model is shared by criteria 8 and 10.
std::optional<Trained> g_full_mil;

const Trained& full_mil(Datasets& data) {
  if (!g_full_mil) g_full_mil = train(mil_run(), data.classification(), "span-mil");
  return *g_full_mil;
}

Outcome criterion_mil(Datasets& data) {
  const Trained& full = full_mil(data);
  const Trained base = train(with_ablations(mil_run(), {"no_sac", "no_car", "no_ctx"}), data.classification(),
                             "mean-pool");
  const double acc = full.result.eval.accuracy, base_acc = base.result.eval.accuracy;
  const bool ok = acc >= kMilAccuracy && base_acc <= kBaselineAccuracy && acc - base_acc >= kGap &&
                  full.result.train_seconds < kTrainSeconds && base.result.train_seconds < kTrainSeconds;
  return {ok, "span-mil test accuracy=" + fmt(acc) + " (>= " + fmt(kMilAccuracy) + "), mean-pool=" + fmt(base_acc) +
                  " (<= " + fmt(kBaselineAccuracy) + "), gap=" + fmt(acc - base_acc) + ", train seconds " +
                  fmt(full.result.train_seconds) + "/" + fmt(base.result.train_seconds)};
}

Outcome criterion_unet(Datasets& data) {
  const Trained full = train(unet_run(), data.segmentation(), "span-unet");
  RunConfig none = unet_run();
  none.model.skip = SkipMode::none;
  const Trained no_skip = train(none, data.segmentation(), "span-unet-noskip");
  const double dice = full.result.eval.dice, dice_none = no_skip.result.eval.dice;
  const bool ok = dice >= kUnetDice && dice - dice_none >= kSkipMargin && full.result.train_seconds < kTrainSeconds &&
                  no_skip.result.train_seconds < kTrainSeconds;
  return {ok, "dice=" + fmt(dice) + " (>= " + fmt(kUnetDice) + "), no-skip dice=" + fmt(dice_none) +
                  " (margin " + fmt(dice - dice_none) + " >= " + fmt(kSkipMargin) + "), train seconds " +
                  fmt(full.result.train_seconds) + "/" + fmt(no_skip.result.train_seconds)};
}

Outcome criterion_ablations(Datasets& data) {
  const double full = full_mil(data).result.eval.accuracy;
  bool ok = true;
  std::string d = "full=" + fmt(full);
  for (const char* name : {"no_sac", "no_car", "no_shift", "no_ctx", "no_rpb"}) {
    const Trained t = train(with_ablations(mil_run(), {name}), data.classification(), name);
    const bool echoed = t.metrics.find(std::string("ablations=") + name) != std::string::npos;
    const double acc = t.result.eval.accuracy;
    const bool below = acc <= full - kAblationMargin;
    ok = ok && echoed && below;
    d += std::string("; ") + name + "=" + fmt(acc) + (echoed ? "" : " (not echoed)") + (below ? "" : " (not below)");
  }
  return {ok, d};
}

// ---- 11-12 ------------------------------------------------------------------

Outcome criterion_losses(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  bool ce_exact = true;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> p(1 + rng() % 50);
    for (double& v : p) v = u(rng);
    const std::vector<std::uint8_t> empty(p.size(), 0);
    for (double lambda : {0.0, 0.25, 0.75, 1.0})
      ce_exact = ce_exact && hybrid_loss(p, empty, LossSpec{LossKind::hybrid, lambda, 1.0, 3}) == binary_ce_loss(p, empty);
  }
  const Matrix<double> half(1, 3, 0.0);
  const double uncensored = survival_nll_loss(half, std::vector<int>{0}, std::vector<int>{0});
  const double censored = survival_nll_loss(half, std::vector<int>{0}, std::vector<int>{1});
  const bool nll_ok = std::abs(uncensored - 0.6931) <= 1e-4 && std::abs(censored - 0.6931) <= 1e-4;
  return {ce_exact && nll_ok, std::string("hybrid==CE on empty masks: ") + (ce_exact ? "yes" : "no") +
                                  "; survival NLL fixtures " + fmt(uncensored) + ", " + fmt(censored) +
                                  " (0.6931 +- 1e-4)"};
}

Outcome criterion_bench(std::uint64_t seed) {
  BenchSpec spec;
  spec.seed = seed;
  spec.repeats = 5;
  const BenchRow r = bench_one(0.05, 128, spec);
  const bool ok = r.sparse_ms < r.dense_ms && r.sparse_bytes < r.dense_bytes;
  return {ok, "occupancy 0.05 on 128x128: n=" + std::to_string(r.n) + " sparse_ms=" + fmt(r.sparse_ms) +
                  " dense_ms=" + fmt(r.dense_ms) + " sparse_bytes=" + std::to_string(r.sparse_bytes) +
                  " dense_bytes=" + std::to_string(r.dense_bytes)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> selected;
  std::uint64_t seed = 0;
  app.add_option("--criteria", selected, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 12));
  app.add_option("--seed", seed, "Seed for the randomised criteria");
  CLI11_PARSE(app, argc, argv);

  Datasets data;
  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
      {1, {"conv oracle equivalence", [&] { return criterion_conv_oracle(seed + 101); }}},
      {2, {"attention oracle equivalence", [&] { return criterion_attention_oracle(seed + 202); }}},
      {3, {"rulebook set-equality", [&] { return criterion_rulebooks(seed + 303); }}},
      {4, {"gradient checks", [&] { return criterion_gradients(seed + 404); }}},
      {5, {"token reduction", [&] { return criterion_token_reduction(seed + 505); }}},
      {6, {"coordinate round trip", [&] { return criterion_round_trip(seed + 606); }}},
      {7, {"permutation and translation invariance", [&] { return criterion_invariance(seed + 707); }}},
      {8, {"desk-scale MIL learning", [&] { return criterion_mil(data); }}},
      {9, {"desk-scale segmentation", [&] { return criterion_unet(data); }}},
      {10, {"ablation toggles", [&] { return criterion_ablations(data); }}},
      {11, {"loss unit values", [&] { return criterion_losses(seed + 1111); }}},
      {12, {"benchmark sanity", [&] { return criterion_bench(seed + 1212); }}},
  };
  std::set<int> run(selected.begin(), selected.end());
  if (run.empty())
    for (const auto& [id, _] : criteria) run.insert(id);

  bool all = true;
  for (int id : run) {
    const auto& [name, fn] = criteria.at(id);
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << " " << name << ": " << o.detail << " ["
              << fmt(seconds_since(t0)) << " s]" << std::endl;
  }
  return all ? 0 : 1;
}
