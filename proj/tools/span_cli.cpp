#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "span/attention.hpp"
#include "span/bench.hpp"
#include "span/checkpoint.hpp"
#include "span/config.hpp"
#include "span/error.hpp"
#include "span/kernels.hpp"
#include "span/oracles.hpp"
#include "span/sparse_map.hpp"
#include "span/synth.hpp"
#include "span/train.hpp"

namespace {

using namespace span;

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw Error(ErrorCode::IoError, "cannot write " + path);
  return file;
}

int cmd_gen_data(const std::string& config, const std::string& task, const std::string& out, CLI::Option* seed_opt,
                 std::uint64_t seed, long num_maps, double occupancy) {
  SyntheticTaskSpec spec;
  if (!config.empty()) {
    spec = load_task_spec(config);
  } else {
    if (task != "classification" && task != "segmentation")
      throw Error(ErrorCode::ConfigError, "--task must be classification or segmentation");
    spec = default_task_spec(task == "classification" ? TaskKind::classification : TaskKind::segmentation);
  }
  if (seed_opt->count() > 0) spec.seed = seed;
  if (num_maps >= 0) spec.num_maps = static_cast<std::size_t>(num_maps);
  if (occupancy > 0.0) spec.min_occupancy = spec.max_occupancy = occupancy;
  const Dataset data = generate_dataset(spec);
  write_dataset(out, spec, data);
  std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
            << " train/val/test maps to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out, CLI::Option* seed_opt,
              std::uint64_t seed, const std::vector<std::string>& ablations, const std::string& precision,
              long epochs) {
  RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
  if (!data.empty()) cfg.data_dir = data;
  if (!out.empty()) cfg.out_dir = out;
  if (seed_opt->count() > 0) cfg.seed = seed;
  for (const auto& a : ablations) apply_ablation(cfg.model.ablation, a);
  if (!precision.empty()) cfg.precision = parse_precision(precision);
  if (epochs >= 0) cfg.epochs = static_cast<std::size_t>(epochs);
  const TrainResult r = run_training(cfg, [](const EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " loss=" << e.train_loss << " val=" << e.val.primary() << " ("
              << e.seconds << " s)\n";
  });
  std::cout << format_metrics(cfg, r);
  return 0;
}

int cmd_eval(const std::string& run, const std::string& data, const std::string& split) {
  const EvalMetrics m = run_evaluation(run, data, split);
  RunConfig cfg = load_run_config(run + "/config.json");
  std::cout << format_eval_metrics(cfg, m, split);
  return 0;
}

int cmd_bench(const std::vector<double>& occ, const std::vector<int>& sizes, std::size_t repeats,
              std::uint64_t seed, const std::string& out) {
  BenchSpec spec;
  spec.occupancies = occ;
  spec.sizes = sizes;
  spec.repeats = repeats;
  spec.seed = seed;
  std::ofstream file;
  std::ostream& os = open_out(out, file);
  os << bench_csv_header() << "\n";
  for (int g : sizes)
    for (double o : occ) os << to_csv(bench_one(o, g, spec)) << "\n" << std::flush;
  return 0;
}

int cmd_oracle_check(std::uint64_t seed, std::size_t trials, const std::string& fault) {
  if (trials == 0) {
    std::cerr << "warning: trials=0, nothing checked\n";
    std::cout << "oracle-check: 0 checks, vacuous pass\n";
    return 0;
  }
  std::cout << "isa=" << kernels::to_string(kernels::active_isa()) << "\n";
  const auto results = run_oracle_suite(seed, trials, parse_fault(fault));
  bool ok = true;
  for (const CheckResult& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " max_error=" << r.max_error
              << " tolerance=" << r.tolerance << " trials=" << r.trials << " seconds=" << r.seconds;
    if (!r.detail.empty()) std::cout << " worst=" << r.detail;
    std::cout << "\n";
    ok = ok && r.passed;
  }
  std::cout << (ok ? "all checks passed\n" : "some checks failed\n");
  return ok ? 0 : 1;
}

std::vector<Rect> parse_rects(std::istream& in) {
  std::vector<Rect> rects;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    for (char& c : line)
      if (c == ',' || c == '\t') c = ' ';
    std::istringstream ss(line);
    std::vector<long long> v;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stoll(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": '" + tok + "' is not an integer");
      }
    }
    if (v.empty()) continue;
    if (v.size() != 4 || v[0] < 0 || v[1] < 0 || v[2] <= 0 || v[3] <= 0)
      throw Error(ErrorCode::ParseError,
                  "line " + std::to_string(line_no) + ": expected 'start_x start_y width height' (non-negative)");
    rects.push_back(Rect{v[0], v[1], v[2], v[3]});
  }
  return rects;
}

int cmd_align_grid(const std::string& input, long long step, const std::string& out) {
  std::ifstream file(input);
  if (!file) throw Error(ErrorCode::IoError, "cannot open " + input);
  const std::vector<Rect> rects = parse_rects(file);
  std::set<Coord> coords;
  for (const Rect& r : rects)
    for (const Coord& c : patchify_rect(align_rect(r, step), step)) coords.insert(c);
  std::ofstream of;
  std::ostream& os = open_out(out, of);
  for (const Coord& c : coords) os << c.x << "," << c.y << "\n";
  return 0;
}

int cmd_dump_rpb(const std::string& run, const std::string& param, bool list, const std::string& out) {
  RunConfig cfg = load_run_config(run + "/config.json");
  SpanModel<float> model(cfg.model);
  load_checkpoint(run + "/checkpoint.spck", model.params());
  std::vector<const Param<float>*> tables;
  for (const auto& p : model.params().params())
    if (p.name.size() > 4 && p.name.compare(p.name.size() - 4, 4, ".rpb") == 0) tables.push_back(&p);
  if (list) {
    for (const auto* p : tables) std::cout << p->name << "\n";
    return 0;
  }
  if (tables.empty()) throw Error(ErrorCode::InvalidArgument, "model has no RPB tables (CAR disabled)");
  const Param<float>* table = param.empty() ? tables.front() : &model.params().get(param);
  const auto side = static_cast<long>(std::lround(std::sqrt(static_cast<double>(table->value.rows()))));
  const long w = (side + 1) / 2;
  std::ofstream of;
  std::ostream& os = open_out(out, of);
  os << "dx,dy,head,value\n";
  for (std::size_t r = 0; r < table->value.rows(); ++r)
    for (std::size_t h = 0; h < table->value.cols(); ++h)
      os << static_cast<long>(r) / side - (w - 1) << "," << static_cast<long>(r) % side - (w - 1) << "," << h << ","
         << table->value(r, h) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse hierarchical attention networks on synthetic slide data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "span " + span::build_id());

  std::string config, out, task = "classification", data, precision, run, split = "test", input, fault, param;
  std::uint64_t seed = 0;
  long num_maps = -1, epochs = -1;
  double occupancy = 0.0;
  std::vector<std::string> ablations;
  std::vector<double> occupancies{0.05, 0.25, 1.0};
  std::vector<int> sizes{128};
  std::size_t repeats = 5, trials = 20;
  long long step = 224;
  bool list = false;

  auto* gen = app.add_subcommand("gen-data", "Write a seeded synthetic dataset");
  gen->add_option("--config", config, "Task spec JSON");
  gen->add_option("--task", task, "classification | segmentation (without --config)");
  auto* gen_seed = gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--num-maps", num_maps, "Override the number of maps");
  gen->add_option("--occupancy", occupancy, "Fix the tissue occupancy fraction");

  auto* train = app.add_subcommand("train", "Train SPAN-MIL or SPAN-UNet and write checkpoint + metrics");
  train->add_option("--config", config, "Run config JSON");
  train->add_option("--data", data, "Dataset directory (overrides data_dir)");
  auto* train_seed = train->add_option("--seed", seed, "Initialisation and data-order seed");
  train->add_option("--out", out, "Run output directory");
  train->add_option("--ablation", ablations, "no_sac | no_car | no_shift | no_ctx | no_rpb (repeatable)")
      ->check(CLI::IsMember({"no_sac", "no_car", "no_shift", "no_ctx", "no_rpb"}));
  train->add_option("--precision", precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
  train->add_option("--epochs", epochs, "Override the epoch count");

  auto* eval = app.add_subcommand("eval", "Evaluate a trained run on a dataset split");
  eval->add_option("--run", run, "Run directory written by train")->required();
  eval->add_option("--data", data, "Dataset directory (defaults to the run's data_dir)");
  eval->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* bench = app.add_subcommand("bench", "Sparse vs dense SAC occupancy sweep (CSV, medians)");
  bench->add_option("--occupancies", occupancies, "Occupancy fractions")->delimiter(',');
  bench->add_option("--sizes", sizes, "Grid sides")->delimiter(',');
  bench->add_option("--repeats", repeats, "Repeats per cell (median reported)");
  bench->add_option("--seed", seed, "Layout seed");
  bench->add_option("--out", out, "CSV path (stdout if omitted)");

  auto* oracle = app.add_subcommand("oracle-check", "Run oracle equivalences and gradient checks");
  oracle->add_option("--seed", seed, "Instance seed");
  oracle->add_option("--trials", trials, "Random instances per equivalence check");
  oracle->add_option("--inject-fault", fault, "conv | attention | rulebook | gradient (negative control)");

  auto* align = app.add_subcommand("align-grid", "Align pixel rects to the patch grid and emit coordinates");
  align->add_option("--input", input, "File with one 'start_x start_y width height' per line")->required();
  align->add_option("--step", step, "Patch size in pixels");
  align->add_option("--out", out, "Output path (stdout if omitted)");

  auto* rpb = app.add_subcommand("dump-rpb", "Export an RPB table as CSV (dx,dy,head,value)");
  rpb->add_option("--run", run, "Run directory written by train")->required();
  rpb->add_option("--param", param, "RPB parameter name (default: first)");
  rpb->add_flag("--list", list, "List RPB parameter names");
  rpb->add_option("--out", out, "Output path (stdout if omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(config, task, out, gen_seed, seed, num_maps, occupancy);
    if (*train) return cmd_train(config, data, out, train_seed, seed, ablations, precision, epochs);
    if (*eval) return cmd_eval(run, data, split);
    if (*bench) return cmd_bench(occupancies, sizes, repeats, seed, out);
    if (*oracle) return cmd_oracle_check(seed, trials, fault);
    if (*align) return cmd_align_grid(input, step, out);
    if (*rpb) return cmd_dump_rpb(run, param, list, out);
  } catch (const span::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
