#include "span/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "span/byte_io.hpp"
#include "span/config.hpp"
#include "span/error.hpp"

namespace span {

void SyntheticTaskSpec::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigError, m); };
  if (grid < 1) fail("grid must be >= 1");
  if (feature_dim < 2) fail("feature_dim must be >= 2");
  if (!(min_occupancy > 0.0 && min_occupancy <= max_occupancy && max_occupancy <= 1.0))
    fail("occupancy range must satisfy 0 < min <= max <= 1");
  if (noise < 0.0) fail("noise must be >= 0");
  if (cluster_radius < 1) fail("cluster_radius must be >= 1");
  const int side = 2 * cluster_radius + 1;
  if (cluster_min < 1 || cluster_min > cluster_max || cluster_max > side * side)
    fail("cluster sizes must lie in [1, (2 * cluster_radius + 1)^2]");
  if (near_min < side || near_min > near_max || far_min <= near_max)
    fail("need 2 * cluster_radius + 1 <= near_min <= near_max < far_min");
  if (min_blobs < 0 || min_blobs > max_blobs) fail("blob count range");
  if (!(min_radius > 0.0 && min_radius <= max_radius)) fail("radius range");
  if (signal_channels == 0 || signal_channels > feature_dim) fail("signal_channels must lie in [1, feature_dim]");
  if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac >= 1.0) fail("split fractions");
}

SyntheticTaskSpec default_task_spec(TaskKind kind) {
  SyntheticTaskSpec s;
  s.kind = kind;
  if (kind == TaskKind::segmentation) {
    s.grid = 24;
    s.num_maps = 500;
    s.min_occupancy = 0.4;
    s.max_occupancy = 0.7;
    s.signal_channels = 3;
  } else {
    s.feature_dim = 4;
    s.noise = 0.5;
  }
  return s;
}

const std::vector<Sample>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw Error(ErrorCode::InvalidArgument, "unknown split '" + name + "'");
}

namespace {

using Rng = std::mt19937_64;

struct Cell {
  int x, y;
};

// Eden growth from a random seed cell until `target` cells are occupied.
std::vector<std::uint8_t> grow_tissue(Rng& rng, int grid, std::size_t target) {
  std::vector<std::uint8_t> occ(static_cast<std::size_t>(grid * grid), 0);
  std::vector<std::uint8_t> queued(occ.size(), 0);
  std::vector<Cell> frontier;
  std::uniform_int_distribution<int> mid(grid / 4, std::max(grid / 4, grid - 1 - grid / 4));
  const Cell start{mid(rng), mid(rng)};
  frontier.push_back(start);
  queued[static_cast<std::size_t>(start.y * grid + start.x)] = 1;
  std::size_t count = 0;
  while (count < target && !frontier.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, frontier.size() - 1);
    const std::size_t i = pick(rng);
    const Cell c = frontier[i];
    frontier[i] = frontier.back();
    frontier.pop_back();
    occ[static_cast<std::size_t>(c.y * grid + c.x)] = 1;
    ++count;
    const Cell nb[4] = {{c.x + 1, c.y}, {c.x - 1, c.y}, {c.x, c.y + 1}, {c.x, c.y - 1}};
    for (const Cell& n : nb) {
      if (n.x < 0 || n.y < 0 || n.x >= grid || n.y >= grid) continue;
      auto& q = queued[static_cast<std::size_t>(n.y * grid + n.x)];
      if (q) continue;
      q = 1;
      frontier.push_back(n);
    }
  }
  return occ;
}

std::size_t draw_target(Rng& rng, const SyntheticTaskSpec& s) {
  const double cells = static_cast<double>(s.grid) * s.grid;
  std::uniform_real_distribution<double> occ(s.min_occupancy, s.max_occupancy);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(occ(rng) * cells)));
}

std::vector<Cell> tissue_neighbours(const std::vector<std::uint8_t>& occ, int grid, Cell c, int radius) {
  std::vector<Cell> out;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const int x = c.x + dx, y = c.y + dy;
      if (x >= 0 && y >= 0 && x < grid && y < grid && occ[static_cast<std::size_t>(y * grid + x)])
        out.push_back(Cell{x, y});
    }
  return out;
}

int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

SparseMap<float> assemble(const std::vector<std::uint8_t>& occ, int grid, const SyntheticTaskSpec& s, Rng& rng,
                          const std::vector<float>& shift_table, std::size_t shift_cols) {
  std::vector<Coord> coords;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x)
      if (occ[static_cast<std::size_t>(y * grid + x)]) coords.push_back(Coord{x, y});
  Matrix<float> feats(coords.size(), s.feature_dim);
  std::normal_distribution<double> noise(0.0, s.noise);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::size_t cell = static_cast<std::size_t>(coords[i].y * grid + coords[i].x);
    for (std::size_t c = 0; c < s.feature_dim; ++c) {
      double v = noise(rng);
      if (c < shift_cols) v += shift_table[cell * shift_cols + c];
      feats(i, c) = static_cast<float>(v);
    }
  }
  return build_sparse_map(std::move(coords), feats, 0);
}

// Returns false when this tissue cannot host both a near and a far layout.
bool classification_sample(Rng& rng, const SyntheticTaskSpec& s, int label, Sample& out) {
  const int g = s.grid;
  const std::vector<std::uint8_t> occ = grow_tissue(rng, g, draw_target(rng, s));
  std::uniform_int_distribution<int> size_dist(s.cluster_min, s.cluster_max);
  const int size_a = size_dist(rng), size_b = size_dist(rng);
  std::vector<Cell> centres_a, centres_b;
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) {
      if (!occ[static_cast<std::size_t>(y * g + x)]) continue;
      const auto n = static_cast<int>(tissue_neighbours(occ, g, Cell{x, y}, s.cluster_radius).size());
      if (n >= size_a) centres_a.push_back(Cell{x, y});
      if (n >= size_b) centres_b.push_back(Cell{x, y});
    }
  auto near = [&](Cell a, Cell b) {
    const int d = chebyshev(a, b);
    return d >= s.near_min && d <= s.near_max;
  };
  auto far = [&](Cell a, Cell b) { return chebyshev(a, b) >= s.far_min; };
  // Accept the tissue only if both labels are realisable on it.
  bool any_near = false, any_far = false;
  for (const Cell& a : centres_a) {
    for (const Cell& b : centres_b) {
      any_near = any_near || near(a, b);
      any_far = any_far || far(a, b);
      if (any_near && any_far) break;
    }
    if (any_near && any_far) break;
  }
  if (!any_near || !any_far) return false;

  std::vector<std::pair<Cell, Cell>> layouts;
  for (const Cell& a : centres_a)
    for (const Cell& b : centres_b)
      if (label == 1 ? near(a, b) : far(a, b)) layouts.emplace_back(a, b);
  const auto [ca, cb] = layouts[std::uniform_int_distribution<std::size_t>(0, layouts.size() - 1)(rng)];

  std::vector<float> shift(static_cast<std::size_t>(g * g) * 2, 0.0f);
  auto place = [&](Cell centre, int size, std::size_t channel) {
    std::vector<Cell> nb = tissue_neighbours(occ, g, centre, s.cluster_radius);
    std::vector<Cell> others;
    for (const Cell& c : nb)
      if (c.x != centre.x || c.y != centre.y) others.push_back(c);
    std::shuffle(others.begin(), others.end(), rng);
    others.resize(static_cast<std::size_t>(size - 1));
    others.push_back(centre);
    for (const Cell& c : others)
      shift[static_cast<std::size_t>(c.y * g + c.x) * 2 + channel] = static_cast<float>(s.marker_amp);
  };
  place(ca, size_a, 0);
  place(cb, size_b, 1);
  out.map = assemble(occ, g, s, rng, shift, 2);
  out.label = label;
  return true;
}

void segmentation_sample(Rng& rng, const SyntheticTaskSpec& s, Sample& out) {
  const int g = s.grid;
  const std::vector<std::uint8_t> occ = grow_tissue(rng, g, draw_target(rng, s));
  std::vector<Cell> tissue;
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x)
      if (occ[static_cast<std::size_t>(y * g + x)]) tissue.push_back(Cell{x, y});
  const int blobs = std::uniform_int_distribution<int>(s.min_blobs, s.max_blobs)(rng);
  std::uniform_real_distribution<double> radius(s.min_radius, s.max_radius);
  std::uniform_int_distribution<std::size_t> pick(0, tissue.size() - 1);
  std::vector<std::uint8_t> tumour(occ.size(), 0);
  for (int b = 0; b < blobs; ++b) {
    const Cell c = tissue[pick(rng)];
    const double r = radius(rng);
    for (const Cell& t : tissue) {
      const double dx = t.x - c.x, dy = t.y - c.y;
      if (dx * dx + dy * dy <= r * r) tumour[static_cast<std::size_t>(t.y * g + t.x)] = 1;
    }
  }
  const std::size_t k = s.signal_channels;
  std::vector<float> shift(occ.size() * k, 0.0f);
  for (std::size_t cell = 0; cell < occ.size(); ++cell)
    if (tumour[cell])
      for (std::size_t c = 0; c < k; ++c) shift[cell * k + c] = static_cast<float>(s.blob_shift);
  out.map = assemble(occ, g, s, rng, shift, k);
  out.mask.resize(out.map.size());
  for (std::size_t i = 0; i < out.map.size(); ++i)
    out.mask[i] = tumour[static_cast<std::size_t>(out.map.coords[i].y * g + out.map.coords[i].x)];
}

std::string sample_id(std::size_t i) {
  std::ostringstream ss;
  ss.width(5);
  ss.fill('0');
  ss << i;
  return ss.str();
}

}  // namespace

Dataset generate_dataset(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Sample> all(spec.num_maps);
  if (spec.kind == TaskKind::classification) {
    std::vector<int> labels(spec.num_maps);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t i = 0; i < all.size(); ++i) {
      int attempts = 0;
      while (!classification_sample(rng, spec, labels[i], all[i]))
        if (++attempts > 1000)
          throw Error(ErrorCode::ConfigError, "tissue too small for the requested cluster distances");
    }
  } else {
    for (Sample& s : all) segmentation_sample(rng, spec, s);
  }
  for (std::size_t i = 0; i < all.size(); ++i) all[i].id = sample_id(i);

  Dataset d;
  d.kind = spec.kind;
  const auto n = static_cast<double>(all.size());
  const auto n_train = static_cast<std::size_t>(std::lround(spec.train_frac * n));
  const auto n_val = std::min(all.size() - n_train, static_cast<std::size_t>(std::lround(spec.val_frac * n)));
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& dst = i < n_train ? d.train : i < n_train + n_val ? d.val : d.test;
    dst.push_back(std::move(all[i]));
  }
  return d;
}

std::vector<std::uint8_t> serialize_mask(std::span<const std::uint8_t> mask) {
  detail::ByteWriter w;
  w.bytes("SPMK", 4);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(mask.size()));
  w.bytes(mask.data(), mask.size());
  return std::move(w.buffer());
}

std::vector<std::uint8_t> deserialize_mask(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (!r.magic("SPMK")) throw Error(ErrorCode::BadMagic, "not a mask file");
  if (const std::uint32_t v = r.u32("version"); v != 1)
    throw Error(ErrorCode::VersionUnsupported, "mask version " + std::to_string(v));
  const std::uint32_t n = r.u32("length");
  r.need(n, "mask bytes");
  std::vector<std::uint8_t> out(bytes.end() - static_cast<std::ptrdiff_t>(r.remaining()),
                                bytes.end() - static_cast<std::ptrdiff_t>(r.remaining()) + n);
  for (std::uint8_t v : out)
    if (v > 1) throw Error(ErrorCode::ParseError, "mask values must be 0 or 1");
  return out;
}

void write_dataset(const std::string& dir, const SyntheticTaskSpec& spec, const Dataset& data) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir + ": " + ec.message());
  {
    std::ofstream task(fs::path(dir) / "task.json");
    if (!task) throw Error(ErrorCode::IoError, "cannot write task.json in " + dir);
    task << to_json(spec) << "\n";
  }
  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw Error(ErrorCode::IoError, "cannot write manifest in " + dir);
  manifest << "split\tfile\tlabel\tmask\n";
  for (const char* name : {"train", "val", "test"}) {
    fs::create_directories(fs::path(dir) / name, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create split directory: " + ec.message());
    for (const Sample& s : data.split(name)) {
      const std::string file = std::string(name) + "/" + s.id + ".span";
      save_span_file(fs::path(dir) / file, s.map);
      std::string mask_file = "-";
      if (data.kind == TaskKind::segmentation) {
        mask_file = std::string(name) + "/" + s.id + ".mask";
        detail::write_file((fs::path(dir) / mask_file).string(), serialize_mask(s.mask));
      }
      manifest << name << '\t' << file << '\t' << s.label << '\t' << mask_file << '\n';
    }
  }
  if (!manifest) throw Error(ErrorCode::IoError, "failed writing manifest in " + dir);
}

Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const SyntheticTaskSpec spec = load_task_spec((fs::path(dir) / "task.json").string());
  std::ifstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw Error(ErrorCode::IoError, "no manifest.tsv in " + dir);
  Dataset d;
  d.kind = spec.kind;
  std::string line;
  std::getline(manifest, line);
  std::size_t line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string split, file, label, mask;
    if (!std::getline(ss, split, '\t') || !std::getline(ss, file, '\t') || !std::getline(ss, label, '\t') ||
        !std::getline(ss, mask))
      throw Error(ErrorCode::ParseError, "manifest line " + std::to_string(line_no) + " is malformed");
    Sample s;
    s.id = fs::path(file).stem().string();
    s.map = load_span_file(fs::path(dir) / file);
    try {
      s.label = std::stoi(label);
    } catch (const std::exception&) {
      throw Error(ErrorCode::ParseError, "manifest line " + std::to_string(line_no) + ": bad label");
    }
    if (mask != "-") {
      s.mask = deserialize_mask(detail::read_file((fs::path(dir) / mask).string()));
      if (s.mask.size() != s.map.size())
        throw Error(ErrorCode::DimensionMismatch, "mask length differs from map size for " + file);
    }
    if (split == "train") d.train.push_back(std::move(s));
    else if (split == "val") d.val.push_back(std::move(s));
    else if (split == "test") d.test.push_back(std::move(s));
    else throw Error(ErrorCode::ParseError, "manifest line " + std::to_string(line_no) + ": unknown split");
  }
  return d;
}

}  // namespace span
