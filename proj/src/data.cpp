// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "mmbeam/errors.hpp"
#include "mmbeam/rf_core.hpp"
#include "mmbeam/seeding.hpp"
#include "mmbeam/tensor_io.hpp"

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace mmbeam::data {

namespace {

// Portable draws (the std distributions are implementation-defined).
struct Rng {
  std::mt19937_64 eng;
  explicit Rng(std::uint64_t seed) : eng(seed) {}
  double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  std::uint64_t below(std::uint64_t n) { return eng() % n; }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

torch::Tensor resize_square(const torch::Tensor& chw, int size) {
  if (chw.size(1) == size && chw.size(2) == size) return chw;
  return F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{size, size})
                                              .mode(torch::kBilinear)
                                              .align_corners(false))
      .squeeze(0);
}

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw DataError(std::string(what) + " contains non-finite values");
  }
}

}  // namespace

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::kCamera: return "camera";
    case Modality::kLidar: return "lidar";
    case Modality::kRadar: return "radar";
    case Modality::kGps: return "gps";
  }
  return "unknown";
}

Modality parse_modality(const std::string& name) {
  if (name == "camera") return Modality::kCamera;
  if (name == "lidar") return Modality::kLidar;
  if (name == "radar") return Modality::kRadar;
  if (name == "gps") return Modality::kGps;
  throw ConfigError("unknown modality '" + name + "' (expected camera, lidar, radar or gps)");
}

const torch::Tensor& MultiModalSample::tensor(Modality m) const {
  switch (m) {
    case Modality::kCamera: return camera;
    case Modality::kLidar: return lidar;
    case Modality::kRadar: return radar;
    default: throw std::invalid_argument("modality has no tensor: " + modality_name(m));
  }
}

torch::Tensor& MultiModalSample::tensor(Modality m) {
  return const_cast<torch::Tensor&>(std::as_const(*this).tensor(m));
}

std::array<double, 2> GpsBounds::normalize(double lat, double lon) const {
  auto norm = [](double v, double lo, double hi) {
    if (!(hi > lo)) return 0.0;
    return std::clamp(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0);
  };
  return {norm(lat, lat_min, lat_max), norm(lon, lon_min, lon_max)};
}

std::map<int, GpsBounds> compute_gps_bounds(std::span<const IndexEntry> entries) {
  std::map<int, GpsBounds> out;
  std::set<int> seen;
  for (const auto& e : entries) {
    auto& b = out[e.scenario];
    if (seen.insert(e.scenario).second) {
      b = {e.lat, e.lat, e.lon, e.lon};
    } else {
      b.lat_min = std::min(b.lat_min, e.lat);
      b.lat_max = std::max(b.lat_max, e.lat);
      b.lon_min = std::min(b.lon_min, e.lon);
      b.lon_max = std::max(b.lon_max, e.lon);
    }
  }
  return out;
}

DatasetIndex load_index(const fs::path& root) {
  const fs::path csv = root / kIndexFile;
  std::ifstream in(csv);
  if (!in) throw DataError("missing dataset index " + csv.string());
  DatasetIndex index;
  index.root = root;
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv.string() + ": empty file (no header)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kIndexHeader) {
    throw DataError(csv.string() + ": header must be '" + std::string(kIndexHeader) + "', got '" +
                    line + "'");
  }
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    const std::string where = csv.string() + " row " + std::to_string(row);
    if (f.size() != 8) {
      throw DataError(where + ": expected 8 fields, got " + std::to_string(f.size()));
    }
    IndexEntry e;
    e.sample_id = f[0];
    if (e.sample_id.empty()) throw DataError(where + ": empty sample_id");
    if (!parse_number(f[1], e.scenario)) throw DataError(where + ": bad scenario '" + f[1] + "'");
    if (!parse_number(f[5], e.lat) || !parse_number(f[6], e.lon)) {
      throw DataError(where + ": bad lat/lon");
    }
    e.camera = f[2];
    e.lidar = f[3];
    e.radar = f[4];
    e.power = f[7];
    for (const auto& [name, rel] : {std::pair{"camera", &e.camera}, std::pair{"lidar", &e.lidar},
                                    std::pair{"radar", &e.radar}, std::pair{"power", &e.power}}) {
      if (rel->empty() || !fs::exists(root / *rel)) {
        throw DataError(where + ": " + name + " file not found: " + (root / *rel).string());
      }
    }
    index.entries.push_back(std::move(e));
  }
  index.gps_bounds = compute_gps_bounds(index.entries);
  const fs::path meta = root / kMetaFile;
  if (fs::exists(meta)) {
    try {
      index.meta = nlohmann::json::parse(io::read_file(meta));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(meta.string() + ": " + e.what());
    }
  }
  return index;
}

PreprocessConfig preprocess_from_meta(const DatasetIndex& index, const PreprocessConfig& fallback) {
  PreprocessConfig cfg = fallback;
  if (index.meta.contains("preprocess")) {
    const auto& p = index.meta["preprocess"];
    cfg.camera_size = p.value("camera_size", cfg.camera_size);
    cfg.lidar_size = p.value("lidar_size", cfg.lidar_size);
    cfg.radar_size = p.value("radar_size", cfg.radar_size);
    cfg.num_beams = p.value("num_beams", cfg.num_beams);
  }
  return cfg;
}

RawSample load_raw(const DatasetIndex& index, std::size_t i) {
  const auto& e = index.entries.at(i);
  RawSample raw;
  raw.camera = io::read_mmbt(index.root / e.camera);
  raw.lidar = io::read_mmbt(index.root / e.lidar);
  raw.radar = io::read_mmbt(index.root / e.radar);
  raw.power = io::read_mmbt(index.root / e.power);
  raw.lat = e.lat;
  raw.lon = e.lon;
  raw.scenario_id = e.scenario;
  raw.sample_id = e.sample_id;
  return raw;
}

MultiModalSample load_sample(const DatasetIndex& index, std::size_t i,
                             const PreprocessConfig& cfg) {
  const auto raw = load_raw(index, i);
  try {
    return preprocess_sample(raw, cfg, index.gps_bounds.at(raw.scenario_id));
  } catch (const DataError& err) {
    throw DataError("sample '" + raw.sample_id + "': " + err.what());
  }
}

std::vector<MultiModalSample> load_all(const DatasetIndex& index, const PreprocessConfig& cfg) {
  std::vector<MultiModalSample> out;
  out.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out.push_back(load_sample(index, i, cfg));
  return out;
}

void write_dataset(const fs::path& root, std::span<const MultiModalSample> samples,
                   const nlohmann::json& meta) {
  std::error_code ec;
  for (const char* sub : {"camera", "lidar", "radar", "power"}) {
    fs::create_directories(root / sub, ec);
    if (ec) throw DataError("cannot create " + (root / sub).string() + ": " + ec.message());
  }
  std::ostringstream csv;
  csv << kIndexHeader << '\n';
  for (const auto& s : samples) {
    const std::string file = s.sample_id + ".mmbt";
    io::write_mmbt(root / "camera" / file, s.camera);
    io::write_mmbt(root / "lidar" / file, s.lidar);
    io::write_mmbt(root / "radar" / file, s.radar);
    io::write_mmbt(root / "power" / file, s.power);
    csv << s.sample_id << ',' << s.scenario_id << ",camera/" << file << ",lidar/" << file
        << ",radar/" << file << ',' << format_double(s.lat_lon[0]) << ','
        << format_double(s.lat_lon[1]) << ",power/" << file << '\n';
  }
  io::write_file(root / kIndexFile, csv.str());
  io::write_file(root / kMetaFile, meta.dump(2) + "\n");
}

int label_from_power(std::span<const float> power, int expected_length) {
  if (static_cast<int>(power.size()) != expected_length) {
    throw std::invalid_argument("power vector has length " + std::to_string(power.size()) +
                                ", expected " + std::to_string(expected_length));
  }
  int best = 0;
  for (std::size_t i = 0; i < power.size(); ++i) {
    if (!std::isfinite(power[i])) {
      throw std::invalid_argument("power vector entry " + std::to_string(i) + " is not finite");
    }
    if (power[i] > power[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

torch::Tensor preprocess_camera(const torch::Tensor& raw, int size) {
  if (raw.dim() != 3) throw DataError("camera must be rank 3");
  torch::Tensor chw = raw;
  if (raw.size(0) != 3) {
    if (raw.size(2) != 3) throw DataError("camera must have 3 channels");
    chw = raw.permute({2, 0, 1});
  }
  if (chw.scalar_type() == torch::kUInt8) {
    chw = chw.to(torch::kFloat32).div(255.0);
  } else {
    chw = chw.to(torch::kFloat32).clamp(0.0, 1.0);
  }
  auto out = resize_square(chw.contiguous(), size).clamp(0.0, 1.0).contiguous();
  require_finite(out, "camera");
  return out;
}

torch::Tensor preprocess_lidar(const torch::Tensor& raw, int size) {
  torch::Tensor m = raw;
  if (m.dim() == 2) m = m.unsqueeze(0);
  if (m.dim() != 3 || m.size(0) != 1) throw DataError("lidar must be [H, W] or [1, H, W]");
  if (m.scalar_type() == torch::kUInt8) {
    m = m.to(torch::kFloat32).div(255.0);
  } else {
    m = m.to(torch::kFloat32).clamp_min(0.0);
    require_finite(m, "lidar");
    const float mx = m.max().item<float>();
    if (mx > 1.0f) m = m / mx;
  }
  auto out = resize_square(m.contiguous(), size).clamp(0.0, 1.0).contiguous();
  require_finite(out, "lidar");
  return out;
}

torch::Tensor preprocess_radar(const torch::Tensor& raw, int size) {
  if (raw.dim() != 3 || raw.size(0) != 2) throw DataError("radar must be [2, H, W]");
  auto m = raw.to(torch::kFloat32);
  require_finite(m, "radar");
  m = resize_square(m.contiguous(), size).clone();
  for (int64_t c = 0; c < 2; ++c) {
    auto ch = m[c];
    const float lo = ch.min().item<float>();
    const float hi = ch.max().item<float>();
    if (hi > lo) {
      ch.sub_(lo).div_(hi - lo);
    } else {
      ch.zero_();
    }
  }
  require_finite(m, "radar");
  return m.contiguous();
}

torch::Tensor lidar_bev_occupancy(const torch::Tensor& points, int size, double x_max,
                                  double y_max) {
  if (points.dim() != 2 || points.size(1) < 2) throw DataError("point cloud must be [N, >=2]");
  if (size < 1 || !(x_max > 0.0) || !(y_max > 0.0)) {
    throw std::invalid_argument("bad BEV grid parameters");
  }
  auto grid = torch::zeros({1, size, size});
  auto g = grid.accessor<float, 3>();
  const auto p = points.to(torch::kFloat64).contiguous();
  auto pa = p.accessor<double, 2>();
  for (int64_t i = 0; i < p.size(0); ++i) {
    const double x = pa[i][0];
    const double y = pa[i][1];
    if (!std::isfinite(x) || !std::isfinite(y)) continue;
    if (x < 0.0 || x >= x_max || y <= -y_max || y >= y_max) continue;
    // row 0 is the far edge, columns run left to right
    const auto row = static_cast<int64_t>((1.0 - x / x_max) * size);
    const auto col = static_cast<int64_t>((y_max - y) / (2.0 * y_max) * size);
    g[0][std::clamp<int64_t>(row, 0, size - 1)][std::clamp<int64_t>(col, 0, size - 1)] = 1.0f;
  }
  return grid;
}

MultiModalSample preprocess_sample(const RawSample& raw, const PreprocessConfig& cfg,
                                   const GpsBounds& bounds) {
  MultiModalSample s;
  s.sample_id = raw.sample_id;
  s.scenario_id = raw.scenario_id;
  s.camera = preprocess_camera(raw.camera, cfg.camera_size);
  s.lidar = preprocess_lidar(raw.lidar, cfg.lidar_size);
  s.radar = preprocess_radar(raw.radar, cfg.radar_size);
  if (!std::isfinite(raw.lat) || !std::isfinite(raw.lon)) throw DataError("gps is not finite");
  s.lat_lon = {raw.lat, raw.lon};
  s.gps = bounds.normalize(raw.lat, raw.lon);
  s.power = raw.power.to(torch::kFloat32).flatten().contiguous();
  try {
    s.label = label_from_power({s.power.data_ptr<float>(), static_cast<std::size_t>(s.power.numel())},
                               cfg.num_beams);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  return s;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Split split_indices(std::span<const int> scenarios, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  Split out;
  auto take = [&](const std::vector<std::size_t>& rows, std::uint64_t seed, bool keep_one_val) {
    const auto order = shuffled_order(rows.size(), seed);
    auto n_train = static_cast<std::size_t>(
        std::llround(spec.train_fraction * static_cast<double>(rows.size())));
    if (keep_one_val && n_train >= rows.size() && !rows.empty()) n_train = rows.size() - 1;
    for (std::size_t k = 0; k < order.size(); ++k) {
      (k < n_train ? out.train : out.val).push_back(rows[order[k]]);
    }
  };
  if (spec.stratify_by_scenario) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < scenarios.size(); ++i) groups[scenarios[i]].push_back(i);
    for (const auto& [scenario, rows] : groups) {
      take(rows, derive_seed(spec.seed, "split", static_cast<std::uint64_t>(scenario)), true);
    }
  } else {
    std::vector<std::size_t> rows(scenarios.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    take(rows, derive_seed(spec.seed, "split"), false);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

Split split_dataset(const DatasetIndex& index, const SplitSpec& spec) {
  std::vector<int> scenarios;
  scenarios.reserve(index.size());
  for (const auto& e : index.entries) scenarios.push_back(e.scenario);
  return split_indices(scenarios, spec);
}

DatasetIndex subset(const DatasetIndex& index, std::span<const std::size_t> rows) {
  DatasetIndex out;
  out.root = index.root;
  out.gps_bounds = index.gps_bounds;
  out.meta = index.meta;
  for (auto r : rows) out.entries.push_back(index.entries.at(r));
  return out;
}

PreprocessConfig SyntheticSceneConfig::preprocess() const {
  return {camera_size, lidar_size, radar_size, num_beams};
}

nlohmann::json SyntheticSceneConfig::to_json() const {
  return {{"num_samples", num_samples},   {"num_beams", num_beams},
          {"camera_size", camera_size},   {"lidar_size", lidar_size},
          {"radar_size", radar_size},     {"noise_camera", noise_camera},
          {"noise_lidar", noise_lidar},   {"noise_radar", noise_radar},
          {"noise_gps", noise_gps},       {"num_scenarios", num_scenarios},
          {"sector_jitter", sector_jitter}, {"seed", seed}};
}

namespace {

constexpr double kRsuLat = 33.4200;
constexpr double kRsuLon = -111.9290;
constexpr double kMaxRangeMetres = 40.0;
constexpr double kMetresPerDegree = 111111.0;

void add_noise(torch::Tensor& t, double stddev, Rng& rng) {
  if (stddev <= 0.0) return;
  auto* p = t.data_ptr<float>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] += static_cast<float>(stddev * rng.normal());
}

torch::Tensor render_camera(const SceneLatent& z, int size, double brightness) {
  auto img = torch::empty({3, size, size});
  auto a = img.accessor<float, 3>();
  const double col = z.azimuth * (size - 1);
  // nearer vehicles sit lower in the frame
  const double row = size * (0.30 + 0.45 * (0.75 - z.range) / 0.30);
  const double sigma = size / 18.0;
  const std::array<double, 3> colour{1.0, 0.8, 0.35};
  const std::array<double, 3> background{0.12, 0.14, 0.18};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double d2 = (x - col) * (x - col) + (y - row) * (y - row);
      const double blob = std::exp(-d2 / (2.0 * sigma * sigma));
      for (int c = 0; c < 3; ++c) {
        a[c][y][x] = static_cast<float>(brightness * (background[c] + (colour[c] - background[c]) * blob));
      }
    }
  }
  return img;
}

torch::Tensor render_lidar(const SceneLatent& z, int size) {
  auto bev = torch::empty({1, size, size});
  auto a = bev.accessor<float, 3>();
  const double cx = 0.5 * (size - 1);
  const double cy = size - 1;
  const double phi = std::numbers::pi * (1.0 - z.azimuth);
  const double rho = 0.6 * z.range * (size - 1);
  const double sigma_r = size / 32.0;
  const double sigma_phi = 0.07;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x - cx;
      const double dy = cy - y;
      const double r = std::hypot(dx, dy);
      const double ang = std::atan2(dy, dx);
      const double dr = r - rho;
      const double da = ang - phi;
      a[0][y][x] = static_cast<float>(std::exp(-dr * dr / (2.0 * sigma_r * sigma_r) -
                                               da * da / (2.0 * sigma_phi * sigma_phi)));
    }
  }
  return bev;
}

torch::Tensor render_radar(const SceneLatent& z, int size) {
  auto map = torch::empty({2, size, size});
  auto a = map.accessor<float, 3>();
  const double range_row = (1.0 - (z.range - 0.45) / 0.30) * 0.6 * (size - 1) + 0.2 * (size - 1);
  const double angle_col = z.azimuth * (size - 1);
  const double doppler_col = (0.5 + 0.4 * std::cos(std::numbers::pi * z.azimuth)) * (size - 1);
  const double sigma = size / 14.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dy2 = (y - range_row) * (y - range_row);
      a[0][y][x] = static_cast<float>(
          std::exp(-((x - angle_col) * (x - angle_col) + dy2) / (2.0 * sigma * sigma)));
      a[1][y][x] = static_cast<float>(
          std::exp(-((x - doppler_col) * (x - doppler_col) + dy2) / (2.0 * sigma * sigma)));
    }
  }
  return map;
}

}  // namespace

std::vector<MultiModalSample> synth_generate(const SyntheticSceneConfig& cfg) {
  return synth_generate(cfg, nullptr);
}

std::vector<MultiModalSample> synth_generate(const SyntheticSceneConfig& cfg,
                                             std::vector<SceneLatent>* latents) {
  if (cfg.num_samples < 0) throw ConfigError("num_samples must be >= 0");
  if (cfg.num_beams < 2) throw ConfigError("num_beams must be >= 2");
  if (cfg.camera_size < 8 || cfg.lidar_size < 8 || cfg.radar_size < 8) {
    throw ConfigError("synthetic tensor sizes must be >= 8");
  }
  if (cfg.num_scenarios < 1) throw ConfigError("num_scenarios must be >= 1");
  if (!(cfg.sector_jitter > 0.0 && cfg.sector_jitter <= 1.0)) {
    throw ConfigError("sector_jitter must lie in (0, 1]");
  }
  for (double n : {cfg.noise_camera, cfg.noise_lidar, cfg.noise_radar, cfg.noise_gps}) {
    if (n < 0.0) throw ConfigError("noise levels must be >= 0");
  }
  const auto codebook = rf::make_dft_codebook(cfg.num_beams, cfg.num_beams);
  std::vector<MultiModalSample> out;
  out.reserve(static_cast<std::size_t>(cfg.num_samples));
  if (latents) latents->clear();
  std::vector<IndexEntry> geo;
  for (int i = 0; i < cfg.num_samples; ++i) {
    Rng rng(derive_seed(cfg.seed, "synth", static_cast<std::uint64_t>(i)));
    SceneLatent z;
    z.beam = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_beams)));
    const double offset = (rng.uniform() - 0.5) * cfg.sector_jitter;
    z.azimuth = (z.beam + 0.5 + offset) / cfg.num_beams;
    z.range = 0.45 + 0.30 * rng.uniform();
    const int scenario = 1 + i % cfg.num_scenarios;
    // later scenarios are night-time
    const double brightness = scenario > (cfg.num_scenarios + 1) / 2 ? 0.6 : 1.0;

    MultiModalSample s;
    char id[32];
    std::snprintf(id, sizeof(id), "s%06d", i);
    s.sample_id = id;
    s.scenario_id = scenario;
    s.camera = render_camera(z, cfg.camera_size, brightness);
    add_noise(s.camera, cfg.noise_camera, rng);
    s.camera.clamp_(0.0, 1.0);
    s.lidar = render_lidar(z, cfg.lidar_size);
    add_noise(s.lidar, cfg.noise_lidar, rng);
    s.lidar.clamp_(0.0, 1.0);
    s.radar = render_radar(z, cfg.radar_size);
    add_noise(s.radar, cfg.noise_radar, rng);
    s.radar = preprocess_radar(s.radar, cfg.radar_size);

    const double phi = std::numbers::pi * (1.0 - z.azimuth);
    const double metres = z.range * kMaxRangeMetres;
    const double east = metres * std::cos(phi) + cfg.noise_gps * rng.normal();
    const double north = metres * std::sin(phi) + cfg.noise_gps * rng.normal();
    s.lat_lon = {kRsuLat + north / kMetresPerDegree,
                 kRsuLon + east / (kMetresPerDegree * std::cos(kRsuLat * std::numbers::pi / 180.0))};

    const auto h = rf::steering_vector(cfg.num_beams, -1.0 + 2.0 * z.azimuth);
    const auto p = rf::beam_powers(codebook, h);
    s.power = torch::empty({cfg.num_beams});
    for (int m = 0; m < cfg.num_beams; ++m) s.power[m] = static_cast<float>(p[static_cast<std::size_t>(m)]);
    s.label = label_from_power({s.power.data_ptr<float>(), static_cast<std::size_t>(cfg.num_beams)},
                               cfg.num_beams);
    if (s.label != z.beam) throw std::logic_error("synthetic power peak disagrees with latent beam");

    IndexEntry e;
    e.scenario = scenario;
    e.lat = s.lat_lon[0];
    e.lon = s.lat_lon[1];
    geo.push_back(e);
    out.push_back(std::move(s));
    if (latents) latents->push_back(z);
  }
  const auto bounds = compute_gps_bounds(geo);
  for (auto& s : out) s.gps = bounds.at(s.scenario_id).normalize(s.lat_lon[0], s.lat_lon[1]);
  return out;
}

Batch Batch::to(torch::Dtype dtype) const {
  return {camera.to(dtype), lidar.to(dtype), radar.to(dtype), gps.to(dtype), labels};
}

Batch collate(std::span<const MultiModalSample> samples, std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("cannot collate an empty batch");
  std::vector<torch::Tensor> cam, lid, rad;
  cam.reserve(rows.size());
  lid.reserve(rows.size());
  rad.reserve(rows.size());
  auto gps = torch::empty({static_cast<int64_t>(rows.size()), 2});
  auto labels = torch::empty({static_cast<int64_t>(rows.size())}, torch::kLong);
  auto ga = gps.accessor<float, 2>();
  auto la = labels.accessor<int64_t, 1>();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& s = samples[rows[k]];
    cam.push_back(s.camera);
    lid.push_back(s.lidar);
    rad.push_back(s.radar);
    ga[static_cast<int64_t>(k)][0] = static_cast<float>(s.gps[0]);
    ga[static_cast<int64_t>(k)][1] = static_cast<float>(s.gps[1]);
    la[static_cast<int64_t>(k)] = s.label;
  }
  return {torch::stack(cam), torch::stack(lid), torch::stack(rad), gps, labels};
}

Batch collate(std::span<const MultiModalSample> samples) {
  std::vector<std::size_t> rows(samples.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return collate(samples, rows);
}

}  // namespace mmbeam::data
