// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Sample schema, dataset index I/O, preprocessing, splitting and the
// synthetic correlated-scene generator.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mmbeam::data {

enum class Modality { kCamera, kLidar, kRadar, kGps };

std::string modality_name(Modality m);
Modality parse_modality(const std::string& name);

// One synchronized observation after preprocessing.
struct MultiModalSample {
  std::string sample_id;
  int scenario_id = 0;
  torch::Tensor camera;  // [3, Hc, Wc] in [0, 1]
  torch::Tensor lidar;   // [1, Hl, Wl] in [0, 1]
  torch::Tensor radar;   // [2, Hr, Wr], per-channel min-max to [0, 1]
  std::array<double, 2> gps{0.0, 0.0};      // normalized to [-1, 1]
  std::array<double, 2> lat_lon{0.0, 0.0};  // raw degrees
  torch::Tensor power;   // [num_beams] float32
  int label = 0;

  const torch::Tensor& tensor(Modality m) const;
  torch::Tensor& tensor(Modality m);
};

// Decoded, not yet normalized tensors for one sample.
struct RawSample {
  torch::Tensor camera;  // uint8 or float, [H, W, 3] or [3, H, W]
  torch::Tensor lidar;   // [H, W] or [1, H, W] map
  torch::Tensor radar;   // [2, H, W]
  torch::Tensor power;   // [num_beams]
  double lat = 0.0;
  double lon = 0.0;
  int scenario_id = 0;
  std::string sample_id;
};

struct PreprocessConfig {
  int camera_size = 256;
  int lidar_size = 256;
  int radar_size = 128;
  int num_beams = 64;
};

struct GpsBounds {
  double lat_min = 0.0, lat_max = 0.0;
  double lon_min = 0.0, lon_max = 0.0;

  std::array<double, 2> normalize(double lat, double lon) const;
};

struct IndexEntry {
  std::string sample_id;
  int scenario = 0;
  std::filesystem::path camera, lidar, radar, power;  // relative to the index root
  double lat = 0.0;
  double lon = 0.0;
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<IndexEntry> entries;
  std::map<int, GpsBounds> gps_bounds;  // per scenario
  nlohmann::json meta;                  // contents of index_meta.json, if any

  std::size_t size() const { return entries.size(); }
};

inline constexpr const char* kIndexHeader = "sample_id,scenario,camera,lidar,radar,lat,lon,power";
inline constexpr const char* kIndexFile = "index.csv";
inline constexpr const char* kMetaFile = "index_meta.json";

// Reads <root>/index.csv; throws DataError naming the row for malformed rows
// and dangling file references.
DatasetIndex load_index(const std::filesystem::path& root);

RawSample load_raw(const DatasetIndex& index, std::size_t i);
MultiModalSample load_sample(const DatasetIndex& index, std::size_t i, const PreprocessConfig& cfg);
std::vector<MultiModalSample> load_all(const DatasetIndex& index, const PreprocessConfig& cfg);

// Preprocess config stored in index_meta.json, falling back to `fallback`.
PreprocessConfig preprocess_from_meta(const DatasetIndex& index, const PreprocessConfig& fallback);

// Writes samples as index.csv + MMBT tensors + index_meta.json.
void write_dataset(const std::filesystem::path& root, std::span<const MultiModalSample> samples,
                   const nlohmann::json& meta);

std::map<int, GpsBounds> compute_gps_bounds(std::span<const IndexEntry> entries);

// argmax with ties to the lowest index
int label_from_power(std::span<const float> power, int expected_length = 64);

MultiModalSample preprocess_sample(const RawSample& raw, const PreprocessConfig& cfg,
                                   const GpsBounds& bounds);

torch::Tensor preprocess_camera(const torch::Tensor& raw, int size);
torch::Tensor preprocess_lidar(const torch::Tensor& raw, int size);
torch::Tensor preprocess_radar(const torch::Tensor& raw, int size);

// Projects an [N, >=2] point cloud (x forward, y left, metres) onto a
// bird's-eye occupancy grid [1, size, size] covering x in [0, x_max], |y| <= y_max.
torch::Tensor lidar_bev_occupancy(const torch::Tensor& points, int size, double x_max,
                                  double y_max);

struct SplitSpec {
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
  bool stratify_by_scenario = true;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Disjoint cover of 0..N-1. With stratification every scenario with at
// least one sample is represented in validation.
Split split_indices(std::span<const int> scenarios, const SplitSpec& spec);
Split split_dataset(const DatasetIndex& index, const SplitSpec& spec);
DatasetIndex subset(const DatasetIndex& index, std::span<const std::size_t> rows);

struct SyntheticSceneConfig {
  int num_samples = 2000;
  int num_beams = 8;
  int camera_size = 64;
  int lidar_size = 64;
  int radar_size = 32;
  double noise_camera = 0.0;
  double noise_lidar = 0.0;
  double noise_radar = 0.0;
  double noise_gps = 0.0;  // metres
  int num_scenarios = 4;
  // Fraction of each beam sector the azimuth may occupy, centred on the beam.
  double sector_jitter = 0.8;
  std::uint64_t seed = 0;

  PreprocessConfig preprocess() const;
  nlohmann::json to_json() const;
};

// Latent state that drives every rendered modality of a synthetic sample.
struct SceneLatent {
  double azimuth = 0.5;  // normalized, (0, 1)
  double range = 0.6;    // normalized, [0.45, 0.75]
  int beam = 0;
};

std::vector<MultiModalSample> synth_generate(const SyntheticSceneConfig& cfg);

// Same draw as synth_generate but also returns the latent per sample.
std::vector<MultiModalSample> synth_generate(const SyntheticSceneConfig& cfg,
                                             std::vector<SceneLatent>* latents);

// Stacked mini-batch.
struct Batch {
  torch::Tensor camera, lidar, radar, gps;  // gps: [B, 2] float32
  torch::Tensor labels;                     // [B] int64

  int64_t size() const { return labels.size(0); }
  Batch to(torch::Dtype dtype) const;
};

Batch collate(std::span<const MultiModalSample> samples, std::span<const std::size_t> rows);
Batch collate(std::span<const MultiModalSample> samples);

// Deterministic Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

}  // namespace mmbeam::data
