// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "mmbeam/data.hpp"
#include "mmbeam/errors.hpp"
#include "mmbeam/tensor_io.hpp"
#include "tmpdir.hpp"

using namespace mmbeam;
using namespace mmbeam::data;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

// Writes a three-row dataset by hand; returns the root.
void write_fixture(const fs::path& root, bool drop_radar_of_row2 = false) {
  for (const char* d : {"cam", "lid", "rad", "pow"}) fs::create_directories(root / d);
  std::string csv = std::string(kIndexHeader) + "\n";
  for (int i = 0; i < 3; ++i) {
    const std::string f = "x" + std::to_string(i) + ".mmbt";
    io::write_mmbt(root / "cam" / f, torch::full({12, 10, 3}, 40 * i, torch::kUInt8));
    io::write_mmbt(root / "lid" / f, torch::rand({20, 20}));
    if (!(drop_radar_of_row2 && i == 1)) io::write_mmbt(root / "rad" / f, torch::randn({2, 16, 16}));
    auto p = torch::zeros({8});
    p[i + 2] = 1.0f;
    io::write_mmbt(root / "pow" / f, p);
    csv += "id" + std::to_string(i) + "," + std::to_string(1 + i % 2) + ",cam/" + f + ",lid/" + f + ",rad/" + f +
           "," + std::to_string(33.4 + 0.001 * i) + "," + std::to_string(-111.9 - 0.001 * i) + ",pow/" + f + "\n";
  }
  write_text(root / kIndexFile, csv);
}

// Matched filters over the sector centres of each beam. They locate the
// rendered target from first principles of each map's geometry (column of
// the camera blob, bearing of the lidar return, angle column of radar ch. 0).
int column_filter(const torch::Tensor& profile, int beams, double sigma) {
  const auto n = profile.size(0);
  auto p = profile - profile.mean();
  int best = 0;
  double best_score = -1e300;
  for (int m = 0; m < beams; ++m) {
    const double centre = (m + 0.5) / beams * static_cast<double>(n - 1);
    double s = 0.0;
    for (int64_t x = 0; x < n; ++x) {
      s += p[x].item<double>() * std::exp(-(x - centre) * (x - centre) / (2.0 * sigma * sigma));
    }
    if (s > best_score) {
      best_score = s;
      best = m;
    }
  }
  return best;
}

int camera_filter(const torch::Tensor& cam, int beams) {
  return column_filter(cam.sum({0, 1}), beams, cam.size(2) / 18.0);
}

int radar_filter(const torch::Tensor& radar, int beams) {
  return column_filter(radar[0].sum(0), beams, radar.size(2) / 14.0);
}

int lidar_filter(const torch::Tensor& bev, int beams) {
  const auto size = bev.size(2);
  const double cx = 0.5 * (size - 1), cy = size - 1;
  auto a = bev.accessor<float, 3>();
  int best = 0;
  double best_score = -1e300;
  for (int m = 0; m < beams; ++m) {
    const double bearing = std::numbers::pi * (1.0 - (m + 0.5) / beams);
    double s = 0.0;
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        const double d = std::atan2(cy - y, x - cx) - bearing;
        s += a[0][y][x] * std::exp(-d * d / (2.0 * 0.07 * 0.07));
      }
    }
    if (s > best_score) {
      best_score = s;
      best = m;
    }
  }
  return best;
}

}  // namespace

TEST_SUITE("data_pipeline") {

TEST_CASE("header-only index has no entries") {
  TempDir dir("idx0");
  write_text(dir / kIndexFile, std::string(kIndexHeader) + "\n");
  CHECK(load_index(dir.path()).size() == 0);
}

TEST_CASE("three-row fixture loads with resolved paths") {
  TempDir dir("idx3");
  write_fixture(dir.path());
  const auto idx = load_index(dir.path());
  REQUIRE(idx.size() == 3);
  for (const auto& e : idx.entries) {
    for (const auto& p : {e.camera, e.lidar, e.radar, e.power}) CHECK(fs::exists(idx.root / p));
  }
  CHECK(idx.entries[1].sample_id == "id1");
  CHECK(idx.entries[1].scenario == 2);

  PreprocessConfig cfg{32, 32, 16, 8};
  const auto s = load_sample(idx, 2, cfg);
  CHECK(s.label == 4);
  CHECK(s.camera.sizes() == torch::IntArrayRef({3, 32, 32}));
  CHECK(s.lidar.sizes() == torch::IntArrayRef({1, 32, 32}));
  CHECK(s.radar.sizes() == torch::IntArrayRef({2, 16, 16}));
  CHECK(std::abs(s.gps[0]) <= 1.0);
  CHECK(std::abs(s.gps[1]) <= 1.0);
}

TEST_CASE("absent radar file names the row and the path") {
  TempDir dir("idxbad");
  write_fixture(dir.path(), true);
  try {
    load_index(dir.path());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 3") != std::string::npos);
    CHECK(msg.find("rad/x1.mmbt") != std::string::npos);
  }
}

TEST_CASE("index errors") {
  TempDir dir("idxerr");
  CHECK_THROWS_AS(load_index(dir.path()), DataError);
  write_text(dir / kIndexFile, "a,b,c\n");
  CHECK_THROWS_AS(load_index(dir.path()), DataError);
  write_text(dir / kIndexFile, std::string(kIndexHeader) + "\nid,1,a,b\n");
  CHECK_THROWS_WITH_AS(load_index(dir.path()), doctest::Contains("row 2"), DataError);
}

TEST_CASE("label_from_power examples") {
  std::vector<float> p(64, 0.0f);
  p[42] = 1.0f;
  CHECK(label_from_power(p) == 42);
  std::vector<float> flat(64, 3.0f);
  CHECK(label_from_power(flat) == 0);

  std::mt19937 rng(2);
  std::uniform_real_distribution<float> u;
  for (int t = 0; t < 50; ++t) {
    std::vector<float> r(64);
    for (auto& x : r) x = u(rng);
    int best = 0;
    for (int i = 1; i < 64; ++i) best = r[i] > r[best] ? i : best;
    CHECK(label_from_power(r) == best);
    // argmax invariance under monotone transforms
    std::vector<float> e(64);
    for (int i = 0; i < 64; ++i) e[i] = std::exp(3.0f * r[i]) + 2.0f;
    CHECK(label_from_power(e) == best);
  }
}

TEST_CASE("label_from_power errors") {
  std::vector<float> p(10, 0.0f);
  CHECK_THROWS_AS(label_from_power(p), std::invalid_argument);
  std::vector<float> q(64, 0.0f);
  q[5] = std::nanf("");
  CHECK_THROWS_AS(label_from_power(q), std::invalid_argument);
}

TEST_CASE("preprocess examples") {
  const auto zeros = preprocess_camera(torch::zeros({90, 120, 3}, torch::kUInt8), 256);
  CHECK(zeros.sizes() == torch::IntArrayRef({3, 256, 256}));
  CHECK(zeros.abs().max().item<float>() == 0.0f);

  const auto ones = preprocess_camera(torch::full({90, 120, 3}, 255, torch::kUInt8), 256);
  CHECK(ones.min().item<float>() == 1.0f);
  CHECK(ones.max().item<float>() == 1.0f);

  torch::manual_seed(0);
  const auto raw_radar = torch::randn({2, 64, 40}) * 30.0 + 5.0;
  const auto radar = preprocess_radar(raw_radar, 128);
  CHECK(radar.sizes() == torch::IntArrayRef({2, 128, 128}));
  for (int c = 0; c < 2; ++c) {
    CHECK(radar[c].min().item<float>() == doctest::Approx(0.0));
    CHECK(radar[c].max().item<float>() == doctest::Approx(1.0));
  }

  const auto lidar = preprocess_lidar(torch::rand({100, 100}) * 7.0, 256);
  CHECK(lidar.sizes() == torch::IntArrayRef({1, 256, 256}));
  CHECK(lidar.min().item<float>() >= 0.0f);
  CHECK(lidar.max().item<float>() <= 1.0f);
}

TEST_CASE("preprocess is a fixed point on preprocessed tensors") {
  torch::manual_seed(1);
  const auto cam = preprocess_camera(torch::randint(0, 256, {40, 50, 3}).to(torch::kUInt8), 64);
  CHECK(torch::equal(preprocess_camera(cam, 64), cam));
  const auto lid = preprocess_lidar(torch::rand({30, 30}) * 3.0, 64);
  CHECK(torch::equal(preprocess_lidar(lid, 64), lid));
  const auto rad = preprocess_radar(torch::randn({2, 20, 20}), 32);
  CHECK(torch::allclose(preprocess_radar(rad, 32), rad, 0.0, 1e-6));
}

TEST_CASE("preprocess errors") {
  CHECK_THROWS_AS(preprocess_camera(torch::zeros({4, 4}), 8), DataError);
  CHECK_THROWS_AS(preprocess_radar(torch::zeros({3, 4, 4}), 8), DataError);
  auto bad = torch::zeros({2, 4, 4});
  bad[0][0][0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(preprocess_radar(bad, 8), DataError);
}

TEST_CASE("bird's-eye projection marks occupied cells") {
  const auto pts = torch::tensor({{10.0, 0.0}, {39.0, 19.0}, {50.0, 0.0}}, torch::kDouble);
  const auto g = lidar_bev_occupancy(pts, 8, 40.0, 20.0);
  CHECK(g.sum().item<float>() == 2.0f);
  CHECK(g[0][6][4].item<float>() == 1.0f);  // x = 10 m straight ahead
  CHECK(g[0][0][0].item<float>() == 1.0f);  // far left corner
}

TEST_CASE("split examples") {
  std::vector<int> one_scenario(10, 1);
  const auto s = split_indices(one_scenario, {0.9, 3, false});
  CHECK(s.train.size() == 9);
  CHECK(s.val.size() == 1);

  std::vector<int> two{1, 1, 1, 1, 1, 2, 2, 2, 2, 2};
  const auto st = split_indices(two, {0.9, 3, true});
  std::set<int> val_scen;
  for (auto i : st.val) val_scen.insert(two[i]);
  CHECK(val_scen == std::set<int>{1, 2});

  const auto a = split_indices(two, {0.7, 11, true});
  const auto b = split_indices(two, {0.7, 11, true});
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);

  CHECK_THROWS_AS(split_indices(two, {1.0, 0, true}), ConfigError);
  CHECK_THROWS_AS(split_indices(two, {0.0, 0, true}), ConfigError);
}

TEST_CASE("splits partition the index") {
  std::mt19937 rng(8);
  for (int t = 0; t < 30; ++t) {
    std::vector<int> scen(static_cast<std::size_t>(5 + t * 7));
    for (auto& x : scen) x = static_cast<int>(rng() % 4);
    for (bool strat : {false, true}) {
      const auto s = split_indices(scen, {0.8, static_cast<std::uint64_t>(t), strat});
      std::set<std::size_t> all(s.train.begin(), s.train.end());
      for (auto v : s.val) CHECK(all.insert(v).second);
      CHECK(all.size() == scen.size());
      CHECK(*all.rbegin() == scen.size() - 1);
    }
  }
}

TEST_CASE("synthetic generator examples") {
  SyntheticSceneConfig cfg;
  cfg.num_samples = 0;
  CHECK(synth_generate(cfg).empty());

  cfg.num_samples = 6;
  cfg.noise_camera = 0.05;
  const auto a = synth_generate(cfg);
  const auto b = synth_generate(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(torch::equal(a[i].camera, b[i].camera));
    CHECK(torch::equal(a[i].lidar, b[i].lidar));
    CHECK(torch::equal(a[i].radar, b[i].radar));
    CHECK(a[i].gps == b[i].gps);
    CHECK(a[i].label == b[i].label);
  }

  cfg.num_beams = 1;
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);
}

TEST_CASE("noise-free synthetic labels are recoverable by matched filters") {
  SyntheticSceneConfig cfg;
  cfg.num_samples = 120;
  cfg.seed = 4;
  const auto samples = synth_generate(cfg);
  int cam = 0, lid = 0, rad = 0;
  for (const auto& s : samples) {
    cam += camera_filter(s.camera, cfg.num_beams) == s.label;
    lid += lidar_filter(s.lidar, cfg.num_beams) == s.label;
    rad += radar_filter(s.radar, cfg.num_beams) == s.label;
    CHECK(label_from_power({s.power.data_ptr<float>(), 8}, 8) == s.label);
  }
  CHECK(cam == 120);
  CHECK(lid == 120);
  CHECK(rad == 120);
}

TEST_CASE("each synthetic modality carries label information") {
  SyntheticSceneConfig cfg;
  cfg.num_samples = 640;
  cfg.camera_size = 32;
  cfg.lidar_size = 32;
  cfg.radar_size = 16;
  cfg.noise_camera = cfg.noise_lidar = cfg.noise_radar = 0.1;
  cfg.noise_gps = 0.1;
  cfg.seed = 12;
  const auto samples = synth_generate(cfg);
  const auto batch = collate(samples);
  const auto labels = batch.labels;
  const std::vector<std::pair<std::string, torch::Tensor>> features{
      {"camera", batch.camera.flatten(1)},
      {"lidar", batch.lidar.flatten(1)},
      {"radar", batch.radar.flatten(1)},
      {"gps", batch.gps}};
  for (const auto& [name, x] : features) {
    torch::manual_seed(0);
    const auto mean = x.narrow(0, 0, 480).mean(0, true);
    const auto sd = x.narrow(0, 0, 480).std(0, true, true) + 1e-3;
    const auto z = (x - mean) / sd;
    auto lin = torch::nn::Linear(x.size(1), 8);
    torch::optim::Adam opt(lin->parameters(), torch::optim::AdamOptions(1e-2));
    for (int step = 0; step < 300; ++step) {
      opt.zero_grad();
      auto loss = torch::cross_entropy_loss(lin(z.narrow(0, 0, 480)), labels.narrow(0, 0, 480));
      loss.backward();
      opt.step();
    }
    torch::NoGradGuard ng;
    const auto pred = lin(z.narrow(0, 480, 160)).argmax(1);
    const double acc = pred.eq(labels.narrow(0, 480, 160)).to(torch::kDouble).mean().item<double>();
    INFO(name << " held-out accuracy " << acc);
    CHECK(acc > 3.0 / 8.0);
  }
}

TEST_CASE("written dataset round-trips through the index loader") {
  SyntheticSceneConfig cfg;
  cfg.num_samples = 5;
  cfg.noise_radar = 0.2;
  const auto samples = synth_generate(cfg);
  TempDir dir("roundtrip");
  write_dataset(dir.path(), samples, {{"preprocess", {{"camera_size", 64}, {"lidar_size", 64}, {"radar_size", 32}, {"num_beams", 8}}}});
  const auto idx = load_index(dir.path());
  REQUIRE(idx.size() == 5);
  const auto pre = preprocess_from_meta(idx, {});
  CHECK(pre.num_beams == 8);
  const auto back = load_all(idx, pre);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(back[i].sample_id == samples[i].sample_id);
    CHECK(back[i].label == samples[i].label);
    CHECK(torch::equal(back[i].camera, samples[i].camera));
    CHECK(torch::equal(back[i].lidar, samples[i].lidar));
    CHECK(torch::allclose(back[i].radar, samples[i].radar, 0.0, 1e-6));
    CHECK(back[i].gps[0] == doctest::Approx(samples[i].gps[0]).epsilon(1e-9));
    CHECK(back[i].gps[1] == doctest::Approx(samples[i].gps[1]).epsilon(1e-9));
  }
}

TEST_CASE("shuffled order is a deterministic permutation") {
  const auto a = shuffled_order(50, 9);
  CHECK(a == shuffled_order(50, 9));
  CHECK(a != shuffled_order(50, 10));
  std::set<std::size_t> s(a.begin(), a.end());
  CHECK(s.size() == 50);
}

}  // TEST_SUITE
