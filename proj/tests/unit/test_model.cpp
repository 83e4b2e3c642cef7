// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mmbeam/checkpoint.hpp"
#include "mmbeam/model.hpp"
#include "mmbeam/tensor_io.hpp"
#include "mmbeam/training.hpp"
#include "oracles.hpp"
#include "tmpdir.hpp"

using namespace mmbeam;
using namespace mmbeam::model;

namespace {

torch::Tensor named(const torch::nn::Module& m, const std::string& name) {
  for (const auto& p : m.named_parameters()) {
    if (p.key() == name) return p.value();
  }
  for (const auto& b : m.named_buffers()) {
    if (b.key() == name) return b.value();
  }
  throw std::runtime_error("no tensor " + name);
}

data::Batch random_inputs(const ModelConfig& cfg, int b, std::uint64_t seed) {
  torch::manual_seed(seed);
  data::Batch x;
  x.camera = torch::rand({b, 3, cfg.camera_size, cfg.camera_size});
  x.lidar = torch::rand({b, 1, cfg.lidar_size, cfg.lidar_size});
  x.radar = torch::rand({b, 2, cfg.radar_size, cfg.radar_size});
  x.gps = torch::rand({b, 2}) * 2 - 1;
  x.labels = torch::randint(0, cfg.num_beams, {b}, torch::kLong);
  return x;
}

FusionConfig block_config(int grid, int layers, bool position, int heads = 1) {
  FusionConfig f;
  f.num_heads = heads;
  f.token_grid = grid;
  f.num_layers = layers;
  f.position_embedding = position;
  return f;
}

}  // namespace

TEST_SUITE("model_core") {

TEST_CASE("encoder on zero input returns the batch-norm shift, non-negative") {
  Encoder enc(EncoderConfig{3, 64, 7, 2});
  enc->eval();
  torch::NoGradGuard ng;
  named(*enc, "bn.bias").uniform_(-1.0, 1.0);
  const auto y = enc->forward(torch::zeros({1, 3, 32, 32}));
  CHECK(y.min().item<float>() >= 0.0f);
  const auto expect = torch::relu(named(*enc, "bn.bias")).view({1, 64, 1, 1}).expand_as(y);
  CHECK(torch::allclose(y, expect, 0.0, 1e-6));
}

TEST_CASE("encoder quarters the spatial size") {
  Encoder enc(EncoderConfig{3, 64, 7, 2});
  enc->eval();
  torch::NoGradGuard ng;
  CHECK(enc->forward(torch::rand({1, 3, 256, 256})).sizes() == torch::IntArrayRef({1, 64, 64, 64}));
}

TEST_CASE("encoder matches a scalar-loop convolution on an 8x8 input") {
  Encoder enc(EncoderConfig{2, 3, 7, 2});
  enc->eval();
  torch::NoGradGuard ng;
  torch::manual_seed(3);
  named(*enc, "bn.weight").uniform_(0.5, 1.5);
  named(*enc, "bn.bias").uniform_(-0.2, 0.2);
  named(*enc, "bn.running_mean").uniform_(-0.1, 0.1);
  named(*enc, "bn.running_var").uniform_(0.5, 2.0);
  const auto x = torch::randn({1, 2, 8, 8});
  const auto y = enc->forward(x);
  REQUIRE(y.sizes() == torch::IntArrayRef({1, 3, 2, 2}));

  const auto w = named(*enc, "conv.weight");
  const auto g = named(*enc, "bn.weight"), b = named(*enc, "bn.bias");
  const auto rm = named(*enc, "bn.running_mean"), rv = named(*enc, "bn.running_var");
  double act[3][4][4];
  for (int o = 0; o < 3; ++o) {
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        double s = 0.0;
        for (int c = 0; c < 2; ++c) {
          for (int u = 0; u < 7; ++u) {
            for (int v = 0; v < 7; ++v) {
              const int r = 2 * i + u - 3, q = 2 * j + v - 3;
              if (r < 0 || r >= 8 || q < 0 || q >= 8) continue;
              s += x[0][c][r][q].item<double>() * w[o][c][u][v].item<double>();
            }
          }
        }
        s = (s - rm[o].item<double>()) / std::sqrt(rv[o].item<double>() + 1e-5) * g[o].item<double>() +
            b[o].item<double>();
        act[o][i][j] = std::max(0.0, s);
      }
    }
  }
  for (int o = 0; o < 3; ++o) {
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        double m = -1e300;
        for (int u = -1; u <= 1; ++u) {
          for (int v = -1; v <= 1; ++v) {
            const int r = 2 * i + u, q = 2 * j + v;
            if (r >= 0 && r < 4 && q >= 0 && q < 4) m = std::max(m, act[o][r][q]);
          }
        }
        CHECK(y[0][o][i][j].item<double>() == doctest::Approx(m).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("encoder errors") {
  Encoder enc(EncoderConfig{2, 8, 7, 2});
  CHECK_THROWS_AS(enc->forward(torch::rand({1, 3, 16, 16})), std::invalid_argument);
  CHECK_THROWS_AS(enc->forward(torch::rand({1, 2, 2, 2})), std::invalid_argument);
}

TEST_CASE("gps projection examples") {
  GpsBranch g(16, std::array<int, 4>{8, 16, 32, 64});
  torch::NoGradGuard ng;
  for (auto& p : g->parameters()) p.zero_();
  CHECK(g->token(2, g->trunk(torch::rand({3, 2}))).abs().max().item<float>() == 0.0f);

  // bias-only network: trunk is relu(b2) and the stage token is W3 relu(b2) + b3 = b3
  named(*g, "stage3.bias").uniform_(-1.0, 1.0);
  named(*g, "fc1.bias").uniform_(-1.0, 1.0);
  const auto t = g->token(2, g->trunk(torch::zeros({1, 2})));
  CHECK(torch::equal(t[0], named(*g, "stage3.bias")));

  CHECK_THROWS_AS(g->trunk(torch::full({1, 2}, std::nanf(""))), std::invalid_argument);
}

TEST_CASE("gps branch of the full configuration has about 0.17M parameters") {
  const auto cfg = ModelConfig::full();
  GpsBranch g(cfg.gps_hidden, cfg.fusion.embed_dims);
  CHECK(std::abs(count_parameters(*g) / 0.17e6 - 1.0) <= 0.03);
}

TEST_CASE("token spans") {
  const auto s = token_spans(8, 1);
  CHECK(s[0] == std::pair<int64_t, int64_t>{0, 64});
  CHECK(s[1] == std::pair<int64_t, int64_t>{64, 128});
  CHECK(s[2] == std::pair<int64_t, int64_t>{128, 192});
  CHECK(s[3] == std::pair<int64_t, int64_t>{192, 193});
}

TEST_CASE("tokenize with grid 1 and identity projection averages a constant map") {
  FusionBlock b(4, 4, block_config(1, 1, false));
  torch::NoGradGuard ng;
  b->tok_w.copy_(torch::eye(4));
  b->tok_b.zero_();
  std::array<torch::Tensor, 3> maps{torch::full({1, 4, 5, 5}, 2.5), torch::rand({1, 4, 5, 5}),
                                    torch::rand({1, 4, 3, 3})};
  const auto seq = b->tokenize(maps, torch::zeros({1, 4}));
  REQUIRE(seq.tokens.sizes() == torch::IntArrayRef({1, 4, 4}));
  CHECK(torch::allclose(seq.tokens[0][0], torch::full({4}, 2.5), 0.0, 1e-6));
}

TEST_CASE("tokenize pools with window means") {
  FusionBlock b(3, 3, block_config(2, 1, false));
  torch::NoGradGuard ng;
  b->tok_w.copy_(torch::eye(3));
  b->tok_b.zero_();
  torch::manual_seed(5);
  std::array<torch::Tensor, 3> maps{torch::rand({1, 3, 5, 5}), torch::rand({1, 3, 4, 4}), torch::rand({1, 3, 3, 3})};
  const auto gps = torch::rand({1, 3});
  const auto seq = b->tokenize(maps, gps);
  for (int m = 0; m < 3; ++m) {
    const int64_t n = maps[m].size(2);
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        // adaptive pooling windows [floor(i n / g), ceil((i + 1) n / g))
        const int64_t r0 = i * n / 2, r1 = ((i + 1) * n + 1) / 2;
        const int64_t c0 = j * n / 2, c1 = ((j + 1) * n + 1) / 2;
        for (int c = 0; c < 3; ++c) {
          double s = 0.0;
          for (int64_t r = r0; r < r1; ++r) {
            for (int64_t q = c0; q < c1; ++q) s += maps[m][0][c][r][q].item<double>();
          }
          s /= static_cast<double>((r1 - r0) * (c1 - c0));
          CHECK(seq.tokens[0][m * 4 + i * 2 + j][c].item<double>() == doctest::Approx(s).epsilon(1e-6));
        }
      }
    }
  }
  CHECK(torch::allclose(seq.tokens[0][12], gps[0]));
  CHECK_THROWS_AS(b->tokenize({maps[0], maps[1], torch::rand({2, 3, 3, 3})}, gps), std::invalid_argument);
}

TEST_CASE("attention rows are stochastic") {
  FusionLayer l(16, 4, 64, false);
  torch::manual_seed(2);
  std::vector<torch::Tensor> w;
  torch::NoGradGuard ng;
  l->attention(torch::randn({2, 13, 16}) * 3.0, &w);
  REQUIRE(w.size() == 4);
  for (const auto& a : w) CHECK((a.sum(-1) - 1.0).abs().max().item<double>() <= 1e-5);
}

TEST_CASE("single-token attention returns the value row") {
  FusionLayer l(8, 2, 16, false);
  l->to(torch::kDouble);
  torch::NoGradGuard ng;
  const auto x = torch::randn({1, 1, 8}, torch::kDouble);
  std::vector<torch::Tensor> w;
  const auto out = l->attention(x, &w);
  for (const auto& a : w) CHECK(a.item<double>() == 1.0);
  const auto v = torch::nn::functional::linear(x, l->v_w, l->v_b);
  CHECK(torch::allclose(out, torch::nn::functional::linear(v, l->o_w, l->o_b), 0.0, 1e-12));
}

TEST_CASE("attention matches the loop oracle on a hand-set 3-token case") {
  FusionLayer l(4, 1, 8, false);
  l->to(torch::kDouble);
  torch::NoGradGuard ng;
  const auto o = torch::TensorOptions().dtype(torch::kDouble);
  l->q_w.copy_(torch::tensor({{1.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0, 0.0}, {0.0, 0.0, 0.0, 1.0}}, o));
  l->k_w.copy_(torch::tensor({{0.5, 0.0, 0.0, 0.0}, {0.0, -1.0, 0.0, 0.0}, {0.0, 0.0, 2.0, 0.0}, {1.0, 0.0, 0.0, 1.0}}, o));
  l->v_w.copy_(torch::tensor({{0.0, 1.0, 0.0, 0.0}, {1.0, 0.0, 0.0, 0.0}, {0.0, 0.0, 0.0, 1.0}, {0.0, 0.0, 1.0, 0.0}}, o));
  l->o_w.copy_(torch::eye(4, o) * 2.0);
  l->q_b.zero_();
  l->k_b.fill_(0.1);
  l->v_b.zero_();
  l->o_b.fill_(-0.5);
  const auto x = torch::tensor({{{1.0, 0.0, 0.5, -1.0}, {0.0, 2.0, -0.5, 0.3}, {1.5, -1.0, 0.0, 0.7}}}, o);
  const auto ref = oracle::attention(oracle::to_mat(x[0]), *l);
  CHECK(oracle::max_abs_diff(ref.out, l->attention(x)[0]) <= 1e-12);
}

TEST_CASE("random multi-head attention matches the loop oracle (both paths, both scales)") {
  for (bool full_scale : {false, true}) {
    FusionLayer l(16, 4, 32, full_scale);
    l->to(torch::kDouble);
    torch::NoGradGuard ng;
    const auto x = torch::randn({1, 7, 16}, torch::kDouble);
    const auto ref = oracle::attention(oracle::to_mat(x[0]), *l);
    std::vector<torch::Tensor> w;
    CHECK(oracle::max_abs_diff(ref.out, l->attention(x)[0]) <= 1e-10);
    CHECK(oracle::max_abs_diff(ref.out, l->attention(x, &w)[0]) <= 1e-10);
    for (std::size_t h = 0; h < 4; ++h) CHECK(oracle::max_abs_diff(ref.weights[h], w[h][0]) <= 1e-12);
  }
}

TEST_CASE("multi-head attention is permutation equivariant without position embeddings") {
  FusionBlock b(8, 16, block_config(2, 2, false, 4));
  b->to(torch::kDouble);
  torch::NoGradGuard ng;
  const auto x = torch::randn({2, 13, 16}, torch::kDouble);
  const auto perm = torch::randperm(13, torch::kLong);
  const auto y = b->run_layers(x);
  const auto yp = b->run_layers(x.index_select(1, perm));
  CHECK((yp - y.index_select(1, perm)).abs().max().item<double>() <= 1e-6);
}

TEST_CASE("zeroed attention and ffn output projections reduce a layer to its norms") {
  FusionLayer l(16, 4, 64, false);
  torch::NoGradGuard ng;
  for (auto* p : {&l->o_w, &l->o_b, &l->fc2_w, &l->fc2_b}) p->zero_();
  const auto x = torch::randn({2, 9, 16});
  namespace F = torch::nn::functional;
  const auto opts1 = F::LayerNormFuncOptions({16}).weight(l->ln1_w).bias(l->ln1_b);
  const auto opts2 = F::LayerNormFuncOptions({16}).weight(l->ln2_w).bias(l->ln2_b);
  const auto expect = F::layer_norm(F::layer_norm(x, opts1), opts2);
  CHECK((l->forward(x) - expect).abs().max().item<double>() <= 1e-6);
}

TEST_CASE("zero fused tokens leave branch maps unchanged") {
  FusionBlock b(8, 16, block_config(2, 1, true, 4));
  torch::NoGradGuard ng;
  b->detok_b.zero_();
  std::array<torch::Tensor, 3> maps{torch::rand({2, 8, 4, 4}), torch::rand({2, 8, 4, 4}), torch::rand({2, 8, 2, 2})};
  const auto out = b->detokenize_residual(torch::zeros({2, 13, 16}), maps);
  for (int m = 0; m < 3; ++m) CHECK(torch::equal(out.maps[m], maps[m]));
}

TEST_CASE("zeroed block output projection keeps the residual identity") {
  FusionBlock b(8, 16, block_config(2, 2, true, 4));
  torch::NoGradGuard ng;
  b->detok_w.zero_();
  b->detok_b.zero_();
  std::array<torch::Tensor, 3> maps{torch::rand({1, 8, 4, 4}), torch::rand({1, 8, 4, 4}), torch::rand({1, 8, 2, 2})};
  const auto out = b->forward(maps, torch::rand({1, 16}));
  for (int m = 0; m < 3; ++m) CHECK((out.maps[m] - maps[m]).abs().max().item<double>() <= 1e-6);
}

TEST_CASE("detokenize matches nearest upsampling plus residual add") {
  FusionBlock b(3, 5, block_config(2, 1, false));
  b->to(torch::kDouble);
  torch::NoGradGuard ng;
  const auto o = torch::TensorOptions().dtype(torch::kDouble);
  std::array<torch::Tensor, 3> maps{torch::rand({1, 3, 2, 2}, o), torch::rand({1, 3, 5, 5}, o),
                                    torch::rand({1, 3, 4, 4}, o)};
  const auto fused = torch::randn({1, 13, 5}, o);
  const auto out = b->detokenize_residual(fused, maps);
  const auto proj = torch::nn::functional::linear(fused, b->detok_w, b->detok_b);  // [1, 13, 3]
  for (int m = 0; m < 3; ++m) {
    const int64_t n = maps[m].size(2);
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t q = 0; q < n; ++q) {
        const int64_t gr = r * 2 / n, gq = q * 2 / n;  // nearest source cell
        for (int c = 0; c < 3; ++c) {
          const double expect = maps[m][0][c][r][q].item<double>() + proj[0][m * 4 + gr * 2 + gq][c].item<double>();
          CHECK(out.maps[m][0][c][r][q].item<double>() == doctest::Approx(expect).epsilon(1e-12));
        }
      }
    }
  }
  CHECK(torch::allclose(out.gps, proj[0][12].unsqueeze(0)));
  CHECK_THROWS_AS(b->detokenize_residual(torch::zeros({1, 12, 5}, o), maps), std::invalid_argument);
}

TEST_CASE("aggregation") {
  torch::manual_seed(4);
  const auto v = torch::randn({3, 4, 6});
  CHECK(torch::allclose(aggregate(torch::zeros({4}), v), v.mean(1), 1e-6, 1e-6));
  const auto sat = aggregate(torch::tensor({0.0f, 0.0f, 60.0f, 0.0f}), v);
  CHECK(torch::allclose(sat, v.select(1, 2), 1e-5, 1e-5));
  for (int t = 0; t < 10; ++t) {
    const auto w = torch::softmax(torch::randn({4}) * 5.0, 0);
    CHECK(std::abs(w.sum().item<double>() - 1.0) <= 1e-6);
  }
  CHECK_THROWS_AS(aggregate(torch::zeros({4}), torch::zeros({3, 3, 6})), std::invalid_argument);
}

TEST_CASE("beam head examples") {
  BeamHead h(512, std::vector<int>{256, 128}, 64);
  torch::NoGradGuard ng;
  for (auto& p : h->parameters()) p.zero_();
  const auto logits = h->forward(torch::randn({2, 512}));
  CHECK(logits.sizes() == torch::IntArrayRef({2, 64}));
  CHECK(logits.abs().max().item<float>() == 0.0f);
  const std::vector<int> truth{0, 5};
  const auto ranked = rf::rank_predictions({logits.data_ptr<float>(), 128}, 64, truth);
  CHECK(ranked.ranked_indices[0][0] == 0);
  CHECK_THROWS_AS(h->forward(torch::randn({2, 500})), std::invalid_argument);
}

TEST_CASE("beam head gradient matches central differences") {
  BeamHead h(6, std::vector<int>{5, 4}, 3);
  h->to(torch::kDouble);
  const auto x = torch::randn({4, 6}, torch::kDouble);
  const auto t = torch::tensor({0, 2, 1, 2}, torch::kLong);
  const auto r = oracle::check_gradients([&] { return train::focal_loss(h->forward(x), t, 2.0, 1.0); },
                                         h->parameters(), 60, 7);
  CHECK(r.checked == 60);
  CHECK(r.max_rel_err <= 1e-3);
}

TEST_CASE("fusion layer gradient matches central differences") {
  FusionLayer l(8, 4, 32, false);
  l->to(torch::kDouble);
  const auto x = torch::randn({2, 5, 8}, torch::kDouble);
  const auto proj = torch::randn({2, 5, 8}, torch::kDouble);
  const auto r = oracle::check_gradients([&] { return (l->forward(x) * proj).sum(); }, l->parameters(), 60, 3);
  CHECK(r.max_rel_err <= 1e-3);
}

TEST_CASE("tiny network gradient of the focal loss matches central differences") {
  auto m = BeamTransFuser(oracle::tiny_config());
  m->to(torch::kDouble);
  m->eval();
  const auto x = random_inputs(m->config(), 3, 1).to(torch::kDouble);
  const auto r = oracle::check_gradients([&] { return train::focal_loss(m->forward(x), x.labels, 2.0, 1.0); },
                                         m->parameters(), 50, 11);
  CHECK(r.checked == 50);
  CHECK(r.max_rel_err <= 1e-3);
}

TEST_CASE("model forward shape and determinism") {
  auto m = train::init_model(ModelConfig::toy(), 1);
  m->eval();
  torch::NoGradGuard ng;
  for (int b : {1, 3}) {
    const auto x = random_inputs(m->config(), b, 2);
    const auto a = m->forward(x);
    CHECK(a.sizes() == torch::IntArrayRef({b, 8}));
    CHECK(torch::equal(a, m->forward(x)));
  }
}

TEST_CASE("stage maps follow the channel and resolution ladder") {
  const auto cfg = ModelConfig::toy();
  auto m = BeamTransFuser(cfg);
  m->eval();
  torch::NoGradGuard ng;
  auto st = m->encode(random_inputs(cfg, 1, 0));
  for (int s = 0; s < kNumStages; ++s) {
    st = m->run_stage(s, st);
    for (int b = 0; b < 3; ++b) CHECK(st.maps[b].size(1) == cfg.stage_channels[s]);
    CHECK(st.maps[0].size(2) == cfg.camera_size / 4 / (1 << s));
    CHECK(st.maps[1].size(2) == cfg.lidar_size / 4 / (1 << s));
    st = m->run_fusion(s, st);
    CHECK(st.gps_fused.size(1) == cfg.stage_channels[s]);
  }
}

TEST_CASE("parameter census") {
  const auto empty = param_census(std::vector<std::pair<std::string, int64_t>>{});
  CHECK(empty.total() == 0);

  auto m = BeamTransFuser(ModelConfig::toy());
  const auto c = param_census(*m);
  CHECK(c.total() == count_parameters(*m));
  CHECK(c.fusion == std::accumulate(c.fusion_blocks.begin(), c.fusion_blocks.end(), int64_t{0}));
  CHECK(c.camera > c.lidar);
  CHECK(c.other == count_parameters(*m->head) + 4);
}

TEST_CASE("fusion layer parameter count follows the closed form") {
  for (int d : {64, 128, 256, 512}) {
    FusionLayer l(d, 4, 4 * d, false);
    const int64_t D = d;
    // 4 D^2 attention + 8 D^2 FFN, 4 D + 4 D + D biases, 4 D norm terms
    CHECK(count_parameters(*l) == 12 * D * D + 13 * D);
  }
}

TEST_CASE("reference configuration census matches the published ledger within 3%") {
  auto m = BeamTransFuser(ModelConfig::full());
  const auto c = param_census(*m);
  auto near = [](int64_t v, double ref_m) { return std::abs(static_cast<double>(v) / (ref_m * 1e6) - 1.0) <= 0.03; };
  CHECK(near(c.camera, 21.3));
  CHECK(near(c.lidar, 11.17));
  CHECK(near(c.radar, 11.18));
  CHECK(near(c.gps, 0.17));
  CHECK(near(c.fusion, 34.52));
  CHECK(near(c.total(), 78.42));
}

TEST_CASE("model config validation and json round trip") {
  auto cfg = ModelConfig::toy();
  const auto back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.hash() == cfg.hash());
  cfg.fusion.num_heads = 3;
  cfg.camera_size = 8;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find("num_heads") != std::string::npos);
    CHECK(msg.find("camera_size") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip is forward-bitwise identical") {
  auto m = train::init_model(ModelConfig::toy(), 5);
  TempDir dir("ckpt");
  ckpt::save_model(dir / "m.mmck", m, {{"epoch", 3}});
  nlohmann::json meta;
  auto back = ckpt::load_model(dir / "m.mmck", &meta);
  CHECK(meta.at("epoch").get<int>() == 3);
  CHECK(meta.at("config_hash").get<std::string>() == m->config().hash());
  m->eval();
  torch::NoGradGuard ng;
  const auto x = random_inputs(m->config(), 2, 9);
  CHECK(torch::equal(m->forward(x), back->forward(x)));
  CHECK(ckpt::encode_archive(ckpt::read_archive(dir / "m.mmck")) == io::read_file(dir / "m.mmck"));
}

}  // TEST_SUITE
