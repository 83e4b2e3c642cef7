// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/model.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mmbeam/errors.hpp"
#include "mmbeam/seeding.hpp"

namespace F = torch::nn::functional;
using json = nlohmann::json;

namespace mmbeam::model {

namespace {

torch::Tensor uniform_param(std::vector<int64_t> shape, int64_t fan_in) {
  const double bound = fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 0.0;
  return torch::empty(shape).uniform_(-bound, bound);
}

void resize_param(torch::Tensor& p, std::vector<int64_t> shape) {
  torch::NoGradGuard guard;
  p.set_data(torch::zeros(shape, p.options()));
  p.mutable_grad() = torch::Tensor();
}

int64_t sum(const std::vector<int64_t>& v) {
  int64_t s = 0;
  for (auto x : v) s += x;
  return s;
}

bool all_equal(const std::vector<int64_t>& v) {
  for (auto x : v) {
    if (x != v.front()) return false;
  }
  return true;
}

template <std::size_t N>
json to_json_array(const std::array<int, N>& a) {
  return json(std::vector<int>(a.begin(), a.end()));
}

template <std::size_t N>
void from_json_array(const json& j, const char* key, std::array<int, N>& out) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<int>>();
  if (v.size() != N) throw ConfigError(std::string("model.") + key + " needs " + std::to_string(N) + " entries");
  for (std::size_t i = 0; i < N; ++i) out[i] = v[i];
}

}  // namespace

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.stage_channels = {16, 32, 64, 128};
  c.camera_blocks = {1, 1, 1, 1};
  c.lidar_blocks = {1, 1, 1, 1};
  c.radar_blocks = {1, 1, 1, 1};
  c.fusion.embed_dims = {16, 32, 64, 128};
  c.fusion.num_layers = 2;
  c.fusion.token_grid = 4;
  c.gps_hidden = 32;
  c.head_hidden = {64, 32};
  c.num_beams = 8;
  c.camera_size = 64;
  c.lidar_size = 64;
  c.radar_size = 32;
  return c;
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  for (int s = 0; s < kNumStages; ++s) {
    if (stage_channels[s] < 1) problems.push_back("stage_channels must be positive");
    if (fusion.embed_dims[s] < 1) problems.push_back("embed_dims must be positive");
    if (fusion.num_heads > 0 && fusion.embed_dims[s] % fusion.num_heads != 0) {
      problems.push_back("embed_dims[" + std::to_string(s) + "]=" +
                         std::to_string(fusion.embed_dims[s]) + " is not divisible by num_heads");
    }
    if (camera_blocks[s] < 1 || lidar_blocks[s] < 1 || radar_blocks[s] < 1) {
      problems.push_back("every stage needs at least one residual block");
    }
  }
  if (fusion.num_heads != kNumModalities) {
    problems.push_back("num_heads must equal the number of modalities (4)");
  }
  if (fusion.ffn_ratio < 1) problems.push_back("ffn_ratio must be >= 1");
  if (fusion.num_layers < 1) problems.push_back("num_layers must be >= 1");
  if (fusion.token_grid < 1) problems.push_back("token_grid must be >= 1");
  if (fusion.gps_tokens != 1) problems.push_back("gps_tokens must be 1");
  if (gps_hidden < 1) problems.push_back("gps_hidden must be >= 1");
  if (num_beams < 1) problems.push_back("num_beams must be >= 1");
  for (int h : head_hidden) {
    if (h < 1) problems.push_back("head_hidden entries must be positive");
  }
  if (camera_size < 32 || lidar_size < 32 || radar_size < 32) {
    problems.push_back("camera_size, lidar_size and radar_size must be >= 32 (four stride-2 stages follow the encoder)");
  }
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

json ModelConfig::to_json() const {
  return {{"stage_channels", to_json_array(stage_channels)},
          {"camera_blocks", to_json_array(camera_blocks)},
          {"lidar_blocks", to_json_array(lidar_blocks)},
          {"radar_blocks", to_json_array(radar_blocks)},
          {"embed_dims", to_json_array(fusion.embed_dims)},
          {"num_heads", fusion.num_heads},
          {"ffn_ratio", fusion.ffn_ratio},
          {"num_layers", fusion.num_layers},
          {"token_grid", fusion.token_grid},
          {"gps_tokens", fusion.gps_tokens},
          {"position_embedding", fusion.position_embedding},
          {"scale_full_dim", fusion.scale_full_dim},
          {"gps_hidden", gps_hidden},
          {"head_hidden", head_hidden},
          {"num_beams", num_beams},
          {"camera_size", camera_size},
          {"lidar_size", lidar_size},
          {"radar_size", radar_size}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  from_json_array(j, "stage_channels", c.stage_channels);
  from_json_array(j, "camera_blocks", c.camera_blocks);
  from_json_array(j, "lidar_blocks", c.lidar_blocks);
  from_json_array(j, "radar_blocks", c.radar_blocks);
  from_json_array(j, "embed_dims", c.fusion.embed_dims);
  c.fusion.num_heads = j.value("num_heads", c.fusion.num_heads);
  c.fusion.ffn_ratio = j.value("ffn_ratio", c.fusion.ffn_ratio);
  c.fusion.num_layers = j.value("num_layers", c.fusion.num_layers);
  c.fusion.token_grid = j.value("token_grid", c.fusion.token_grid);
  c.fusion.gps_tokens = j.value("gps_tokens", c.fusion.gps_tokens);
  c.fusion.position_embedding = j.value("position_embedding", c.fusion.position_embedding);
  c.fusion.scale_full_dim = j.value("scale_full_dim", c.fusion.scale_full_dim);
  c.gps_hidden = j.value("gps_hidden", c.gps_hidden);
  if (j.contains("head_hidden")) c.head_hidden = j.at("head_hidden").get<std::vector<int>>();
  c.num_beams = j.value("num_beams", c.num_beams);
  c.camera_size = j.value("camera_size", c.camera_size);
  c.lidar_size = j.value("lidar_size", c.lidar_size);
  c.radar_size = j.value("radar_size", c.radar_size);
  return c;
}

std::string ModelConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_json().dump())));
  return buf;
}

data::PreprocessConfig ModelConfig::preprocess() const {
  return {camera_size, lidar_size, radar_size, num_beams};
}

EncoderConfig encoder_config(const ModelConfig& cfg, data::Modality m) {
  EncoderConfig e;
  e.out_channels = cfg.stage_channels[0];
  switch (m) {
    case data::Modality::kCamera: e.in_channels = 3; break;
    case data::Modality::kLidar: e.in_channels = 1; break;
    case data::Modality::kRadar: e.in_channels = 2; break;
    default: throw std::invalid_argument("gps has no convolutional encoder");
  }
  return e;
}

// ---------------------------------------------------------------- encoder / ResNet

EncoderImpl::EncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.in_channels, cfg.out_channels, cfg.kernel)
                                                        .stride(cfg.stride)
                                                        .padding(cfg.kernel / 2)
                                                        .bias(false)));
  bn_ = register_module("bn", torch::nn::BatchNorm2d(cfg.out_channels));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    throw std::invalid_argument("encoder expects [B, " + std::to_string(cfg_.in_channels) +
                                ", H, W] input");
  }
  if (x.size(2) < cfg_.kernel / 2 + 1 || x.size(3) < cfg_.kernel / 2 + 1) {
    throw std::invalid_argument("encoder input is smaller than the kernel support");
  }
  auto y = torch::relu(bn_(conv_(x)));
  return F::max_pool2d(y, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
}

BasicBlockImpl::BasicBlockImpl(int in_channels, int out_channels, int stride) {
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3)
                                                          .stride(stride)
                                                          .padding(1)
                                                          .bias(false)));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out_channels));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3)
                                                          .padding(1)
                                                          .bias(false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    downsample_ = register_module(
        "downsample",
        torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)
                                                    .stride(stride)
                                                    .bias(false)),
                              torch::nn::BatchNorm2d(out_channels)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1_(conv1_(x)));
  y = bn2_(conv2_(y));
  auto identity = downsample_ ? downsample_->forward(x) : x;
  return torch::relu(y + identity);
}

BranchImpl::BranchImpl(const EncoderConfig& enc, const std::array<int, kNumStages>& blocks,
                       const std::array<int, kNumStages>& channels) {
  encoder_ = register_module("encoder", Encoder(enc));
  int in = enc.out_channels;
  for (int s = 0; s < kNumStages; ++s) {
    torch::nn::Sequential seq;
    for (int b = 0; b < blocks[s]; ++b) {
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      seq->push_back(BasicBlock(b == 0 ? in : channels[s], channels[s], stride));
    }
    in = channels[s];
    stages_[s] = register_module("stage" + std::to_string(s + 1), seq);
  }
}

torch::Tensor BranchImpl::encode(const torch::Tensor& x) { return encoder_(x); }

torch::Tensor BranchImpl::stage(int s, const torch::Tensor& x) {
  return stages_.at(static_cast<std::size_t>(s))->forward(x);
}

GpsBranchImpl::GpsBranchImpl(int hidden, const std::array<int, kNumStages>& embed_dims) {
  fc1_ = register_module("fc1", torch::nn::Linear(2, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, hidden));
  for (int s = 0; s < kNumStages; ++s) {
    maps_[s] = register_module("stage" + std::to_string(s + 1), torch::nn::Linear(hidden, embed_dims[s]));
  }
}

torch::Tensor GpsBranchImpl::trunk(const torch::Tensor& gps) {
  if (!torch::isfinite(gps).all().item<bool>()) throw std::invalid_argument("gps input is not finite");
  return torch::relu(fc2_(torch::relu(fc1_(gps))));
}

torch::Tensor GpsBranchImpl::token(int s, const torch::Tensor& features) {
  return maps_.at(static_cast<std::size_t>(s))->forward(features);
}

// ---------------------------------------------------------------- fusion layer

FusionLayerImpl::FusionLayerImpl(int embed_dim, int num_heads, int ffn_hidden, bool scale_full)
    : scale_full_dim(scale_full) {
  if (num_heads < 1 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("embed_dim must be divisible by num_heads");
  }
  const int64_t d = embed_dim;
  const int64_t head = d / num_heads;
  qk_widths.assign(static_cast<std::size_t>(num_heads), head);
  v_widths.assign(static_cast<std::size_t>(num_heads), head);
  q_w = register_parameter("q_weight", uniform_param({d, d}, d));
  q_b = register_parameter("q_bias", uniform_param({d}, d));
  k_w = register_parameter("k_weight", uniform_param({d, d}, d));
  k_b = register_parameter("k_bias", uniform_param({d}, d));
  v_w = register_parameter("v_weight", uniform_param({d, d}, d));
  v_b = register_parameter("v_bias", uniform_param({d}, d));
  o_w = register_parameter("out_weight", uniform_param({d, d}, d));
  o_b = register_parameter("out_bias", uniform_param({d}, d));
  ln1_w = register_parameter("ln1_weight", torch::ones({d}));
  ln1_b = register_parameter("ln1_bias", torch::zeros({d}));
  ln2_w = register_parameter("ln2_weight", torch::ones({d}));
  ln2_b = register_parameter("ln2_bias", torch::zeros({d}));
  fc1_w = register_parameter("fc1_weight", uniform_param({ffn_hidden, d}, d));
  fc1_b = register_parameter("fc1_bias", uniform_param({ffn_hidden}, d));
  fc2_w = register_parameter("fc2_weight", uniform_param({d, ffn_hidden}, ffn_hidden));
  fc2_b = register_parameter("fc2_bias", uniform_param({d}, ffn_hidden));
}

double FusionLayerImpl::head_scale(int head) const {
  const auto width = scale_full_dim ? embed_dim() : qk_widths.at(static_cast<std::size_t>(head));
  return 1.0 / std::sqrt(static_cast<double>(width));
}

torch::Tensor FusionLayerImpl::attention(const torch::Tensor& x, std::vector<torch::Tensor>* weights) {
  if (x.dim() != 3 || x.size(2) != embed_dim()) {
    throw std::invalid_argument("attention expects [B, N, " + std::to_string(embed_dim()) + "] tokens");
  }
  const auto q = F::linear(x, q_w, q_b);
  const auto k = F::linear(x, k_w, k_b);
  const auto v = F::linear(x, v_w, v_b);
  const int h = num_heads();
  const int64_t B = x.size(0);
  const int64_t N = x.size(1);
  torch::Tensor heads_out;
  if (!weights && all_equal(qk_widths) && all_equal(v_widths) && !scale_full_dim) {
    const int64_t dq = qk_widths.front();
    const int64_t dv = v_widths.front();
    auto qh = q.view({B, N, h, dq}).transpose(1, 2);
    auto kh = k.view({B, N, h, dq}).transpose(1, 2);
    auto vh = v.view({B, N, h, dv}).transpose(1, 2);
    auto attn = torch::softmax(torch::matmul(qh, kh.transpose(-2, -1)) * head_scale(0), -1);
    heads_out = torch::matmul(attn, vh).transpose(1, 2).reshape({B, N, h * dv});
  } else {
    std::vector<torch::Tensor> outs;
    int64_t qoff = 0;
    int64_t voff = 0;
    for (int i = 0; i < h; ++i) {
      const auto dq = qk_widths[static_cast<std::size_t>(i)];
      const auto dv = v_widths[static_cast<std::size_t>(i)];
      auto qi = q.narrow(2, qoff, dq);
      auto ki = k.narrow(2, qoff, dq);
      auto vi = v.narrow(2, voff, dv);
      auto attn = torch::softmax(torch::matmul(qi, ki.transpose(-2, -1)) * head_scale(i), -1);
      if (weights) weights->push_back(attn);
      outs.push_back(torch::matmul(attn, vi));
      qoff += dq;
      voff += dv;
    }
    heads_out = torch::cat(outs, 2);
  }
  return F::linear(heads_out, o_w, o_b);
}

torch::Tensor FusionLayerImpl::feed_forward(const torch::Tensor& x) {
  return F::linear(torch::relu(F::linear(x, fc1_w, fc1_b)), fc2_w, fc2_b);
}

torch::Tensor FusionLayerImpl::forward(const torch::Tensor& x) {
  const std::vector<int64_t> shape{embed_dim()};
  auto y = F::layer_norm(x + attention(x), F::LayerNormFuncOptions(shape).weight(ln1_w).bias(ln1_b));
  return F::layer_norm(y + feed_forward(y), F::LayerNormFuncOptions(shape).weight(ln2_w).bias(ln2_b));
}

// ---------------------------------------------------------------- fusion block

std::array<std::pair<int64_t, int64_t>, kNumModalities> token_spans(int grid, int gps_tokens) {
  const int64_t per = static_cast<int64_t>(grid) * grid;
  return {{{0, per}, {per, 2 * per}, {2 * per, 3 * per}, {3 * per, 3 * per + gps_tokens}}};
}

FusionBlockImpl::FusionBlockImpl(int branch_channels, int embed_dim, const FusionConfig& cfg)
    : use_position(cfg.position_embedding),
      original_dim_(embed_dim),
      grid_(cfg.token_grid),
      gps_tokens_(cfg.gps_tokens) {
  const int64_t c = branch_channels;
  const int64_t d = embed_dim;
  kept_channels.resize(static_cast<std::size_t>(d));
  for (int64_t i = 0; i < d; ++i) kept_channels[static_cast<std::size_t>(i)] = i;
  tok_w = register_parameter("tok_weight", uniform_param({d, c}, c));
  tok_b = register_parameter("tok_bias", uniform_param({d}, c));
  pos = register_parameter("pos", torch::randn({cfg.num_tokens(), d}) * 0.02, cfg.position_embedding);
  for (int l = 0; l < cfg.num_layers; ++l) {
    layers.push_back(register_module("layer" + std::to_string(l),
                                     FusionLayer(embed_dim, cfg.num_heads, embed_dim * cfg.ffn_ratio,
                                                 cfg.scale_full_dim)));
  }
  detok_w = register_parameter("detok_weight", uniform_param({c, d}, d));
  detok_b = register_parameter("detok_bias", uniform_param({c}, d));
  restore_w = register_parameter("restore_weight", torch::empty({0}));
  restore_b = register_parameter("restore_bias", torch::empty({0}));
}

TokenSequence FusionBlockImpl::tokenize(const std::array<torch::Tensor, kNumImageModalities>& maps,
                                        const torch::Tensor& gps_token) {
  const int64_t B = maps[0].size(0);
  std::vector<torch::Tensor> parts;
  for (const auto& m : maps) {
    if (m.size(0) != B) throw std::invalid_argument("tokenize: inconsistent batch sizes");
    if (m.size(1) != tok_w.size(1)) throw std::invalid_argument("tokenize: branch width mismatch");
    auto pooled = F::adaptive_avg_pool2d(m, F::AdaptiveAvgPool2dFuncOptions({grid_, grid_}));
    parts.push_back(F::linear(pooled.flatten(2).transpose(1, 2), tok_w, tok_b));
  }
  if (gps_token.size(0) != B) throw std::invalid_argument("tokenize: inconsistent batch sizes");
  auto g = gps_token;
  if (static_cast<int64_t>(kept_channels.size()) != g.size(1)) {
    g = g.index_select(1, torch::tensor(kept_channels, torch::kLong));
  }
  parts.push_back(g.unsqueeze(1));
  TokenSequence seq;
  seq.tokens = torch::cat(parts, 1);
  if (use_position) seq.tokens = seq.tokens + pos;
  seq.spans = token_spans(grid_, gps_tokens_);
  return seq;
}

torch::Tensor FusionBlockImpl::run_layers(const torch::Tensor& tokens) {
  auto x = tokens;
  for (auto& layer : layers) x = layer->forward(x);
  return x;
}

torch::Tensor FusionBlockImpl::restore(const torch::Tensor& tokens) const {
  if (has_restore()) return F::linear(tokens, restore_w, restore_b);
  if (tokens.size(2) == original_dim_) return tokens;
  auto shape = tokens.sizes().vec();
  shape.back() = original_dim_;
  return torch::zeros(shape, tokens.options())
      .index_copy(2, torch::tensor(kept_channels, torch::kLong), tokens);
}

FusionBlockImpl::Output FusionBlockImpl::detokenize_residual(
    const torch::Tensor& fused, const std::array<torch::Tensor, kNumImageModalities>& maps) {
  const auto spans = token_spans(grid_, gps_tokens_);
  if (fused.size(1) != spans.back().second) throw std::invalid_argument("detokenize: token count mismatch");
  auto y = F::linear(fused, detok_w, detok_b);  // [B, N, C]
  const int64_t B = y.size(0);
  const int64_t C = y.size(2);
  Output out;
  for (int m = 0; m < kNumImageModalities; ++m) {
    const auto [begin, end] = spans[static_cast<std::size_t>(m)];
    auto grid_map = y.narrow(1, begin, end - begin).transpose(1, 2).reshape({B, C, grid_, grid_});
    const auto& target = maps[static_cast<std::size_t>(m)];
    if (target.size(1) != C) throw std::invalid_argument("detokenize: branch width mismatch");
    if (target.size(2) != grid_ || target.size(3) != grid_) {
      grid_map = F::interpolate(grid_map, F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{target.size(2), target.size(3)})
                                              .mode(torch::kNearest));
    }
    out.maps[static_cast<std::size_t>(m)] = target + grid_map;
  }
  out.gps = y.select(1, spans.back().first);
  return out;
}

FusionBlockImpl::Output FusionBlockImpl::forward(const std::array<torch::Tensor, kNumImageModalities>& maps,
                                                 const torch::Tensor& gps_token) {
  auto seq = tokenize(maps, gps_token);
  return detokenize_residual(restore(run_layers(seq.tokens)), maps);
}

json FusionBlockImpl::structure() const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    layers_json.push_back({{"qk", l->qk_widths}, {"v", l->v_widths}, {"ffn", l->ffn_hidden()}});
  }
  return {{"kept", kept_channels}, {"restore", has_restore()}, {"layers", layers_json}};
}

void FusionBlockImpl::apply_structure(const json& s) {
  kept_channels = s.at("kept").get<std::vector<int64_t>>();
  const auto& lj = s.at("layers");
  if (lj.size() != layers.size()) throw DataError("fusion structure layer count mismatch");
  const int64_t d = static_cast<int64_t>(kept_channels.size());
  const int64_t c = branch_channels();
  const int64_t n = pos.size(0);
  resize_param(tok_w, {d, c});
  resize_param(tok_b, {d});
  resize_param(pos, {n, d});
  if (s.at("restore").get<bool>()) {
    resize_param(restore_w, {original_dim_, d});
    resize_param(restore_b, {original_dim_});
  } else {
    resize_param(restore_w, {0});
    resize_param(restore_b, {0});
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    l->qk_widths = lj[i].at("qk").get<std::vector<int64_t>>();
    l->v_widths = lj[i].at("v").get<std::vector<int64_t>>();
    const int64_t m = lj[i].at("ffn").get<int64_t>();
    const int64_t qk = sum(l->qk_widths);
    const int64_t v = sum(l->v_widths);
    resize_param(l->q_w, {qk, d});
    resize_param(l->q_b, {qk});
    resize_param(l->k_w, {qk, d});
    resize_param(l->k_b, {qk});
    resize_param(l->v_w, {v, d});
    resize_param(l->v_b, {v});
    resize_param(l->o_w, {d, v});
    resize_param(l->o_b, {d});
    for (auto* p : {&l->ln1_w, &l->ln1_b, &l->ln2_w, &l->ln2_b, &l->fc2_b}) resize_param(*p, {d});
    resize_param(l->fc1_w, {m, d});
    resize_param(l->fc1_b, {m});
    resize_param(l->fc2_w, {d, m});
  }
}

// ---------------------------------------------------------------- aggregation / head

torch::Tensor aggregate(const torch::Tensor& importance, const torch::Tensor& vectors) {
  if (vectors.dim() != 3 || vectors.size(1) != importance.size(0)) {
    throw std::invalid_argument("aggregate expects [B, " + std::to_string(importance.size(0)) +
                                ", C] modality vectors");
  }
  auto w = torch::softmax(importance, 0);
  return (vectors * w.view({1, -1, 1})).sum(1);
}

BeamHeadImpl::BeamHeadImpl(int in_features, const std::vector<int>& hidden, int num_beams) {
  int in = in_features;
  std::vector<int> widths = hidden;
  widths.push_back(num_beams);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    layers_.push_back(register_module("fc" + std::to_string(i + 1), torch::nn::Linear(in, widths[i])));
    in = widths[i];
  }
}

int64_t BeamHeadImpl::in_features() const { return layers_.front()->weight.size(1); }

torch::Tensor BeamHeadImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 2 || x.size(1) != in_features()) {
    throw std::invalid_argument("beam head expects [B, " + std::to_string(in_features()) + "] input");
  }
  auto y = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    y = layers_[i]->forward(y);
    if (i + 1 < layers_.size()) y = torch::relu(y);
  }
  return y;
}

// ---------------------------------------------------------------- full model

BeamTransFuserImpl::BeamTransFuserImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  auto branch = register_module("branch", std::make_shared<torch::nn::Module>("Branches"));
  camera = branch->register_module("camera", Branch(encoder_config(cfg, data::Modality::kCamera),
                                                    cfg.camera_blocks, cfg.stage_channels));
  lidar = branch->register_module("lidar", Branch(encoder_config(cfg, data::Modality::kLidar),
                                                  cfg.lidar_blocks, cfg.stage_channels));
  radar = branch->register_module("radar", Branch(encoder_config(cfg, data::Modality::kRadar),
                                                  cfg.radar_blocks, cfg.stage_channels));
  gps = branch->register_module("gps", GpsBranch(cfg.gps_hidden, cfg.fusion.embed_dims));
  for (int s = 0; s < kNumStages; ++s) {
    fusion[s] = register_module("fusion" + std::to_string(s + 1),
                                FusionBlock(cfg.stage_channels[s], cfg.fusion.embed_dims[s], cfg.fusion));
  }
  importance = register_parameter("importance", torch::zeros({kNumModalities}));
  head = register_module("head", BeamHead(cfg.stage_channels[kNumStages - 1], cfg.head_hidden, cfg.num_beams));
}

torch::Dtype BeamTransFuserImpl::dtype() const {
  return torch::typeMetaToScalarType(importance.dtype());
}

ForwardState BeamTransFuserImpl::encode(const data::Batch& batch) {
  const auto b = batch.camera.scalar_type() == dtype() ? batch : batch.to(dtype());
  ForwardState st;
  st.maps = {camera->encode(b.camera), lidar->encode(b.lidar), radar->encode(b.radar)};
  st.gps_features = gps->trunk(b.gps);
  return st;
}

ForwardState BeamTransFuserImpl::run_stage(int c, ForwardState st) {
  st.maps = {camera->stage(c, st.maps[0]), lidar->stage(c, st.maps[1]), radar->stage(c, st.maps[2])};
  return st;
}

ForwardState BeamTransFuserImpl::run_fusion(int c, ForwardState st) {
  auto out = fusion.at(static_cast<std::size_t>(c))->forward(st.maps, gps->token(c, st.gps_features));
  st.maps = out.maps;
  st.gps_fused = out.gps;
  return st;
}

ForwardState BeamTransFuserImpl::run_component(int c, ForwardState st) {
  return run_fusion(c, run_stage(c, std::move(st)));
}

torch::Tensor BeamTransFuserImpl::modality_vectors(const ForwardState& st) {
  std::vector<torch::Tensor> v;
  for (const auto& m : st.maps) v.push_back(m.mean({2, 3}));
  v.push_back(st.gps_fused);
  return torch::stack(v, 1);
}

torch::Tensor BeamTransFuserImpl::finish(const ForwardState& st) {
  return head->forward(aggregate(importance, modality_vectors(st)));
}

torch::Tensor BeamTransFuserImpl::forward(const data::Batch& batch) {
  auto st = encode(batch);
  for (int c = 0; c < kNumStages; ++c) st = run_component(c, std::move(st));
  return finish(st);
}

ForwardState BeamTransFuserImpl::prefix(const data::Batch& batch, int c) {
  auto st = encode(batch);
  for (int i = 0; i < c; ++i) st = run_component(i, std::move(st));
  return run_stage(c, std::move(st));
}

torch::Tensor BeamTransFuserImpl::suffix(ForwardState st, int c) {
  st = run_fusion(c, std::move(st));
  for (int i = c + 1; i < kNumStages; ++i) st = run_component(i, std::move(st));
  return finish(st);
}

json BeamTransFuserImpl::structure() const {
  json f = json::array();
  for (const auto& b : fusion) f.push_back(b->structure());
  return {{"fusion", f}};
}

void BeamTransFuserImpl::apply_structure(const json& s) {
  const auto& f = s.at("fusion");
  if (f.size() != fusion.size()) throw DataError("structure must describe 4 fusion blocks");
  for (std::size_t i = 0; i < fusion.size(); ++i) fusion[i]->apply_structure(f[i]);
}

// ---------------------------------------------------------------- census

json ParamCensus::to_json() const {
  return {{"camera", camera}, {"lidar", lidar},   {"radar", radar},        {"gps", gps},
          {"fusion", fusion}, {"other", other},   {"total", total()},
          {"fusion_blocks", std::vector<int64_t>(fusion_blocks.begin(), fusion_blocks.end())}};
}

std::string ParamCensus::table() const {
  std::ostringstream os;
  const double t = static_cast<double>(std::max<int64_t>(total(), 1));
  auto row = [&](const char* name, int64_t n) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-28s %12.2f %12.2f\n", name, static_cast<double>(n) / 1e6,
                  100.0 * static_cast<double>(n) / t);
    os << buf;
  };
  char head[128];
  std::snprintf(head, sizeof(head), "%-28s %12s %12s\n", "Module", "Params (M)", "Share (%)");
  os << head;
  row("Camera Branch", camera);
  row("LiDAR Branch", lidar);
  row("Radar Branch", radar);
  row("GPS Branch", gps);
  row("Multi-Modal Fusion Blocks", fusion);
  row("Other Layers", other);
  row("Total", total());
  return os.str();
}

ParamCensus param_census(const std::vector<std::pair<std::string, int64_t>>& named_counts) {
  ParamCensus c;
  auto starts = [](const std::string& s, const char* p) { return s.rfind(p, 0) == 0; };
  for (const auto& [name, n] : named_counts) {
    if (starts(name, "branch.camera.")) {
      c.camera += n;
    } else if (starts(name, "branch.lidar.")) {
      c.lidar += n;
    } else if (starts(name, "branch.radar.")) {
      c.radar += n;
    } else if (starts(name, "branch.gps.")) {
      c.gps += n;
    } else if (starts(name, "fusion") && name.size() > 6 && name[6] >= '1' && name[6] <= '4') {
      c.fusion += n;
      c.fusion_blocks[static_cast<std::size_t>(name[6] - '1')] += n;
    } else {
      c.other += n;
    }
  }
  return c;
}

ParamCensus param_census(const torch::nn::Module& model) {
  std::vector<std::pair<std::string, int64_t>> counts;
  for (const auto& p : model.named_parameters()) counts.emplace_back(p.key(), p.value().numel());
  return param_census(counts);
}

int64_t count_parameters(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

BeamTransFuser clone_model(const BeamTransFuser& model) {
  BeamTransFuser copy(model->config());
  copy->to(model->dtype());
  copy->apply_structure(model->structure());
  torch::NoGradGuard guard;
  auto src_params = model->named_parameters();
  for (auto& p : copy->named_parameters()) p.value().copy_(src_params[p.key()]);
  auto src_buffers = model->named_buffers();
  for (auto& b : copy->named_buffers()) b.value().copy_(src_buffers[b.key()]);
  for (std::size_t i = 0; i < copy->fusion.size(); ++i) {
    copy->fusion[i]->use_position = model->fusion[i]->use_position;
    for (std::size_t l = 0; l < copy->fusion[i]->layers.size(); ++l) {
      copy->fusion[i]->layers[l]->scale_full_dim = model->fusion[i]->layers[l]->scale_full_dim;
    }
  }
  copy->train(model->is_training());
  return copy;
}

}  // namespace mmbeam::model
