// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-modal fusion network for beam prediction.
//
// Pipeline: per-modality encoders -> four residual stages per branch, each
// followed by a transformer fusion block over the pooled token sequence of all
// modalities -> softmax-weighted modality aggregation -> MLP beam head.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mmbeam/data.hpp"

namespace mmbeam::model {

inline constexpr int kNumStages = 4;
inline constexpr int kNumImageModalities = 3;  // camera, lidar, radar
inline constexpr int kNumModalities = 4;       // + gps

struct EncoderConfig {
  int in_channels = 3;
  int out_channels = 64;
  int kernel = 7;
  int stride = 2;
};

struct FusionConfig {
  std::array<int, kNumStages> embed_dims{64, 128, 256, 512};
  int num_heads = 4;
  int ffn_ratio = 4;
  int num_layers = 8;
  int token_grid = 8;
  int gps_tokens = 1;
  bool position_embedding = true;
  // Divide attention scores by sqrt(D) instead of sqrt(D / heads).
  bool scale_full_dim = false;

  int num_tokens() const { return kNumImageModalities * token_grid * token_grid + gps_tokens; }
};

struct ModelConfig {
  std::array<int, kNumStages> stage_channels{64, 128, 256, 512};
  std::array<int, kNumStages> camera_blocks{3, 4, 6, 3};
  std::array<int, kNumStages> lidar_blocks{2, 2, 2, 2};
  std::array<int, kNumStages> radar_blocks{2, 2, 2, 2};
  FusionConfig fusion;
  int gps_hidden = 152;
  std::vector<int> head_hidden{256, 128};
  int num_beams = 64;
  int camera_size = 256;
  int lidar_size = 256;
  int radar_size = 128;

  // Reference configuration (camera ResNet34-style, LiDAR/radar [2,2,2,2]).
  static ModelConfig full();
  // Desk-scale configuration used by the synthetic experiments.
  static ModelConfig toy();

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string hash() const;
  data::PreprocessConfig preprocess() const;
};

EncoderConfig encoder_config(const ModelConfig& cfg, data::Modality m);

// conv(k, stride) -> batch norm -> ReLU -> max pool 3x3 / 2
class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const EncoderConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(Encoder);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int in_channels, int out_channels, int stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(BasicBlock);

// Encoder plus four residual stages.
class BranchImpl : public torch::nn::Module {
 public:
  BranchImpl(const EncoderConfig& enc, const std::array<int, kNumStages>& blocks,
             const std::array<int, kNumStages>& channels);
  torch::Tensor encode(const torch::Tensor& x);
  torch::Tensor stage(int s, const torch::Tensor& x);  // s in 0..3

 private:
  Encoder encoder_{nullptr};
  std::array<torch::nn::Sequential, kNumStages> stages_{nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(Branch);

// Shared 2 -> H -> H trunk with one stage-specific H -> D_s token map per stage.
class GpsBranchImpl : public torch::nn::Module {
 public:
  GpsBranchImpl(int hidden, const std::array<int, kNumStages>& embed_dims);
  torch::Tensor trunk(const torch::Tensor& gps);
  torch::Tensor token(int s, const torch::Tensor& features);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
  std::array<torch::nn::Linear, kNumStages> maps_{nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(GpsBranch);

// Post-norm transformer encoder layer with per-head query/key and value widths.
class FusionLayerImpl : public torch::nn::Module {
 public:
  FusionLayerImpl(int embed_dim, int num_heads, int ffn_hidden, bool scale_full_dim);

  torch::Tensor forward(const torch::Tensor& x);
  // Output of the attention sublayer before the residual; optionally returns
  // the per-head attention matrices [B, N, N].
  torch::Tensor attention(const torch::Tensor& x, std::vector<torch::Tensor>* weights = nullptr);
  torch::Tensor feed_forward(const torch::Tensor& x);

  int64_t embed_dim() const { return q_w.size(1); }
  int64_t ffn_hidden() const { return fc1_w.size(0); }
  int num_heads() const { return static_cast<int>(qk_widths.size()); }
  double head_scale(int head) const;

  // Structure bookkeeping, mutated by pruning surgery.
  std::vector<int64_t> qk_widths;
  std::vector<int64_t> v_widths;
  bool scale_full_dim = false;

  torch::Tensor q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  torch::Tensor ln1_w, ln1_b, ln2_w, ln2_b;
  torch::Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};
TORCH_MODULE(FusionLayer);

struct TokenSequence {
  torch::Tensor tokens;  // [B, N, D]
  // Per-modality [begin, end) row ranges in order camera, lidar, radar, gps.
  std::array<std::pair<int64_t, int64_t>, kNumModalities> spans{};
};

std::array<std::pair<int64_t, int64_t>, kNumModalities> token_spans(int grid, int gps_tokens);

// One fusion stage: tokenize, transformer layers, optional restoring
// projection, and residual reintegration into the branch maps.
class FusionBlockImpl : public torch::nn::Module {
 public:
  FusionBlockImpl(int branch_channels, int embed_dim, const FusionConfig& cfg);

  struct Output {
    std::array<torch::Tensor, kNumImageModalities> maps;
    torch::Tensor gps;  // fused GPS token projected to the branch width, [B, C]
  };

  Output forward(const std::array<torch::Tensor, kNumImageModalities>& maps,
                 const torch::Tensor& gps_token);

  TokenSequence tokenize(const std::array<torch::Tensor, kNumImageModalities>& maps,
                         const torch::Tensor& gps_token);
  torch::Tensor run_layers(const torch::Tensor& tokens);
  // Maps residual-stream tokens back to the original embedding width.
  torch::Tensor restore(const torch::Tensor& tokens) const;
  Output detokenize_residual(const torch::Tensor& fused,
                             const std::array<torch::Tensor, kNumImageModalities>& maps);

  int64_t original_dim() const { return original_dim_; }
  int64_t embed_dim() const { return tok_w.size(0); }
  int64_t branch_channels() const { return detok_w.size(0); }
  int grid() const { return grid_; }
  int gps_tokens() const { return gps_tokens_; }
  bool has_restore() const { return restore_w.numel() > 0; }
  std::size_t num_layers() const { return layers.size(); }

  nlohmann::json structure() const;
  // Resizes parameters to match a saved structure (values are left unset).
  void apply_structure(const nlohmann::json& s);

  std::vector<int64_t> kept_channels;  // residual channels retained, indices into the original width
  std::vector<FusionLayer> layers;
  bool use_position = true;

  torch::Tensor tok_w, tok_b, pos, detok_w, detok_b, restore_w, restore_b;

 private:
  int64_t original_dim_;
  int grid_;
  int gps_tokens_;
};
TORCH_MODULE(FusionBlock);

// Softmax over a learnable 4-entry importance vector, weighted sum of modality vectors.
torch::Tensor aggregate(const torch::Tensor& importance, const torch::Tensor& vectors);

class BeamHeadImpl : public torch::nn::Module {
 public:
  BeamHeadImpl(int in_features, const std::vector<int>& hidden, int num_beams);
  torch::Tensor forward(const torch::Tensor& x);
  int64_t in_features() const;

 private:
  std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(BeamHead);

// Branch activations between components.
struct ForwardState {
  std::array<torch::Tensor, kNumImageModalities> maps;
  torch::Tensor gps_features;  // GPS trunk output, [B, H]
  torch::Tensor gps_fused;     // last fused GPS token, [B, C]
};

class BeamTransFuserImpl : public torch::nn::Module {
 public:
  explicit BeamTransFuserImpl(const ModelConfig& cfg);

  torch::Tensor forward(const data::Batch& batch);

  // Encoders and GPS trunk.
  ForwardState encode(const data::Batch& batch);
  // Residual stage c followed by fusion block c.
  ForwardState run_component(int c, ForwardState state);
  // Stage c only (state just before fusion block c after the stage).
  ForwardState run_stage(int c, ForwardState state);
  ForwardState run_fusion(int c, ForwardState state);
  // Aggregation and beam head.
  torch::Tensor finish(const ForwardState& state);

  // State right before fusion block c (after stage c).
  ForwardState prefix(const data::Batch& batch, int c);
  // Logits from the state right before fusion block c.
  torch::Tensor suffix(ForwardState state, int c);

  torch::Tensor modality_vectors(const ForwardState& state);

  const ModelConfig& config() const { return cfg_; }
  torch::Dtype dtype() const;

  Branch camera{nullptr}, lidar{nullptr}, radar{nullptr};
  GpsBranch gps{nullptr};
  std::array<FusionBlock, kNumStages> fusion{nullptr, nullptr, nullptr, nullptr};
  torch::Tensor importance;
  BeamHead head{nullptr};

  nlohmann::json structure() const;
  void apply_structure(const nlohmann::json& s);

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(BeamTransFuser);

// Parameter counts grouped as camera / lidar / radar / gps branches, fusion
// blocks, and other layers (aggregation + head).
struct ParamCensus {
  int64_t camera = 0, lidar = 0, radar = 0, gps = 0, fusion = 0, other = 0;
  std::array<int64_t, kNumStages> fusion_blocks{0, 0, 0, 0};

  int64_t total() const { return camera + lidar + radar + gps + fusion + other; }
  nlohmann::json to_json() const;
  std::string table() const;
};

ParamCensus param_census(const torch::nn::Module& model);
ParamCensus param_census(const std::vector<std::pair<std::string, int64_t>>& named_counts);

int64_t count_parameters(const torch::nn::Module& module);

// Deep copy (parameters, buffers and pruned structure).
BeamTransFuser clone_model(const BeamTransFuser& model);

}  // namespace mmbeam::model
