// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Conditional VAE that imputes a missing radar or LiDAR tensor from the other
// two image modalities, plus the masking / imputation evaluation protocol.

#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mmbeam/data.hpp"
#include "mmbeam/model.hpp"
#include "mmbeam/training.hpp"

namespace mmbeam::gen {

struct ModalityShape {
  int channels = 0;
  int size = 0;
};

ModalityShape modality_shape(data::Modality m, const data::PreprocessConfig& pre);

struct CvaeConfig {
  data::Modality target = data::Modality::kRadar;
  int latent_dim = 128;
  int condition_dim = 256;
  double beta_recon = 1.0;
  double beta_kl = 1.0;
  data::PreprocessConfig shapes;

  // Camera is never generated; GPS is neither generated nor a condition.
  std::vector<data::Modality> conditions() const;
  void validate() const;
  nlohmann::json to_json() const;
  static CvaeConfig from_json(const nlohmann::json& j);
};

struct LatentPosterior {
  torch::Tensor mu;      // [B, latent]
  torch::Tensor logvar;  // [B, latent]
};

// Shared condition embedding: per-modality conv stem, pooled, fused by one linear layer.
class ConditionNetImpl : public torch::nn::Module {
 public:
  explicit ConditionNetImpl(const CvaeConfig& cfg);
  torch::Tensor forward(const std::vector<torch::Tensor>& conditions);

 private:
  std::vector<torch::nn::Sequential> stems_;
  torch::nn::Linear fc_{nullptr};
  std::vector<ModalityShape> shapes_;
};
TORCH_MODULE(ConditionNet);

class CvaeEncoderImpl : public torch::nn::Module {
 public:
  explicit CvaeEncoderImpl(const CvaeConfig& cfg);
  LatentPosterior forward(const torch::Tensor& y, const torch::Tensor& cond);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::Linear fc_mu{nullptr}, fc_logvar{nullptr};
};
TORCH_MODULE(CvaeEncoder);

class CvaeDecoderImpl : public torch::nn::Module {
 public:
  explicit CvaeDecoderImpl(const CvaeConfig& cfg);
  torch::Tensor forward(const torch::Tensor& cond, const torch::Tensor& z);

 private:
  ModalityShape out_;
  int base_ = 1;
  torch::nn::Linear fc_{nullptr};
  torch::nn::ConvTranspose2d up1_{nullptr}, up2_{nullptr}, up3_{nullptr};
};
TORCH_MODULE(CvaeDecoder);

struct CvaeLoss {
  torch::Tensor total, recon, kl;
};

class CvaeImpl : public torch::nn::Module {
 public:
  explicit CvaeImpl(const CvaeConfig& cfg);

  LatentPosterior encode(const std::vector<torch::Tensor>& x, const torch::Tensor& y);
  torch::Tensor decode(const std::vector<torch::Tensor>& x, const torch::Tensor& z);
  CvaeLoss loss(const std::vector<torch::Tensor>& x, const torch::Tensor& y, const torch::Tensor& eps);
  // Decoder-only sample with z drawn from the prior.
  torch::Tensor generate(const std::vector<torch::Tensor>& x, torch::Generator& gen);

  // Conditions and target of a batch, in config order.
  std::vector<torch::Tensor> conditions(const data::Batch& b) const;
  torch::Tensor target(const data::Batch& b) const;

  const CvaeConfig& config() const { return cfg_; }
  bool has_encoder = true;

  ConditionNet condition{nullptr};
  CvaeEncoder encoder{nullptr};
  CvaeDecoder decoder{nullptr};

 private:
  CvaeConfig cfg_;
};
TORCH_MODULE(Cvae);

// z = mu + exp(0.5 * logvar) * eps
torch::Tensor reparameterize(const LatentPosterior& post, const torch::Tensor& eps);

// 0.5 * sum_d (mu^2 + exp(logvar) - 1 - logvar), averaged over the batch.
torch::Tensor kl_to_standard_normal(const LatentPosterior& post);

struct CvaeTrainConfig {
  int epochs = 30;
  double learning_rate = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct CvaeEpoch {
  int epoch = 0;
  double loss = 0.0, recon = 0.0, kl = 0.0, first_batch_loss = 0.0;
  nlohmann::json to_json() const;
};

Cvae init_cvae(const CvaeConfig& cfg, std::uint64_t seed);

// When `dir` is non-empty writes cvae_report.jsonl and generator.mmck there.
std::vector<CvaeEpoch> train_cvae(Cvae& g, std::span<const data::MultiModalSample> samples,
                                  const CvaeTrainConfig& cfg, const std::filesystem::path& dir = {},
                                  const std::function<void(const std::string&)>& log = {});

void save_cvae(const std::filesystem::path& path, const Cvae& g,
               const nlohmann::json& extra = nlohmann::json::object());
// Encoder tensors are optional; without them only decode/generate work.
Cvae load_cvae(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

// Copy of `sample` with one image modality replaced by seeded N(0, 1) noise.
data::MultiModalSample mask_modality(const data::MultiModalSample& sample, data::Modality m, std::uint64_t seed);

struct ImputationResult {
  data::Modality modality = data::Modality::kRadar;
  std::uint64_t seed = 0;
  double full_accuracy = 0.0;
  double masked_accuracy = 0.0;
  double generated_accuracy = 0.0;

  double recovered_fraction() const;
  nlohmann::json to_json() const;
};

// Produces the replacement target tensor [B, C, H, W] for a batch whose target
// modality has been masked.
using Imputer = std::function<torch::Tensor(const data::Batch& masked)>;

ImputationResult impute_and_evaluate(model::BeamTransFuser& m, const Imputer& imputer,
                                     std::span<const data::MultiModalSample> samples, data::Modality modality,
                                     std::uint64_t seed, int batch_size = 64);

// Uses the generator with prior samples; outputs are clamped to [0, 1].
ImputationResult impute_and_evaluate(model::BeamTransFuser& m, Cvae& g,
                                     std::span<const data::MultiModalSample> samples, data::Modality modality,
                                     std::uint64_t seed, int batch_size = 64);

}  // namespace mmbeam::gen
