// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Focal-loss training loop, evaluation and seeded model construction.

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mmbeam/data.hpp"
#include "mmbeam/model.hpp"
#include "mmbeam/rf_core.hpp"

namespace mmbeam::train {

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 1e-4;
  int batch_size = 32;
  double focal_gamma = 2.0;
  double focal_alpha = 1.0;
  std::uint64_t seed = 0;
  std::string device = "cpu";
  int eval_batch_size = 64;
  // Load the best-validation weights back into the model when training ends.
  bool restore_best = false;
  // Treat the weights before the first step as a selection candidate (epoch -1).
  bool include_initial = false;

  void validate() const;
  nlohmann::json to_json() const;
};

// Mean over the batch of -alpha * (1 - p_t)^gamma * log p_t, p_t = softmax(logits)[target].
// logits [B, C], targets [B] int64.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double gamma,
                         double alpha);

// Constructs a model with weights drawn from the "model_init" stream of `seed`.
model::BeamTransFuser init_model(const model::ModelConfig& cfg, std::uint64_t seed);

struct EvalResult {
  nlohmann::json metrics;  // rf::metrics_json layout
  rf::PredictionBatch predictions;
  double top1() const;
  double dba() const;
};

// Eval-mode pass without gradients. The model's training flag is restored afterwards.
EvalResult evaluate(model::BeamTransFuser& m, std::span<const data::MultiModalSample> samples,
                    int batch_size = 64, const rf::MetricOptions& opts = {});

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double first_batch_loss = 0.0;
  double val_dba = 0.0;
  std::map<int, double> val_topk;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_dba = -1.0;
  nlohmann::json best_metrics;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;

  nlohmann::json summary_json() const;
};

struct TrainOutputs {
  // When set: train_report.jsonl, train_summary.json, best.mmck and last.mmck go here.
  std::filesystem::path dir;
  std::function<void(const std::string&)> log;
  nlohmann::json checkpoint_meta = nlohmann::json::object();
};

// Throws DataError on empty splits and NumericError on a non-finite loss.
TrainReport train(model::BeamTransFuser& m, std::span<const data::MultiModalSample> train_set,
                  std::span<const data::MultiModalSample> val_set, const TrainConfig& cfg,
                  const TrainOutputs& out = {});

}  // namespace mmbeam::train
