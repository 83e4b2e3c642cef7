// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Splitting and structured pruning of the fusion backbone.
//
// Component c groups residual stage c of every branch with fusion block c.
// Branches are never pruned; only the fusion block of each component loses
// structures, in three phases:
//   1. residual (embedding) channels,
//   2. per-head query/key dims (paired) and value dims,
//   3. feed-forward hidden neurons, plus a restoring projection back to the
//      original width when phase 1 removed channels.
// Structure importance is the mean KL(p_orig || p_masked) over a calibration
// set, where masking zeroes the structure's outgoing weights.

#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mmbeam/data.hpp"
#include "mmbeam/model.hpp"
#include "mmbeam/training.hpp"

namespace mmbeam::compress {

struct Component {
  int index = 0;
  std::vector<std::string> stage_modules;  // e.g. branch.camera.stage1
  std::string fusion_module;               // e.g. fusion1
  int64_t stage_params = 0;
  int64_t fusion_params = 0;
};

struct SplitPlan {
  std::array<Component, model::kNumStages> components;
  int64_t fusion_total() const;
  nlohmann::json to_json() const;
};

SplitPlan split_backbone(const model::BeamTransFuser& m);

// Forward pass driven component by component through the plan.
torch::Tensor forward_split(model::BeamTransFuser& m, const SplitPlan& plan, const data::Batch& batch);

enum class Target { kEmbed, kQk, kV, kFfn };
std::string target_name(Target t);
Target parse_target(const std::string& s);

// One prunable unit. `layer`/`head` are -1 where not applicable; `index` is
// the residual channel (embed), the dim within the head (qk, v) or the
// hidden neuron (ffn), all in current (post-surgery) coordinates.
struct Structure {
  int component = 0;
  Target target = Target::kEmbed;
  int layer = -1;
  int head = -1;
  int64_t index = 0;

  bool operator<(const Structure& o) const;
  bool operator==(const Structure& o) const = default;
};

// Every prunable structure of the given phases in a fixed order.
std::vector<Structure> enumerate_structures(const model::BeamTransFuser& m, const std::set<int>& phases);

struct ImportanceRecord {
  Structure structure;
  double kl = 0.0;
};

struct ImportanceReport {
  std::string method = "kl";
  int calib_size = 0;
  std::vector<ImportanceRecord> records;

  nlohmann::json to_json() const;
  static ImportanceReport from_json(const nlohmann::json& j);
};

// KL(p || q) in nats for discrete distributions.
double kl_divergence(std::span<const double> p, std::span<const double> q);
// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)), computed in double.
double mean_kl(const torch::Tensor& p_logits, const torch::Tensor& q_logits);

// Zeroes the outgoing weights of `s` in place; restore() undoes it.
class Mask {
 public:
  Mask(model::BeamTransFuser& m, const Structure& s);
  ~Mask();
  Mask(const Mask&) = delete;
  Mask& operator=(const Mask&) = delete;
  void restore();

 private:
  std::vector<std::pair<torch::Tensor, torch::Tensor>> saved_;  // view, original values
};

// Importance of one structure.
double kl_importance(model::BeamTransFuser& m, std::span<const data::MultiModalSample> calib,
                     const Structure& s);

// Importance of every structure in the given phases. Prefix activations are
// cached per component, so each structure costs one suffix pass.
ImportanceReport kl_importance_all(model::BeamTransFuser& m, std::span<const data::MultiModalSample> calib,
                                   const std::set<int>& phases, int batch_size = 256);

// Cheap proxy: product of incoming and outgoing weight norms. Used where KL
// evaluation would be too slow (reference-size models).
ImportanceReport weight_norm_importance(const model::BeamTransFuser& m, const std::set<int>& phases);

// Parameter count of one fusion block as a function of its shape.
struct BlockShape {
  int64_t branch_channels = 0;
  int64_t tokens = 0;
  int64_t original_dim = 0;
  int64_t dim = 0;          // residual width after phase 1
  int64_t layers = 0;
  int64_t qk_total = 0;     // sum of per-head query/key widths over layers
  int64_t v_total = 0;
  int64_t ffn_total = 0;    // sum of hidden widths over layers
  bool restore = false;
};
int64_t block_params(const BlockShape& s);
BlockShape block_shape(const model::FusionBlockImpl& b);

struct ComponentSpec {
  int component = 0;
  int64_t params = 0;       // prunable parameters before pruning
  int64_t budget = 0;       // target number of parameters to remove
  int64_t predicted_after = 0;
  std::array<int64_t, 4> counts{0, 0, 0, 0};  // embed, qk, v, ffn
  std::vector<int64_t> embed;                    // residual positions
  std::vector<std::array<int64_t, 3>> qk;        // layer, head, dim
  std::vector<std::array<int64_t, 3>> v;         // layer, head, dim
  std::vector<std::array<int64_t, 2>> ffn;       // layer, neuron
  bool projection = false;
  int64_t projection_in = 0;
  int64_t projection_out = 0;
};

struct PruneSpec {
  double ratio = 0.0;
  std::set<int> phases{1, 2, 3};
  std::array<ComponentSpec, model::kNumStages> components;

  int64_t prunable_total() const;
  int64_t budget_total() const;
  nlohmann::json to_json() const;
  static PruneSpec from_json(const nlohmann::json& j);
};

// Removal counts per component from the budget, then lowest-KL structures per
// phase (ties by layer, head, index). Throws ConfigError for r outside [0, 1).
PruneSpec allocate_budget(const model::BeamTransFuser& m, const ImportanceReport& report, double r,
                          const std::set<int>& phases = {1, 2, 3});

// Fills the keep/remove lists of one phase for `spec` from `report` (counts fixed).
void select_phase(const model::BeamTransFuser& m, const ImportanceReport& report, int phase, PruneSpec& spec);

void prune_phase1_embedding(model::FusionBlockImpl& b, const std::vector<int64_t>& removed, int num_heads);
void prune_phase2_qkv(model::FusionBlockImpl& b, const std::vector<std::array<int64_t, 3>>& qk,
                      const std::vector<std::array<int64_t, 3>>& v);
// `insert_projection` adds the identity-initialized restoring projection when
// the residual width is below the original width.
void prune_phase3_ffn(model::FusionBlockImpl& b, const std::vector<std::array<int64_t, 2>>& ffn,
                      bool insert_projection);

// Applies one phase of `spec` in place.
void apply_phase(model::BeamTransFuser& m, const PruneSpec& spec, int phase);
// Clones `m` and applies every enabled phase of `spec`.
model::BeamTransFuser apply_prune(const model::BeamTransFuser& m, const PruneSpec& spec);

struct PruneOptions {
  double ratio = 0.0;
  std::set<int> phases{1, 2, 3};
  bool iterative = false;
  int batch_size = 256;
};

struct PruneResult {
  model::BeamTransFuser model{nullptr};
  PruneSpec spec;
  ImportanceReport importance;
  int64_t fusion_before = 0;
  int64_t fusion_after = 0;

  double pruned_fraction() const;
  nlohmann::json summary_json() const;
};

// Full pipeline: importance on `calib`, budget, surgery. In iterative mode
// importance is recomputed on the partially pruned model before phases 2 and 3.
PruneResult prune_model(const model::BeamTransFuser& m, std::span<const data::MultiModalSample> calib,
                        const PruneOptions& opts);

// Same as prune_model with a precomputed report (single-evaluation mode only).
PruneResult prune_with_report(const model::BeamTransFuser& m, const ImportanceReport& report,
                              const PruneOptions& opts);

// Fine-tunes in place; the post-pruning weights are a selection candidate, so
// validation DBA never ends below its starting value.
train::TrainReport finetune(model::BeamTransFuser& m, std::span<const data::MultiModalSample> train_set,
                            std::span<const data::MultiModalSample> val_set, train::TrainConfig cfg,
                            const train::TrainOutputs& out = {});

struct LatencyReport {
  std::string device = "cpu";
  int batch_size = 1;
  int warmup = 5;
  int runs = 30;
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double threshold_ms = 40.0;

  bool meets_threshold() const { return mean_ms <= threshold_ms; }
  nlohmann::json to_json() const;
};

// Random inputs with the model's preprocessed shapes.
data::Batch random_batch(const model::ModelConfig& cfg, int batch_size, std::uint64_t seed);

LatencyReport bench_latency(model::BeamTransFuser& m, const std::string& device, int batch_size,
                            int runs, int warmup = 5);

// Paired measurement: runs alternate between the models to share machine drift.
std::pair<LatencyReport, LatencyReport> bench_latency_paired(model::BeamTransFuser& a, model::BeamTransFuser& b,
                                                             const std::string& device, int batch_size,
                                                             int runs, int warmup = 5);

// True iff `candidate` has strictly lower mean latency than `reference`.
bool faster_than(const LatencyReport& candidate, const LatencyReport& reference);

}  // namespace mmbeam::compress
