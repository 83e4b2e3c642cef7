// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "mmbeam/checkpoint.hpp"
#include "mmbeam/errors.hpp"
#include "mmbeam/seeding.hpp"

using json = nlohmann::json;

namespace mmbeam::train {

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (epochs < 0) problems.push_back("train.epochs must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    problems.push_back("train.learning_rate must be a finite value >= 0");
  }
  if (batch_size < 1) problems.push_back("train.batch_size must be >= 1");
  if (eval_batch_size < 1) problems.push_back("train.eval_batch_size must be >= 1");
  if (!(focal_gamma >= 0.0)) problems.push_back("train.focal_gamma must be >= 0");
  if (!(focal_alpha > 0.0)) problems.push_back("train.focal_alpha must be > 0");
  if (device != "cpu") problems.push_back("train.device: only 'cpu' is supported");
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},           {"learning_rate", learning_rate},
          {"batch_size", batch_size},   {"focal_gamma", focal_gamma},
          {"focal_alpha", focal_alpha}, {"seed", seed},
          {"device", device},           {"eval_batch_size", eval_batch_size},
          {"restore_best", restore_best}, {"include_initial", include_initial}};
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double gamma,
                         double alpha) {
  if (logits.dim() != 2) throw std::invalid_argument("focal_loss expects [B, C] logits");
  if (targets.dim() != 1 || targets.size(0) != logits.size(0)) {
    throw std::invalid_argument("focal_loss expects one target per row");
  }
  if (targets.numel() > 0) {
    const auto lo = targets.min().item<int64_t>();
    const auto hi = targets.max().item<int64_t>();
    if (lo < 0 || hi >= logits.size(1)) {
      throw std::invalid_argument("focal_loss target out of range [0, " +
                                  std::to_string(logits.size(1)) + ")");
    }
  }
  if (!torch::isfinite(logits).all().item<bool>()) throw NumericError("focal_loss: non-finite logits");
  const auto logp = torch::log_softmax(logits, 1).gather(1, targets.unsqueeze(1)).squeeze(1);
  const auto pt = logp.exp();
  return (-alpha * torch::pow(1.0 - pt, gamma) * logp).mean();
}

model::BeamTransFuser init_model(const model::ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(torch_seed(derive_seed(seed, "model_init")));
  return model::BeamTransFuser(cfg);
}

double EvalResult::top1() const { return metrics.at("topk").at("1").get<double>(); }
double EvalResult::dba() const { return metrics.at("dba").get<double>(); }

EvalResult evaluate(model::BeamTransFuser& m, std::span<const data::MultiModalSample> samples,
                    int batch_size, const rf::MetricOptions& opts) {
  if (samples.empty()) throw DataError("evaluate: empty dataset");
  const bool was_training = m->is_training();
  m->eval();
  torch::NoGradGuard guard;
  std::vector<float> logits;
  std::vector<int> truth;
  int classes = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    rows.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      rows.push_back(i);
    }
    const auto batch = data::collate(samples, rows);
    const auto out = m->forward(batch).to(torch::kFloat32).contiguous();
    classes = static_cast<int>(out.size(1));
    logits.insert(logits.end(), out.data_ptr<float>(), out.data_ptr<float>() + out.numel());
    for (std::size_t i : rows) truth.push_back(samples[i].label);
  }
  m->train(was_training);
  EvalResult r;
  r.predictions = rf::rank_predictions(logits, classes, truth);
  r.metrics = rf::metrics_json(r.predictions, opts);
  return r;
}

json EpochRecord::to_json() const {
  json topk = json::object();
  for (const auto& [k, v] : val_topk) topk[std::to_string(k)] = v;
  return {{"epoch", epoch},       {"train_loss", train_loss}, {"first_batch_loss", first_batch_loss},
          {"val_dba", val_dba},   {"val_topk", topk},         {"wall_seconds", wall_seconds}};
}

json TrainReport::summary_json() const {
  json e = json::array();
  for (const auto& r : epochs) e.push_back(r.to_json());
  return {{"epochs_run", epochs.size()},
          {"best_epoch", best_epoch},
          {"best_val_dba", best_val_dba},
          {"best_metrics", best_metrics},
          {"best_checkpoint", best_checkpoint.string()},
          {"last_checkpoint", last_checkpoint.string()},
          {"history", e}};
}

namespace {

std::map<int, double> topk_of(const json& metrics) {
  std::map<int, double> out;
  for (const auto& [k, v] : metrics.at("topk").items()) out[std::stoi(k)] = v.get<double>();
  return out;
}

}  // namespace

TrainReport train(model::BeamTransFuser& m, std::span<const data::MultiModalSample> train_set,
                  std::span<const data::MultiModalSample> val_set, const TrainConfig& cfg,
                  const TrainOutputs& out) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  if (val_set.empty()) throw DataError("train: empty validation set");
  auto log = [&](const std::string& s) {
    if (out.log) out.log(s);
  };

  std::vector<torch::Tensor> params;
  for (auto& p : m->parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.learning_rate));

  std::ofstream jsonl;
  if (!out.dir.empty()) {
    std::filesystem::create_directories(out.dir);
    jsonl.open(out.dir / "train_report.jsonl", std::ios::trunc);
    if (!jsonl) throw DataError("cannot write " + (out.dir / "train_report.jsonl").string());
  }

  TrainReport report;
  std::map<std::string, torch::Tensor> best_state;
  auto consider = [&](int epoch, const EvalResult& ev) {
    if (ev.dba() <= report.best_val_dba) return;
    report.best_val_dba = ev.dba();
    report.best_epoch = epoch;
    report.best_metrics = ev.metrics;
    best_state = ckpt::state_dict(*m);
    if (!out.dir.empty()) {
      json meta = out.checkpoint_meta;
      meta["epoch"] = epoch;
      meta["seed"] = cfg.seed;
      meta["metrics"] = ev.metrics;
      report.best_checkpoint = out.dir / "best.mmck";
      ckpt::save_model(report.best_checkpoint, m, meta);
    }
  };

  if (cfg.include_initial) {
    const auto ev = evaluate(m, val_set, cfg.eval_batch_size);
    log("initial val dba " + std::to_string(ev.dba()) + " top1 " + std::to_string(ev.top1()));
    consider(-1, ev);
  }

  std::vector<std::size_t> rows;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    m->train();
    const auto order = data::shuffled_order(train_set.size(), derive_seed(cfg.seed, "shuffle", epoch));
    double loss_sum = 0.0;
    double first = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (end - start < 2 && order.size() >= 2) break;  // batch norm needs two rows
      rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto batch = data::collate(train_set, rows);
      const auto logits = m->forward(batch);
      const auto loss = focal_loss(logits, batch.labels, cfg.focal_gamma, cfg.focal_alpha);
      const double lv = loss.item<double>();
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", batch starting at " + std::to_string(start));
      }
      if (seen == 0) first = lv;
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += lv * static_cast<double>(rows.size());
      seen += rows.size();
    }
    const auto ev = evaluate(m, val_set, cfg.eval_batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.first_batch_loss = first;
    rec.val_dba = ev.dba();
    rec.val_topk = topk_of(ev.metrics);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (jsonl) jsonl << rec.to_json().dump() << "\n" << std::flush;
    log("epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.train_loss) + " val dba " +
        std::to_string(rec.val_dba) + " top1 " + std::to_string(rec.val_topk[1]) + " (" +
        std::to_string(rec.wall_seconds) + " s)");
    consider(epoch, ev);
  }

  if (!out.dir.empty()) {
    json meta = out.checkpoint_meta;
    meta["epoch"] = cfg.epochs - 1;
    meta["seed"] = cfg.seed;
    meta["metrics"] = report.epochs.empty() ? json::object() : json(report.epochs.back().to_json());
    report.last_checkpoint = out.dir / "last.mmck";
    ckpt::save_model(report.last_checkpoint, m, meta);
  }
  if (cfg.restore_best && !best_state.empty()) ckpt::load_state_dict(*m, best_state);
  if (!out.dir.empty()) {
    std::ofstream(out.dir / "train_summary.json") << report.summary_json().dump(2) << "\n";
  }
  return report;
}

}  // namespace mmbeam::train
