// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/generation.hpp"

#include <fstream>

#include <ATen/CPUGeneratorImpl.h>

#include "mmbeam/checkpoint.hpp"
#include "mmbeam/errors.hpp"
#include "mmbeam/seeding.hpp"

namespace F = torch::nn::functional;
using json = nlohmann::json;

namespace mmbeam::gen {

using data::Modality;

ModalityShape modality_shape(Modality m, const data::PreprocessConfig& pre) {
  switch (m) {
    case Modality::kCamera: return {3, pre.camera_size};
    case Modality::kLidar: return {1, pre.lidar_size};
    case Modality::kRadar: return {2, pre.radar_size};
    default: throw std::invalid_argument("gps has no tensor shape");
  }
}

std::vector<Modality> CvaeConfig::conditions() const {
  std::vector<Modality> out;
  for (auto m : {Modality::kCamera, Modality::kLidar, Modality::kRadar}) {
    if (m != target) out.push_back(m);
  }
  return out;
}

void CvaeConfig::validate() const {
  std::vector<std::string> problems;
  if (target == Modality::kCamera) {
    problems.push_back("gen.target: camera generation is not supported (only radar or lidar can be imputed)");
  }
  if (target == Modality::kGps) problems.push_back("gen.target: gps is never generated");
  if (latent_dim < 1) problems.push_back("gen.latent_dim must be >= 1");
  if (condition_dim < 1) problems.push_back("gen.condition_dim must be >= 1");
  if (!(beta_recon >= 0.0)) problems.push_back("gen.beta_recon must be >= 0");
  if (!(beta_kl >= 0.0)) problems.push_back("gen.beta_kl must be >= 0");
  if (!problems.empty()) {
    std::string msg = "invalid generator config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

json CvaeConfig::to_json() const {
  return {{"target", data::modality_name(target)},
          {"latent_dim", latent_dim},
          {"condition_dim", condition_dim},
          {"beta_recon", beta_recon},
          {"beta_kl", beta_kl},
          {"camera_size", shapes.camera_size},
          {"lidar_size", shapes.lidar_size},
          {"radar_size", shapes.radar_size}};
}

CvaeConfig CvaeConfig::from_json(const json& j) {
  CvaeConfig c;
  c.target = data::parse_modality(j.value("target", std::string("radar")));
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.condition_dim = j.value("condition_dim", c.condition_dim);
  c.beta_recon = j.value("beta_recon", c.beta_recon);
  c.beta_kl = j.value("beta_kl", c.beta_kl);
  c.shapes.camera_size = j.value("camera_size", c.shapes.camera_size);
  c.shapes.lidar_size = j.value("lidar_size", c.shapes.lidar_size);
  c.shapes.radar_size = j.value("radar_size", c.shapes.radar_size);
  return c;
}

namespace {

constexpr int kPool = 4;
constexpr int kStemWidth = 32;

torch::nn::Conv2d conv3s2(int in, int out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1));
}

torch::nn::ConvTranspose2d up(int in, int out) {
  return torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1));
}

void check_shape(const torch::Tensor& t, const ModalityShape& s, const char* what) {
  if (t.dim() != 4 || t.size(1) != s.channels || t.size(2) != s.size || t.size(3) != s.size) {
    throw std::invalid_argument(std::string(what) + " must be [B, " + std::to_string(s.channels) + ", " +
                                std::to_string(s.size) + ", " + std::to_string(s.size) + "], got " +
                                c10::str(t.sizes()));
  }
}

const torch::Tensor& batch_tensor(const data::Batch& b, Modality m) {
  switch (m) {
    case Modality::kCamera: return b.camera;
    case Modality::kLidar: return b.lidar;
    case Modality::kRadar: return b.radar;
    default: throw std::invalid_argument("gps is not an image modality");
  }
}

}  // namespace

ConditionNetImpl::ConditionNetImpl(const CvaeConfig& cfg) {
  const auto conds = cfg.conditions();
  for (std::size_t i = 0; i < conds.size(); ++i) {
    const auto s = modality_shape(conds[i], cfg.shapes);
    shapes_.push_back(s);
    stems_.push_back(register_module(
        data::modality_name(conds[i]),
        torch::nn::Sequential(conv3s2(s.channels, 16), torch::nn::ReLU(), conv3s2(16, kStemWidth), torch::nn::ReLU(),
                              torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions({kPool, kPool})))));
  }
  fc_ = register_module("fc", torch::nn::Linear(static_cast<int64_t>(conds.size()) * kStemWidth * kPool * kPool,
                                                cfg.condition_dim));
}

torch::Tensor ConditionNetImpl::forward(const std::vector<torch::Tensor>& conditions) {
  if (conditions.size() != stems_.size()) throw std::invalid_argument("wrong number of condition tensors");
  std::vector<torch::Tensor> feats;
  for (std::size_t i = 0; i < stems_.size(); ++i) {
    check_shape(conditions[i], shapes_[i], "condition tensor");
    feats.push_back(stems_[i]->forward(conditions[i]).flatten(1));
  }
  return torch::relu(fc_(torch::cat(feats, 1)));
}

CvaeEncoderImpl::CvaeEncoderImpl(const CvaeConfig& cfg) {
  const auto s = modality_shape(cfg.target, cfg.shapes);
  conv = register_module("conv", conv3s2(s.channels, kStemWidth));
  const int in = kStemWidth * kPool * kPool + cfg.condition_dim;
  fc_mu = register_module("fc_mu", torch::nn::Linear(in, cfg.latent_dim));
  fc_logvar = register_module("fc_logvar", torch::nn::Linear(in, cfg.latent_dim));
}

LatentPosterior CvaeEncoderImpl::forward(const torch::Tensor& y, const torch::Tensor& cond) {
  auto h = F::adaptive_avg_pool2d(torch::relu(conv(y)), F::AdaptiveAvgPool2dFuncOptions({kPool, kPool})).flatten(1);
  h = torch::cat({h, cond}, 1);
  return {fc_mu(h), fc_logvar(h)};
}

CvaeDecoderImpl::CvaeDecoderImpl(const CvaeConfig& cfg) : out_(modality_shape(cfg.target, cfg.shapes)) {
  base_ = std::max(1, out_.size / 8);
  fc_ = register_module("fc", torch::nn::Linear(cfg.condition_dim + cfg.latent_dim, 64 * base_ * base_));
  up1_ = register_module("up1", up(64, 32));
  up2_ = register_module("up2", up(32, 16));
  up3_ = register_module("up3", up(16, out_.channels));
}

torch::Tensor CvaeDecoderImpl::forward(const torch::Tensor& cond, const torch::Tensor& z) {
  if (z.dim() != 2 || z.size(1) != fc_->weight.size(1) - cond.size(1)) {
    throw std::invalid_argument("latent vector has the wrong length");
  }
  auto h = torch::relu(fc_(torch::cat({cond, z}, 1))).view({-1, 64, base_, base_});
  h = up3_(torch::relu(up2_(torch::relu(up1_(h)))));
  if (h.size(2) != out_.size || h.size(3) != out_.size) {
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{out_.size, out_.size})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  return h;
}

CvaeImpl::CvaeImpl(const CvaeConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  condition = register_module("condition", ConditionNet(cfg_));
  encoder = register_module("encoder", CvaeEncoder(cfg_));
  decoder = register_module("decoder", CvaeDecoder(cfg_));
}

LatentPosterior CvaeImpl::encode(const std::vector<torch::Tensor>& x, const torch::Tensor& y) {
  if (!has_encoder) throw std::logic_error("generator was loaded without encoder weights");
  check_shape(y, modality_shape(cfg_.target, cfg_.shapes), "target tensor");
  const auto cond = condition->forward(x);
  return encoder->forward(y, cond);
}

torch::Tensor CvaeImpl::decode(const std::vector<torch::Tensor>& x, const torch::Tensor& z) {
  if (z.dim() != 2 || z.size(1) != cfg_.latent_dim) {
    throw std::invalid_argument("z must be [B, " + std::to_string(cfg_.latent_dim) + "]");
  }
  return decoder->forward(condition->forward(x), z);
}

torch::Tensor reparameterize(const LatentPosterior& post, const torch::Tensor& eps) {
  if (eps.sizes() != post.mu.sizes()) {
    throw std::invalid_argument("eps shape " + c10::str(eps.sizes()) + " does not match mu " +
                                c10::str(post.mu.sizes()));
  }
  return post.mu + torch::exp(0.5 * post.logvar) * eps;
}

torch::Tensor kl_to_standard_normal(const LatentPosterior& post) {
  const auto per = 0.5 * (post.mu.pow(2) + post.logvar.exp() - 1.0 - post.logvar);
  return per.dim() == 1 ? per.sum() : per.sum(-1).mean();
}

CvaeLoss CvaeImpl::loss(const std::vector<torch::Tensor>& x, const torch::Tensor& y, const torch::Tensor& eps) {
  const auto post = encode(x, y);
  const auto y_hat = decode(x, reparameterize(post, eps));
  CvaeLoss l;
  l.recon = F::mse_loss(y_hat, y);
  l.kl = kl_to_standard_normal(post);
  l.total = cfg_.beta_recon * l.recon + cfg_.beta_kl * l.kl;
  if (!torch::isfinite(l.total).item<bool>()) throw NumericError("cvae loss is not finite");
  return l;
}

torch::Tensor CvaeImpl::generate(const std::vector<torch::Tensor>& x, torch::Generator& gen) {
  const auto w = decoder->parameters().front();
  const auto z = torch::randn({x.front().size(0), cfg_.latent_dim}, gen, w.options().requires_grad(false));
  return decode(x, z);
}

std::vector<torch::Tensor> CvaeImpl::conditions(const data::Batch& b) const {
  const auto dtype = condition->parameters().front().scalar_type();
  std::vector<torch::Tensor> out;
  for (auto m : cfg_.conditions()) out.push_back(batch_tensor(b, m).to(dtype));
  return out;
}

torch::Tensor CvaeImpl::target(const data::Batch& b) const {
  return batch_tensor(b, cfg_.target).to(condition->parameters().front().scalar_type());
}

// ---------------------------------------------------------------- training

void CvaeTrainConfig::validate() const {
  std::vector<std::string> problems;
  if (epochs < 0) problems.push_back("gen.epochs must be >= 0");
  if (!(learning_rate >= 0.0)) problems.push_back("gen.learning_rate must be >= 0");
  if (batch_size < 1) problems.push_back("gen.batch_size must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid generator training config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

json CvaeTrainConfig::to_json() const {
  return {{"epochs", epochs}, {"learning_rate", learning_rate}, {"batch_size", batch_size}, {"seed", seed}};
}

json CvaeEpoch::to_json() const {
  return {{"epoch", epoch}, {"loss", loss}, {"recon", recon}, {"kl", kl}, {"first_batch_loss", first_batch_loss}};
}

Cvae init_cvae(const CvaeConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(torch_seed(derive_seed(seed, "cvae_init")));
  return Cvae(cfg);
}

std::vector<CvaeEpoch> train_cvae(Cvae& g, std::span<const data::MultiModalSample> samples,
                                  const CvaeTrainConfig& cfg, const std::filesystem::path& dir,
                                  const std::function<void(const std::string&)>& log) {
  cfg.validate();
  if (samples.empty()) throw DataError("train_cvae: empty dataset");
  torch::optim::Adam opt(g->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  std::ofstream jsonl;
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    jsonl.open(dir / "cvae_report.jsonl", std::ios::trunc);
  }
  g->train();
  std::vector<CvaeEpoch> history;
  std::vector<std::size_t> rows;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(cfg.seed, "cvae_eps", epoch));
    const auto order = data::shuffled_order(samples.size(), derive_seed(cfg.seed, "cvae_shuffle", epoch));
    CvaeEpoch rec;
    rec.epoch = epoch;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto batch = data::collate(samples, rows);
      const auto x = g->conditions(batch);
      const auto y = g->target(batch);
      const auto eps = torch::randn({y.size(0), g->config().latent_dim}, gen, y.options());
      const auto l = g->loss(x, y, eps);
      opt.zero_grad();
      l.total.backward();
      opt.step();
      const double n = static_cast<double>(rows.size());
      if (seen == 0) rec.first_batch_loss = l.total.item<double>();
      rec.loss += l.total.item<double>() * n;
      rec.recon += l.recon.item<double>() * n;
      rec.kl += l.kl.item<double>() * n;
      seen += rows.size();
    }
    rec.loss /= static_cast<double>(seen);
    rec.recon /= static_cast<double>(seen);
    rec.kl /= static_cast<double>(seen);
    history.push_back(rec);
    if (jsonl) jsonl << rec.to_json().dump() << "\n" << std::flush;
    if (log) {
      log("cvae epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.loss) + " recon " +
          std::to_string(rec.recon) + " kl " + std::to_string(rec.kl));
    }
  }
  g->eval();
  if (!dir.empty()) {
    json meta = {{"epoch", cfg.epochs - 1}, {"seed", cfg.seed}, {"train", cfg.to_json()}};
    meta["metrics"] = history.empty() ? json::object() : history.back().to_json();
    save_cvae(dir / "generator.mmck", g, meta);
  }
  return history;
}

void save_cvae(const std::filesystem::path& path, const Cvae& g, const json& extra) {
  ckpt::Archive a;
  a.meta = extra.is_object() ? extra : json::object();
  a.meta["format_version"] = ckpt::kFormatVersion;
  a.meta["kind"] = "cvae";
  a.meta["config"] = g->config().to_json();
  a.meta["dtype"] = g->decoder->parameters().front().scalar_type() == torch::kFloat64 ? "float64" : "float32";
  if (!a.meta.contains("epoch")) a.meta["epoch"] = nullptr;
  if (!a.meta.contains("seed")) a.meta["seed"] = nullptr;
  if (!a.meta.contains("metrics")) a.meta["metrics"] = json::object();
  a.tensors = ckpt::state_dict(*g->condition, "cvae.condition.");
  a.tensors.merge(ckpt::state_dict(*g->decoder, "cvae.decoder."));
  if (g->has_encoder) a.tensors.merge(ckpt::state_dict(*g->encoder, "cvae.encoder."));
  ckpt::write_archive(path, a);
}

Cvae load_cvae(const std::filesystem::path& path, json* meta) {
  auto a = ckpt::read_archive(path);
  if (a.meta.value("kind", "") != "cvae") throw DataError("checkpoint " + path.string() + " does not hold a generator");
  CvaeConfig cfg;
  try {
    cfg = CvaeConfig::from_json(a.meta.at("config"));
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed generator config: ") + e.what());
  }
  Cvae g(cfg);
  if (a.meta.value("dtype", "float32") == "float64") g->to(torch::kFloat64);
  ckpt::load_state_dict(*g->condition, a.tensors, "cvae.condition.");
  ckpt::load_state_dict(*g->decoder, a.tensors, "cvae.decoder.");
  const auto it = a.tensors.lower_bound("cvae.encoder.");
  g->has_encoder = it != a.tensors.end() && it->first.rfind("cvae.encoder.", 0) == 0;
  if (g->has_encoder) ckpt::load_state_dict(*g->encoder, a.tensors, "cvae.encoder.");
  g->eval();
  if (meta) *meta = std::move(a.meta);
  return g;
}

// ---------------------------------------------------------------- imputation

data::MultiModalSample mask_modality(const data::MultiModalSample& sample, Modality m, std::uint64_t seed) {
  if (m == Modality::kGps) throw std::invalid_argument("mask_modality: only camera, lidar or radar can be masked");
  auto out = sample;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto& t = sample.tensor(m);
  out.tensor(m) = torch::randn(t.sizes(), gen, t.options());
  return out;
}

double ImputationResult::recovered_fraction() const {
  const double gap = full_accuracy - masked_accuracy;
  return gap != 0.0 ? (generated_accuracy - masked_accuracy) / gap : 1.0;
}

json ImputationResult::to_json() const {
  return {{"modality", data::modality_name(modality)},
          {"seed", seed},
          {"full_accuracy", full_accuracy},
          {"masked_accuracy", masked_accuracy},
          {"generated_accuracy", generated_accuracy},
          {"recovered_fraction", recovered_fraction()}};
}

ImputationResult impute_and_evaluate(model::BeamTransFuser& m, const Imputer& imputer,
                                     std::span<const data::MultiModalSample> samples, Modality modality,
                                     std::uint64_t seed, int batch_size) {
  if (samples.empty()) throw DataError("impute_and_evaluate: empty dataset");
  if (modality == Modality::kGps) throw std::invalid_argument("gps cannot be imputed");
  ImputationResult r;
  r.modality = modality;
  r.seed = seed;
  r.full_accuracy = train::evaluate(m, samples, batch_size).top1();

  std::vector<data::MultiModalSample> masked;
  masked.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    masked.push_back(mask_modality(samples[i], modality, derive_seed(seed, "mask", i)));
  }
  r.masked_accuracy = train::evaluate(m, masked, batch_size).top1();

  auto generated = masked;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < masked.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(masked.size(), start + static_cast<std::size_t>(batch_size));
    rows.clear();
    for (std::size_t i = start; i < end; ++i) rows.push_back(i);
    const auto out = imputer(data::collate(masked, rows)).detach().to(torch::kFloat32);
    const auto& ref = samples[start].tensor(modality);
    if (out.dim() != 4 || out.size(0) != static_cast<int64_t>(rows.size()) || out.sizes().slice(1) != ref.sizes()) {
      throw std::invalid_argument("imputer output shape " + c10::str(out.sizes()) + " does not match the " +
                                  data::modality_name(modality) + " tensor");
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
      generated[rows[k]].tensor(modality) = out[static_cast<int64_t>(k)].contiguous();
    }
  }
  r.generated_accuracy = train::evaluate(m, generated, batch_size).top1();
  return r;
}

ImputationResult impute_and_evaluate(model::BeamTransFuser& m, Cvae& g,
                                     std::span<const data::MultiModalSample> samples, Modality modality,
                                     std::uint64_t seed, int batch_size) {
  if (g->config().target != modality) {
    throw std::invalid_argument("generator targets " + data::modality_name(g->config().target) + ", not " +
                                data::modality_name(modality));
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(seed, "impute"));
  g->eval();
  Imputer imputer = [&](const data::Batch& b) {
    torch::NoGradGuard guard;
    return g->generate(g->conditions(b), gen).clamp(0.0, 1.0);
  };
  return impute_and_evaluate(m, imputer, samples, modality, seed, batch_size);
}

}  // namespace mmbeam::gen
