// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/compression.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include <ATen/CPUGeneratorImpl.h>

#include "mmbeam/errors.hpp"

using json = nlohmann::json;

namespace mmbeam::compress {

using model::BeamTransFuser;
using model::FusionBlockImpl;

namespace {

bool has_prefix(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

int64_t count_prefix(const BeamTransFuser& m, const std::string& prefix) {
  int64_t n = 0;
  for (const auto& p : m->named_parameters()) {
    if (has_prefix(p.key(), prefix)) n += p.value().numel();
  }
  return n;
}

// Replaces a parameter's storage; stale gradients of the old shape are dropped.
void replace(torch::Tensor& p, const torch::Tensor& v) {
  torch::NoGradGuard guard;
  p.set_data(v.contiguous());
  p.mutable_grad() = torch::Tensor();
}

torch::Tensor index_tensor(const std::vector<int64_t>& idx) { return torch::tensor(idx, torch::kLong); }

std::vector<int64_t> complement(int64_t n, const std::vector<int64_t>& removed, const char* what) {
  std::vector<char> drop(static_cast<std::size_t>(n), 0);
  for (auto r : removed) {
    if (r < 0 || r >= n) throw std::invalid_argument(std::string(what) + " index out of range");
    if (drop[static_cast<std::size_t>(r)]) throw std::invalid_argument(std::string(what) + " index repeated");
    drop[static_cast<std::size_t>(r)] = 1;
  }
  std::vector<int64_t> keep;
  for (int64_t i = 0; i < n; ++i) {
    if (!drop[static_cast<std::size_t>(i)]) keep.push_back(i);
  }
  return keep;
}

int64_t head_offset(const std::vector<int64_t>& widths, int head) {
  int64_t off = 0;
  for (int i = 0; i < head; ++i) off += widths[static_cast<std::size_t>(i)];
  return off;
}

void check_ratio(double r) {
  if (!(r >= 0.0 && r < 1.0)) throw ConfigError("prune ratio must be in [0, 1), got " + std::to_string(r));
}

}  // namespace

// ---------------------------------------------------------------- split

int64_t SplitPlan::fusion_total() const {
  int64_t n = 0;
  for (const auto& c : components) n += c.fusion_params;
  return n;
}

json SplitPlan::to_json() const {
  json j = json::array();
  for (const auto& c : components) {
    j.push_back({{"index", c.index},
                 {"stage_modules", c.stage_modules},
                 {"fusion_module", c.fusion_module},
                 {"stage_params", c.stage_params},
                 {"fusion_params", c.fusion_params}});
  }
  return {{"components", j}};
}

SplitPlan split_backbone(const BeamTransFuser& m) {
  SplitPlan plan;
  for (int c = 0; c < model::kNumStages; ++c) {
    auto& comp = plan.components[static_cast<std::size_t>(c)];
    comp.index = c;
    const auto stage = "stage" + std::to_string(c + 1);
    for (const char* b : {"camera", "lidar", "radar", "gps"}) {
      comp.stage_modules.push_back(std::string("branch.") + b + "." + stage);
      comp.stage_params += count_prefix(m, comp.stage_modules.back() + ".");
    }
    comp.fusion_module = "fusion" + std::to_string(c + 1);
    comp.fusion_params = count_prefix(m, comp.fusion_module + ".");
  }
  return plan;
}

torch::Tensor forward_split(BeamTransFuser& m, const SplitPlan& plan, const data::Batch& batch) {
  auto st = m->encode(batch);
  for (const auto& comp : plan.components) st = m->run_component(comp.index, std::move(st));
  return m->finish(st);
}

// ---------------------------------------------------------------- structures

std::string target_name(Target t) {
  switch (t) {
    case Target::kEmbed: return "embed";
    case Target::kQk: return "qk";
    case Target::kV: return "v";
    case Target::kFfn: return "ffn";
  }
  return "embed";
}

Target parse_target(const std::string& s) {
  if (s == "embed") return Target::kEmbed;
  if (s == "qk") return Target::kQk;
  if (s == "v") return Target::kV;
  if (s == "ffn") return Target::kFfn;
  throw DataError("unknown structure target '" + s + "'");
}

bool Structure::operator<(const Structure& o) const {
  return std::tie(component, target, layer, head, index) <
         std::tie(o.component, o.target, o.layer, o.head, o.index);
}

std::vector<Structure> enumerate_structures(const BeamTransFuser& m, const std::set<int>& phases) {
  std::vector<Structure> out;
  for (int c = 0; c < model::kNumStages; ++c) {
    const auto& b = m->fusion[static_cast<std::size_t>(c)];
    if (phases.count(1)) {
      for (int64_t j = 0; j < b->embed_dim(); ++j) out.push_back({c, Target::kEmbed, -1, -1, j});
    }
    for (int l = 0; l < static_cast<int>(b->layers.size()); ++l) {
      const auto& layer = b->layers[static_cast<std::size_t>(l)];
      if (phases.count(2)) {
        for (int h = 0; h < layer->num_heads(); ++h) {
          for (int64_t i = 0; i < layer->qk_widths[static_cast<std::size_t>(h)]; ++i) {
            out.push_back({c, Target::kQk, l, h, i});
          }
        }
        for (int h = 0; h < layer->num_heads(); ++h) {
          for (int64_t i = 0; i < layer->v_widths[static_cast<std::size_t>(h)]; ++i) {
            out.push_back({c, Target::kV, l, h, i});
          }
        }
      }
      if (phases.count(3)) {
        for (int64_t n = 0; n < layer->ffn_hidden(); ++n) out.push_back({c, Target::kFfn, l, -1, n});
      }
    }
  }
  return out;
}

json ImportanceReport::to_json() const {
  json recs = json::array();
  for (const auto& r : records) {
    recs.push_back({{"component", r.structure.component},
                    {"target", target_name(r.structure.target)},
                    {"layer", r.structure.layer},
                    {"head", r.structure.head},
                    {"index", r.structure.index},
                    {"kl_score", r.kl}});
  }
  return {{"method", method}, {"calib_size", calib_size}, {"records", recs}};
}

ImportanceReport ImportanceReport::from_json(const json& j) {
  ImportanceReport r;
  try {
    r.method = j.value("method", "kl");
    r.calib_size = j.value("calib_size", 0);
    for (const auto& e : j.at("records")) {
      Structure s{e.at("component").get<int>(), parse_target(e.at("target").get<std::string>()),
                  e.at("layer").get<int>(), e.at("head").get<int>(), e.at("index").get<int64_t>()};
      r.records.push_back({s, e.at("kl_score").get<double>()});
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed importance report: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------- KL importance

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

double mean_kl(const torch::Tensor& p_logits, const torch::Tensor& q_logits) {
  const auto lp = torch::log_softmax(p_logits.to(torch::kFloat64), 1);
  const auto lq = torch::log_softmax(q_logits.to(torch::kFloat64), 1);
  return (lp.exp() * (lp - lq)).sum(1).clamp_min(0.0).mean().item<double>();
}

Mask::Mask(BeamTransFuser& m, const Structure& s) {
  torch::NoGradGuard guard;
  auto& b = m->fusion.at(static_cast<std::size_t>(s.component));
  auto zero = [&](torch::Tensor view) {
    saved_.emplace_back(view, view.clone());
    view.zero_();
  };
  switch (s.target) {
    case Target::kEmbed: {
      for (auto& l : b->layers) {
        for (auto* w : {&l->q_w, &l->k_w, &l->v_w, &l->fc1_w}) zero(w->detach().select(1, s.index));
      }
      if (b->has_restore()) {
        zero(b->restore_w.detach().select(1, s.index));
      } else {
        zero(b->detok_w.detach().select(1, b->kept_channels.at(static_cast<std::size_t>(s.index))));
      }
      break;
    }
    case Target::kQk: {
      auto& l = b->layers.at(static_cast<std::size_t>(s.layer));
      const auto row = head_offset(l->qk_widths, s.head) + s.index;
      for (auto* w : {&l->q_w, &l->q_b, &l->k_w, &l->k_b}) zero(w->detach().select(0, row));
      break;
    }
    case Target::kV: {
      auto& l = b->layers.at(static_cast<std::size_t>(s.layer));
      zero(l->o_w.detach().select(1, head_offset(l->v_widths, s.head) + s.index));
      break;
    }
    case Target::kFfn: {
      auto& l = b->layers.at(static_cast<std::size_t>(s.layer));
      zero(l->fc2_w.detach().select(1, s.index));
      break;
    }
  }
}

Mask::~Mask() { restore(); }

void Mask::restore() {
  torch::NoGradGuard guard;
  for (auto& [view, orig] : saved_) view.copy_(orig);
  saved_.clear();
}

namespace {

struct CalibCache {
  std::vector<model::ForwardState> states;
  std::vector<torch::Tensor> logits;
  std::vector<int64_t> rows;
};

CalibCache cache_component(BeamTransFuser& m, std::span<const data::MultiModalSample> calib, int c,
                           int batch_size) {
  CalibCache cache;
  for (std::size_t start = 0; start < calib.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(calib.size(), start + static_cast<std::size_t>(batch_size));
    const auto batch = data::collate(calib.subspan(start, end - start));
    cache.states.push_back(m->prefix(batch, c));
    cache.logits.push_back(m->suffix(cache.states.back(), c));
    cache.rows.push_back(static_cast<int64_t>(end - start));
  }
  return cache;
}

double masked_kl(BeamTransFuser& m, const CalibCache& cache, const Structure& s) {
  Mask mask(m, s);
  double total = 0.0;
  int64_t n = 0;
  for (std::size_t i = 0; i < cache.states.size(); ++i) {
    const auto q = m->suffix(cache.states[i], s.component);
    total += mean_kl(cache.logits[i], q) * static_cast<double>(cache.rows[i]);
    n += cache.rows[i];
  }
  return total / static_cast<double>(n);
}

}  // namespace

double kl_importance(BeamTransFuser& m, std::span<const data::MultiModalSample> calib, const Structure& s) {
  if (calib.empty()) throw DataError("kl_importance: empty calibration set");
  const bool was_training = m->is_training();
  m->eval();
  torch::NoGradGuard guard;
  const auto cache = cache_component(m, calib, s.component, static_cast<int>(calib.size()));
  const double kl = masked_kl(m, cache, s);
  m->train(was_training);
  return kl;
}

ImportanceReport kl_importance_all(BeamTransFuser& m, std::span<const data::MultiModalSample> calib,
                                   const std::set<int>& phases, int batch_size) {
  if (calib.empty()) throw DataError("kl_importance: empty calibration set");
  if (batch_size < 1) throw ConfigError("importance batch size must be >= 1");
  const bool was_training = m->is_training();
  m->eval();
  torch::NoGradGuard guard;
  ImportanceReport report;
  report.calib_size = static_cast<int>(calib.size());
  const auto all = enumerate_structures(m, phases);
  for (int c = 0; c < model::kNumStages; ++c) {
    const auto cache = cache_component(m, calib, c, batch_size);
    for (const auto& s : all) {
      if (s.component == c) report.records.push_back({s, masked_kl(m, cache, s)});
    }
  }
  m->train(was_training);
  return report;
}

ImportanceReport weight_norm_importance(const BeamTransFuser& m, const std::set<int>& phases) {
  torch::NoGradGuard guard;
  ImportanceReport report;
  report.method = "weight_norm";
  for (const auto& s : enumerate_structures(m, phases)) {
    const auto& b = m->fusion[static_cast<std::size_t>(s.component)];
    double score = 0.0;
    switch (s.target) {
      case Target::kEmbed: {
        double in = b->tok_w.select(0, s.index).norm().item<double>();
        double out = 0.0;
        for (const auto& l : b->layers) {
          for (const auto* w : {&l->q_w, &l->k_w, &l->v_w, &l->fc1_w}) {
            out += w->select(1, s.index).pow(2).sum().item<double>();
          }
        }
        score = in * std::sqrt(out);
        break;
      }
      case Target::kQk: {
        const auto& l = b->layers[static_cast<std::size_t>(s.layer)];
        const auto row = head_offset(l->qk_widths, s.head) + s.index;
        score = l->q_w.select(0, row).norm().item<double>() * l->k_w.select(0, row).norm().item<double>();
        break;
      }
      case Target::kV: {
        const auto& l = b->layers[static_cast<std::size_t>(s.layer)];
        const auto col = head_offset(l->v_widths, s.head) + s.index;
        score = l->v_w.select(0, col).norm().item<double>() * l->o_w.select(1, col).norm().item<double>();
        break;
      }
      case Target::kFfn: {
        const auto& l = b->layers[static_cast<std::size_t>(s.layer)];
        score = l->fc1_w.select(0, s.index).norm().item<double>() *
                l->fc2_w.select(1, s.index).norm().item<double>();
        break;
      }
    }
    report.records.push_back({s, score});
  }
  return report;
}

// ---------------------------------------------------------------- budget

int64_t block_params(const BlockShape& s) {
  const int64_t d = s.dim;
  int64_t n = d * s.branch_channels + d;               // token projection
  n += s.tokens * d;                                   // position embedding
  n += s.branch_channels * s.original_dim + s.branch_channels;  // detokenize projection
  if (s.restore) n += s.original_dim * d + s.original_dim;
  n += 2 * (s.qk_total * d + s.qk_total);              // query, key
  n += s.v_total * d + s.v_total;                      // value
  n += d * s.v_total + s.layers * d;                   // output projection
  n += 4 * s.layers * d;                               // two layer norms
  n += s.ffn_total * d + s.ffn_total;                  // fc1
  n += d * s.ffn_total + s.layers * d;                 // fc2
  return n;
}

BlockShape block_shape(const FusionBlockImpl& b) {
  BlockShape s;
  s.branch_channels = b.branch_channels();
  s.tokens = b.pos.size(0);
  s.original_dim = b.original_dim();
  s.dim = b.embed_dim();
  s.layers = static_cast<int64_t>(b.layers.size());
  for (const auto& l : b.layers) {
    for (auto w : l->qk_widths) s.qk_total += w;
    for (auto w : l->v_widths) s.v_total += w;
    s.ffn_total += l->ffn_hidden();
  }
  s.restore = b.has_restore();
  return s;
}

int64_t PruneSpec::prunable_total() const {
  int64_t n = 0;
  for (const auto& c : components) n += c.params;
  return n;
}

int64_t PruneSpec::budget_total() const {
  int64_t n = 0;
  for (const auto& c : components) n += c.budget;
  return n;
}

json PruneSpec::to_json() const {
  json comps = json::array();
  for (const auto& c : components) {
    json proj = nullptr;
    if (c.projection) proj = {{"in_dim", c.projection_in}, {"out_dim", c.projection_out}};
    comps.push_back({{"component", c.component},
                     {"params", c.params},
                     {"budget", c.budget},
                     {"predicted_after", c.predicted_after},
                     {"counts", {{"embed", c.counts[0]}, {"qk", c.counts[1]}, {"v", c.counts[2]}, {"ffn", c.counts[3]}}},
                     {"remove_embed", c.embed},
                     {"remove_qk", c.qk},
                     {"remove_v", c.v},
                     {"remove_ffn", c.ffn},
                     {"projection", proj}});
  }
  return {{"global_ratio", ratio}, {"phases", phases}, {"components", comps}};
}

PruneSpec PruneSpec::from_json(const json& j) {
  PruneSpec s;
  try {
    s.ratio = j.at("global_ratio").get<double>();
    s.phases = j.at("phases").get<std::set<int>>();
    const auto& comps = j.at("components");
    if (comps.size() != s.components.size()) throw DataError("prune spec needs 4 components");
    for (std::size_t i = 0; i < comps.size(); ++i) {
      auto& c = s.components[i];
      const auto& e = comps[i];
      c.component = e.at("component").get<int>();
      c.params = e.at("params").get<int64_t>();
      c.budget = e.at("budget").get<int64_t>();
      c.predicted_after = e.at("predicted_after").get<int64_t>();
      const auto& k = e.at("counts");
      c.counts = {k.at("embed").get<int64_t>(), k.at("qk").get<int64_t>(), k.at("v").get<int64_t>(),
                  k.at("ffn").get<int64_t>()};
      c.embed = e.at("remove_embed").get<std::vector<int64_t>>();
      c.qk = e.at("remove_qk").get<std::vector<std::array<int64_t, 3>>>();
      c.v = e.at("remove_v").get<std::vector<std::array<int64_t, 3>>>();
      c.ffn = e.at("remove_ffn").get<std::vector<std::array<int64_t, 2>>>();
      c.projection = !e.at("projection").is_null();
      if (c.projection) {
        c.projection_in = e.at("projection").at("in_dim").get<int64_t>();
        c.projection_out = e.at("projection").at("out_dim").get<int64_t>();
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed prune spec: ") + e.what());
  }
  return s;
}

namespace {

struct Counts {
  std::array<int64_t, 4> k{0, 0, 0, 0};
  BlockShape after;
};

Counts counts_for(const BlockShape& s, int heads, const std::set<int>& phases, double rho) {
  Counts c;
  const int64_t h = heads;
  const int64_t L = s.layers;
  if (phases.count(1)) {
    c.k[0] = std::clamp<int64_t>(h * static_cast<int64_t>(std::floor(rho * static_cast<double>(s.dim) / static_cast<double>(h))),
                                 0, s.dim - h);
  }
  if (phases.count(2)) {
    c.k[1] = std::clamp<int64_t>(static_cast<int64_t>(std::floor(rho * static_cast<double>(s.qk_total))), 0, s.qk_total - L * h);
    c.k[2] = std::clamp<int64_t>(static_cast<int64_t>(std::floor(rho * static_cast<double>(s.v_total))), 0, s.v_total - L * h);
  }
  if (phases.count(3)) {
    c.k[3] = std::clamp<int64_t>(static_cast<int64_t>(std::floor(rho * static_cast<double>(s.ffn_total))), 0, s.ffn_total - L);
  }
  c.after = s;
  c.after.dim -= c.k[0];
  c.after.qk_total -= c.k[1];
  c.after.v_total -= c.k[2];
  c.after.ffn_total -= c.k[3];
  c.after.restore = s.restore || (phases.count(3) && c.after.dim < s.original_dim);
  return c;
}

// Adjusts the finest-grained enabled count so the removed total lands as close
// to `budget` as the unit size allows.
void refine(Counts& c, const BlockShape& s, int heads, const std::set<int>& phases, int64_t budget) {
  const int64_t P = block_params(s);
  int slot = -1;
  int64_t unit = 0, lo = 0, hi = 0;
  const int64_t d = c.after.dim;
  if (phases.count(3)) {
    slot = 3;
    unit = 2 * d + 1;
    hi = s.ffn_total - s.layers;
  } else if (phases.count(2)) {
    slot = 2;
    unit = 2 * d + 1;
    hi = s.v_total - s.layers * heads;
  } else {
    return;
  }
  const int64_t removed = P - block_params(c.after);
  const int64_t delta = static_cast<int64_t>(std::llround(static_cast<double>(budget - removed) / static_cast<double>(unit)));
  const int64_t k = std::clamp<int64_t>(c.k[static_cast<std::size_t>(slot)] + delta, lo, hi);
  const int64_t change = k - c.k[static_cast<std::size_t>(slot)];
  c.k[static_cast<std::size_t>(slot)] = k;
  if (slot == 3) c.after.ffn_total -= change;
  else c.after.v_total -= change;
}

}  // namespace

void select_phase(const BeamTransFuser& m, const ImportanceReport& report, int phase, PruneSpec& spec) {
  std::vector<const ImportanceRecord*> recs;
  for (const auto& r : report.records) recs.push_back(&r);
  std::stable_sort(recs.begin(), recs.end(), [](const ImportanceRecord* a, const ImportanceRecord* b) {
    if (a->kl != b->kl) return a->kl < b->kl;
    return a->structure < b->structure;
  });
  for (auto& cs : spec.components) {
    const auto& b = m->fusion[static_cast<std::size_t>(cs.component)];
    auto take = [&](Target t, int64_t k, auto&& accept) {
      int64_t taken = 0;
      for (const auto* r : recs) {
        if (taken == k) break;
        if (r->structure.component != cs.component || r->structure.target != t) continue;
        if (accept(r->structure)) ++taken;
      }
      if (taken < k) {
        throw DataError("importance report has too few " + target_name(t) + " structures for component " +
                        std::to_string(cs.component));
      }
    };
    if (phase == 1) {
      cs.embed.clear();
      take(Target::kEmbed, cs.counts[0], [&](const Structure& s) {
        cs.embed.push_back(s.index);
        return true;
      });
      std::sort(cs.embed.begin(), cs.embed.end());
    } else if (phase == 2) {
      for (auto [t, k, out] : {std::tuple{Target::kQk, cs.counts[1], &cs.qk}, std::tuple{Target::kV, cs.counts[2], &cs.v}}) {
        out->clear();
        std::map<std::pair<int, int>, int64_t> left;
        for (int l = 0; l < static_cast<int>(b->layers.size()); ++l) {
          const auto& layer = b->layers[static_cast<std::size_t>(l)];
          const auto& w = t == Target::kQk ? layer->qk_widths : layer->v_widths;
          for (int h = 0; h < layer->num_heads(); ++h) left[{l, h}] = w[static_cast<std::size_t>(h)];
        }
        take(t, k, [&](const Structure& s) {
          auto& n = left[{s.layer, s.head}];
          if (n <= 1) return false;
          --n;
          out->push_back({s.layer, s.head, s.index});
          return true;
        });
        std::sort(out->begin(), out->end());
      }
    } else if (phase == 3) {
      cs.ffn.clear();
      std::vector<int64_t> left;
      for (const auto& l : b->layers) left.push_back(l->ffn_hidden());
      take(Target::kFfn, cs.counts[3], [&](const Structure& s) {
        auto& n = left[static_cast<std::size_t>(s.layer)];
        if (n <= 1) return false;
        --n;
        cs.ffn.push_back({s.layer, s.index});
        return true;
      });
      std::sort(cs.ffn.begin(), cs.ffn.end());
    }
  }
}

PruneSpec allocate_budget(const BeamTransFuser& m, const ImportanceReport& report, double r,
                          const std::set<int>& phases) {
  check_ratio(r);
  for (int p : phases) {
    if (p < 1 || p > 3) throw ConfigError("prune phases must be drawn from {1, 2, 3}");
  }
  PruneSpec spec;
  spec.ratio = r;
  spec.phases = phases;
  const int heads = m->config().fusion.num_heads;
  for (int c = 0; c < model::kNumStages; ++c) {
    auto& cs = spec.components[static_cast<std::size_t>(c)];
    const auto shape = block_shape(*m->fusion[static_cast<std::size_t>(c)]);
    cs.component = c;
    cs.params = block_params(shape);
    cs.budget = static_cast<int64_t>(std::llround(r * static_cast<double>(cs.params)));
    Counts best = counts_for(shape, heads, phases, 0.0);
    if (cs.budget > 0) {
      constexpr int kSteps = 2000;
      for (int i = 0; i <= kSteps; ++i) {
        const double rho = static_cast<double>(i) / kSteps;
        auto cand = counts_for(shape, heads, phases, rho);
        if (cs.params - block_params(cand.after) <= cs.budget) best = cand;
      }
      refine(best, shape, heads, phases, cs.budget);
    }
    cs.counts = best.k;
    cs.predicted_after = block_params(best.after);
    cs.projection = phases.count(3) && !shape.restore && best.after.dim < shape.original_dim;
    cs.projection_in = cs.projection ? best.after.dim : 0;
    cs.projection_out = cs.projection ? shape.original_dim : 0;
  }
  for (int p : phases) select_phase(m, report, p, spec);
  return spec;
}

// ---------------------------------------------------------------- surgery

void prune_phase1_embedding(FusionBlockImpl& b, const std::vector<int64_t>& removed, int num_heads) {
  if (removed.empty()) return;
  const auto keep = complement(b.embed_dim(), removed, "embedding channel");
  const auto n = static_cast<int64_t>(keep.size());
  if (n < num_heads || n % num_heads != 0) {
    throw std::invalid_argument("phase 1 would leave D=" + std::to_string(n) +
                                " (must be a positive multiple of the head count)");
  }
  torch::NoGradGuard guard;
  const auto K = index_tensor(keep);
  replace(b.tok_w, b.tok_w.index_select(0, K));
  replace(b.tok_b, b.tok_b.index_select(0, K));
  replace(b.pos, b.pos.index_select(1, K));
  for (auto& l : b.layers) {
    for (auto* w : {&l->q_w, &l->k_w, &l->v_w, &l->fc1_w}) replace(*w, w->index_select(1, K));
    for (auto* w : {&l->o_w, &l->o_b, &l->ln1_w, &l->ln1_b, &l->ln2_w, &l->ln2_b, &l->fc2_w, &l->fc2_b}) {
      replace(*w, w->index_select(0, K));
    }
  }
  if (b.has_restore()) replace(b.restore_w, b.restore_w.index_select(1, K));
  std::vector<int64_t> kept;
  for (auto k : keep) kept.push_back(b.kept_channels[static_cast<std::size_t>(k)]);
  b.kept_channels = std::move(kept);
}

void prune_phase2_qkv(FusionBlockImpl& b, const std::vector<std::array<int64_t, 3>>& qk,
                      const std::vector<std::array<int64_t, 3>>& v) {
  torch::NoGradGuard guard;
  for (int64_t li = 0; li < static_cast<int64_t>(b.layers.size()); ++li) {
    auto& l = b.layers[static_cast<std::size_t>(li)];
    auto narrow = [&](std::vector<int64_t>& widths, const std::vector<std::array<int64_t, 3>>& removed,
                      const char* what) {
      std::vector<int64_t> rows;
      std::vector<int64_t> new_widths;
      int64_t off = 0;
      bool changed = false;
      for (int h = 0; h < static_cast<int>(widths.size()); ++h) {
        std::vector<int64_t> drop;
        for (const auto& r : removed) {
          if (r[0] == li && r[1] == h) drop.push_back(r[2]);
        }
        changed = changed || !drop.empty();
        const auto keep = complement(widths[static_cast<std::size_t>(h)], drop, what);
        if (keep.empty()) {
          throw std::invalid_argument(std::string("phase 2 would empty the ") + what + " dims of head " +
                                      std::to_string(h) + " in layer " + std::to_string(li));
        }
        for (auto k : keep) rows.push_back(off + k);
        off += widths[static_cast<std::size_t>(h)];
        new_widths.push_back(static_cast<int64_t>(keep.size()));
      }
      widths = std::move(new_widths);
      return changed ? std::optional<torch::Tensor>(index_tensor(rows)) : std::nullopt;
    };
    for (const auto& r : qk) {
      if (r[0] < 0 || r[0] >= static_cast<int64_t>(b.layers.size())) throw std::invalid_argument("qk layer out of range");
    }
    if (auto R = narrow(l->qk_widths, qk, "query/key")) {
      for (auto* w : {&l->q_w, &l->q_b, &l->k_w, &l->k_b}) replace(*w, w->index_select(0, *R));
    }
    if (auto R = narrow(l->v_widths, v, "value")) {
      replace(l->v_w, l->v_w.index_select(0, *R));
      replace(l->v_b, l->v_b.index_select(0, *R));
      replace(l->o_w, l->o_w.index_select(1, *R));
    }
  }
}

void prune_phase3_ffn(FusionBlockImpl& b, const std::vector<std::array<int64_t, 2>>& ffn, bool insert_projection) {
  torch::NoGradGuard guard;
  for (int64_t li = 0; li < static_cast<int64_t>(b.layers.size()); ++li) {
    auto& l = b.layers[static_cast<std::size_t>(li)];
    std::vector<int64_t> drop;
    for (const auto& r : ffn) {
      if (r[0] == li) drop.push_back(r[1]);
    }
    if (drop.empty()) continue;
    const auto keep = complement(l->ffn_hidden(), drop, "ffn neuron");
    if (keep.empty()) throw std::invalid_argument("phase 3 would empty the hidden layer of layer " + std::to_string(li));
    const auto K = index_tensor(keep);
    replace(l->fc1_w, l->fc1_w.index_select(0, K));
    replace(l->fc1_b, l->fc1_b.index_select(0, K));
    replace(l->fc2_w, l->fc2_w.index_select(1, K));
  }
  if (insert_projection && !b.has_restore() && b.embed_dim() < b.original_dim()) {
    auto w = torch::zeros({b.original_dim(), b.embed_dim()}, b.tok_w.options());
    for (int64_t j = 0; j < b.embed_dim(); ++j) w[b.kept_channels[static_cast<std::size_t>(j)]][j] = 1.0;
    replace(b.restore_w, w);
    replace(b.restore_b, torch::zeros({b.original_dim()}, b.tok_w.options()));
  }
}

void apply_phase(BeamTransFuser& m, const PruneSpec& spec, int phase) {
  const int heads = m->config().fusion.num_heads;
  for (const auto& cs : spec.components) {
    auto& b = *m->fusion.at(static_cast<std::size_t>(cs.component));
    if (phase == 1) prune_phase1_embedding(b, cs.embed, heads);
    if (phase == 2) prune_phase2_qkv(b, cs.qk, cs.v);
    if (phase == 3) prune_phase3_ffn(b, cs.ffn, cs.projection);
  }
}

BeamTransFuser apply_prune(const BeamTransFuser& m, const PruneSpec& spec) {
  auto out = model::clone_model(m);
  for (int p : spec.phases) apply_phase(out, spec, p);
  return out;
}

// ---------------------------------------------------------------- pipeline

double PruneResult::pruned_fraction() const {
  return fusion_before > 0 ? static_cast<double>(fusion_before - fusion_after) / static_cast<double>(fusion_before)
                           : 0.0;
}

json PruneResult::summary_json() const {
  return {{"global_ratio", spec.ratio},
          {"fusion_params_before", fusion_before},
          {"fusion_params_after", fusion_after},
          {"pruned_fraction", pruned_fraction()},
          {"importance_method", importance.method},
          {"census_after", model::param_census(*model).to_json()}};
}

PruneResult prune_with_report(const BeamTransFuser& m, const ImportanceReport& report, const PruneOptions& opts) {
  check_ratio(opts.ratio);
  PruneResult res;
  res.fusion_before = model::param_census(*m).fusion;
  res.importance = report;
  res.spec = allocate_budget(m, report, opts.ratio, opts.phases);
  res.model = apply_prune(m, res.spec);
  res.fusion_after = model::param_census(*res.model).fusion;
  return res;
}

PruneResult prune_model(const BeamTransFuser& m, std::span<const data::MultiModalSample> calib,
                        const PruneOptions& opts) {
  check_ratio(opts.ratio);
  if (opts.ratio == 0.0) return prune_with_report(m, ImportanceReport{}, opts);
  if (calib.empty()) throw DataError("prune: empty calibration set");
  PruneResult res;
  res.fusion_before = model::param_census(*m).fusion;
  res.model = model::clone_model(m);
  res.importance = kl_importance_all(res.model, calib, opts.phases, opts.batch_size);
  res.spec = allocate_budget(res.model, res.importance, opts.ratio, opts.phases);
  bool first = true;
  for (int p : opts.phases) {
    if (opts.iterative && !first) {
      const auto fresh = kl_importance_all(res.model, calib, {p}, opts.batch_size);
      select_phase(res.model, fresh, p, res.spec);
      std::erase_if(res.importance.records, [&](const ImportanceRecord& r) {
        return (p == 2 && (r.structure.target == Target::kQk || r.structure.target == Target::kV)) ||
               (p == 3 && r.structure.target == Target::kFfn);
      });
      res.importance.records.insert(res.importance.records.end(), fresh.records.begin(), fresh.records.end());
    }
    apply_phase(res.model, res.spec, p);
    first = false;
  }
  res.fusion_after = model::param_census(*res.model).fusion;
  return res;
}

train::TrainReport finetune(BeamTransFuser& m, std::span<const data::MultiModalSample> train_set,
                            std::span<const data::MultiModalSample> val_set, train::TrainConfig cfg,
                            const train::TrainOutputs& out) {
  cfg.restore_best = true;
  cfg.include_initial = true;
  return train::train(m, train_set, val_set, cfg, out);
}

// ---------------------------------------------------------------- latency

json LatencyReport::to_json() const {
  return {{"device", device},         {"batch_size", batch_size}, {"warmup", warmup},
          {"runs", runs},             {"samples_ms", samples_ms}, {"mean_ms", mean_ms},
          {"median_ms", median_ms},   {"p95_ms", p95_ms},         {"threshold_ms", threshold_ms},
          {"meets_threshold", meets_threshold()}};
}

data::Batch random_batch(const model::ModelConfig& cfg, int batch_size, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const int64_t B = batch_size;
  data::Batch b;
  b.camera = torch::rand({B, 3, cfg.camera_size, cfg.camera_size}, gen);
  b.lidar = torch::rand({B, 1, cfg.lidar_size, cfg.lidar_size}, gen);
  b.radar = torch::rand({B, 2, cfg.radar_size, cfg.radar_size}, gen);
  b.gps = torch::rand({B, 2}, gen) * 2.0 - 1.0;
  b.labels = torch::zeros({B}, torch::kLong);
  return b;
}

namespace {

void finalize(LatencyReport& r) {
  auto s = r.samples_ms;
  std::sort(s.begin(), s.end());
  const auto n = s.size();
  r.mean_ms = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(n);
  r.median_ms = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  r.p95_ms = s[static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1];
}

double time_forward(BeamTransFuser& m, const data::Batch& batch) {
  const auto t0 = std::chrono::steady_clock::now();
  auto out = m->forward(batch);
  (void)out.sum().item<double>();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

LatencyReport make_report(const std::string& device, int batch_size, int runs, int warmup) {
  if (runs < 1) throw ConfigError("bench_latency needs at least one measured run");
  if (warmup < 0) throw ConfigError("bench_latency warmup must be >= 0");
  LatencyReport r;
  r.device = device;
  r.batch_size = batch_size;
  r.runs = runs;
  r.warmup = warmup;
  return r;
}

}  // namespace

LatencyReport bench_latency(BeamTransFuser& m, const std::string& device, int batch_size, int runs, int warmup) {
  auto r = make_report(device, batch_size, runs, warmup);
  const auto batch = random_batch(m->config(), batch_size, 0).to(m->dtype());
  const bool was_training = m->is_training();
  m->eval();
  torch::NoGradGuard guard;
  for (int i = 0; i < warmup; ++i) time_forward(m, batch);
  for (int i = 0; i < runs; ++i) r.samples_ms.push_back(time_forward(m, batch));
  m->train(was_training);
  finalize(r);
  return r;
}

std::pair<LatencyReport, LatencyReport> bench_latency_paired(BeamTransFuser& a, BeamTransFuser& b,
                                                             const std::string& device, int batch_size,
                                                             int runs, int warmup) {
  auto ra = make_report(device, batch_size, runs, warmup);
  auto rb = make_report(device, batch_size, runs, warmup);
  const auto ba = random_batch(a->config(), batch_size, 0).to(a->dtype());
  const auto bb = random_batch(b->config(), batch_size, 0).to(b->dtype());
  const bool ta = a->is_training();
  const bool tb = b->is_training();
  a->eval();
  b->eval();
  torch::NoGradGuard guard;
  for (int i = 0; i < warmup; ++i) {
    time_forward(a, ba);
    time_forward(b, bb);
  }
  for (int i = 0; i < runs; ++i) {
    ra.samples_ms.push_back(time_forward(a, ba));
    rb.samples_ms.push_back(time_forward(b, bb));
  }
  a->train(ta);
  b->train(tb);
  finalize(ra);
  finalize(rb);
  return {ra, rb};
}

bool faster_than(const LatencyReport& candidate, const LatencyReport& reference) {
  return candidate.mean_ms < reference.mean_ms;
}

}  // namespace mmbeam::compress
