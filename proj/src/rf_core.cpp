// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/rf_core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mmbeam::rf {

namespace {

void check_channel(const BeamCodebook& codebook, const ChannelRealization& chan) {
  if (static_cast<int>(chan.h.size()) != codebook.num_antennas) {
    throw std::invalid_argument("channel has " + std::to_string(chan.h.size()) +
                                " antennas, codebook expects " +
                                std::to_string(codebook.num_antennas));
  }
  if (!(chan.noise_power > 0.0)) {
    throw std::invalid_argument("noise power must be positive");
  }
}

cplx inner(const CVector& h, const CVector& f) {
  cplx acc{0.0, 0.0};
  for (std::size_t i = 0; i < h.size(); ++i) acc += std::conj(h[i]) * f[i];
  return acc;
}

void check_batch(const PredictionBatch& preds) {
  if (preds.truth.empty()) throw std::invalid_argument("empty prediction batch");
  if (preds.ranked_indices.size() != preds.truth.size()) {
    throw std::invalid_argument("ranked_indices and truth differ in length");
  }
}

}  // namespace

const CVector& BeamCodebook::beam(int index) const {
  if (index < 0 || index >= num_beams()) {
    throw std::out_of_range("beam index " + std::to_string(index) + " outside [0, " +
                            std::to_string(num_beams()) + ")");
  }
  return vectors[static_cast<std::size_t>(index)];
}

CVector steering_vector(int num_antennas, double spatial_freq) {
  if (num_antennas < 1) throw std::invalid_argument("num_antennas must be positive");
  CVector a(static_cast<std::size_t>(num_antennas));
  const double norm = 1.0 / std::sqrt(static_cast<double>(num_antennas));
  for (int n = 0; n < num_antennas; ++n) {
    a[static_cast<std::size_t>(n)] = std::polar(norm, std::numbers::pi * n * spatial_freq);
  }
  return a;
}

double beam_spatial_freq(int num_beams, int beam_index) {
  return -1.0 + (2.0 * beam_index + 1.0) / num_beams;
}

BeamCodebook make_dft_codebook(int num_antennas, int num_beams) {
  if (num_antennas < 1 || num_beams < 1) {
    throw std::invalid_argument("codebook sizes must be positive");
  }
  BeamCodebook cb;
  cb.num_antennas = num_antennas;
  cb.vectors.reserve(static_cast<std::size_t>(num_beams));
  for (int m = 0; m < num_beams; ++m) {
    cb.vectors.push_back(steering_vector(num_antennas, beam_spatial_freq(num_beams, m)));
  }
  return cb;
}

double snr(const BeamCodebook& codebook, int beam_index, const ChannelRealization& chan) {
  check_channel(codebook, chan);
  return std::norm(inner(chan.h, codebook.beam(beam_index))) / chan.noise_power;
}

double rate(const BeamCodebook& codebook, int beam_index, const ChannelRealization& chan) {
  return std::log2(1.0 + snr(codebook, beam_index, chan));
}

int optimal_beam(const BeamCodebook& codebook, const ChannelRealization& chan) {
  check_channel(codebook, chan);
  if (codebook.num_beams() == 0) throw std::invalid_argument("empty codebook");
  int best = 0;
  double best_rate = rate(codebook, 0, chan);
  for (int m = 1; m < codebook.num_beams(); ++m) {
    const double r = rate(codebook, m, chan);
    if (r > best_rate) {
      best = m;
      best_rate = r;
    }
  }
  return best;
}

std::vector<double> beam_powers(const BeamCodebook& codebook, const CVector& h) {
  if (static_cast<int>(h.size()) != codebook.num_antennas) {
    throw std::invalid_argument("channel/codebook antenna mismatch");
  }
  std::vector<double> p;
  p.reserve(codebook.vectors.size());
  for (const auto& f : codebook.vectors) p.push_back(std::norm(inner(h, f)));
  return p;
}

double dba_score(const PredictionBatch& preds, int k_max, int delta, std::vector<double>* per_k) {
  check_batch(preds);
  if (k_max < 1) throw std::invalid_argument("k_max must be >= 1");
  if (delta < 1) throw std::invalid_argument("delta must be >= 1");
  std::vector<double> yk(static_cast<std::size_t>(k_max), 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& ranked = preds.ranked_indices[i];
    if (static_cast<int>(ranked.size()) < k_max) {
      throw std::invalid_argument("sample " + std::to_string(i) + " has " +
                                  std::to_string(ranked.size()) + " ranked entries, need " +
                                  std::to_string(k_max));
    }
    int best = std::abs(ranked[0] - preds.truth[i]);
    for (int k = 0; k < k_max; ++k) {
      best = std::min(best, std::abs(ranked[static_cast<std::size_t>(k)] - preds.truth[i]));
      yk[static_cast<std::size_t>(k)] +=
          std::max(0.0, 1.0 - static_cast<double>(best) / static_cast<double>(delta));
    }
  }
  const double n = static_cast<double>(preds.size());
  for (auto& v : yk) v /= n;
  if (per_k) *per_k = yk;
  return std::accumulate(yk.begin(), yk.end(), 0.0) / static_cast<double>(k_max);
}

double topk_accuracy(const PredictionBatch& preds, int k) {
  check_batch(preds);
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& ranked = preds.ranked_indices[i];
    if (static_cast<int>(ranked.size()) < k) {
      throw std::invalid_argument("k=" + std::to_string(k) + " exceeds ranked list length " +
                                  std::to_string(ranked.size()));
    }
    if (std::find(ranked.begin(), ranked.begin() + k, preds.truth[i]) != ranked.begin() + k) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

PredictionBatch rank_predictions(std::span<const float> logits, int num_classes,
                                 std::span<const int> truth) {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
  if (logits.size() != truth.size() * static_cast<std::size_t>(num_classes)) {
    throw std::invalid_argument("logits size does not match truth count * num_classes");
  }
  PredictionBatch out;
  out.truth.assign(truth.begin(), truth.end());
  out.ranked_indices.resize(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto row = logits.subspan(i * static_cast<std::size_t>(num_classes),
                              static_cast<std::size_t>(num_classes));
    auto& idx = out.ranked_indices[i];
    idx.resize(static_cast<std::size_t>(num_classes));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
    });
  }
  return out;
}

nlohmann::json metrics_json(const PredictionBatch& preds, const MetricOptions& opts) {
  nlohmann::json j;
  std::vector<double> per_k;
  const int num_ranked = preds.ranked_indices.empty()
                             ? 0
                             : static_cast<int>(preds.ranked_indices.front().size());
  const int k_max = std::min(opts.k_max, num_ranked);
  j["dba"] = dba_score(preds, k_max, opts.delta, &per_k);
  j["dba_per_k"] = per_k;
  nlohmann::json topk = nlohmann::json::object();
  for (int k : opts.topk) {
    if (k <= num_ranked) topk[std::to_string(k)] = topk_accuracy(preds, k);
  }
  j["topk"] = topk;
  j["n_samples"] = preds.size();
  return j;
}

}  // namespace mmbeam::rf
