// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Beam codebooks, link quantities and beam-prediction metrics.

#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace mmbeam::rf {

using cplx = std::complex<double>;
using CVector = std::vector<cplx>;

// M unit-norm beamforming vectors over `num_antennas` elements.
struct BeamCodebook {
  int num_antennas = 0;
  std::vector<CVector> vectors;

  int num_beams() const { return static_cast<int>(vectors.size()); }
  const CVector& beam(int index) const;
};

struct ChannelRealization {
  CVector h;
  double noise_power = 1.0;  // sigma^2, linear
};

// Per-sample ranked predictions (descending score) and ground truth.
struct PredictionBatch {
  std::vector<std::vector<int>> ranked_indices;
  std::vector<int> truth;

  std::size_t size() const { return truth.size(); }
};

// Half-wavelength ULA response at normalized spatial frequency u in [-1, 1):
// a[n] = exp(j*pi*n*u) / sqrt(N).
CVector steering_vector(int num_antennas, double spatial_freq);

// Uniformly spaced steering beams, centres u_m = -1 + (2m + 1) / M.
BeamCodebook make_dft_codebook(int num_antennas, int num_beams);

double beam_spatial_freq(int num_beams, int beam_index);

// |h^H f_m|^2 / sigma^2
double snr(const BeamCodebook& codebook, int beam_index, const ChannelRealization& chan);

// log2(1 + snr)
double rate(const BeamCodebook& codebook, int beam_index, const ChannelRealization& chan);

// argmax_m rate; ties go to the lowest index.
int optimal_beam(const BeamCodebook& codebook, const ChannelRealization& chan);

// Received power per beam, |h^H f_m|^2.
std::vector<double> beam_powers(const BeamCodebook& codebook, const CVector& h);

// Distance-based accuracy. Y_k = mean_i max(0, 1 - min_{j<=k} |yhat_ij - y_i| / delta),
// score = mean_{k=1..k_max} Y_k. `per_k`, when non-null, receives Y_1..Y_kmax.
double dba_score(const PredictionBatch& preds, int k_max = 3, int delta = 5,
                 std::vector<double>* per_k = nullptr);

double topk_accuracy(const PredictionBatch& preds, int k);

// Ranks logits (descending score, ties to the lower index) for each row.
PredictionBatch rank_predictions(std::span<const float> logits, int num_classes,
                                 std::span<const int> truth);

struct MetricOptions {
  int k_max = 3;
  int delta = 5;
  std::vector<int> topk = {1, 2, 3};
};

// {"dba", "dba_per_k", "topk": {"1": .., ...}, "n_samples"}
nlohmann::json metrics_json(const PredictionBatch& preds, const MetricOptions& opts = {});

}  // namespace mmbeam::rf
