// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the code under test except to read weights.

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "mmbeam/model.hpp"
#include "mmbeam/rf_core.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  Mat m(static_cast<std::size_t>(c.size(0)), std::vector<double>(static_cast<std::size_t>(c.size(1))));
  auto a = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i) {
    for (int64_t j = 0; j < c.size(1); ++j) m[i][j] = a[i][j];
  }
  return m;
}

inline std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous().flatten();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

// y = x W^T + b for row-major x [N, in], W [out, in]
inline Mat linear(const Mat& x, const Mat& w, const std::vector<double>& b) {
  Mat y(x.size(), std::vector<double>(w.size(), 0.0));
  for (std::size_t n = 0; n < x.size(); ++n) {
    for (std::size_t o = 0; o < w.size(); ++o) {
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t i = 0; i < x[n].size(); ++i) s += x[n][i] * w[o][i];
      y[n][o] = s;
    }
  }
  return y;
}

struct AttentionOut {
  Mat out;                    // after the output projection, [N, D]
  std::vector<Mat> weights;   // per head, [N, N]
  Mat heads;                  // concatenated head outputs before projection
};

// Scaled dot-product attention of one sequence, heads of arbitrary
// query/key and value widths, evaluated with plain loops in double.
inline AttentionOut attention(const Mat& x, const mmbeam::model::FusionLayerImpl& l) {
  const auto q = linear(x, to_mat(l.q_w), to_vec(l.q_b));
  const auto k = linear(x, to_mat(l.k_w), to_vec(l.k_b));
  const auto v = linear(x, to_mat(l.v_w), to_vec(l.v_b));
  const std::size_t n = x.size();
  AttentionOut r;
  std::size_t total_v = 0;
  for (auto w : l.v_widths) total_v += static_cast<std::size_t>(w);
  r.heads.assign(n, std::vector<double>(total_v, 0.0));
  std::size_t qoff = 0, voff = 0;
  for (std::size_t h = 0; h < l.qk_widths.size(); ++h) {
    const auto dq = static_cast<std::size_t>(l.qk_widths[h]);
    const auto dv = static_cast<std::size_t>(l.v_widths[h]);
    const double scale_width = l.scale_full_dim ? static_cast<double>(x[0].size()) : static_cast<double>(dq);
    Mat a(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dq; ++d) s += q[i][qoff + d] * k[j][qoff + d];
        a[i][j] = s / std::sqrt(scale_width);
        mx = std::max(mx, a[i][j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        a[i][j] = std::exp(a[i][j] - mx);
        z += a[i][j];
      }
      for (std::size_t j = 0; j < n; ++j) a[i][j] /= z;
      for (std::size_t d = 0; d < dv; ++d) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[i][j] * v[j][voff + d];
        r.heads[i][voff + d] = s;
      }
    }
    r.weights.push_back(a);
    qoff += dq;
    voff += dv;
  }
  r.out = linear(r.heads, to_mat(l.o_w), to_vec(l.o_b));
  return r;
}

inline double max_abs_diff(const Mat& a, const torch::Tensor& t) {
  const auto b = to_mat(t);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  }
  return m;
}

// ---------------------------------------------------------------- rf

inline double snr(const std::vector<std::complex<double>>& h, const std::vector<std::complex<double>>& f,
                  double noise) {
  double re = 0.0, im = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    // conj(h_i) * f_i
    re += h[i].real() * f[i].real() + h[i].imag() * f[i].imag();
    im += h[i].real() * f[i].imag() - h[i].imag() * f[i].real();
  }
  return (re * re + im * im) / noise;
}

inline int argmax_first(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

inline double dba(const std::vector<std::vector<int>>& ranked, const std::vector<int>& truth, int k_max,
                  int delta) {
  double total = 0.0;
  for (int k = 1; k <= k_max; ++k) {
    double yk = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      int best = std::numeric_limits<int>::max();
      for (int j = 0; j < k; ++j) best = std::min(best, std::abs(ranked[i][static_cast<std::size_t>(j)] - truth[i]));
      yk += std::max(0.0, 1.0 - static_cast<double>(best) / delta);
    }
    total += yk / static_cast<double>(truth.size());
  }
  return total / k_max;
}

inline double topk(const std::vector<std::vector<int>>& ranked, const std::vector<int>& truth, int k) {
  int hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int j = 0; j < k; ++j) {
      if (ranked[i][static_cast<std::size_t>(j)] == truth[i]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------- gradients

struct GradCheck {
  int checked = 0;
  double max_rel_err = 0.0;
};

// Central differences on `samples` entries drawn uniformly over `params`
// (double tensors). rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheck check_gradients(const std::function<torch::Tensor()>& loss, std::vector<torch::Tensor> params,
                                 int samples, std::uint64_t seed, double eps = 1e-6, double floor = 1e-7) {
  for (auto& p : params) p.mutable_grad() = torch::Tensor();
  loss().backward();
  std::vector<int64_t> sizes;
  int64_t total = 0;
  for (const auto& p : params) {
    sizes.push_back(p.numel());
    total += p.numel();
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int64_t> pick(0, total - 1);
  GradCheck r;
  torch::NoGradGuard ng;
  for (int s = 0; s < samples; ++s) {
    int64_t flat = pick(rng);
    std::size_t which = 0;
    while (flat >= sizes[which]) flat -= sizes[which++];
    auto data = params[which].view({-1});
    const double analytic = params[which].grad().view({-1})[flat].item<double>();
    const double orig = data[flat].item<double>();
    data[flat] = orig + eps;
    const double up = loss().item<double>();
    data[flat] = orig - eps;
    const double down = loss().item<double>();
    data[flat] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    r.max_rel_err = std::max(r.max_rel_err, std::abs(analytic - numeric) / denom);
    ++r.checked;
  }
  return r;
}

// ---------------------------------------------------------------- configs

// Smallest valid network: D = 8 per stage, grid 2, one layer per block.
inline mmbeam::model::ModelConfig tiny_config() {
  mmbeam::model::ModelConfig c = mmbeam::model::ModelConfig::toy();
  c.stage_channels = {8, 8, 8, 8};
  c.fusion.embed_dims = {8, 8, 8, 8};
  c.fusion.num_layers = 1;
  c.fusion.token_grid = 2;
  c.gps_hidden = 8;
  c.head_hidden = {8};
  c.num_beams = 4;
  c.camera_size = 32;
  c.lidar_size = 32;
  c.radar_size = 32;
  return c;
}

}  // namespace oracle
