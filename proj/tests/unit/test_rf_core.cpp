// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <complex>
#include <numeric>
#include <random>

#include "mmbeam/rf_core.hpp"
#include "oracles.hpp"

using namespace mmbeam::rf;

namespace {

CVector random_channel(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g;
  CVector h(static_cast<std::size_t>(n));
  for (auto& x : h) x = {g(rng), g(rng)};
  return h;
}

double norm(const CVector& v) {
  double s = 0.0;
  for (const auto& x : v) s += std::norm(x);
  return std::sqrt(s);
}

PredictionBatch random_batch(std::mt19937_64& rng, int n, int m, int len) {
  PredictionBatch p;
  std::vector<int> perm(static_cast<std::size_t>(m));
  std::uniform_int_distribution<int> label(0, m - 1);
  for (int i = 0; i < n; ++i) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    p.ranked_indices.emplace_back(perm.begin(), perm.begin() + len);
    p.truth.push_back(label(rng));
  }
  return p;
}

}  // namespace

TEST_SUITE("rf_core") {

TEST_CASE("single-antenna single-beam codebook is [1]") {
  const auto cb = make_dft_codebook(1, 1);
  REQUIRE(cb.num_beams() == 1);
  CHECK(std::abs(cb.beam(0)[0] - cplx(1.0, 0.0)) < 1e-12);
}

TEST_CASE("codebook vectors are unit norm and distinct") {
  const auto cb = make_dft_codebook(32, 64);
  REQUIRE(cb.num_beams() == 64);
  for (int m = 0; m < 64; ++m) CHECK(std::abs(norm(cb.beam(m)) - 1.0) < 1e-9);
  for (int i = 0; i < 64; ++i) {
    for (int j = i + 1; j < 64; ++j) {
      cplx ip = 0.0;
      for (int n = 0; n < 32; ++n) ip += std::conj(cb.beam(i)[n]) * cb.beam(j)[n];
      CHECK(std::abs(ip) < 1.0 - 1e-9);
    }
  }
}

TEST_CASE("invalid codebook sizes are rejected") {
  CHECK_THROWS_AS(make_dft_codebook(0, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_dft_codebook(4, 0), std::invalid_argument);
}

TEST_CASE("channel equal to beam 17 peaks at 17 under an exhaustive sweep") {
  const auto cb = make_dft_codebook(32, 64);
  ChannelRealization ch{cb.beam(17), 1.0};
  std::vector<double> sweep;
  for (int m = 0; m < 64; ++m) sweep.push_back(oracle::snr(ch.h, cb.beam(m), 1.0));
  CHECK(oracle::argmax_first(sweep) == 17);
  CHECK(optimal_beam(cb, ch) == 17);
}

TEST_CASE("snr examples") {
  const auto cb = make_dft_codebook(8, 8);
  CHECK(snr(cb, 3, {cb.beam(3), 1.0}) == doctest::Approx(1.0).epsilon(1e-12));
  // DFT beams with N == M are mutually orthogonal
  CHECK(std::abs(snr(cb, 3, {cb.beam(4), 1.0})) < 1e-12);

  std::mt19937_64 rng(5);
  const auto h = random_channel(rng, 8);
  const double expect = oracle::snr(h, cb.beam(2), 0.5);
  CHECK(std::abs(snr(cb, 2, {h, 0.5}) - expect) <= 1e-9 * expect);
}

TEST_CASE("snr errors") {
  const auto cb = make_dft_codebook(8, 8);
  CHECK_THROWS_AS(snr(cb, 8, {cb.beam(0), 1.0}), std::out_of_range);
  CHECK_THROWS_AS(snr(cb, -1, {cb.beam(0), 1.0}), std::out_of_range);
  CHECK_THROWS_AS(snr(cb, 0, {CVector(4), 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(snr(cb, 0, {cb.beam(0), 0.0}), std::invalid_argument);
}

TEST_CASE("rate examples") {
  // gamma = |h^H f|^2 / sigma^2 with h = f: gamma = 1 / sigma^2
  const auto cb = make_dft_codebook(4, 4);
  CHECK(rate(cb, 1, {cb.beam(1), 1.0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rate(cb, 1, {cb.beam(1), 1.0 / 3.0}) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(rate(cb, 1, {cb.beam(2), 1.0}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("rate is strictly increasing in snr") {
  const auto cb = make_dft_codebook(4, 4);
  double prev = -1.0;
  for (double sigma2 : {10.0, 3.0, 1.0, 0.5, 0.1, 0.01}) {
    const double r = rate(cb, 0, {cb.beam(0), sigma2});
    CHECK(r > prev);
    prev = r;
  }
}

TEST_CASE("optimal beam examples") {
  const auto cb = make_dft_codebook(32, 64);
  CHECK(optimal_beam(cb, {cb.beam(5), 1.0}) == 5);

  CVector h(32);
  for (int n = 0; n < 32; ++n) h[n] = cb.beam(3)[n] + cb.beam(4)[n];
  const double nh = norm(h);
  for (auto& x : h) x /= nh;
  std::vector<double> sweep;
  for (int m = 0; m < 64; ++m) sweep.push_back(oracle::snr(h, cb.beam(m), 1.0));
  CHECK(optimal_beam(cb, {h, 1.0}) == oracle::argmax_first(sweep));

  const auto one = make_dft_codebook(4, 1);
  std::mt19937_64 rng(1);
  CHECK(optimal_beam(one, {random_channel(rng, 4), 1.0}) == 0);
}

TEST_CASE("optimal beam breaks ties toward the lowest index") {
  BeamCodebook cb;
  cb.num_antennas = 1;
  cb.vectors = {{cplx(1, 0)}, {cplx(0, 1)}, {cplx(-1, 0)}};
  CHECK(optimal_beam(cb, {{cplx(1, 0)}, 1.0}) == 0);
}

TEST_CASE("snr is invariant under a global phase rotation of h") {
  const auto cb = make_dft_codebook(16, 32);
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    auto h = random_channel(rng, 16);
    const double theta = 0.37 * (t + 1);
    auto hr = h;
    for (auto& x : hr) x *= std::polar(1.0, theta);
    for (int m = 0; m < 32; m += 5) CHECK(std::abs(snr(cb, m, {h, 1.0}) - snr(cb, m, {hr, 1.0})) < 1e-9);
  }
}

TEST_CASE("optimal beam is invariant under positive channel scaling") {
  const auto cb = make_dft_codebook(16, 32);
  for (int m = 0; m < 32; ++m) {
    auto h = cb.beam(m);
    for (auto& x : h) x *= 7.5;
    CHECK(optimal_beam(cb, {h, 1.0}) == m);
  }
}

TEST_CASE("dba examples") {
  PredictionBatch exact;
  exact.ranked_indices = {{3, 1, 2}, {7, 0, 1}};
  exact.truth = {3, 7};
  CHECK(dba_score(exact) == doctest::Approx(1.0));

  PredictionBatch one;
  one.ranked_indices = {{15, 10, 0}};
  one.truth = {10};
  std::vector<double> per_k;
  CHECK(dba_score(one, 3, 5, &per_k) == doctest::Approx(2.0 / 3.0));
  REQUIRE(per_k.size() == 3);
  CHECK(per_k[0] == doctest::Approx(0.0));
  CHECK(per_k[1] == doctest::Approx(1.0));
  CHECK(per_k[2] == doctest::Approx(1.0));

  PredictionBatch far;
  far.ranked_indices = {{20, 30, 40}, {0, 1, 2}};
  far.truth = {5, 60};
  CHECK(dba_score(far) == doctest::Approx(0.0));
}

TEST_CASE("dba errors") {
  PredictionBatch empty;
  CHECK_THROWS_AS(dba_score(empty), std::invalid_argument);
  PredictionBatch short_list;
  short_list.ranked_indices = {{1, 2}};
  short_list.truth = {1};
  CHECK_THROWS_AS(dba_score(short_list, 3), std::invalid_argument);
}

TEST_CASE("dba is 1 iff every rank-1 prediction is exact") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    auto p = random_batch(rng, 5, 16, 3);
    const double s = dba_score(p);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    bool exact = true;
    for (std::size_t i = 0; i < p.size(); ++i) exact = exact && p.ranked_indices[i][0] == p.truth[i];
    CHECK((s == doctest::Approx(1.0)) == exact);
  }
}

TEST_CASE("topk examples") {
  PredictionBatch all;
  all.ranked_indices = {{1, 0, 2}, {2, 1, 0}};
  all.truth = {1, 2};
  for (int k = 1; k <= 3; ++k) CHECK(topk_accuracy(all, k) == doctest::Approx(1.0));

  PredictionBatch quarter;
  quarter.ranked_indices = {{0, 1}, {0, 1}, {0, 1}, {0, 1}};
  quarter.truth = {0, 1, 2, 3};
  CHECK(topk_accuracy(quarter, 1) == doctest::Approx(0.25));
  CHECK_THROWS_AS(topk_accuracy(quarter, 3), std::invalid_argument);
  CHECK_THROWS_AS(topk_accuracy(quarter, 0), std::invalid_argument);
}

TEST_CASE("random rankings give top-3 close to 3/64") {
  std::mt19937_64 rng(11);
  const auto p = random_batch(rng, 20000, 64, 3);
  // binomial standard error at n = 20000 is ~0.0015
  CHECK(std::abs(topk_accuracy(p, 3) - 3.0 / 64.0) < 0.006);
}

TEST_CASE("topk is monotone in k") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_batch(rng, 10, 8, 8);
    double prev = 0.0;
    for (int k = 1; k <= 8; ++k) {
      const double v = topk_accuracy(p, k);
      CHECK(v >= prev);
      prev = v;
    }
    CHECK(prev == doctest::Approx(1.0));
  }
}

TEST_CASE("metrics match the brute-force oracle") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 200; ++t) {
    const auto p = random_batch(rng, 1 + t % 7, 12, 4);
    CHECK(dba_score(p) == oracle::dba(p.ranked_indices, p.truth, 3, 5));
    for (int k = 1; k <= 4; ++k) CHECK(topk_accuracy(p, k) == oracle::topk(p.ranked_indices, p.truth, k));
  }
}

TEST_CASE("rank_predictions sorts descending with ties to the lower index") {
  const std::vector<float> logits{0.5f, 2.0f, 2.0f, -1.0f, 0.0f, 0.0f, 0.0f, 0.0f};
  const std::vector<int> truth{1, 0};
  const auto p = rank_predictions(logits, 4, truth);
  CHECK(p.ranked_indices[0] == std::vector<int>{1, 2, 0, 3});
  CHECK(p.ranked_indices[1] == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("metrics json layout") {
  PredictionBatch p;
  p.ranked_indices = {{1, 0, 2}, {0, 1, 2}};
  p.truth = {1, 2};
  const auto j = metrics_json(p);
  CHECK(j.at("n_samples").get<int>() == 2);
  CHECK(j.at("dba_per_k").size() == 3);
  CHECK(j.at("topk").at("1").get<double>() == doctest::Approx(0.5));
  CHECK(j.at("topk").at("3").get<double>() == doctest::Approx(1.0));
  CHECK(j.at("dba").get<double>() == doctest::Approx(oracle::dba(p.ranked_indices, p.truth, 3, 5)));
}

}  // TEST_SUITE
