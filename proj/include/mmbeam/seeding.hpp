// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Every random stream derives from one global seed:
//   stream_seed = splitmix64(global_seed ^ fnv1a64(component_name) ^ splitmix64(counter))
// so components draw independent, reproducible streams.

#pragma once

#include <cstdint>
#include <string_view>

namespace mmbeam {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view component,
                                    std::uint64_t counter = 0) {
  return splitmix64(global_seed ^ fnv1a64(component) ^ splitmix64(counter));
}

// libtorch generators take a non-negative int64-representable seed.
constexpr std::uint64_t torch_seed(std::uint64_t s) { return s & 0x7FFFFFFFFFFFFFFFULL; }

}  // namespace mmbeam
