// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// MMBT binary tensor container.
//
//   offset  size     field
//   0       4        magic "MMBT"
//   4       1        version (1)
//   5       1        dtype  (0 f32, 1 f64, 2 i64, 3 u8, 4 i32)
//   6       1        rank
//   7       4*rank   dims, little-endian uint32
//   ...              row-major little-endian payload

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace mmbeam::io {

inline constexpr std::uint8_t kMmbtVersion = 1;

std::string encode_mmbt(const torch::Tensor& t);
torch::Tensor decode_mmbt(std::string_view bytes);

void write_mmbt(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_mmbt(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace mmbeam::io
