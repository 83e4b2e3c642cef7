// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint archive ("MMCK").
//
//   magic "MMCK" | u32 version | u64 meta length | metadata JSON
//   u32 tensor count | repeated { u32 name length | name | u64 blob length | MMBT blob }
//
// All integers little-endian. Tensors are stored in name order.

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mmbeam/model.hpp"

namespace mmbeam::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;
};

std::string encode_archive(const Archive& a);
Archive decode_archive(std::string_view bytes);
void write_archive(const std::filesystem::path& path, const Archive& a);
Archive read_archive(const std::filesystem::path& path);

// Parameters and buffers as contiguous CPU copies, keys prefixed with `prefix`.
std::map<std::string, torch::Tensor> state_dict(const torch::nn::Module& m,
                                                const std::string& prefix = "");

// Copies tensors named `prefix + key` into the module. With `strict`, every
// parameter and buffer must be present with a matching shape.
void load_state_dict(torch::nn::Module& m, const std::map<std::string, torch::Tensor>& tensors,
                     const std::string& prefix = "", bool strict = true);

// Metadata keys written by save_model: format_version, kind, config,
// config_hash, structure, dtype, plus everything in `extra` (epoch, seed, metrics).
void save_model(const std::filesystem::path& path, const model::BeamTransFuser& m,
                const nlohmann::json& extra = nlohmann::json::object());
model::BeamTransFuser load_model(const std::filesystem::path& path,
                                 nlohmann::json* meta = nullptr);

}  // namespace mmbeam::ckpt
