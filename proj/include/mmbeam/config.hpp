// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat run configuration.
//
//   # comment
//   seed = 7
//   train.epochs = 20
//   model.embed_dims = 16,32,64,128
//
// Keys are `section.key` (plus the top-level `seed`). Every key must appear in
// the schema; values are checked against their declared type. Later sources
// (files, then command-line overrides) replace earlier ones.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmbeam/compression.hpp"
#include "mmbeam/data.hpp"
#include "mmbeam/generation.hpp"
#include "mmbeam/model.hpp"
#include "mmbeam/training.hpp"

namespace mmbeam::config {

enum class ValueType { kInt, kUint, kReal, kBool, kString, kIntList };

struct KeySpec {
  ValueType type = ValueType::kString;
  std::string default_value;  // empty: unset unless given
  std::string help;
};

const std::map<std::string, KeySpec>& schema();

class RunConfig {
 public:
  // Parses `text`; throws ConfigError listing every malformed line and unknown key.
  void merge_text(const std::string& text, const std::string& source = "<text>");
  void merge_file(const std::filesystem::path& path);
  // `key=value` override.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  // Throws ConfigError listing every key whose value does not parse.
  void validate() const;

  bool has(const std::string& key) const;  // explicitly set
  std::string get(const std::string& key) const;  // set value or default
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  // Every key that has a value (explicit or default), one `key = value` per line.
  std::string snapshot() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Typed views. Explicit `model.*` keys override the chosen preset; input sizes
// and beam count fall back to `data` when given and not set explicitly.
model::ModelConfig model_config(const RunConfig& rc, const data::PreprocessConfig* data = nullptr);
data::SyntheticSceneConfig synth_config(const RunConfig& rc);
train::TrainConfig train_config(const RunConfig& rc);
train::TrainConfig finetune_config(const RunConfig& rc);
compress::PruneOptions prune_options(const RunConfig& rc);
gen::CvaeConfig cvae_config(const RunConfig& rc, const data::PreprocessConfig& shapes);
gen::CvaeTrainConfig cvae_train_config(const RunConfig& rc);
data::SplitSpec split_spec(const RunConfig& rc);

}  // namespace mmbeam::config
