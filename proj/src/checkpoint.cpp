// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/checkpoint.hpp"

#include <cstring>

#include "mmbeam/errors.hpp"
#include "mmbeam/tensor_io.hpp"

using json = nlohmann::json;

namespace mmbeam::ckpt {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view bytes(std::uint64_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > b_.size() - pos_) throw DataError("checkpoint archive is truncated");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_archive(const Archive& a) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  const auto meta = a.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& [name, t] : a.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const auto blob = io::encode_mmbt(t);
    put<std::uint64_t>(out, blob.size());
    out += blob;
  }
  return out;
}

Archive decode_archive(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw DataError("not a checkpoint archive (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Archive a;
  const auto meta_len = r.get<std::uint64_t>();
  try {
    a.meta = json::parse(r.bytes(meta_len));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.bytes(r.get<std::uint32_t>()));
    const auto blob_len = r.get<std::uint64_t>();
    try {
      a.tensors[name] = io::decode_mmbt(r.bytes(blob_len));
    } catch (const DataError& e) {
      throw DataError("checkpoint tensor '" + name + "': " + e.what());
    }
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint archive");
  return a;
}

void write_archive(const std::filesystem::path& path, const Archive& a) {
  io::write_file(path, encode_archive(a));
}

Archive read_archive(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  return decode_archive(io::read_file(path));
}

std::map<std::string, torch::Tensor> state_dict(const torch::nn::Module& m, const std::string& prefix) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) {
    out[prefix + p.key()] = p.value().detach().cpu().contiguous().clone();
  }
  for (const auto& b : m.named_buffers()) {
    out[prefix + b.key()] = b.value().detach().cpu().contiguous().clone();
  }
  return out;
}

void load_state_dict(torch::nn::Module& m, const std::map<std::string, torch::Tensor>& tensors,
                     const std::string& prefix, bool strict) {
  torch::NoGradGuard guard;
  auto load = [&](const std::string& key, torch::Tensor& dst) {
    auto it = tensors.find(prefix + key);
    if (it == tensors.end()) {
      if (strict) throw DataError("checkpoint is missing tensor '" + prefix + key + "'");
      return;
    }
    if (it->second.sizes() != dst.sizes()) {
      throw DataError("checkpoint tensor '" + prefix + key + "' has shape " +
                      c10::str(it->second.sizes()) + ", model expects " + c10::str(dst.sizes()));
    }
    dst.copy_(it->second);
  };
  for (auto& p : m.named_parameters()) load(p.key(), p.value());
  for (auto& b : m.named_buffers()) load(b.key(), b.value());
}

void save_model(const std::filesystem::path& path, const model::BeamTransFuser& m, const json& extra) {
  Archive a;
  a.meta = extra.is_object() ? extra : json::object();
  a.meta["format_version"] = kFormatVersion;
  a.meta["kind"] = "beam_transfuser";
  a.meta["config"] = m->config().to_json();
  a.meta["config_hash"] = m->config().hash();
  a.meta["structure"] = m->structure();
  a.meta["dtype"] = m->dtype() == torch::kFloat64 ? "float64" : "float32";
  json flags = json::array();
  for (const auto& b : m->fusion) {
    flags.push_back({{"position_embedding", b->use_position},
                     {"scale_full_dim", !b->layers.empty() && b->layers.front()->scale_full_dim}});
  }
  a.meta["fusion_flags"] = flags;
  if (!a.meta.contains("epoch")) a.meta["epoch"] = nullptr;
  if (!a.meta.contains("seed")) a.meta["seed"] = nullptr;
  if (!a.meta.contains("metrics")) a.meta["metrics"] = json::object();
  a.tensors = state_dict(*m);
  write_archive(path, a);
}

model::BeamTransFuser load_model(const std::filesystem::path& path, json* meta) {
  auto a = read_archive(path);
  if (a.meta.value("kind", "") != "beam_transfuser") {
    throw DataError("checkpoint " + path.string() + " does not hold a beam model");
  }
  model::ModelConfig cfg;
  try {
    cfg = model::ModelConfig::from_json(a.meta.at("config"));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint config: ") + e.what());
  }
  model::BeamTransFuser m(cfg);
  if (a.meta.value("dtype", "float32") == "float64") m->to(torch::kFloat64);
  try {
    m->apply_structure(a.meta.at("structure"));
    if (a.meta.contains("fusion_flags")) {
      const auto& flags = a.meta.at("fusion_flags");
      for (std::size_t i = 0; i < m->fusion.size() && i < flags.size(); ++i) {
        m->fusion[i]->use_position = flags[i].at("position_embedding").get<bool>();
        for (auto& l : m->fusion[i]->layers) l->scale_full_dim = flags[i].at("scale_full_dim").get<bool>();
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint structure: ") + e.what());
  }
  load_state_dict(*m, a.tensors);
  m->eval();
  if (meta) *meta = std::move(a.meta);
  return m;
}

}  // namespace mmbeam::ckpt
