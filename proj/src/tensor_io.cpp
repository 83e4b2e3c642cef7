// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmbeam/errors.hpp"

static_assert(std::endian::native == std::endian::little, "MMBT I/O assumes a little-endian host");

namespace mmbeam::io {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'B', 'T'};

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    case torch::kUInt8: return 3;
    case torch::kInt32: return 4;
    default: throw std::invalid_argument("MMBT: unsupported dtype");
  }
}

torch::ScalarType dtype_from_code(std::uint8_t code) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    case 3: return torch::kUInt8;
    case 4: return torch::kInt32;
    default: throw DataError("MMBT: unknown dtype code " + std::to_string(code));
  }
}

}  // namespace

std::string encode_mmbt(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kCPU).contiguous();
  if (c.dim() > 255) throw std::invalid_argument("MMBT: rank too large");
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(kMmbtVersion));
  out.push_back(static_cast<char>(dtype_code(c.scalar_type())));
  out.push_back(static_cast<char>(c.dim()));
  for (auto d : c.sizes()) {
    const auto u = static_cast<std::uint32_t>(d);
    char buf[4];
    std::memcpy(buf, &u, 4);
    out.append(buf, 4);
  }
  const auto nbytes = static_cast<std::size_t>(c.numel()) * c.element_size();
  out.append(static_cast<const char*>(c.data_ptr()), nbytes);
  return out;
}

torch::Tensor decode_mmbt(std::string_view bytes) {
  if (bytes.size() < 7 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DataError("MMBT: bad magic");
  }
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kMmbtVersion) {
    throw DataError("MMBT: unsupported version " + std::to_string(version));
  }
  const auto dtype = dtype_from_code(static_cast<std::uint8_t>(bytes[5]));
  const auto rank = static_cast<std::size_t>(static_cast<std::uint8_t>(bytes[6]));
  if (bytes.size() < 7 + 4 * rank) throw DataError("MMBT: truncated header");
  std::vector<int64_t> dims(rank);
  std::size_t numel = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint32_t d;
    std::memcpy(&d, bytes.data() + 7 + 4 * i, 4);
    dims[i] = d;
    numel *= d;
  }
  const std::size_t offset = 7 + 4 * rank;
  auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
  const std::size_t nbytes = numel * t.element_size();
  if (bytes.size() != offset + nbytes) {
    throw DataError("MMBT: payload is " + std::to_string(bytes.size() - offset) +
                    " bytes, expected " + std::to_string(nbytes));
  }
  if (nbytes > 0) std::memcpy(t.data_ptr(), bytes.data() + offset, nbytes);
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

void write_mmbt(const std::filesystem::path& path, const torch::Tensor& t) {
  write_file(path, encode_mmbt(t));
}

torch::Tensor read_mmbt(const std::filesystem::path& path) {
  try {
    return decode_mmbt(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace mmbeam::io
