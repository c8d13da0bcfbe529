#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ltxb/tensor.hpp"

namespace ltxb {

// Single-file tensor container. Layout, all little-endian:
//   "LTXB"  u32 version  u64 metadata_len  metadata (UTF-8 JSON)
//   u32 tensor_count
//   per tensor: u32 name_len, name, u32 ndim, i64 dims[ndim], f32 data[...]
//   u64 fnv1a-64 hash of every preceding byte
// Readers verify magic, version, and the trailing hash before trusting
// anything else in the file.

inline constexpr uint32_t kContainerVersion = 1;

struct TensorFile {
  uint32_t version = kContainerVersion;
  std::string metadata_json;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
  Tensor get(const std::string& name) const;  // not_found when absent
};

// Serializes to bytes / parses from bytes. parse raises corruption errors
// with the byte offset where the problem was found.
std::vector<char> serialize_tensor_file(const TensorFile& tf);
TensorFile parse_tensor_file(const std::vector<char>& bytes);

// File variants. write returns the container hash (the trailing digest);
// read verifies it. read_tensor_file_hash returns the verified hash of an
// existing file without keeping the contents.
uint64_t write_tensor_file(const std::string& path, const TensorFile& tf);
TensorFile read_tensor_file(const std::string& path, uint64_t* hash_out = nullptr);
uint64_t read_tensor_file_hash(const std::string& path);

std::vector<char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<char>& bytes);

}  // namespace ltxb
