#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "difflab/tensor.hpp"

namespace difflab {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Flat binary parameter container:
//   magic "DLABPARM", u32 version, u64 parameter count, then per parameter:
//   u32 name length, name bytes, u32 rank, u64 dims[rank], float64 payload.
// All integers and floats little-endian.
void save_params(const std::string& path, const NamedParams& params);
NamedParams load_params(const std::string& path);

// FNV-1a 64-bit
uint64_t fingerprint_bytes(const void* data, size_t len);
uint64_t fingerprint_file(const std::string& path);
std::string fingerprint_hex(uint64_t fp);

}  // namespace difflab
