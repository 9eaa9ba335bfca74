#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histonet/tensor.hpp"

namespace histonet::serial {

// FNV-1a over raw bytes; the project's fingerprint primitive.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64(const std::string& s);

// Hash of a JSON document in canonical form (sorted keys, minimal
// separators), hex-encoded. Identical configs hash identically regardless of
// field order at the call site.
std::string config_hash_hex(const std::string& json_text);

// Little-endian scalar encoding, independent of host byte order.
void append_u32le(std::vector<std::uint8_t>& out, std::uint32_t v);
void append_u64le(std::vector<std::uint8_t>& out, std::uint64_t v);
void append_f64le(std::vector<std::uint8_t>& out, double v);
std::uint32_t read_u32le(const std::uint8_t* p);
std::uint64_t read_u64le(const std::uint8_t* p);
double read_f64le(const std::uint8_t* p);

// Raw tensor dump: `data_path` holds little-endian f64 values in row-major
// order; `data_path + ".json"` holds {"shape", "dtype": "f64",
// "config_hash"}.
void save_tensor_raw(const std::string& data_path, const Tensor& t,
                     const std::string& config_hash);
Tensor load_tensor_raw(const std::string& data_path);
std::string load_tensor_config_hash(const std::string& data_path);

}  // namespace histonet::serial
