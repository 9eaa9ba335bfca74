#include "histonet/serial.hpp"

#include <bit>
#include <cstdio>
#include <cstring>

#include <json.hpp>

#include "histonet/errors.hpp"
#include "histonet/image.hpp"

namespace histonet::serial {

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* bytes = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string config_hash_hex(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config hash input is not valid JSON: ") + e.what());
  }
  // nlohmann::json stores objects sorted by key, so dump() is canonical.
  const std::uint64_t h = fnv1a64(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

void append_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_u64le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_f64le(std::vector<std::uint8_t>& out, double v) {
  append_u64le(out, std::bit_cast<std::uint64_t>(v));
}

std::uint32_t read_u32le(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t read_u64le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

double read_f64le(const std::uint8_t* p) { return std::bit_cast<double>(read_u64le(p)); }

void save_tensor_raw(const std::string& data_path, const Tensor& t,
                     const std::string& config_hash) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(t.numel()) * 8);
  for (double v : t.values()) append_f64le(bytes, v);
  write_file_bytes(data_path, bytes);

  nlohmann::json sidecar;
  sidecar["shape"] = t.shape();
  sidecar["dtype"] = "f64";
  sidecar["config_hash"] = config_hash;
  const std::string text = sidecar.dump();
  write_file_bytes(data_path + ".json", {text.begin(), text.end()});
}

namespace {

nlohmann::json load_sidecar(const std::string& data_path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(data_path + ".json");
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed tensor sidecar for " + data_path + ": " + e.what());
  }
}

}  // namespace

Tensor load_tensor_raw(const std::string& data_path) {
  const nlohmann::json sidecar = load_sidecar(data_path);
  if (sidecar.value("dtype", "") != "f64") {
    throw DataError("tensor dump dtype must be f64: " + data_path);
  }
  const Shape shape = sidecar.at("shape").get<Shape>();
  const std::vector<std::uint8_t> bytes = read_file_bytes(data_path);
  const std::int64_t n = shape_numel(shape);
  if (bytes.size() != static_cast<std::size_t>(n) * 8) {
    throw DataError("tensor dump size does not match sidecar shape: " + data_path);
  }
  std::vector<double> values(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    values[static_cast<std::size_t>(i)] = read_f64le(bytes.data() + i * 8);
  }
  return Tensor::from_values(shape, std::move(values));
}

std::string load_tensor_config_hash(const std::string& data_path) {
  return load_sidecar(data_path).value("config_hash", "");
}

}  // namespace histonet::serial
