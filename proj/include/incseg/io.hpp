#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace incseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Incremental SHA-256 (OpenSSL EVP) producing a lowercase hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t bytes);
  Sha256& update(std::string_view s) { return update(s.data(), s.size()); }
  template <class T>
  Sha256& update_span(std::span<const T> v) {
    return update(v.data(), v.size_bytes());
  }
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, std::string_view text);

json read_json_file(const fs::path& path);
void write_json_file(const fs::path& path, const json& j);

/// Raw little-endian arrays. The host is assumed little-endian (checked at compile time).
template <class T>
void write_raw(const fs::path& path, std::span<const T> values);
template <class T>
std::vector<T> read_raw(const fs::path& path, std::size_t expected_count);

extern template void write_raw<float>(const fs::path&, std::span<const float>);
extern template void write_raw<double>(const fs::path&, std::span<const double>);
extern template void write_raw<std::uint8_t>(const fs::path&, std::span<const std::uint8_t>);
extern template std::vector<float> read_raw<float>(const fs::path&, std::size_t);
extern template std::vector<double> read_raw<double>(const fs::path&, std::size_t);
extern template std::vector<std::uint8_t> read_raw<std::uint8_t>(const fs::path&, std::size_t);

}  // namespace incseg
