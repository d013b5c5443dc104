#include "incseg/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "incseg/common.hpp"

static_assert(std::endian::native == std::endian::little, "raw grid files are little-endian");

namespace incseg {

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  if (ctx_ == nullptr || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::runtime, "sha256: digest init failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

Sha256& Sha256::update(const void* data, std::size_t bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, bytes);
  return *this;
}

std::string Sha256::hex_digest() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string sha256_hex(std::string_view bytes) { return Sha256().update(bytes).hex_digest(); }

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text_file(path)); }

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_artifact, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::runtime, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorKind::runtime, "write failed for " + path.string());
}

json read_json_file(const fs::path& path) {
  const auto text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::runtime, "malformed json in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

template <class T>
void write_raw(const fs::path& path, std::span<const T> values) {
  write_text_file(path, std::string_view(reinterpret_cast<const char*>(values.data()), values.size_bytes()));
}

template <class T>
std::vector<T> read_raw(const fs::path& path, std::size_t expected_count) {
  const auto bytes = read_text_file(path);
  if (bytes.size() != expected_count * sizeof(T)) {
    throw Error(ErrorKind::runtime, "raw file " + path.string() + " has " + std::to_string(bytes.size()) +
                                        " bytes, expected " + std::to_string(expected_count * sizeof(T)));
  }
  std::vector<T> out(expected_count);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

template void write_raw<float>(const fs::path&, std::span<const float>);
template void write_raw<double>(const fs::path&, std::span<const double>);
template void write_raw<std::uint8_t>(const fs::path&, std::span<const std::uint8_t>);
template std::vector<float> read_raw<float>(const fs::path&, std::size_t);
template std::vector<double> read_raw<double>(const fs::path&, std::size_t);
template std::vector<std::uint8_t> read_raw<std::uint8_t>(const fs::path&, std::size_t);

}  // namespace incseg
