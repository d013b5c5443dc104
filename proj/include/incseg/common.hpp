#pragma once

#include <compare>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>

namespace incseg {

/// Scalar type for all network arithmetic. Image data on disk stays float32.
using Real = double;

/// Failure categories; the CLI maps these onto process exit codes.
enum class ErrorKind {
  invalid_argument,
  config,
  missing_artifact,
  runtime,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  explicit Error(const std::string& what) : Error(ErrorKind::invalid_argument, what) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ClassId {
  int value = 0;
  auto operator<=>(const ClassId&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, ClassId id) { return os << id.value; }
inline std::string to_string(ClassId id) { return std::to_string(id.value); }

/// Identifies an image sample: the volume it came from and the slice index.
struct Provenance {
  std::string volume_id;
  int slice_index = 0;
  auto operator<=>(const Provenance&) const = default;
};

inline std::string to_string(const Provenance& p) {
  return p.volume_id + "#" + std::to_string(p.slice_index);
}

}  // namespace incseg
