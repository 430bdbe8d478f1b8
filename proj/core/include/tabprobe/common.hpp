#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tabprobe {

// ---------------------------------------------------------------------------
// Error taxonomy. Every failure the library reports maps onto one of these;
// the CLI translates any tabprobe::Error into exit code 1.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration (counts, ranges, duplicate pairs, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input exceeds a structural capacity of the model (feature cap, context cap).
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// A layer/token selection outside the valid range.
class SelectionError : public Error {
 public:
  using Error::Error;
};

/// Dataset schema does not match what an operation requires.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Probing-dataset construction failed (shape mismatch, wrong rows, ...).
class BuildError : public Error {
 public:
  using Error::Error;
};

/// Too few rows to fit a probe.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// Optimization produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Requested store key does not exist.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Stored payload failed its checksum; never silently repaired.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// A model backend (package, weights, bridge) is not available.
class BackendUnavailableError : public Error {
 public:
  using Error::Error;
};

/// Backend lacks a capability required by the operation.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

/// Inputs of a comparison do not belong together (fit-digest mismatch).
class ComparisonError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit. Used for every content digest in the toolkit: task specs,
// fit contexts, parameter snapshots, store checksums.
// ---------------------------------------------------------------------------

class Fnv1a {
 public:
  void update(const void* data, std::size_t size) noexcept;
  void update_u64(std::uint64_t v) noexcept;
  void update_i64(std::int64_t v) noexcept;
  void update_f64(double v) noexcept;
  void update_str(std::string_view s) noexcept;
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a64(const void* data, std::size_t size) noexcept;

std::string hex64(std::uint64_t v);
std::uint64_t parse_hex64(std::string_view s);

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// uniform/normal transforms below are written out explicitly so streams are
// bit-identical across compilers (std::uniform_real_distribution is not).
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller with a cached spare.
  double normal();
  double normal(double mu, double sigma);

  /// Uniform integer on [0, n) by rejection; n must be > 0.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  /// Mixes a base seed with stream identifiers, so independent substreams
  /// can be derived statelessly: derive(seed, {step, task_index}).
  static std::uint64_t derive(std::uint64_t seed,
                              std::initializer_list<std::uint64_t> streams);
  static std::uint64_t derive(std::uint64_t seed, std::string_view stream);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Number formatting: shortest round-trip decimal (std::to_chars).
// ---------------------------------------------------------------------------

std::string format_double(double v);
std::string format_float(float v);

// ---------------------------------------------------------------------------
// Filesystem helpers.
// ---------------------------------------------------------------------------

std::string read_text_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);

/// Writes to `<path>.tmp.<pid>` then renames; readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, const void* data,
                       std::size_t size);
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& text);

std::string tool_version();

}  // namespace tabprobe
