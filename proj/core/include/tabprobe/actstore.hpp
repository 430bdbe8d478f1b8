#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tabprobe/common.hpp"

namespace tabprobe::actstore {

enum class TokenSel { all, answer_only };

std::string token_sel_name(TokenSel sel);
TokenSel token_sel_from_name(std::string_view name);

struct ActivationRecord {
  std::string run_id;
  std::uint64_t fit_digest = 0;
  int layer = 0;
  TokenSel token_sel = TokenSel::all;
  std::vector<std::string> token_roles;  // size t
  std::vector<std::string> row_roles;    // size n ("train"/"test")
  int n = 0, t = 0, k = 0;
  std::vector<float> values;  // row-major n*t*k, little-endian float32 on disk

  float at(int row, int token, int channel) const {
    return values[(static_cast<std::size_t>(row) * t + token) * k + channel];
  }
  void validate() const;  // shape/lengths consistency
};

/// Key layout: {fit_digest}/L{layer:02d}_{tokensel}, resolved under the run
/// directory {root}/{run_id}; filterable by path prefix.
std::string record_key(std::uint64_t fit_digest, int layer, TokenSel sel);

struct Manifest {
  std::string run_id;
  std::string model_descriptor;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> fit_to_spec;  // fit digest -> task spec digest
  std::vector<std::string> keys;  // lexicographic
  std::string created_at;
  std::string tool_version;
};

/// Single writer per run directory (lock file enforced); writes are atomic.
class RunWriter {
 public:
  RunWriter(std::filesystem::path root, std::string run_id,
            std::string model_descriptor);
  ~RunWriter();

  RunWriter(const RunWriter&) = delete;
  RunWriter& operator=(const RunWriter&) = delete;

  std::string put(const ActivationRecord& record);
  bool contains(const std::string& key) const;
  void record_dataset(std::uint64_t fit_digest, std::uint64_t spec_digest);

  /// Writes manifest.json (idempotent; also called from the destructor).
  void finalize();

  const std::filesystem::path& run_dir() const { return run_dir_; }

 private:
  std::filesystem::path run_dir_;
  std::filesystem::path lock_path_;
  Manifest manifest_;
  bool finalized_ = false;
};

class RunReader {
 public:
  RunReader(std::filesystem::path root, const std::string& run_id);

  /// Throws NotFoundError for unknown keys, CorruptionError on checksum
  /// mismatch; corrupted payloads are never repaired.
  ActivationRecord get(const std::string& key) const;

  /// Lexicographically sorted keys, optionally restricted to a path prefix.
  std::vector<std::string> list(const std::string& prefix = "") const;

  Manifest manifest() const;
  const std::filesystem::path& run_dir() const { return run_dir_; }

 private:
  std::filesystem::path run_dir_;
};

}  // namespace tabprobe::actstore
