#include "tabprobe/actstore.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace tabprobe::actstore {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "activation store assumes a little-endian host");

std::string token_sel_name(TokenSel sel) {
  return sel == TokenSel::all ? "all" : "answer";
}

TokenSel token_sel_from_name(std::string_view name) {
  if (name == "all") return TokenSel::all;
  if (name == "answer") return TokenSel::answer_only;
  throw ConfigError("unknown token selection: " + std::string(name));
}

void ActivationRecord::validate() const {
  if (n < 0 || t < 0 || k < 0) throw BuildError("negative record dimension");
  if (values.size() != static_cast<std::size_t>(n) * t * k) {
    throw BuildError("record values length does not match shape");
  }
  if (token_roles.size() != static_cast<std::size_t>(t)) {
    throw BuildError("token_roles length does not match token count");
  }
  if (row_roles.size() != static_cast<std::size_t>(n)) {
    throw BuildError("row_roles length does not match row count");
  }
}

std::string record_key(std::uint64_t fit_digest, int layer, TokenSel sel) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "L%02d", layer);
  return hex64(fit_digest) + "/" + buf + "_" + token_sel_name(sel);
}

namespace {

json sidecar_json(const ActivationRecord& r, std::uint64_t checksum) {
  json j;
  j["run_id"] = r.run_id;
  j["fit_digest"] = hex64(r.fit_digest);
  j["layer"] = r.layer;
  j["token_sel"] = token_sel_name(r.token_sel);
  j["token_roles"] = r.token_roles;
  j["row_roles"] = r.row_roles;
  j["shape"] = {r.n, r.t, r.k};
  j["dtype"] = "float32_le";
  j["checksum_fnv1a64"] = hex64(checksum);
  return j;
}

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

RunWriter::RunWriter(std::filesystem::path root, std::string run_id,
                     std::string model_descriptor) {
  if (run_id.empty()) throw ConfigError("run_id must be non-empty");
  run_dir_ = root / run_id;
  std::filesystem::create_directories(run_dir_);
  lock_path_ = run_dir_ / ".writer.lock";
  // O_EXCL lock: a second concurrent writer on the same run directory fails.
  const int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw Error("run directory " + run_dir_.string() +
                " already has a writer (stale lock: " + lock_path_.string() + ")");
  }
  const std::string self = std::to_string(static_cast<long>(::getpid())) + "\n";
  (void)!::write(fd, self.data(), self.size());
  ::close(fd);
  manifest_.run_id = std::move(run_id);
  manifest_.model_descriptor = std::move(model_descriptor);
  manifest_.tool_version = tool_version();
  manifest_.created_at = now_iso8601();
  // Resuming an interrupted run: adopt records already on disk.
  RunReader reader(root, manifest_.run_id);
  manifest_.keys = reader.list();
  const std::filesystem::path mpath = run_dir_ / "manifest.json";
  if (std::filesystem::exists(mpath)) {
    const Manifest prev = reader.manifest();
    manifest_.fit_to_spec = prev.fit_to_spec;
  }
}

RunWriter::~RunWriter() {
  try {
    finalize();
  } catch (...) {
    // Destructor must not throw; an incomplete manifest is rebuilt on resume.
  }
  std::error_code ec;
  std::filesystem::remove(lock_path_, ec);
}

bool RunWriter::contains(const std::string& key) const {
  return std::filesystem::exists(run_dir_ / (key + ".f32")) &&
         std::filesystem::exists(run_dir_ / (key + ".json"));
}

std::string RunWriter::put(const ActivationRecord& record) {
  record.validate();
  if (record.run_id != manifest_.run_id) {
    throw BuildError("record run_id does not match the open run");
  }
  const std::string key = record_key(record.fit_digest, record.layer, record.token_sel);
  const std::size_t bytes = record.values.size() * sizeof(float);
  const std::uint64_t checksum = fnv1a64(record.values.data(), bytes);
  write_file_atomic(run_dir_ / (key + ".f32"), record.values.data(), bytes);
  write_file_atomic(run_dir_ / (key + ".json"),
                    sidecar_json(record, checksum).dump(2) + "\n");
  if (std::find(manifest_.keys.begin(), manifest_.keys.end(), key) ==
      manifest_.keys.end()) {
    manifest_.keys.push_back(key);
  }
  finalized_ = false;
  return key;
}

void RunWriter::record_dataset(std::uint64_t fit_digest, std::uint64_t spec_digest) {
  for (auto& [fit, spec] : manifest_.fit_to_spec) {
    if (fit == fit_digest) {
      if (spec != spec_digest) {
        throw BuildError("fit digest registered with a different task spec");
      }
      return;
    }
  }
  manifest_.fit_to_spec.emplace_back(fit_digest, spec_digest);
  finalized_ = false;
}

void RunWriter::finalize() {
  if (finalized_) return;
  std::sort(manifest_.keys.begin(), manifest_.keys.end());
  std::sort(manifest_.fit_to_spec.begin(), manifest_.fit_to_spec.end());
  json j;
  j["run_id"] = manifest_.run_id;
  j["model"] = json::parse(manifest_.model_descriptor, nullptr, false).is_discarded()
                   ? json(manifest_.model_descriptor)
                   : json::parse(manifest_.model_descriptor);
  j["datasets"] = json::array();
  for (const auto& [fit, spec] : manifest_.fit_to_spec) {
    j["datasets"].push_back({{"fit_digest", hex64(fit)}, {"spec_digest", hex64(spec)}});
  }
  j["keys"] = manifest_.keys;
  j["created_at"] = manifest_.created_at;
  j["tool_version"] = manifest_.tool_version;
  write_file_atomic(run_dir_ / "manifest.json", j.dump(2) + "\n");
  finalized_ = true;
}

RunReader::RunReader(std::filesystem::path root, const std::string& run_id)
    : run_dir_(root / run_id) {
  if (!std::filesystem::is_directory(run_dir_)) {
    throw NotFoundError("run directory not found: " + run_dir_.string());
  }
}

ActivationRecord RunReader::get(const std::string& key) const {
  const std::filesystem::path sidecar = run_dir_ / (key + ".json");
  const std::filesystem::path payload = run_dir_ / (key + ".f32");
  if (!std::filesystem::exists(sidecar) || !std::filesystem::exists(payload)) {
    throw NotFoundError("no record at key: " + key);
  }
  json j;
  try {
    j = json::parse(read_text_file(sidecar));
  } catch (const json::exception& e) {
    throw CorruptionError("unreadable sidecar for " + key + ": " + e.what());
  }
  ActivationRecord r;
  try {
    r.run_id = j.at("run_id").get<std::string>();
    r.fit_digest = parse_hex64(j.at("fit_digest").get<std::string>());
    r.layer = j.at("layer").get<int>();
    r.token_sel = token_sel_from_name(j.at("token_sel").get<std::string>());
    r.token_roles = j.at("token_roles").get<std::vector<std::string>>();
    r.row_roles = j.at("row_roles").get<std::vector<std::string>>();
    r.n = j.at("shape").at(0).get<int>();
    r.t = j.at("shape").at(1).get<int>();
    r.k = j.at("shape").at(2).get<int>();
  } catch (const json::exception& e) {
    throw CorruptionError("malformed sidecar for " + key + ": " + e.what());
  }
  const std::uint64_t expected = parse_hex64(j.at("checksum_fnv1a64").get<std::string>());
  const std::vector<std::uint8_t> bytes = read_binary_file(payload);
  const std::size_t want = static_cast<std::size_t>(r.n) * r.t * r.k * sizeof(float);
  if (bytes.size() != want) {
    throw CorruptionError("payload size mismatch for " + key);
  }
  if (fnv1a64(bytes.data(), bytes.size()) != expected) {
    throw CorruptionError("checksum mismatch for " + key);
  }
  r.values.resize(bytes.size() / sizeof(float));
  std::memcpy(r.values.data(), bytes.data(), bytes.size());
  r.validate();
  return r;
}

std::vector<std::string> RunReader::list(const std::string& prefix) const {
  std::vector<std::string> keys;
  const std::string suffix = ".f32";
  for (const auto& entry : std::filesystem::recursive_directory_iterator(run_dir_)) {
    if (!entry.is_regular_file()) continue;
    std::string rel = std::filesystem::relative(entry.path(), run_dir_).generic_string();
    if (rel.size() <= suffix.size() || rel.substr(rel.size() - suffix.size()) != suffix) {
      continue;
    }
    rel.resize(rel.size() - suffix.size());
    if (rel.compare(0, prefix.size(), prefix) == 0) keys.push_back(rel);
  }
  std::sort(keys.begin(), keys.end());
  return keys;
}

Manifest RunReader::manifest() const {
  const std::filesystem::path mpath = run_dir_ / "manifest.json";
  if (!std::filesystem::exists(mpath)) {
    throw NotFoundError("manifest.json not found in " + run_dir_.string());
  }
  json j;
  try {
    j = json::parse(read_text_file(mpath));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("unreadable manifest.json: ") + e.what());
  }
  Manifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.model_descriptor = j.at("model").dump();
  for (const json& e : j.at("datasets")) {
    m.fit_to_spec.emplace_back(parse_hex64(e.at("fit_digest").get<std::string>()),
                               parse_hex64(e.at("spec_digest").get<std::string>()));
  }
  m.keys = j.at("keys").get<std::vector<std::string>>();
  m.created_at = j.value("created_at", "");
  m.tool_version = j.value("tool_version", "");
  return m;
}

}  // namespace tabprobe::actstore
