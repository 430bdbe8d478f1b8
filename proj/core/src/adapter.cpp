#include "tabprobe/adapter.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <mutex>
#include <optional>

#include "json.hpp"

namespace tabprobe::adapter {

using nlohmann::json;
using synthgen::ColumnRole;
using synthgen::Split;
using synthgen::TabularDataset;

std::string backend_name(Backend b) {
  return b == Backend::toy ? "toy" : "tabpfn-v2";
}

namespace {

// ---------------------------------------------------------------------------
// base64 (payload transport for the out-of-process bridge)
// ---------------------------------------------------------------------------

constexpr char kB64Chars[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const void* data, std::size_t size) {
  const auto* in = static_cast<const unsigned char*>(data);
  std::string out;
  out.reserve((size + 2) / 3 * 4);
  for (std::size_t i = 0; i < size; i += 3) {
    std::uint32_t v = static_cast<std::uint32_t>(in[i]) << 16;
    if (i + 1 < size) v |= static_cast<std::uint32_t>(in[i + 1]) << 8;
    if (i + 2 < size) v |= in[i + 2];
    out.push_back(kB64Chars[(v >> 18) & 63]);
    out.push_back(kB64Chars[(v >> 12) & 63]);
    out.push_back(i + 1 < size ? kB64Chars[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < size ? kB64Chars[v & 63] : '=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  std::uint32_t buf = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    const int v = val(c);
    if (v < 0) throw Error("invalid base64 payload from bridge");
    buf = (buf << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((buf >> bits) & 0xff));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bridge subprocess: line-delimited JSON over stdin/stdout. One session; its
// calls are serialized by a mutex.
// ---------------------------------------------------------------------------

class BridgeProcess {
 public:
  BridgeProcess(const std::string& script, const std::string& device) {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) {
      throw BackendUnavailableError("tabpfn-v2 backend unavailable: pipe() failed");
    }
    pid_ = fork();
    if (pid_ < 0) {
      throw BackendUnavailableError("tabpfn-v2 backend unavailable: fork() failed");
    }
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execlp("python3", "python3", script.c_str(), "--device", device.c_str(),
             static_cast<char*>(nullptr));
      std::perror("execlp python3");
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_ = fdopen(from_child[0], "r");
    out_ = fdopen(to_child[1], "w");
    if (!in_ || !out_) {
      throw BackendUnavailableError("tabpfn-v2 backend unavailable: fdopen() failed");
    }
  }

  ~BridgeProcess() {
    if (out_) fclose(out_);
    if (in_) fclose(in_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  json request(const json& msg) {
    std::lock_guard<std::mutex> lock(mu_);
    const std::string line = msg.dump();
    if (std::fputs(line.c_str(), out_) == EOF || std::fputc('\n', out_) == EOF ||
        std::fflush(out_) != 0) {
      throw BackendUnavailableError("tabpfn-v2 bridge: write failed (bridge exited?)");
    }
    std::string response;
    char buf[1 << 16];
    for (;;) {
      if (!std::fgets(buf, sizeof buf, in_)) {
        throw BackendUnavailableError("tabpfn-v2 bridge: connection closed");
      }
      response += buf;
      if (!response.empty() && response.back() == '\n') break;
    }
    json j;
    try {
      j = json::parse(response);
    } catch (const json::exception& e) {
      throw BackendUnavailableError(std::string("tabpfn-v2 bridge: bad response: ") +
                                    e.what());
    }
    if (!j.value("ok", false)) {
      throw BackendUnavailableError(
          "tabpfn-v2 backend unavailable: " +
          j.value("error", std::string("unknown bridge error")));
    }
    return j;
  }

 private:
  pid_t pid_ = -1;
  FILE* in_ = nullptr;
  FILE* out_ = nullptr;
  std::mutex mu_;
};

std::uint64_t compute_fit_digest(std::uint64_t model_digest, const TabularDataset& d) {
  Fnv1a h;
  h.update_str("fitcontext.v1");
  h.update_u64(model_digest);
  h.update_i64(d.n_features);
  for (const std::string& name : d.feature_names) h.update_str(name);
  for (ColumnRole role : d.column_roles) h.update_i64(static_cast<int>(role));
  for (int r = 0; r < d.n_rows; ++r) {
    if (d.split[static_cast<std::size_t>(r)] != Split::train) continue;
    for (int c = 0; c < d.n_features; ++c) h.update_f64(d.at(r, c));
    h.update_f64(d.z[static_cast<std::size_t>(r)]);
  }
  return h.digest();
}

std::vector<std::string> token_roles_for(const TabularDataset& d) {
  std::vector<std::string> roles;
  roles.reserve(static_cast<std::size_t>(d.n_features) + 1);
  for (int c = 0; c < d.n_features; ++c) {
    roles.push_back("feature:" + d.feature_names[static_cast<std::size_t>(c)]);
  }
  roles.push_back("label");
  return roles;
}

}  // namespace

// ---------------------------------------------------------------------------
// FitHandle
// ---------------------------------------------------------------------------

struct FitHandle::State {
  Backend backend = Backend::toy;
  std::shared_ptr<const TabularDataset> data;
  std::uint64_t digest = 0;
  toymodel::FitStats stats;    // toy backend
  std::vector<int> test_rows;  // dataset row indices, dataset order
  int t_tokens = 0;
  std::vector<std::string> token_roles;
  std::string bridge_ctx;  // tabpfn-v2 backend
};

std::uint64_t FitHandle::context_digest() const { return state_->digest; }
int FitHandle::n_test() const { return static_cast<int>(state_->test_rows.size()); }
int FitHandle::token_count() const { return state_->t_tokens; }
const std::vector<std::string>& FitHandle::token_roles() const {
  return state_->token_roles;
}
const TabularDataset& FitHandle::dataset() const { return *state_->data; }

// ---------------------------------------------------------------------------
// ProbeableModel
// ---------------------------------------------------------------------------

struct ProbeableModel::Impl {
  Backend backend = Backend::toy;
  std::string ref;
  std::optional<toymodel::Model> toy;
  std::unique_ptr<BridgeProcess> bridge;
  int layer_count = 0;
  int embed_dim = 0;
  Capabilities caps;
  std::uint64_t digest = 0;
};

ProbeableModel::ProbeableModel() : impl_(std::make_unique<Impl>()) {}
ProbeableModel::~ProbeableModel() = default;
ProbeableModel::ProbeableModel(ProbeableModel&&) noexcept = default;
ProbeableModel& ProbeableModel::operator=(ProbeableModel&&) noexcept = default;

ProbeableModel ProbeableModel::from_toy(toymodel::Model model, std::string ref) {
  ProbeableModel pm;
  pm.impl_->backend = Backend::toy;
  pm.impl_->ref = std::move(ref);
  pm.impl_->layer_count = model.config().n_layers;
  pm.impl_->embed_dim = model.config().embed_dim;
  pm.impl_->caps = {true, true};
  pm.impl_->digest = model.param_digest();
  pm.impl_->toy.emplace(std::move(model));
  return pm;
}

ProbeableModel ProbeableModel::open(const std::string& selector) {
  return open(selector, "");
}

ProbeableModel ProbeableModel::open(const std::string& selector,
                                    const std::string& bridge_script) {
  if (selector.rfind("toy:", 0) == 0) {
    const std::string path = selector.substr(4);
    if (path.empty()) {
      throw ConfigError("toy selector needs a checkpoint path: toy:<path>");
    }
    return from_toy(toymodel::Model::load(path), path);
  }
  if (selector == "tabpfn-v2" || selector.rfind("tabpfn-v2:", 0) == 0) {
    std::string device = "cpu";
    if (selector.size() > 10 && selector[9] == ':') device = selector.substr(10);
    std::string script = bridge_script;
    if (script.empty()) {
      const char* env = std::getenv("TABPROBE_TABPFN_BRIDGE");
      if (!env || !*env) {
        throw BackendUnavailableError(
            "tabpfn-v2 backend unavailable: TABPROBE_TABPFN_BRIDGE is not set "
            "(point it at tools/tabpfn_bridge.py and install the `tabpfn` package)");
      }
      script = env;
    }
    if (!std::filesystem::exists(script)) {
      throw BackendUnavailableError(
          "tabpfn-v2 backend unavailable: bridge script not found: " + script);
    }
    ProbeableModel pm;
    pm.impl_->backend = Backend::tabpfn_v2;
    pm.impl_->ref = selector;
    pm.impl_->bridge = std::make_unique<BridgeProcess>(script, device);
    const json hello = pm.impl_->bridge->request({{"op", "hello"}});
    pm.impl_->layer_count = hello.at("layer_count").get<int>();
    pm.impl_->embed_dim = hello.at("embed_dim").get<int>();
    pm.impl_->caps.has_unembedding_head = hello.value("has_unembedding_head", false);
    pm.impl_->caps.supports_regression = hello.value("supports_regression", false);
    pm.impl_->digest = Rng::derive(fnv1a64(selector.data(), selector.size()),
                                   hello.value("version", std::string("unknown")));
    if (!pm.impl_->caps.supports_regression) {
      throw BackendUnavailableError(
          "tabpfn-v2 backend unavailable: bridge reports no regression support");
    }
    return pm;
  }
  throw ConfigError("unknown backend selector: " + selector +
                    " (expected toy:<checkpoint> or tabpfn-v2[:<device>])");
}

Backend ProbeableModel::backend() const { return impl_->backend; }
const std::string& ProbeableModel::checkpoint_ref() const { return impl_->ref; }
int ProbeableModel::layer_count() const { return impl_->layer_count; }
int ProbeableModel::embed_dim() const { return impl_->embed_dim; }
Capabilities ProbeableModel::capabilities() const { return impl_->caps; }
std::uint64_t ProbeableModel::model_digest() const { return impl_->digest; }

std::string ProbeableModel::descriptor_json() const {
  json j;
  j["backend"] = backend_name(impl_->backend);
  j["checkpoint_ref"] = impl_->ref;
  j["layer_count"] = impl_->layer_count;
  j["embed_dim"] = impl_->embed_dim;
  j["model_digest"] = hex64(impl_->digest);
  j["capabilities"] = {{"has_unembedding_head", impl_->caps.has_unembedding_head},
                       {"supports_regression", impl_->caps.supports_regression}};
  return j.dump();
}

const toymodel::Model* ProbeableModel::toy_model() const {
  return impl_->toy ? &*impl_->toy : nullptr;
}

FitHandle ProbeableModel::fit_context(const TabularDataset& data) const {
  if (data.n_train() == 0) throw ConfigError("fit_context requires train rows");
  if (data.n_test() == 0) throw ConfigError("fit_context requires test rows");
  auto state = std::make_shared<FitHandle::State>();
  state->backend = impl_->backend;
  state->data = std::make_shared<const TabularDataset>(data);
  state->digest = compute_fit_digest(impl_->digest, data);
  for (int r = 0; r < data.n_rows; ++r) {
    if (data.split[static_cast<std::size_t>(r)] == Split::test) {
      state->test_rows.push_back(r);
    }
  }
  if (impl_->backend == Backend::toy) {
    state->stats = impl_->toy->fit_stats(data);
    state->t_tokens = data.n_features + 1;
    state->token_roles = token_roles_for(data);
  } else {
    json req;
    req["op"] = "fit";
    req["ctx"] = hex64(state->digest);
    json x = json::array();
    for (int r = 0; r < data.n_rows; ++r) {
      json row = json::array();
      for (int c = 0; c < data.n_features; ++c) row.push_back(data.at(r, c));
      x.push_back(std::move(row));
    }
    req["x"] = std::move(x);
    req["z"] = data.z;
    json split = json::array();
    for (Split s : data.split) split.push_back(s == Split::train ? "train" : "test");
    req["split"] = std::move(split);
    const json resp = impl_->bridge->request(req);
    state->bridge_ctx = resp.at("ctx").get<std::string>();
    state->t_tokens = resp.at("token_count").get<int>();
    if (resp.contains("token_roles")) {
      state->token_roles = resp.at("token_roles").get<std::vector<std::string>>();
    } else {
      state->token_roles = token_roles_for(data);
    }
  }
  FitHandle handle;
  handle.state_ = std::move(state);
  return handle;
}

std::vector<double> ProbeableModel::predict(const FitHandle& handle) const {
  if (impl_->backend == Backend::toy) {
    return impl_->toy->predict(*handle.state_->data);
  }
  const json resp =
      impl_->bridge->request({{"op", "predict"}, {"ctx", handle.state_->bridge_ctx}});
  return resp.at("y").get<std::vector<double>>();
}

std::vector<actstore::ActivationRecord> ProbeableModel::capture(
    const FitHandle& handle, const LayerSelection& layers, actstore::TokenSel tokens,
    const std::vector<int>& test_rows) const {
  std::vector<int> wanted = layers.layers;
  if (wanted.empty()) {
    for (int l = 0; l <= impl_->layer_count; ++l) wanted.push_back(l);
  }
  for (int l : wanted) {
    if (l < 0 || l > impl_->layer_count) {
      throw SelectionError("layer " + std::to_string(l) + " outside [0, " +
                           std::to_string(impl_->layer_count) + "]");
    }
  }
  const int n_test_all = handle.n_test();
  std::vector<int> rows = test_rows;
  if (rows.empty()) {
    for (int i = 0; i < n_test_all; ++i) rows.push_back(i);
  }
  for (int i : rows) {
    if (i < 0 || i >= n_test_all) throw SelectionError("test row index out of range");
  }

  const int t_all = handle.token_count();
  const int k = impl_->embed_dim;
  const bool answer_only = tokens == actstore::TokenSel::answer_only;

  const auto make_record = [&](int layer) {
    actstore::ActivationRecord rec;
    rec.fit_digest = handle.context_digest();
    rec.layer = layer;
    rec.token_sel = tokens;
    rec.n = static_cast<int>(rows.size());
    rec.t = answer_only ? 1 : t_all;
    rec.k = k;
    rec.row_roles.assign(static_cast<std::size_t>(rec.n), "test");
    if (answer_only) {
      rec.token_roles = {"label"};
    } else {
      rec.token_roles = handle.token_roles();
    }
    rec.values.resize(static_cast<std::size_t>(rec.n) * rec.t * rec.k);
    return rec;
  };

  std::vector<actstore::ActivationRecord> records;
  records.reserve(wanted.size());

  if (impl_->backend == Backend::toy) {
    const toymodel::ForwardResult fr = impl_->toy->forward_capture(*handle.state_->data);
    for (int layer : wanted) {
      actstore::ActivationRecord rec = make_record(layer);
      const toymodel::TokenGrid& grid = fr.layers[static_cast<std::size_t>(layer)];
      float* dst = rec.values.data();
      for (int i : rows) {
        const int dataset_row = handle.state_->test_rows[static_cast<std::size_t>(i)];
        if (answer_only) {
          std::memcpy(dst, grid.row_token(dataset_row, t_all - 1),
                      static_cast<std::size_t>(k) * sizeof(float));
          dst += k;
        } else {
          std::memcpy(dst, grid.row_token(dataset_row, 0),
                      static_cast<std::size_t>(t_all) * k * sizeof(float));
          dst += static_cast<std::size_t>(t_all) * k;
        }
      }
      records.push_back(std::move(rec));
    }
    return records;
  }

  json req;
  req["op"] = "capture";
  req["ctx"] = handle.state_->bridge_ctx;
  req["layers"] = wanted;
  req["tokens"] = answer_only ? "answer" : "all";
  req["test_rows"] = rows;
  const json resp = impl_->bridge->request(req);
  for (const json& jr : resp.at("records")) {
    const int layer = jr.at("layer").get<int>();
    actstore::ActivationRecord rec = make_record(layer);
    const std::vector<std::uint8_t> bytes =
        base64_decode(jr.at("data_b64").get<std::string>());
    if (bytes.size() != rec.values.size() * sizeof(float)) {
      throw Error("bridge capture payload size mismatch at layer " +
                  std::to_string(layer));
    }
    std::memcpy(rec.values.data(), bytes.data(), bytes.size());
    records.push_back(std::move(rec));
  }
  return records;
}

OutputHead ProbeableModel::output_head() const {
  if (!impl_->caps.has_unembedding_head) {
    throw CapabilityError(backend_name(impl_->backend) +
                          " backend exposes no unembedding head");
  }
  OutputHead head;
  if (impl_->backend == Backend::toy) {
    head.kind = OutputHead::Kind::linear_after_norm;
    head.linear = impl_->toy->output_head();
    head.description = "linear head applied after the final layer norm";
  } else {
    head.kind = OutputHead::Kind::external_expectation;
    head.description =
        "bar-distribution head reduced to its scalar expectation (bridge decode op)";
  }
  return head;
}

std::vector<double> ProbeableModel::decode_states(const FitHandle& handle,
                                                  const float* states, int n, int k,
                                                  bool with_final_norm) const {
  if (!impl_->caps.has_unembedding_head) {
    throw CapabilityError(backend_name(impl_->backend) +
                          " backend exposes no unembedding head");
  }
  if (k != impl_->embed_dim) {
    throw SelectionError("state width does not match embed_dim");
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  if (impl_->backend == Backend::toy) {
    const toymodel::HeadDescriptor head = impl_->toy->output_head();
    const toymodel::FitStats& stats = handle.state_->stats;
    for (int i = 0; i < n; ++i) {
      const float* s = states + static_cast<std::size_t>(i) * k;
      float y;
      if (with_final_norm) {
        y = toymodel::Model::apply_head(head, s, k);
      } else {
        double acc = head.b;
        for (int c = 0; c < k; ++c) {
          acc += static_cast<double>(head.w[static_cast<std::size_t>(c)]) * s[c];
        }
        y = static_cast<float>(acc);
      }
      out[static_cast<std::size_t>(i)] = toymodel::Model::denormalize(stats, y);
    }
    return out;
  }
  json req;
  req["op"] = "decode";
  req["ctx"] = handle.state_->bridge_ctx;
  req["shape"] = {n, k};
  req["with_final_norm"] = with_final_norm;
  req["states_b64"] =
      base64_encode(states, static_cast<std::size_t>(n) * k * sizeof(float));
  const json resp = impl_->bridge->request(req);
  return resp.at("y").get<std::vector<double>>();
}

toymodel::FitStats ProbeableModel::fit_stats(const FitHandle& handle) const {
  return handle.state_->stats;
}

}  // namespace tabprobe::adapter
