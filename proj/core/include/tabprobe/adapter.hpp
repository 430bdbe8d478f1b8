#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tabprobe/actstore.hpp"
#include "tabprobe/common.hpp"
#include "tabprobe/synthgen.hpp"
#include "tabprobe/toymodel.hpp"

namespace tabprobe::adapter {

enum class Backend { toy, tabpfn_v2 };

std::string backend_name(Backend b);

struct Capabilities {
  bool has_unembedding_head = false;
  bool supports_regression = false;
};

struct LayerSelection {
  std::vector<int> layers;  // empty means all (0..layer_count)

  static LayerSelection all() { return {}; }
  static LayerSelection single(int layer) { return {{layer}}; }
  static LayerSelection list(std::vector<int> layers) { return {std::move(layers)}; }
};

struct OutputHead {
  enum class Kind { linear_after_norm, external_expectation };
  Kind kind = Kind::linear_after_norm;
  toymodel::HeadDescriptor linear;  // valid for linear_after_norm
  std::string description;
};

/// Immutable handle to one (model, dataset-train-split) fit. Shareable across
/// threads; captures never mutate it.
class FitHandle {
 public:
  std::uint64_t context_digest() const;
  int n_test() const;
  int token_count() const;  // d + 1 in the backend's token schema
  const std::vector<std::string>& token_roles() const;
  const synthgen::TabularDataset& dataset() const;

  struct State;

 private:
  friend class ProbeableModel;
  std::shared_ptr<const State> state_;
};

/// Uniform interface over probeable models: the in-process toy transformer
/// and the out-of-process TabPFN v2 bridge.
class ProbeableModel {
 public:
  /// Selector grammar: "toy:<checkpoint-path>" or "tabpfn-v2[:<device>]".
  /// The tabpfn-v2 backend resolves its bridge script from
  /// TABPROBE_TABPFN_BRIDGE unless an explicit path is supplied.
  static ProbeableModel open(const std::string& selector);
  static ProbeableModel open(const std::string& selector,
                             const std::string& bridge_script);
  static ProbeableModel from_toy(toymodel::Model model, std::string ref = "<memory>");

  ~ProbeableModel();
  ProbeableModel(ProbeableModel&&) noexcept;
  ProbeableModel& operator=(ProbeableModel&&) noexcept;

  Backend backend() const;
  const std::string& checkpoint_ref() const;
  int layer_count() const;  // transformer blocks; captures span 0..layer_count
  int embed_dim() const;
  Capabilities capabilities() const;
  std::uint64_t model_digest() const;
  std::string descriptor_json() const;

  /// Holds the train context; no parameters change. Equal inputs yield equal
  /// context digests across processes.
  FitHandle fit_context(const synthgen::TabularDataset& data) const;

  std::vector<double> predict(const FitHandle& handle) const;

  /// One record per requested layer over the handle's test rows (dataset
  /// order). `test_rows` optionally restricts to a subset of test-row
  /// indices (in test order). Records carry an empty run_id; the store
  /// writer's caller assigns it.
  std::vector<actstore::ActivationRecord> capture(
      const FitHandle& handle, const LayerSelection& layers,
      actstore::TokenSel tokens, const std::vector<int>& test_rows = {}) const;

  /// Throws CapabilityError when the backend exposes no usable head.
  OutputHead output_head() const;

  /// Applies the model's output pipeline to raw answer-token states and
  /// returns raw-unit predictions. `with_final_norm` selects the standard
  /// logit-lens convention (head after the model's pre-head normalization);
  /// false applies the bare linear map.
  std::vector<double> decode_states(const FitHandle& handle, const float* states,
                                    int n, int k, bool with_final_norm) const;

  /// Non-null for the toy backend.
  const toymodel::Model* toy_model() const;
  toymodel::FitStats fit_stats(const FitHandle& handle) const;

 private:
  ProbeableModel();
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace tabprobe::adapter
