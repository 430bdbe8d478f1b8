#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tabprobe/actstore.hpp"
#include "tabprobe/common.hpp"
#include "tabprobe/synthgen.hpp"

namespace tabprobe::probekit {

enum class TargetName {
  alpha,
  beta,
  answer,
  intermediary,
  input_a,
  input_b,
  input_c,
  input_ab,
};

std::string target_name_str(TargetName t);
TargetName target_from_str(std::string_view s);

struct Provenance {
  int layer = 0;
  std::string token_sel;
  std::string flatten_order;
  std::vector<std::uint64_t> fit_digests;
};

struct ProbingDataset {
  int m = 0, p = 0;
  std::vector<double> rows;     // row-major m x p
  std::vector<double> targets;  // m
  TargetName target = TargetName::alpha;
  Provenance prov;

  double at(int r, int c) const { return rows[static_cast<std::size_t>(r) * p + c]; }
};

struct ProbeSpec {
  int depth = 0;  // hidden layers; 0 = closed-form ridge
  int width = 256;
  double ridge_lambda = 1e-3;
  int epochs = 200;
  int patience = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

std::uint64_t spec_digest(const ProbeSpec& spec);

struct ProbeResult {
  std::uint64_t spec_digest = 0;
  TargetName target = TargetName::alpha;
  int depth = 0;
  std::uint64_t split_seed = 0;
  double r2_train = 0.0, r2_test = 0.0;
  double mse_train = 0.0, mse_test = 0.0;
  Provenance prov;
};

/// Exposed internals of a depth-0 fit, for oracle comparisons.
struct LinearProbeDetails {
  std::vector<double> coef;  // p, in standardized feature space
  double intercept = 0.0;    // mean of train-split targets
  std::vector<double> feat_mean, feat_std;
  std::vector<int> train_idx, test_idx;
};

/// Cross-fit configuration: one probe row per fitted dataset, the whole
/// (sample, token, channel) activation block flattened; the probe split runs
/// across fits. All records must share one layer and one shape.
ProbingDataset build_crossfit(const std::vector<actstore::ActivationRecord>& records,
                              const std::vector<synthgen::TaskSpec>& specs,
                              TargetName target);

/// Within-fit configuration: one row per held-out test sample, all tokens but
/// the switch token flattened in (token, channel) order; targets follow each
/// row's switch value through the coefficient table.
ProbingDataset build_withinfit(const actstore::ActivationRecord& record,
                               const synthgen::TabularDataset& data,
                               const synthgen::TaskSpec& spec, TargetName target);

/// Per-sample targets readable from the dataset (answer, intermediary, raw
/// inputs); rows are the record's token selection flattened as stored.
ProbingDataset build_pertoken_target(const actstore::ActivationRecord& record,
                                     const synthgen::TabularDataset& data,
                                     TargetName target);

/// Depth 0: ridge regression in closed form (standardized features, intercept
/// unpenalized, SVD solve). Depth >= 1: MLP with rectified-linear hidden
/// layers, Adam, early stopping on a validation fifth of the train split.
/// Split is 80/20 by split_seed; metrics are reported for both splits.
ProbeResult fit_probe(const ProbingDataset& data, const ProbeSpec& spec,
                      std::uint64_t split_seed,
                      LinearProbeDetails* details = nullptr);

/// One result per (depth, seed), identical splits across depths per seed.
/// `depths` must be sorted ascending and include 0.
std::vector<ProbeResult> complexity_sweep(const ProbingDataset& data,
                                          const ProbeSpec& base_spec,
                                          const std::vector<int>& depths,
                                          const std::vector<std::uint64_t>& seeds);

/// One JSON object per line, field order fixed:
/// spec_digest, target_name, layer, depth, split_seed, r2_train, r2_test,
/// mse_train, mse_test, provenance.
std::string to_ndjson_line(const ProbeResult& result);
ProbeResult result_from_json(const std::string& line);

}  // namespace tabprobe::probekit
