#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tabprobe/common.hpp"
#include "tabprobe/probekit.hpp"
#include "tabprobe/synthgen.hpp"

namespace tabprobe::expharness {

enum class Experiment {
  coeff_crossfit,
  coeff_switch,
  intermediary,
  answer_probe,
  logit_lens,
  input_copy,
};

std::string experiment_name(Experiment e);
Experiment experiment_from_name(std::string_view name);

/// Task parameters forwarded to synthgen; unused fields are ignored per
/// experiment.
struct TaskParams {
  std::uint64_t seed = 1;
  synthgen::Range coeff_range = synthgen::default_coeff_range();
  synthgen::Range input_range{-1.0, 1.0};
  double noise_sigma = 0.0;
  // coeff_crossfit
  int n_datasets = 100;
  // coeff_switch
  int n_pairs = 16;
  int n_per_pair = 64;
  int n_test_per_pair = 16;
  // plain generation sizes (linear / compound)
  int n_train = 512;
  int n_test = 256;
};

struct ProbeParams {
  int width = 256;
  double ridge_lambda = 1e-3;
  int epochs = 200;
  int patience = 20;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::coeff_switch;
  std::string model_selector;  // "toy:<checkpoint>" | "tabpfn-v2[:device]"
  synthgen::Family family = synthgen::Family::switch_;
  TaskParams task;
  ProbeParams probe;
  std::vector<int> layers;               // empty = all
  std::vector<int> depths = {0, 1, 2, 3};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  double lens_tau = 1.1;
  std::string run_id;
  std::string data_root;  // empty: $TABPROBE_DATA_DIR or ./runs
  int n_workers = 0;      // 0: hardware concurrency

  void validate() const;
  std::uint64_t content_digest() const;  // excludes run_id / data_root
};

ExperimentConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const ExperimentConfig& config, bool include_location);

struct RunOutcome {
  std::filesystem::path run_dir;
  int cells_total = 0;
  int cells_completed = 0;
  int cells_errored = 0;
  int cells_skipped = 0;  // already present (resume)
};

/// Executes the configured experiment end to end: generate, fit, capture,
/// probe or lens across the layer x depth x seed grid. Fully resumable:
/// completed grid cells are skipped by digest. Cell errors are recorded in
/// summary.json; the run continues.
RunOutcome run(const ExperimentConfig& config);

std::filesystem::path resolve_data_root(const std::string& configured);

struct CompareReport {
  std::uint64_t fit_digest = 0;
  double threshold = 0.95;
  std::optional<int> probe_layer;  // earliest layer with answer-probe r2 >= threshold
  std::optional<int> lens_layer;   // lens convergence layer (absent if the
                                   // final layer never reaches the threshold)
  std::optional<int> gap;
};

/// Orders "where is the answer probe-accessible" against "where does the
/// native head align"; both runs must share the fit digest.
CompareReport compare_answer_vs_lens(const std::filesystem::path& answer_run_dir,
                                     const std::filesystem::path& lens_run_dir);

std::string compare_to_json(const CompareReport& report);

}  // namespace tabprobe::expharness
