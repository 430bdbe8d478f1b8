#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tabprobe/adapter.hpp"
#include "tabprobe/common.hpp"

namespace tabprobe::lens {

struct LensResult {
  std::uint64_t fit_digest = 0;
  std::vector<int> layers;  // 0..layer_count
  // Primary variant: the model's head applied after its pre-head
  // normalization, the standard logit-lens convention.
  std::vector<std::vector<double>> decoded;  // per layer, per test row
  std::vector<double> mse, r2;
  // Secondary variant: the bare linear map, no pre-head normalization.
  std::vector<double> mse_raw, r2_raw;
  double tau = 1.1;
  /// Smallest layer whose whole tail [layer .. last] stays within
  /// tau * final-layer MSE, so convergence is never transient.
  int convergence_layer = 0;
  std::string normalization_variant = "head_after_final_norm";
};

LensResult run_lens(const adapter::ProbeableModel& model,
                    const adapter::FitHandle& handle, double tau = 1.1);

std::string lens_to_json(const LensResult& result);
LensResult lens_from_json(const std::string& text);

}  // namespace tabprobe::lens
