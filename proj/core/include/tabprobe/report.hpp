#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tabprobe/common.hpp"

namespace tabprobe::report {

struct RenderOptions {
  bool plots = true;  // SVG rendering is best-effort and never fails a render
};

/// Renders a run directory's summary into CSV files (by_layer.csv,
/// by_depth.csv, per-target variants, lens.csv when present) plus SVG plots.
/// CSV bytes are deterministic for identical run directories. Returns the
/// files written. Throws NotFoundError when summary.json is absent.
std::vector<std::filesystem::path> render(const std::filesystem::path& run_dir,
                                          const std::filesystem::path& out_dir,
                                          const RenderOptions& options = {});

}  // namespace tabprobe::report
