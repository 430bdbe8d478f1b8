#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tabprobe/common.hpp"

namespace tabprobe::synthgen {

enum class Family { linear, switch_, compound };

std::string family_name(Family f);
Family family_from_name(std::string_view name);

struct Range {
  double low = -1.0;
  double high = 1.0;
};

/// One row of a switch-family coefficient table. Linear tasks use a single
/// entry with u = 0; compound tasks have an empty table.
struct SwitchCoeff {
  int u = 0;
  double alpha = 0.0;
  double beta = 0.0;
};

struct TaskSpec {
  Family family = Family::linear;
  std::vector<SwitchCoeff> coefficient_table;
  std::vector<Range> input_ranges;  // per sampled input column
  int n_train = 0;                  // switch family: per coefficient pair
  int n_test = 0;                   // switch family: per coefficient pair
  double noise_sigma = 0.0;         // optional gaussian label noise
  std::uint64_t seed = 0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

std::uint64_t spec_digest(const TaskSpec& spec);

enum class ColumnRole { input, switch_id };
enum class Split { train, test };

struct TabularDataset {
  int n_rows = 0;
  int n_features = 0;  // d
  std::vector<std::string> feature_names;   // size d
  std::vector<ColumnRole> column_roles;     // size d
  std::vector<double> x;                    // row-major n_rows x d
  std::vector<double> z;                    // size n_rows
  std::vector<Split> split;                 // size n_rows
  std::vector<double> intermediaries;       // compound family only (a*b)
  std::uint64_t spec_digest = 0;

  double at(int row, int col) const { return x[static_cast<std::size_t>(row) * n_features + col]; }
  int n_train() const;
  int n_test() const;
  int switch_column() const;  // -1 when absent
};

/// Number of sampled input columns for a family (2 for linear, 3 for compound,
/// 2 for switch; the switch id column is appended separately).
int sampled_inputs(Family f);

std::vector<Range> default_input_ranges(int d);
Range default_coeff_range();

/// z = alpha*x + beta*y on d=2 uniform inputs.
TabularDataset gen_linear(double alpha, double beta, int n_train, int n_test,
                          std::uint64_t seed,
                          const std::vector<Range>& ranges = default_input_ranges(2));

/// z = alpha(u)*x + beta(u)*y with an integer switch column holding u;
/// n_per_pair / n_test_per_pair rows per table entry, stratified split,
/// rows interleaved deterministically by seed.
TabularDataset gen_switch(const std::vector<SwitchCoeff>& table, int n_per_pair,
                          int n_test_per_pair, std::uint64_t seed,
                          const std::vector<Range>& ranges = default_input_ranges(2));

/// z = a*b + c with the intermediary vector holding a*b.
TabularDataset gen_compound(int n_train, int n_test, std::uint64_t seed,
                            const std::vector<Range>& ranges = default_input_ranges(3));

/// Realizes any validated TaskSpec; all gen_* entry points route through here.
TabularDataset generate(const TaskSpec& spec);

/// Independent linear datasets with coefficients drawn uniformly from
/// coeff_range; used by the cross-fit probing configuration.
std::vector<std::pair<TaskSpec, TabularDataset>> gen_crossfit_suite(
    int n_datasets, std::uint64_t seed,
    const std::vector<Range>& ranges = default_input_ranges(2),
    Range coeff_range = default_coeff_range(), int n_train = 128,
    int n_test = 16);

/// Evaluates the generating formula for one realized row (noise-free part).
double family_formula(const TaskSpec& spec, const TabularDataset& data, int row);

// Serialization: one directory per dataset holding data.csv and spec.json.
void save_dataset(const std::filesystem::path& dir, const TaskSpec& spec,
                  const TabularDataset& data);
std::pair<TaskSpec, TabularDataset> load_dataset(const std::filesystem::path& dir);

std::string spec_to_json(const TaskSpec& spec);
TaskSpec spec_from_json(const std::string& text);

}  // namespace tabprobe::synthgen
