#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "tabprobe/synthgen.hpp"
#include "test_util.hpp"

using namespace tabprobe;
using namespace tabprobe::synthgen;

TEST_CASE("linear generation follows z = alpha*x + beta*y") {
  const TabularDataset d = gen_linear(2.0, 3.0, 16, 4, 42);
  CHECK(d.n_features == 2);
  CHECK(d.n_rows == 20);
  CHECK(d.n_train() == 16);
  CHECK(d.n_test() == 4);
  for (int r = 0; r < d.n_rows; ++r) {
    CHECK(d.z[r] == doctest::Approx(2.0 * d.at(r, 0) + 3.0 * d.at(r, 1)).epsilon(1e-12));
  }
}

TEST_CASE("identity and zero coefficient maps") {
  const TabularDataset ident = gen_linear(1.0, 0.0, 8, 2, 7);
  for (int r = 0; r < ident.n_rows; ++r) CHECK(ident.z[r] == ident.at(r, 0));

  const TabularDataset zero = gen_linear(0.0, 0.0, 8, 2, 7);
  for (int r = 0; r < zero.n_rows; ++r) CHECK(zero.z[r] == 0.0);
}

TEST_CASE("generation is deterministic in (spec, seed)") {
  const TabularDataset a = gen_linear(0.5, -1.5, 32, 8, 123);
  const TabularDataset b = gen_linear(0.5, -1.5, 32, 8, 123);
  CHECK(a.x == b.x);
  CHECK(a.z == b.z);
  const TabularDataset c = gen_linear(0.5, -1.5, 32, 8, 124);
  CHECK(a.x != c.x);
}

TEST_CASE("switch family: table lookup, stratified split, interleaving") {
  std::vector<SwitchCoeff> table;
  for (int u = 0; u < 10; ++u) {
    table.push_back({u, 0.1 * u - 1.0, -0.2 * u + 0.5});
  }
  const TabularDataset d = gen_switch(table, 64, 8, 99);
  CHECK(d.n_rows == 10 * 72);
  CHECK(d.n_train() == 640);
  CHECK(d.switch_column() == 2);

  std::set<int> ids;
  std::vector<int> train_per_pair(10, 0), test_per_pair(10, 0);
  for (int r = 0; r < d.n_rows; ++r) {
    const int u = static_cast<int>(std::lround(d.at(r, 2)));
    ids.insert(u);
    (d.split[r] == Split::train ? train_per_pair : test_per_pair)[u] += 1;
    const double want = table[u].alpha * d.at(r, 0) + table[u].beta * d.at(r, 1);
    CHECK(d.z[r] == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(ids.size() == 10);
  for (int u = 0; u < 10; ++u) {
    CHECK(train_per_pair[u] == 64);
    CHECK(test_per_pair[u] == 8);
  }

  // Seeded interleave: pair blocks do not survive in row order.
  bool mixed = false;
  for (int r = 1; r < 80 && !mixed; ++r) {
    mixed = d.at(r, 2) != d.at(r - 1, 2);
  }
  CHECK(mixed);
}

TEST_CASE("switch family rejects duplicate coefficient pairs") {
  std::vector<SwitchCoeff> table = {{0, 1.0, 2.0}, {1, 1.0, 2.0}};
  CHECK_THROWS_AS(gen_switch(table, 8, 2, 1), ConfigError);
}

TEST_CASE("switch ids must be consecutive from zero") {
  std::vector<SwitchCoeff> table = {{0, 1.0, 2.0}, {2, -1.0, 0.5}};
  CHECK_THROWS_AS(gen_switch(table, 8, 2, 1), ConfigError);
}

TEST_CASE("compound family: z = a*b + c with exact intermediaries") {
  const TabularDataset d = gen_compound(64, 16, 5);
  CHECK(d.n_features == 3);
  REQUIRE(d.intermediaries.size() == static_cast<std::size_t>(d.n_rows));
  for (int r = 0; r < d.n_rows; ++r) {
    CHECK(d.intermediaries[r] == d.at(r, 0) * d.at(r, 1));
    CHECK(d.z[r] == d.intermediaries[r] + d.at(r, 2));
  }
}

TEST_CASE("formula fidelity within 4 machine epsilons") {
  TaskSpec spec;
  spec.family = Family::switch_;
  spec.coefficient_table = {{0, 1.7, -0.3}, {1, -2.0, 0.9}, {2, 0.05, 1.99}};
  spec.input_ranges = default_input_ranges(2);
  spec.n_train = 32;
  spec.n_test = 8;
  spec.seed = 77;
  const TabularDataset d = generate(spec);
  for (int r = 0; r < d.n_rows; ++r) {
    const double want = family_formula(spec, d, r);
    const double scale = std::abs(want) + std::abs(d.at(r, 0)) + std::abs(d.at(r, 1)) + 1.0;
    CHECK(std::abs(d.z[r] - want) <= 4.0 * std::numeric_limits<double>::epsilon() * scale);
  }
}

TEST_CASE("validation rejects bad counts and ranges") {
  TaskSpec spec;
  spec.family = Family::linear;
  spec.coefficient_table = {{0, 1.0, 1.0}};
  spec.input_ranges = default_input_ranges(2);
  spec.n_train = 1;
  spec.n_test = 4;
  CHECK_THROWS_AS(generate(spec), ConfigError);

  spec.n_train = 8;
  spec.n_test = 0;
  CHECK_THROWS_AS(generate(spec), ConfigError);

  spec.n_test = 2;
  spec.input_ranges = {{1.0, -1.0}, {-1.0, 1.0}};
  CHECK_THROWS_AS(generate(spec), ConfigError);
}

TEST_CASE("cross-fit suite: containment, determinism, precondition") {
  const auto suite = gen_crossfit_suite(50, 11, default_input_ranges(2), Range{-2.0, 2.0}, 32, 8);
  CHECK(suite.size() == 50);
  for (const auto& [spec, data] : suite) {
    REQUIRE(spec.coefficient_table.size() == 1);
    CHECK(spec.coefficient_table[0].alpha >= -2.0);
    CHECK(spec.coefficient_table[0].alpha <= 2.0);
    CHECK(spec.coefficient_table[0].beta >= -2.0);
    CHECK(spec.coefficient_table[0].beta <= 2.0);
    CHECK(data.n_rows == 40);
  }

  const auto again = gen_crossfit_suite(50, 11, default_input_ranges(2), Range{-2.0, 2.0}, 32, 8);
  for (std::size_t i = 0; i < suite.size(); ++i) {
    CHECK(suite[i].first.coefficient_table[0].alpha == again[i].first.coefficient_table[0].alpha);
    CHECK(suite[i].first.coefficient_table[0].beta == again[i].first.coefficient_table[0].beta);
  }

  CHECK_THROWS_AS(gen_crossfit_suite(2, 1), ConfigError);
}

TEST_CASE("no row is both train and test; counts add up") {
  const TabularDataset d = gen_compound(100, 30, 8);
  CHECK(d.n_train() + d.n_test() == d.n_rows);
}

TEST_CASE("dataset directory round trip is bit-exact") {
  testutil::TempDir tmp("synthgen");
  TaskSpec spec;
  spec.family = Family::switch_;
  spec.coefficient_table = {{0, 0.123456789012345, -1.9}, {1, 1.0 / 3.0, 2.0}};
  spec.input_ranges = default_input_ranges(2);
  spec.n_train = 16;
  spec.n_test = 4;
  spec.seed = 2024;
  const TabularDataset d = generate(spec);
  save_dataset(tmp.path() / "ds", spec, d);

  const auto [spec2, d2] = load_dataset(tmp.path() / "ds");
  CHECK(spec_digest(spec2) == spec_digest(spec));
  CHECK(d2.x == d.x);
  CHECK(d2.z == d.z);
  CHECK(d2.split == d.split);
  CHECK(d2.feature_names == d.feature_names);
  CHECK(d2.spec_digest == d.spec_digest);
}

TEST_CASE("optional label noise knob") {
  TaskSpec spec;
  spec.family = Family::linear;
  spec.coefficient_table = {{0, 1.0, 1.0}};
  spec.input_ranges = default_input_ranges(2);
  spec.n_train = 64;
  spec.n_test = 8;
  spec.seed = 4;
  spec.noise_sigma = 0.1;
  const TabularDataset d = generate(spec);
  double max_dev = 0.0;
  for (int r = 0; r < d.n_rows; ++r) {
    max_dev = std::max(max_dev, std::abs(d.z[r] - family_formula(spec, d, r)));
  }
  CHECK(max_dev > 0.0);
  CHECK(max_dev < 1.0);
}
