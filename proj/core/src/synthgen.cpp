#include "tabprobe/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace tabprobe::synthgen {

using nlohmann::json;

std::string family_name(Family f) {
  switch (f) {
    case Family::linear: return "linear";
    case Family::switch_: return "switch";
    case Family::compound: return "compound";
  }
  throw ConfigError("unknown family enum value");
}

Family family_from_name(std::string_view name) {
  if (name == "linear") return Family::linear;
  if (name == "switch") return Family::switch_;
  if (name == "compound") return Family::compound;
  throw ConfigError("unknown task family: " + std::string(name));
}

int sampled_inputs(Family f) { return f == Family::compound ? 3 : 2; }

std::vector<Range> default_input_ranges(int d) {
  return std::vector<Range>(static_cast<std::size_t>(d), Range{-1.0, 1.0});
}

Range default_coeff_range() { return Range{-2.0, 2.0}; }

void TaskSpec::validate() const {
  if (n_train < 2) throw ConfigError("n_train must be >= 2");
  if (n_test < 1) throw ConfigError("n_test must be >= 1");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  const int d = sampled_inputs(family);
  if (static_cast<int>(input_ranges.size()) != d) {
    throw ConfigError("input_ranges must have " + std::to_string(d) +
                      " entries for family " + family_name(family));
  }
  for (const Range& r : input_ranges) {
    if (!(r.low < r.high)) throw ConfigError("input range requires low < high");
  }
  switch (family) {
    case Family::linear:
      if (coefficient_table.size() != 1) {
        throw ConfigError("linear family requires exactly one coefficient pair");
      }
      break;
    case Family::switch_: {
      if (coefficient_table.size() < 2) {
        throw ConfigError("switch family requires >= 2 coefficient pairs");
      }
      std::set<std::pair<double, double>> pairs;
      for (std::size_t i = 0; i < coefficient_table.size(); ++i) {
        const SwitchCoeff& c = coefficient_table[i];
        if (c.u != static_cast<int>(i)) {
          throw ConfigError("switch ids must be consecutive integers 0..S-1");
        }
        if (!pairs.insert({c.alpha, c.beta}).second) {
          throw ConfigError("duplicate coefficient pair in switch table");
        }
      }
      break;
    }
    case Family::compound:
      if (!coefficient_table.empty()) {
        throw ConfigError("compound family takes an empty coefficient table");
      }
      break;
  }
}

std::uint64_t spec_digest(const TaskSpec& spec) {
  Fnv1a h;
  h.update_str("taskspec.v1");
  h.update_str(family_name(spec.family));
  h.update_u64(spec.coefficient_table.size());
  for (const SwitchCoeff& c : spec.coefficient_table) {
    h.update_i64(c.u);
    h.update_f64(c.alpha);
    h.update_f64(c.beta);
  }
  h.update_u64(spec.input_ranges.size());
  for (const Range& r : spec.input_ranges) {
    h.update_f64(r.low);
    h.update_f64(r.high);
  }
  h.update_i64(spec.n_train);
  h.update_i64(spec.n_test);
  h.update_f64(spec.noise_sigma);
  h.update_u64(spec.seed);
  return h.digest();
}

int TabularDataset::n_train() const {
  return static_cast<int>(std::count(split.begin(), split.end(), Split::train));
}

int TabularDataset::n_test() const {
  return static_cast<int>(std::count(split.begin(), split.end(), Split::test));
}

int TabularDataset::switch_column() const {
  for (int c = 0; c < n_features; ++c) {
    if (column_roles[static_cast<std::size_t>(c)] == ColumnRole::switch_id) return c;
  }
  return -1;
}

namespace {

std::vector<std::string> feature_names_for(Family f) {
  switch (f) {
    case Family::linear: return {"x", "y"};
    case Family::switch_: return {"x", "y", "u"};
    case Family::compound: return {"a", "b", "c"};
  }
  throw ConfigError("unknown family enum value");
}

TabularDataset realize(const TaskSpec& spec) {
  const int d_in = sampled_inputs(spec.family);
  const bool has_switch = spec.family == Family::switch_;
  const int d = d_in + (has_switch ? 1 : 0);
  const int pairs = has_switch ? static_cast<int>(spec.coefficient_table.size()) : 1;
  const int n_rows = (spec.n_train + spec.n_test) * pairs;

  TabularDataset data;
  data.n_rows = n_rows;
  data.n_features = d;
  data.feature_names = feature_names_for(spec.family);
  data.column_roles.assign(static_cast<std::size_t>(d), ColumnRole::input);
  if (has_switch) data.column_roles.back() = ColumnRole::switch_id;
  data.x.assign(static_cast<std::size_t>(n_rows) * d, 0.0);
  data.z.assign(static_cast<std::size_t>(n_rows), 0.0);
  data.split.assign(static_cast<std::size_t>(n_rows), Split::train);
  if (spec.family == Family::compound) {
    data.intermediaries.assign(static_cast<std::size_t>(n_rows), 0.0);
  }
  data.spec_digest = spec_digest(spec);

  Rng rng(Rng::derive(spec.seed, family_name(spec.family)));

  // Canonical row order: per coefficient pair, train rows then test rows.
  // The switch family interleaves afterwards with a seeded shuffle.
  int row = 0;
  for (int p = 0; p < pairs; ++p) {
    const int per_pair = spec.n_train + spec.n_test;
    for (int i = 0; i < per_pair; ++i, ++row) {
      double* xr = data.x.data() + static_cast<std::size_t>(row) * d;
      for (int c = 0; c < d_in; ++c) {
        const Range& r = spec.input_ranges[static_cast<std::size_t>(c)];
        xr[c] = rng.uniform(r.low, r.high);
      }
      data.split[static_cast<std::size_t>(row)] =
          i < spec.n_train ? Split::train : Split::test;
      double target = 0.0;
      switch (spec.family) {
        case Family::linear: {
          const SwitchCoeff& c = spec.coefficient_table.front();
          target = c.alpha * xr[0] + c.beta * xr[1];
          break;
        }
        case Family::switch_: {
          const SwitchCoeff& c = spec.coefficient_table[static_cast<std::size_t>(p)];
          xr[d_in] = static_cast<double>(c.u);
          target = c.alpha * xr[0] + c.beta * xr[1];
          break;
        }
        case Family::compound: {
          const double ab = xr[0] * xr[1];
          data.intermediaries[static_cast<std::size_t>(row)] = ab;
          target = ab + xr[2];
          break;
        }
      }
      if (spec.noise_sigma > 0.0) target += rng.normal(0.0, spec.noise_sigma);
      data.z[static_cast<std::size_t>(row)] = target;
    }
  }

  if (has_switch) {
    std::vector<int> order(static_cast<std::size_t>(n_rows));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    TabularDataset mixed = data;
    for (int r = 0; r < n_rows; ++r) {
      const int src = order[static_cast<std::size_t>(r)];
      for (int c = 0; c < d; ++c) {
        mixed.x[static_cast<std::size_t>(r) * d + c] = data.at(src, c);
      }
      mixed.z[static_cast<std::size_t>(r)] = data.z[static_cast<std::size_t>(src)];
      mixed.split[static_cast<std::size_t>(r)] = data.split[static_cast<std::size_t>(src)];
    }
    return mixed;
  }
  return data;
}

}  // namespace

TabularDataset generate(const TaskSpec& spec) {
  spec.validate();
  return realize(spec);
}

TabularDataset gen_linear(double alpha, double beta, int n_train, int n_test,
                          std::uint64_t seed, const std::vector<Range>& ranges) {
  TaskSpec spec;
  spec.family = Family::linear;
  spec.coefficient_table = {SwitchCoeff{0, alpha, beta}};
  spec.input_ranges = ranges;
  spec.n_train = n_train;
  spec.n_test = n_test;
  spec.seed = seed;
  return generate(spec);
}

TabularDataset gen_switch(const std::vector<SwitchCoeff>& table, int n_per_pair,
                          int n_test_per_pair, std::uint64_t seed,
                          const std::vector<Range>& ranges) {
  TaskSpec spec;
  spec.family = Family::switch_;
  spec.coefficient_table = table;
  spec.input_ranges = ranges;
  spec.n_train = n_per_pair;
  spec.n_test = n_test_per_pair;
  spec.seed = seed;
  return generate(spec);
}

TabularDataset gen_compound(int n_train, int n_test, std::uint64_t seed,
                            const std::vector<Range>& ranges) {
  TaskSpec spec;
  spec.family = Family::compound;
  spec.input_ranges = ranges;
  spec.n_train = n_train;
  spec.n_test = n_test;
  spec.seed = seed;
  return generate(spec);
}

std::vector<std::pair<TaskSpec, TabularDataset>> gen_crossfit_suite(
    int n_datasets, std::uint64_t seed, const std::vector<Range>& ranges,
    Range coeff_range, int n_train, int n_test) {
  if (n_datasets < 10) {
    throw ConfigError("cross-fit suite requires n_datasets >= 10");
  }
  if (!(coeff_range.low < coeff_range.high)) {
    throw ConfigError("coefficient range requires low < high");
  }
  Rng coeff_rng(Rng::derive(seed, "crossfit-coeffs"));
  std::vector<std::pair<TaskSpec, TabularDataset>> out;
  out.reserve(static_cast<std::size_t>(n_datasets));
  for (int i = 0; i < n_datasets; ++i) {
    const double alpha = coeff_rng.uniform(coeff_range.low, coeff_range.high);
    const double beta = coeff_rng.uniform(coeff_range.low, coeff_range.high);
    TaskSpec spec;
    spec.family = Family::linear;
    spec.coefficient_table = {SwitchCoeff{0, alpha, beta}};
    spec.input_ranges = ranges;
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.seed = Rng::derive(seed, {0x66697473ULL, static_cast<std::uint64_t>(i)});
    out.emplace_back(spec, generate(spec));
  }
  return out;
}

double family_formula(const TaskSpec& spec, const TabularDataset& data, int row) {
  switch (spec.family) {
    case Family::linear: {
      const SwitchCoeff& c = spec.coefficient_table.front();
      return c.alpha * data.at(row, 0) + c.beta * data.at(row, 1);
    }
    case Family::switch_: {
      const int u = static_cast<int>(std::lround(data.at(row, data.switch_column())));
      const SwitchCoeff& c = spec.coefficient_table.at(static_cast<std::size_t>(u));
      return c.alpha * data.at(row, 0) + c.beta * data.at(row, 1);
    }
    case Family::compound:
      return data.at(row, 0) * data.at(row, 1) + data.at(row, 2);
  }
  throw ConfigError("unknown family enum value");
}

std::string spec_to_json(const TaskSpec& spec) {
  json j;
  j["family"] = family_name(spec.family);
  j["coefficient_table"] = json::array();
  for (const SwitchCoeff& c : spec.coefficient_table) {
    j["coefficient_table"].push_back({{"u", c.u}, {"alpha", c.alpha}, {"beta", c.beta}});
  }
  j["input_ranges"] = json::array();
  for (const Range& r : spec.input_ranges) {
    j["input_ranges"].push_back({r.low, r.high});
  }
  j["n_train"] = spec.n_train;
  j["n_test"] = spec.n_test;
  j["noise_sigma"] = spec.noise_sigma;
  j["seed"] = spec.seed;
  j["digest"] = hex64(spec_digest(spec));
  return j.dump(2) + "\n";
}

TaskSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid spec.json: ") + e.what());
  }
  TaskSpec spec;
  try {
    spec.family = family_from_name(j.at("family").get<std::string>());
    for (const json& e : j.at("coefficient_table")) {
      spec.coefficient_table.push_back(SwitchCoeff{
          e.at("u").get<int>(), e.at("alpha").get<double>(), e.at("beta").get<double>()});
    }
    for (const json& e : j.at("input_ranges")) {
      spec.input_ranges.push_back(Range{e.at(0).get<double>(), e.at(1).get<double>()});
    }
    spec.n_train = j.at("n_train").get<int>();
    spec.n_test = j.at("n_test").get<int>();
    spec.noise_sigma = j.value("noise_sigma", 0.0);
    spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid spec.json: ") + e.what());
  }
  return spec;
}

void save_dataset(const std::filesystem::path& dir, const TaskSpec& spec,
                  const TabularDataset& data) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  for (int c = 0; c < data.n_features; ++c) {
    csv << data.feature_names[static_cast<std::size_t>(c)] << ',';
  }
  csv << "z,split";
  const bool with_inter = !data.intermediaries.empty();
  if (with_inter) csv << ",intermediary";
  csv << '\n';
  for (int r = 0; r < data.n_rows; ++r) {
    for (int c = 0; c < data.n_features; ++c) {
      csv << format_double(data.at(r, c)) << ',';
    }
    csv << format_double(data.z[static_cast<std::size_t>(r)]) << ','
        << (data.split[static_cast<std::size_t>(r)] == Split::train ? "train" : "test");
    if (with_inter) csv << ',' << format_double(data.intermediaries[static_cast<std::size_t>(r)]);
    csv << '\n';
  }
  write_file_atomic(dir / "data.csv", csv.str());
  write_file_atomic(dir / "spec.json", spec_to_json(spec));
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double_exact(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw ConfigError("malformed numeric field: " + s);
  return v;
}

}  // namespace

std::pair<TaskSpec, TabularDataset> load_dataset(const std::filesystem::path& dir) {
  const TaskSpec spec = spec_from_json(read_text_file(dir / "spec.json"));
  spec.validate();

  const std::string csv = read_text_file(dir / "data.csv");
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty data.csv in " + dir.string());
  const std::vector<std::string> header = split_csv_line(line);

  const bool has_switch = spec.family == Family::switch_;
  const int d = sampled_inputs(spec.family) + (has_switch ? 1 : 0);
  const bool with_inter = !header.empty() && header.back() == "intermediary";
  const std::size_t expected_cols = static_cast<std::size_t>(d) + 2 + (with_inter ? 1 : 0);
  if (header.size() != expected_cols) {
    throw ConfigError("data.csv header does not match spec family");
  }

  TabularDataset data;
  data.n_features = d;
  data.feature_names.assign(header.begin(), header.begin() + d);
  data.column_roles.assign(static_cast<std::size_t>(d), ColumnRole::input);
  if (has_switch) data.column_roles.back() = ColumnRole::switch_id;
  data.spec_digest = spec_digest(spec);

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != expected_cols) throw ConfigError("ragged row in data.csv");
    for (int c = 0; c < d; ++c) data.x.push_back(parse_double_exact(f[static_cast<std::size_t>(c)]));
    data.z.push_back(parse_double_exact(f[static_cast<std::size_t>(d)]));
    const std::string& sp = f[static_cast<std::size_t>(d) + 1];
    if (sp == "train") {
      data.split.push_back(Split::train);
    } else if (sp == "test") {
      data.split.push_back(Split::test);
    } else {
      throw ConfigError("unknown split label: " + sp);
    }
    if (with_inter) data.intermediaries.push_back(parse_double_exact(f.back()));
    ++data.n_rows;
  }
  return {spec, data};
}

}  // namespace tabprobe::synthgen
