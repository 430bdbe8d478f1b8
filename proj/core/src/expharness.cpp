#include "tabprobe/expharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "tabprobe/actstore.hpp"
#include "tabprobe/adapter.hpp"
#include "tabprobe/lens.hpp"

namespace tabprobe::expharness {

using nlohmann::json;
using nlohmann::ordered_json;
using probekit::TargetName;
using synthgen::Family;
using synthgen::TabularDataset;
using synthgen::TaskSpec;

std::string experiment_name(Experiment e) {
  switch (e) {
    case Experiment::coeff_crossfit: return "coeff_crossfit";
    case Experiment::coeff_switch: return "coeff_switch";
    case Experiment::intermediary: return "intermediary";
    case Experiment::answer_probe: return "answer_probe";
    case Experiment::logit_lens: return "logit_lens";
    case Experiment::input_copy: return "input_copy";
  }
  throw ConfigError("unknown experiment enum value");
}

Experiment experiment_from_name(std::string_view name) {
  for (Experiment e : {Experiment::coeff_crossfit, Experiment::coeff_switch,
                       Experiment::intermediary, Experiment::answer_probe,
                       Experiment::logit_lens, Experiment::input_copy}) {
    if (experiment_name(e) == name) return e;
  }
  throw ConfigError("unknown experiment: " + std::string(name));
}

namespace {

Family required_family(Experiment e, Family configured) {
  switch (e) {
    case Experiment::coeff_crossfit: return Family::linear;
    case Experiment::coeff_switch: return Family::switch_;
    case Experiment::intermediary:
    case Experiment::input_copy: return Family::compound;
    case Experiment::answer_probe:
    case Experiment::logit_lens: return configured;  // any family
  }
  throw ConfigError("unknown experiment enum value");
}

std::vector<TargetName> targets_for(Experiment e) {
  switch (e) {
    case Experiment::coeff_crossfit:
    case Experiment::coeff_switch:
      return {TargetName::alpha, TargetName::beta};
    case Experiment::intermediary:
      return {TargetName::intermediary};
    case Experiment::answer_probe:
      return {TargetName::answer};
    case Experiment::input_copy:
      return {TargetName::input_a, TargetName::input_b, TargetName::input_c,
              TargetName::input_ab};
    case Experiment::logit_lens:
      return {};
  }
  throw ConfigError("unknown experiment enum value");
}

actstore::TokenSel token_sel_for(Experiment e) {
  switch (e) {
    case Experiment::answer_probe:
    case Experiment::logit_lens:
    case Experiment::input_copy:
      return actstore::TokenSel::answer_only;
    default:
      return actstore::TokenSel::all;
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (model_selector.empty()) throw ConfigError("config needs a model selector");
  if (run_id.empty()) throw ConfigError("config needs a run_id");
  if (seeds.empty()) throw ConfigError("config needs at least one seed");
  if (experiment != Experiment::logit_lens) {
    if (depths.empty() || depths.front() != 0 ||
        !std::is_sorted(depths.begin(), depths.end())) {
      throw ConfigError("depths must be sorted ascending and include 0");
    }
  }
  const Family want = required_family(experiment, family);
  if (family != want) {
    throw ConfigError("experiment " + experiment_name(experiment) + " requires the " +
                      synthgen::family_name(want) + " task family");
  }
  if (!(task.coeff_range.low < task.coeff_range.high)) {
    throw ConfigError("coefficient range requires low < high");
  }
  if (!(task.input_range.low < task.input_range.high)) {
    throw ConfigError("input range requires low < high");
  }
  if (lens_tau < 1.0) throw ConfigError("lens tau must be >= 1");
}

std::uint64_t ExperimentConfig::content_digest() const {
  Fnv1a h;
  h.update_str("expconfig.v1");
  h.update_str(experiment_name(experiment));
  h.update_str(model_selector);
  h.update_str(synthgen::family_name(family));
  h.update_u64(task.seed);
  h.update_f64(task.coeff_range.low);
  h.update_f64(task.coeff_range.high);
  h.update_f64(task.input_range.low);
  h.update_f64(task.input_range.high);
  h.update_f64(task.noise_sigma);
  h.update_i64(task.n_datasets);
  h.update_i64(task.n_pairs);
  h.update_i64(task.n_per_pair);
  h.update_i64(task.n_test_per_pair);
  h.update_i64(task.n_train);
  h.update_i64(task.n_test);
  h.update_i64(probe.width);
  h.update_f64(probe.ridge_lambda);
  h.update_i64(probe.epochs);
  h.update_i64(probe.patience);
  for (int l : layers) h.update_i64(l);
  for (int d : depths) h.update_i64(d);
  for (std::uint64_t s : seeds) h.update_u64(s);
  h.update_f64(lens_tau);
  return h.digest();
}

namespace {

json config_to_json(const ExperimentConfig& c, bool include_location) {
  ordered_json j;
  j["experiment"] = experiment_name(c.experiment);
  j["model"] = c.model_selector;
  j["family"] = synthgen::family_name(c.family);
  ordered_json task;
  task["seed"] = c.task.seed;
  task["coeff_range"] = {c.task.coeff_range.low, c.task.coeff_range.high};
  task["input_range"] = {c.task.input_range.low, c.task.input_range.high};
  task["noise_sigma"] = c.task.noise_sigma;
  task["n_datasets"] = c.task.n_datasets;
  task["n_pairs"] = c.task.n_pairs;
  task["n_per_pair"] = c.task.n_per_pair;
  task["n_test_per_pair"] = c.task.n_test_per_pair;
  task["n_train"] = c.task.n_train;
  task["n_test"] = c.task.n_test;
  j["task"] = std::move(task);
  ordered_json probe;
  probe["width"] = c.probe.width;
  probe["ridge_lambda"] = c.probe.ridge_lambda;
  probe["epochs"] = c.probe.epochs;
  probe["patience"] = c.probe.patience;
  j["probe"] = std::move(probe);
  j["layers"] = c.layers;
  j["depths"] = c.depths;
  j["seeds"] = c.seeds;
  j["lens_tau"] = c.lens_tau;
  if (include_location) {
    j["run_id"] = c.run_id;
    j["data_root"] = c.data_root;
    j["n_workers"] = c.n_workers;
  }
  return j;
}

}  // namespace

std::string config_to_json_text(const ExperimentConfig& config, bool include_location) {
  return config_to_json(config, include_location).dump(2) + "\n";
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid experiment config JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.experiment = experiment_from_name(j.at("experiment").get<std::string>());
    c.model_selector = j.at("model").get<std::string>();
    c.family = j.contains("family")
                   ? synthgen::family_from_name(j.at("family").get<std::string>())
                   : required_family(c.experiment, Family::linear);
    if (j.contains("task")) {
      const json& t = j.at("task");
      c.task.seed = t.value("seed", c.task.seed);
      if (t.contains("coeff_range")) {
        c.task.coeff_range = {t.at("coeff_range").at(0).get<double>(),
                              t.at("coeff_range").at(1).get<double>()};
      }
      if (t.contains("input_range")) {
        c.task.input_range = {t.at("input_range").at(0).get<double>(),
                              t.at("input_range").at(1).get<double>()};
      }
      c.task.noise_sigma = t.value("noise_sigma", 0.0);
      c.task.n_datasets = t.value("n_datasets", c.task.n_datasets);
      c.task.n_pairs = t.value("n_pairs", c.task.n_pairs);
      c.task.n_per_pair = t.value("n_per_pair", c.task.n_per_pair);
      c.task.n_test_per_pair = t.value("n_test_per_pair", c.task.n_test_per_pair);
      c.task.n_train = t.value("n_train", c.task.n_train);
      c.task.n_test = t.value("n_test", c.task.n_test);
    }
    if (j.contains("probe")) {
      const json& p = j.at("probe");
      c.probe.width = p.value("width", c.probe.width);
      c.probe.ridge_lambda = p.value("ridge_lambda", c.probe.ridge_lambda);
      c.probe.epochs = p.value("epochs", c.probe.epochs);
      c.probe.patience = p.value("patience", c.probe.patience);
    }
    c.layers = j.value("layers", c.layers);
    c.depths = j.value("depths", c.depths);
    c.seeds = j.value("seeds", c.seeds);
    c.lens_tau = j.value("lens_tau", c.lens_tau);
    c.run_id = j.value("run_id", std::string());
    c.data_root = j.value("data_root", std::string());
    c.n_workers = j.value("n_workers", 0);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid experiment config JSON: ") + e.what());
  }
  return c;
}

std::filesystem::path resolve_data_root(const std::string& configured) {
  if (!configured.empty()) return configured;
  const char* env = std::getenv("TABPROBE_DATA_DIR");
  if (env && *env) return env;
  return "runs";
}

// ---------------------------------------------------------------------------
// Run internals.
// ---------------------------------------------------------------------------

namespace {

struct FittedDataset {
  TaskSpec spec;
  TabularDataset data;
};

std::vector<FittedDataset> generate_datasets(const ExperimentConfig& c) {
  std::vector<FittedDataset> out;
  const auto ranges = [&](int d) {
    return std::vector<synthgen::Range>(static_cast<std::size_t>(d), c.task.input_range);
  };
  switch (c.experiment) {
    case Experiment::coeff_crossfit: {
      auto suite = synthgen::gen_crossfit_suite(c.task.n_datasets, c.task.seed, ranges(2),
                                                c.task.coeff_range, c.task.n_train,
                                                c.task.n_test);
      for (auto& [spec, data] : suite) out.push_back({std::move(spec), std::move(data)});
      break;
    }
    case Experiment::coeff_switch: {
      Rng rng(Rng::derive(c.task.seed, "switch-table"));
      std::vector<synthgen::SwitchCoeff> table;
      while (static_cast<int>(table.size()) < c.task.n_pairs) {
        synthgen::SwitchCoeff cand{
            static_cast<int>(table.size()),
            rng.uniform(c.task.coeff_range.low, c.task.coeff_range.high),
            rng.uniform(c.task.coeff_range.low, c.task.coeff_range.high)};
        bool dup = false;
        for (const auto& e : table) {
          dup = dup || (e.alpha == cand.alpha && e.beta == cand.beta);
        }
        if (!dup) table.push_back(cand);
      }
      TaskSpec spec;
      spec.family = Family::switch_;
      spec.coefficient_table = std::move(table);
      spec.input_ranges = ranges(2);
      spec.n_train = c.task.n_per_pair;
      spec.n_test = c.task.n_test_per_pair;
      spec.noise_sigma = c.task.noise_sigma;
      spec.seed = Rng::derive(c.task.seed, "switch-data");
      out.push_back({spec, synthgen::generate(spec)});
      break;
    }
    case Experiment::intermediary:
    case Experiment::input_copy: {
      TaskSpec spec;
      spec.family = Family::compound;
      spec.input_ranges = ranges(3);
      spec.n_train = c.task.n_train;
      spec.n_test = c.task.n_test;
      spec.noise_sigma = c.task.noise_sigma;
      spec.seed = Rng::derive(c.task.seed, "compound-data");
      out.push_back({spec, synthgen::generate(spec)});
      break;
    }
    case Experiment::answer_probe:
    case Experiment::logit_lens: {
      TaskSpec spec;
      spec.family = c.family;
      spec.noise_sigma = c.task.noise_sigma;
      spec.seed = Rng::derive(c.task.seed, "answer-data");
      if (c.family == Family::switch_) {
        throw ConfigError("answer/lens experiments support linear and compound tasks");
      }
      if (c.family == Family::linear) {
        Rng rng(Rng::derive(c.task.seed, "answer-coeffs"));
        spec.coefficient_table = {synthgen::SwitchCoeff{
            0, rng.uniform(c.task.coeff_range.low, c.task.coeff_range.high),
            rng.uniform(c.task.coeff_range.low, c.task.coeff_range.high)}};
        spec.input_ranges = ranges(2);
      } else {
        spec.input_ranges = ranges(3);
      }
      spec.n_train = c.task.n_train;
      spec.n_test = c.task.n_test;
      out.push_back({spec, synthgen::generate(spec)});
      break;
    }
  }
  return out;
}

std::vector<int> resolve_layers(const ExperimentConfig& c, int layer_count) {
  std::vector<int> layers = c.layers;
  if (layers.empty()) {
    for (int l = 0; l <= layer_count; ++l) layers.push_back(l);
  }
  for (int l : layers) {
    if (l < 0 || l > layer_count) {
      throw SelectionError("configured layer " + std::to_string(l) +
                           " outside [0, " + std::to_string(layer_count) + "]");
    }
  }
  return layers;
}

struct Cell {
  int layer = 0;
  int depth = 0;
  std::uint64_t seed = 0;
  TargetName target = TargetName::alpha;
  std::string key;  // digest hex, cell file name
};

std::string cell_key(std::uint64_t config_digest, const Cell& cell) {
  Fnv1a h;
  h.update_u64(config_digest);
  h.update_i64(cell.layer);
  h.update_i64(cell.depth);
  h.update_u64(cell.seed);
  h.update_str(probekit::target_name_str(cell.target));
  return hex64(h.digest());
}

/// Minimal bounded worker pool with deterministic result placement.
void parallel_for(int n_workers, int n_items, const std::function<void(int)>& fn) {
  if (n_workers <= 1 || n_items <= 1) {
    for (int i = 0; i < n_items; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  const int workers = std::min(n_workers, n_items);
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n_items) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

struct CellOutcome {
  Cell cell;
  bool ok = false;
  bool skipped = false;
  std::string error;
  probekit::ProbeResult result;
};

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

}  // namespace

RunOutcome run(const ExperimentConfig& config) {
  config.validate();
  const std::filesystem::path root = resolve_data_root(config.data_root);
  const std::filesystem::path run_dir = root / config.run_id;
  std::filesystem::create_directories(run_dir);

  // A resumed run must carry the same content digest.
  const std::filesystem::path cfg_path = run_dir / "resolved_config.json";
  const std::string cfg_text = config_to_json_text(config, true);
  if (std::filesystem::exists(cfg_path)) {
    const ExperimentConfig prev = config_from_json_text(read_text_file(cfg_path));
    if (prev.content_digest() != config.content_digest()) {
      throw ConfigError("run directory " + run_dir.string() +
                        " was created with a different configuration");
    }
  } else {
    write_file_atomic(cfg_path, cfg_text);
  }

  adapter::ProbeableModel model = adapter::ProbeableModel::open(config.model_selector);
  const std::vector<int> layers = resolve_layers(config, model.layer_count());
  const actstore::TokenSel token_sel = token_sel_for(config.experiment);
  const std::uint64_t config_digest = config.content_digest();

  // Generate (or reload) datasets; persist them for provenance.
  std::vector<FittedDataset> datasets = generate_datasets(config);
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const auto dir = run_dir / "datasets" / ("d" + std::to_string(i));
    if (!std::filesystem::exists(dir / "data.csv")) {
      synthgen::save_dataset(dir, datasets[i].spec, datasets[i].data);
    }
  }

  RunOutcome outcome;
  outcome.run_dir = run_dir;

  // Fit and capture into the activation store.
  std::vector<adapter::FitHandle> handles;
  handles.reserve(datasets.size());
  {
    actstore::RunWriter writer(root, config.run_id, model.descriptor_json());
    for (const FittedDataset& fd : datasets) {
      adapter::FitHandle handle = model.fit_context(fd.data);
      writer.record_dataset(handle.context_digest(), synthgen::spec_digest(fd.spec));
      bool all_present = true;
      for (int layer : layers) {
        all_present = all_present &&
                      writer.contains(actstore::record_key(handle.context_digest(),
                                                           layer, token_sel));
      }
      if (!all_present) {
        auto records = model.capture(handle, adapter::LayerSelection::list(layers),
                                     token_sel);
        for (auto& rec : records) {
          rec.run_id = config.run_id;
          writer.put(rec);
        }
      }
      handles.push_back(std::move(handle));
    }
    writer.finalize();
  }

  actstore::RunReader reader(root, config.run_id);
  const std::filesystem::path cells_dir = run_dir / "results" / "cells";
  std::filesystem::create_directories(cells_dir);

  ordered_json summary;
  summary["experiment"] = experiment_name(config.experiment);
  summary["model"] = json::parse(model.descriptor_json());
  summary["config"] = config_to_json(config, false);
  {
    std::vector<std::string> fit_hexes;
    for (const auto& h : handles) fit_hexes.push_back(hex64(h.context_digest()));
    std::sort(fit_hexes.begin(), fit_hexes.end());
    summary["fit_digests"] = fit_hexes;
  }

  if (config.experiment == Experiment::logit_lens) {
    const std::filesystem::path lens_path = run_dir / "results" / "lens.json";
    lens::LensResult lr;
    if (std::filesystem::exists(lens_path)) {
      lr = lens::lens_from_json(read_text_file(lens_path));
      outcome.cells_skipped += 1;
    } else {
      lr = lens::run_lens(model, handles.front(), config.lens_tau);
      write_file_atomic(lens_path, lens_to_json(lr));
      outcome.cells_completed += 1;
    }
    outcome.cells_total = 1;
    ordered_json grid = ordered_json::array();
    for (std::size_t i = 0; i < lr.layers.size(); ++i) {
      ordered_json g;
      g["layer"] = lr.layers[i];
      g["depth"] = 0;
      g["seed"] = 0;
      g["status"] = "ok";
      g["r2_test"] = lr.r2[i];
      g["mse_test"] = lr.mse[i];
      grid.push_back(std::move(g));
    }
    summary["grid"] = std::move(grid);
    ordered_json by_layer = ordered_json::array();
    for (std::size_t i = 0; i < lr.layers.size(); ++i) {
      ordered_json e;
      e["target"] = "lens";
      e["layer"] = lr.layers[i];
      e["mse_mean"] = lr.mse[i];
      e["r2_mean"] = lr.r2[i];
      e["converged"] = lr.layers[i] >= lr.convergence_layer;
      by_layer.push_back(std::move(e));
    }
    summary["curves"] = ordered_json::object();
    summary["curves"]["by_layer"] = std::move(by_layer);
    summary["curves"]["by_depth"] = ordered_json::array();
    summary["best"] = ordered_json::object();
    summary["best"]["lens"] = {{"convergence_layer", lr.convergence_layer},
                               {"final_mse", lr.mse.back()},
                               {"final_r2", lr.r2.back()},
                               {"tau", lr.tau}};
    write_file_atomic(run_dir / "summary.json", summary.dump(2) + "\n");
    return outcome;
  }

  // Build probing datasets per (layer, target) group, then run the grid.
  const std::vector<TargetName> targets = targets_for(config.experiment);
  struct Group {
    int layer;
    TargetName target;
    std::vector<Cell> cells;
  };
  std::vector<Group> groups;
  for (int layer : layers) {
    for (TargetName target : targets) {
      Group g{layer, target, {}};
      for (int depth : config.depths) {
        for (std::uint64_t seed : config.seeds) {
          Cell cell{layer, depth, seed, target, ""};
          cell.key = cell_key(config_digest, cell);
          g.cells.push_back(std::move(cell));
        }
      }
      groups.push_back(std::move(g));
    }
  }

  std::vector<std::vector<CellOutcome>> group_outcomes(groups.size());
  std::mutex io_mu;

  const int n_workers = config.n_workers > 0
                            ? config.n_workers
                            : std::max(1u, std::thread::hardware_concurrency());

  parallel_for(n_workers, static_cast<int>(groups.size()), [&](int gi) {
    const Group& group = groups[static_cast<std::size_t>(gi)];
    std::vector<CellOutcome>& outs = group_outcomes[static_cast<std::size_t>(gi)];
    outs.resize(group.cells.size());

    probekit::ProbingDataset pd;
    std::string build_error;
    try {
      if (config.experiment == Experiment::coeff_crossfit) {
        std::vector<actstore::ActivationRecord> records;
        std::vector<TaskSpec> specs;
        for (std::size_t i = 0; i < handles.size(); ++i) {
          records.push_back(reader.get(actstore::record_key(
              handles[i].context_digest(), group.layer, token_sel)));
          specs.push_back(datasets[i].spec);
        }
        pd = probekit::build_crossfit(records, specs, group.target);
      } else {
        const actstore::ActivationRecord record = reader.get(actstore::record_key(
            handles.front().context_digest(), group.layer, token_sel));
        if (config.experiment == Experiment::coeff_switch) {
          pd = probekit::build_withinfit(record, datasets.front().data,
                                         datasets.front().spec, group.target);
        } else {
          pd = probekit::build_pertoken_target(record, datasets.front().data,
                                               group.target);
        }
      }
    } catch (const std::exception& e) {
      build_error = e.what();
    }

    for (std::size_t ci = 0; ci < group.cells.size(); ++ci) {
      const Cell& cell = group.cells[ci];
      CellOutcome& out = outs[ci];
      out.cell = cell;
      const std::filesystem::path cell_path = cells_dir / (cell.key + ".json");
      try {
        if (std::filesystem::exists(cell_path)) {
          out.result = probekit::result_from_json(read_text_file(cell_path));
          out.ok = true;
          out.skipped = true;
          continue;
        }
        if (!build_error.empty()) throw BuildError(build_error);
        probekit::ProbeSpec spec;
        spec.depth = cell.depth;
        spec.width = config.probe.width;
        spec.ridge_lambda = config.probe.ridge_lambda;
        spec.epochs = config.probe.epochs;
        spec.patience = config.probe.patience;
        spec.seed = Rng::derive(config_digest,
                                {static_cast<std::uint64_t>(cell.layer),
                                 static_cast<std::uint64_t>(cell.depth), cell.seed});
        out.result = probekit::fit_probe(pd, spec, cell.seed);
        out.ok = true;
        std::lock_guard<std::mutex> lock(io_mu);
        write_file_atomic(cell_path, probekit::to_ndjson_line(out.result) + "\n");
      } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
      }
    }
  });

  // Assemble NDJSON results and the summary in deterministic grid order.
  std::string ndjson;
  ordered_json grid = ordered_json::array();
  std::map<std::string, std::map<int, std::vector<double>>> r2_by_layer, mse_by_layer;

  int completed = 0, errored = 0, skipped = 0, total = 0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    for (const CellOutcome& out : group_outcomes[gi]) {
      ++total;
      ordered_json g;
      g["layer"] = out.cell.layer;
      g["depth"] = out.cell.depth;
      g["seed"] = out.cell.seed;
      g["target"] = probekit::target_name_str(out.cell.target);
      if (out.ok) {
        out.skipped ? ++skipped : ++completed;
        g["status"] = "ok";
        g["r2_test"] = out.result.r2_test;
        g["mse_test"] = out.result.mse_test;
        ndjson += probekit::to_ndjson_line(out.result);
        ndjson += "\n";
        if (out.cell.depth == 0) {
          const std::string tname = probekit::target_name_str(out.cell.target);
          r2_by_layer[tname][out.cell.layer].push_back(out.result.r2_test);
          mse_by_layer[tname][out.cell.layer].push_back(out.result.mse_test);
        }
      } else {
        ++errored;
        g["status"] = "error: " + out.error;
        g["r2_test"] = nullptr;
        g["mse_test"] = nullptr;
      }
      grid.push_back(std::move(g));
    }
  }
  write_file_atomic(run_dir / "results" / "probes.ndjson", ndjson);
  summary["grid"] = std::move(grid);

  // Per-layer curves at depth 0 (mean with min/max range over seeds).
  ordered_json by_layer = ordered_json::array();
  ordered_json best = ordered_json::object();
  for (TargetName t : targets) {
    const std::string tname = probekit::target_name_str(t);
    double best_r2 = -std::numeric_limits<double>::infinity();
    int best_layer = -1;
    for (int layer : layers) {
      auto it = r2_by_layer[tname].find(layer);
      if (it == r2_by_layer[tname].end() || it->second.empty()) continue;
      const double mean_r2 = mean_of(it->second);
      const double mean_mse = mean_of(mse_by_layer[tname][layer]);
      ordered_json e;
      e["target"] = tname;
      e["layer"] = layer;
      e["depth_fraction"] = model.layer_count() > 0
                                ? static_cast<double>(layer) / model.layer_count()
                                : 0.0;
      e["r2_mean"] = mean_r2;
      e["r2_min"] = *std::min_element(it->second.begin(), it->second.end());
      e["r2_max"] = *std::max_element(it->second.begin(), it->second.end());
      e["mse_mean"] = mean_mse;
      by_layer.push_back(std::move(e));
      if (mean_r2 > best_r2) {
        best_r2 = mean_r2;
        best_layer = layer;
      }
    }
    if (best_layer >= 0) {
      best[tname] = {{"layer", best_layer}, {"r2_test", best_r2}};
    }
  }

  // Depth curves at each target's best layer.
  ordered_json by_depth = ordered_json::array();
  for (TargetName t : targets) {
    const std::string tname = probekit::target_name_str(t);
    if (!best.contains(tname)) continue;
    const int layer = best[tname]["layer"].get<int>();
    for (int depth : config.depths) {
      std::vector<double> r2s, mses;
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        if (groups[gi].layer != layer || groups[gi].target != t) continue;
        for (const CellOutcome& out : group_outcomes[gi]) {
          if (out.ok && out.cell.depth == depth) {
            r2s.push_back(out.result.r2_test);
            mses.push_back(out.result.mse_test);
          }
        }
      }
      if (r2s.empty()) continue;
      ordered_json e;
      e["target"] = tname;
      e["layer"] = layer;
      e["depth"] = depth;
      e["r2_mean"] = mean_of(r2s);
      e["r2_min"] = *std::min_element(r2s.begin(), r2s.end());
      e["r2_max"] = *std::max_element(r2s.begin(), r2s.end());
      e["mse_mean"] = mean_of(mses);
      by_depth.push_back(std::move(e));
    }
  }

  summary["curves"] = ordered_json::object();
  summary["curves"]["by_layer"] = std::move(by_layer);
  summary["curves"]["by_depth"] = std::move(by_depth);
  summary["best"] = std::move(best);
  write_file_atomic(run_dir / "summary.json", summary.dump(2) + "\n");

  outcome.cells_total = total;
  outcome.cells_completed = completed;
  outcome.cells_errored = errored;
  outcome.cells_skipped = skipped;
  return outcome;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

CompareReport compare_answer_vs_lens(const std::filesystem::path& answer_run_dir,
                                     const std::filesystem::path& lens_run_dir) {
  const json answer_summary =
      json::parse(read_text_file(answer_run_dir / "summary.json"));
  if (answer_summary.at("experiment").get<std::string>() != "answer_probe") {
    throw ComparisonError("first run is not an answer_probe run");
  }
  const lens::LensResult lr =
      lens::lens_from_json(read_text_file(lens_run_dir / "results" / "lens.json"));

  const auto answer_fits =
      answer_summary.at("fit_digests").get<std::vector<std::string>>();
  if (answer_fits.size() != 1 || parse_hex64(answer_fits.front()) != lr.fit_digest) {
    throw ComparisonError("answer-probe and lens runs were made on different fits");
  }

  CompareReport report;
  report.fit_digest = lr.fit_digest;

  // Earliest layer whose mean depth-0 answer-probe R2 clears the threshold.
  std::map<int, double> r2_at_layer;
  for (const json& e : answer_summary.at("curves").at("by_layer")) {
    if (e.at("target").get<std::string>() != "answer") continue;
    r2_at_layer[e.at("layer").get<int>()] = e.at("r2_mean").get<double>();
  }
  for (const auto& [layer, r2] : r2_at_layer) {
    if (r2 >= report.threshold) {
      report.probe_layer = layer;
      break;
    }
  }

  // The lens "converges to the true answer" only if the final layer itself
  // decodes accurately; otherwise the relative criterion is vacuous.
  if (!lr.r2.empty() && lr.r2.back() >= report.threshold) {
    report.lens_layer = lr.convergence_layer;
  }
  if (report.probe_layer && report.lens_layer) {
    report.gap = *report.lens_layer - *report.probe_layer;
  }
  return report;
}

std::string compare_to_json(const CompareReport& r) {
  ordered_json j;
  j["fit_digest"] = hex64(r.fit_digest);
  j["threshold"] = r.threshold;
  j["answer_probe_layer"] = r.probe_layer ? ordered_json(*r.probe_layer) : ordered_json(nullptr);
  j["lens_convergence_layer"] =
      r.lens_layer ? ordered_json(*r.lens_layer) : ordered_json(nullptr);
  j["gap"] = r.gap ? ordered_json(*r.gap) : ordered_json(nullptr);
  j["note"] = (!r.probe_layer && !r.lens_layer)
                  ? "neither threshold reached; both layers undefined"
                  : (r.probe_layer && r.lens_layer
                         ? "probe-accessible before native alignment when gap > 0"
                         : "one side undefined");
  return j.dump(2) + "\n";
}

}  // namespace tabprobe::expharness
