#include "tabprobe/lens.hpp"

#include <cmath>

#include "json.hpp"

namespace tabprobe::lens {

using synthgen::Split;

namespace {

struct Metrics {
  double mse = 0.0, r2 = 0.0;
};

Metrics metrics_against(const std::vector<double>& pred, const std::vector<double>& truth) {
  Metrics m;
  double sse = 0.0, mean = 0.0;
  for (double z : truth) mean += z;
  mean /= static_cast<double>(truth.size());
  double sst = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = pred[i] - truth[i];
    sse += d * d;
    const double c = truth[i] - mean;
    sst += c * c;
  }
  m.mse = sse / static_cast<double>(truth.size());
  m.r2 = sst > 0.0 ? 1.0 - sse / sst : 0.0;
  return m;
}

}  // namespace

LensResult run_lens(const adapter::ProbeableModel& model,
                    const adapter::FitHandle& handle, double tau) {
  if (tau < 1.0) throw ConfigError("lens tau must be >= 1");
  model.output_head();  // capability gate

  const auto records = model.capture(handle, adapter::LayerSelection::all(),
                                     actstore::TokenSel::answer_only);

  const synthgen::TabularDataset& data = handle.dataset();
  std::vector<double> truth;
  for (int r = 0; r < data.n_rows; ++r) {
    if (data.split[static_cast<std::size_t>(r)] == Split::test) {
      truth.push_back(data.z[static_cast<std::size_t>(r)]);
    }
  }

  LensResult out;
  out.fit_digest = handle.context_digest();
  out.tau = tau;
  for (const auto& rec : records) {
    out.layers.push_back(rec.layer);
    std::vector<double> decoded =
        model.decode_states(handle, rec.values.data(), rec.n, rec.k, true);
    const Metrics m = metrics_against(decoded, truth);
    out.mse.push_back(m.mse);
    out.r2.push_back(m.r2);
    const std::vector<double> raw =
        model.decode_states(handle, rec.values.data(), rec.n, rec.k, false);
    const Metrics mr = metrics_against(raw, truth);
    out.mse_raw.push_back(mr.mse);
    out.r2_raw.push_back(mr.r2);
    out.decoded.push_back(std::move(decoded));
  }

  const double final_mse = out.mse.back();
  int conv = static_cast<int>(out.mse.size()) - 1;
  while (conv > 0 && out.mse[static_cast<std::size_t>(conv - 1)] <= tau * final_mse) {
    --conv;
  }
  out.convergence_layer = out.layers[static_cast<std::size_t>(conv)];
  return out;
}

std::string lens_to_json(const LensResult& r) {
  nlohmann::ordered_json j;
  j["fit_digest"] = hex64(r.fit_digest);
  j["layers"] = r.layers;
  j["mse_per_layer"] = r.mse;
  j["r2_per_layer"] = r.r2;
  j["convergence_layer"] = r.convergence_layer;
  j["tau"] = r.tau;
  j["normalization_variant"] = r.normalization_variant;
  j["mse_per_layer_raw"] = r.mse_raw;
  j["r2_per_layer_raw"] = r.r2_raw;
  return j.dump(2) + "\n";
}

LensResult lens_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid lens JSON: ") + e.what());
  }
  LensResult r;
  r.fit_digest = parse_hex64(j.at("fit_digest").get<std::string>());
  r.layers = j.at("layers").get<std::vector<int>>();
  r.mse = j.at("mse_per_layer").get<std::vector<double>>();
  r.r2 = j.at("r2_per_layer").get<std::vector<double>>();
  r.convergence_layer = j.at("convergence_layer").get<int>();
  r.tau = j.at("tau").get<double>();
  r.normalization_variant = j.at("normalization_variant").get<std::string>();
  r.mse_raw = j.value("mse_per_layer_raw", std::vector<double>{});
  r.r2_raw = j.value("r2_per_layer_raw", std::vector<double>{});
  return r;
}

}  // namespace tabprobe::lens
