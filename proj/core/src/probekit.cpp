#include "tabprobe/probekit.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace tabprobe::probekit {

using synthgen::Split;
using synthgen::TabularDataset;
using synthgen::TaskSpec;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecXd = Eigen::VectorXd;

std::string target_name_str(TargetName t) {
  switch (t) {
    case TargetName::alpha: return "alpha";
    case TargetName::beta: return "beta";
    case TargetName::answer: return "answer";
    case TargetName::intermediary: return "intermediary";
    case TargetName::input_a: return "input_a";
    case TargetName::input_b: return "input_b";
    case TargetName::input_c: return "input_c";
    case TargetName::input_ab: return "input_ab";
  }
  throw ConfigError("unknown target name enum value");
}

TargetName target_from_str(std::string_view s) {
  for (TargetName t : {TargetName::alpha, TargetName::beta, TargetName::answer,
                       TargetName::intermediary, TargetName::input_a, TargetName::input_b,
                       TargetName::input_c, TargetName::input_ab}) {
    if (target_name_str(t) == s) return t;
  }
  throw ConfigError("unknown target name: " + std::string(s));
}

void ProbeSpec::validate() const {
  if (depth < 0) throw ConfigError("probe depth must be >= 0");
  if (width < 1) throw ConfigError("probe width must be >= 1");
  if (!(ridge_lambda > 0.0)) throw ConfigError("ridge lambda must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

std::uint64_t spec_digest(const ProbeSpec& spec) {
  Fnv1a h;
  h.update_str("probespec.v1");
  h.update_i64(spec.depth);
  h.update_i64(spec.width);
  h.update_f64(spec.ridge_lambda);
  h.update_i64(spec.epochs);
  h.update_i64(spec.patience);
  h.update_u64(spec.seed);
  return h.digest();
}

namespace {

void check_finite(const ProbingDataset& d, const char* what) {
  for (double v : d.rows) {
    if (!std::isfinite(v)) throw BuildError(std::string(what) + ": non-finite activation value");
  }
  for (double v : d.targets) {
    if (!std::isfinite(v)) throw BuildError(std::string(what) + ": non-finite target value");
  }
}

void require_test_rows(const actstore::ActivationRecord& rec, const char* what) {
  for (const std::string& role : rec.row_roles) {
    if (role != "test") {
      throw BuildError(std::string(what) +
                       ": probing uses held-out test rows only, record contains a '" +
                       role + "' row");
    }
  }
}

std::vector<int> dataset_test_rows(const TabularDataset& data) {
  std::vector<int> rows;
  for (int r = 0; r < data.n_rows; ++r) {
    if (data.split[static_cast<std::size_t>(r)] == Split::test) rows.push_back(r);
  }
  return rows;
}

double coeff_for(const TaskSpec& spec, int u, TargetName target) {
  const auto& table = spec.coefficient_table;
  if (u < 0 || u >= static_cast<int>(table.size())) {
    throw BuildError("switch value " + std::to_string(u) + " outside coefficient table");
  }
  return target == TargetName::alpha ? table[static_cast<std::size_t>(u)].alpha
                                     : table[static_cast<std::size_t>(u)].beta;
}

}  // namespace

ProbingDataset build_crossfit(const std::vector<actstore::ActivationRecord>& records,
                              const std::vector<TaskSpec>& specs, TargetName target) {
  if (target != TargetName::alpha && target != TargetName::beta) {
    throw BuildError("cross-fit probing targets alpha or beta");
  }
  if (records.size() < 10) {
    throw BuildError("cross-fit probing requires >= 10 fits, got " +
                     std::to_string(records.size()));
  }
  if (records.size() != specs.size()) {
    throw BuildError("records and task specs must align one-to-one");
  }
  const actstore::ActivationRecord& first = records.front();
  ProbingDataset out;
  out.m = static_cast<int>(records.size());
  out.p = first.n * first.t * first.k;
  out.rows.reserve(static_cast<std::size_t>(out.m) * out.p);
  out.targets.reserve(static_cast<std::size_t>(out.m));
  out.target = target;
  out.prov.layer = first.layer;
  out.prov.token_sel = actstore::token_sel_name(first.token_sel);
  out.prov.flatten_order = "sample,token,channel";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.n != first.n || rec.t != first.t || rec.k != first.k) {
      throw BuildError("cross-fit records disagree on activation shape");
    }
    if (rec.layer != first.layer) {
      throw BuildError("cross-fit records span multiple layers");
    }
    if (specs[i].family != synthgen::Family::linear) {
      throw BuildError("cross-fit probing expects linear-family task specs");
    }
    require_test_rows(rec, "build_crossfit");
    for (float v : rec.values) out.rows.push_back(static_cast<double>(v));
    const auto& c = specs[i].coefficient_table.front();
    out.targets.push_back(target == TargetName::alpha ? c.alpha : c.beta);
    out.prov.fit_digests.push_back(rec.fit_digest);
  }
  check_finite(out, "build_crossfit");
  return out;
}

ProbingDataset build_withinfit(const actstore::ActivationRecord& record,
                               const TabularDataset& data, const TaskSpec& spec,
                               TargetName target) {
  if (target != TargetName::alpha && target != TargetName::beta) {
    throw BuildError("within-fit probing targets alpha or beta");
  }
  const int sw = data.switch_column();
  if (sw < 0 || spec.family != synthgen::Family::switch_) {
    throw SchemaError("within-fit probing requires a switch column");
  }
  if (record.token_sel != actstore::TokenSel::all) {
    throw BuildError("within-fit probing needs all-token records");
  }
  if (record.t != data.n_features + 1) {
    throw BuildError("record token count does not match dataset schema");
  }
  require_test_rows(record, "build_withinfit");
  const std::vector<int> test_rows = dataset_test_rows(data);
  if (record.n != static_cast<int>(test_rows.size())) {
    throw BuildError("record row count does not match dataset test rows");
  }

  ProbingDataset out;
  out.m = record.n;
  out.p = (record.t - 1) * record.k;  // switch token excluded
  out.rows.reserve(static_cast<std::size_t>(out.m) * out.p);
  out.targets.reserve(static_cast<std::size_t>(out.m));
  out.target = target;
  out.prov.layer = record.layer;
  out.prov.token_sel = "all_minus_switch";
  out.prov.flatten_order = "token,channel";
  out.prov.fit_digests = {record.fit_digest};
  for (int i = 0; i < record.n; ++i) {
    for (int tok = 0; tok < record.t; ++tok) {
      if (tok == sw) continue;
      for (int c = 0; c < record.k; ++c) {
        out.rows.push_back(static_cast<double>(record.at(i, tok, c)));
      }
    }
    const int dataset_row = test_rows[static_cast<std::size_t>(i)];
    const int u = static_cast<int>(std::lround(data.at(dataset_row, sw)));
    out.targets.push_back(coeff_for(spec, u, target));
  }
  check_finite(out, "build_withinfit");
  return out;
}

ProbingDataset build_pertoken_target(const actstore::ActivationRecord& record,
                                     const TabularDataset& data, TargetName target) {
  require_test_rows(record, "build_pertoken_target");
  const std::vector<int> test_rows = dataset_test_rows(data);
  if (record.n != static_cast<int>(test_rows.size())) {
    throw BuildError("record row count does not match dataset test rows");
  }

  const auto target_value = [&](int dataset_row) -> double {
    switch (target) {
      case TargetName::answer:
        return data.z[static_cast<std::size_t>(dataset_row)];
      case TargetName::intermediary:
      case TargetName::input_ab:
        if (data.intermediaries.empty()) {
          throw BuildError("target " + target_name_str(target) +
                           " requires the compound family's intermediaries");
        }
        return data.intermediaries[static_cast<std::size_t>(dataset_row)];
      case TargetName::input_a:
      case TargetName::input_b:
      case TargetName::input_c: {
        const int col = target == TargetName::input_a ? 0
                        : target == TargetName::input_b ? 1
                                                        : 2;
        if (col >= data.n_features) {
          throw BuildError("target " + target_name_str(target) +
                           " needs input column " + std::to_string(col));
        }
        return data.at(dataset_row, col);
      }
      case TargetName::alpha:
      case TargetName::beta:
        throw BuildError("coefficient targets need build_crossfit or build_withinfit");
    }
    throw BuildError("unhandled target");
  };

  ProbingDataset out;
  out.m = record.n;
  out.p = record.t * record.k;
  out.rows.reserve(static_cast<std::size_t>(out.m) * out.p);
  out.targets.reserve(static_cast<std::size_t>(out.m));
  out.target = target;
  out.prov.layer = record.layer;
  out.prov.token_sel = actstore::token_sel_name(record.token_sel);
  out.prov.flatten_order = "token,channel";
  out.prov.fit_digests = {record.fit_digest};
  for (int i = 0; i < record.n; ++i) {
    for (int j = 0; j < record.t * record.k; ++j) {
      out.rows.push_back(static_cast<double>(
          record.values[static_cast<std::size_t>(i) * record.t * record.k + j]));
    }
    out.targets.push_back(target_value(test_rows[static_cast<std::size_t>(i)]));
  }
  check_finite(out, "build_pertoken_target");
  return out;
}

// ---------------------------------------------------------------------------
// Probe fitting.
// ---------------------------------------------------------------------------

namespace {

struct SplitIdx {
  std::vector<int> train, test;
};

SplitIdx make_split(int m, std::uint64_t split_seed) {
  std::vector<int> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(Rng::derive(split_seed, "probe-split"));
  rng.shuffle(idx);
  const int n_test = std::max(1, static_cast<int>(std::lround(m * 0.2)));
  SplitIdx s;
  s.test.assign(idx.begin(), idx.begin() + n_test);
  s.train.assign(idx.begin() + n_test, idx.end());
  return s;
}

struct Standardizer {
  VecXd mean, std;

  static Standardizer fit(const MatRM& x) {
    Standardizer s;
    s.mean = x.colwise().mean().transpose();
    VecXd var = ((x.rowwise() - s.mean.transpose()).array().square().colwise().sum() /
                 static_cast<double>(x.rows()))
                    .matrix()
                    .transpose();
    s.std = var.array().sqrt();
    for (Eigen::Index i = 0; i < s.std.size(); ++i) {
      if (s.std[i] < 1e-12) s.std[i] = 1.0;
    }
    return s;
  }

  MatRM apply(const MatRM& x) const {
    return (x.rowwise() - mean.transpose()).array().rowwise() /
           std.transpose().array();
  }
};

MatRM gather_rows(const ProbingDataset& d, const std::vector<int>& idx) {
  MatRM out(static_cast<Eigen::Index>(idx.size()), d.p);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (int c = 0; c < d.p; ++c) out(static_cast<Eigen::Index>(i), c) = d.at(idx[i], c);
  }
  return out;
}

VecXd gather_targets(const ProbingDataset& d, const std::vector<int>& idx) {
  VecXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = d.targets[static_cast<std::size_t>(idx[i])];
  }
  return out;
}

struct SplitMetrics {
  double r2 = 0.0, mse = 0.0;
};

SplitMetrics metrics_for(const VecXd& pred, const VecXd& truth) {
  SplitMetrics m;
  const double n = static_cast<double>(truth.size());
  m.mse = (pred - truth).squaredNorm() / n;
  const double mean = truth.mean();
  const double sst = (truth.array() - mean).square().sum();
  // R^2 = 1 - SSE/SST with SST on the evaluated split; 0 when SST == 0.
  m.r2 = sst > 0.0 ? 1.0 - (pred - truth).squaredNorm() / sst : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// MLP probe (double precision, rectified-linear hidden layers).
// ---------------------------------------------------------------------------

struct MlpProbe {
  std::vector<MatRM> w;  // layer l: (in x out)
  std::vector<VecXd> b;

  static MlpProbe init(int p, int width, int depth, std::uint64_t seed) {
    MlpProbe net;
    Rng rng(seed);
    int in = p;
    for (int l = 0; l <= depth; ++l) {
      const int out = l == depth ? 1 : width;
      MatRM wl(in, out);
      const double std = std::sqrt(2.0 / in);
      for (Eigen::Index i = 0; i < wl.size(); ++i) wl.data()[i] = rng.normal(0.0, std);
      net.w.push_back(std::move(wl));
      net.b.push_back(VecXd::Zero(out));
      in = out;
    }
    return net;
  }

  VecXd forward(const MatRM& x, std::vector<MatRM>* acts = nullptr) const {
    MatRM h = x;
    if (acts) acts->clear();
    for (std::size_t l = 0; l < w.size(); ++l) {
      if (acts) acts->push_back(h);
      h = (h * w[l]).rowwise() + b[l].transpose();
      if (l + 1 < w.size()) h = h.cwiseMax(0.0);
    }
    return h.col(0);
  }
};

double mlp_fit_and_eval(const ProbingDataset& data, const ProbeSpec& spec,
                        const SplitIdx& split, const Standardizer& stdz,
                        const MatRM& x_train, const VecXd& y_train,
                        const MatRM& x_test, const VecXd& y_test,
                        SplitMetrics* train_out, SplitMetrics* test_out) {
  // Normalize targets on the fit portion for conditioning; predictions are
  // mapped back before metrics.
  const int n_train = static_cast<int>(x_train.rows());
  const int n_val = std::max(1, n_train / 5);
  const int n_fit = n_train - n_val;
  if (n_fit < 1) throw SizeError("too few rows for an MLP probe fit");

  const MatRM x_fit = x_train.topRows(n_fit);
  const MatRM x_val = x_train.bottomRows(n_val);
  const VecXd y_fit = y_train.head(n_fit);
  const VecXd y_val = y_train.tail(n_val);

  const double y_mean = y_fit.mean();
  double y_std = std::sqrt((y_fit.array() - y_mean).square().sum() / n_fit);
  if (y_std < 1e-12) y_std = 1.0;
  const VecXd yn_fit = (y_fit.array() - y_mean) / y_std;
  const VecXd yn_val = (y_val.array() - y_mean) / y_std;

  MlpProbe net =
      MlpProbe::init(data.p, spec.width, spec.depth, Rng::derive(spec.seed, "mlp-init"));
  MlpProbe best = net;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  // Adam state.
  std::vector<MatRM> mw, vw;
  std::vector<VecXd> mb, vb;
  for (const auto& wl : net.w) {
    mw.push_back(MatRM::Zero(wl.rows(), wl.cols()));
    vw.push_back(MatRM::Zero(wl.rows(), wl.cols()));
  }
  for (const auto& bl : net.b) {
    mb.push_back(VecXd::Zero(bl.size()));
    vb.push_back(VecXd::Zero(bl.size()));
  }
  const double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long adam_t = 0;

  Rng shuffle_rng(Rng::derive(spec.seed, "mlp-shuffle"));
  std::vector<int> order(static_cast<std::size_t>(n_fit));
  std::iota(order.begin(), order.end(), 0);
  const int batch = std::min(64, n_fit);

  std::vector<MatRM> acts;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (int start = 0; start < n_fit; start += batch) {
      const int bsz = std::min(batch, n_fit - start);
      MatRM xb(bsz, data.p);
      VecXd yb(bsz);
      for (int i = 0; i < bsz; ++i) {
        xb.row(i) = x_fit.row(order[static_cast<std::size_t>(start + i)]);
        yb[i] = yn_fit[order[static_cast<std::size_t>(start + i)]];
      }
      const VecXd pred = net.forward(xb, &acts);
      VecXd delta = 2.0 * (pred - yb) / bsz;
      if (!std::isfinite(delta.squaredNorm())) {
        throw DivergenceError("MLP probe training diverged (non-finite loss)");
      }
      // Backward through the stack.
      MatRM grad_h = delta;
      ++adam_t;
      const double b1t = 1.0 - std::pow(beta1, static_cast<double>(adam_t));
      const double b2t = 1.0 - std::pow(beta2, static_cast<double>(adam_t));
      std::vector<MatRM> gw(net.w.size());
      std::vector<VecXd> gb(net.w.size());
      for (int l = static_cast<int>(net.w.size()) - 1; l >= 0; --l) {
        const MatRM& input = acts[static_cast<std::size_t>(l)];
        gw[static_cast<std::size_t>(l)] = input.transpose() * grad_h;
        gb[static_cast<std::size_t>(l)] = grad_h.colwise().sum().transpose();
        if (l > 0) {
          MatRM back = grad_h * net.w[static_cast<std::size_t>(l)].transpose();
          // ReLU mask from the post-activation input of this layer.
          grad_h = (input.array() > 0.0).cast<double>() * back.array();
        }
      }
      for (std::size_t l = 0; l < net.w.size(); ++l) {
        auto adam_update = [&](auto& param, auto& m, auto& v, const auto& g) {
          m = beta1 * m + (1.0 - beta1) * g;
          v = beta2 * v.array().matrix() + (1.0 - beta2) * g.array().square().matrix();
          param.array() -=
              lr * (m.array() / b1t) / ((v.array() / b2t).sqrt() + eps);
        };
        adam_update(net.w[l], mw[l], vw[l], gw[l]);
        adam_update(net.b[l], mb[l], vb[l], gb[l]);
      }
    }
    const VecXd val_pred = net.forward(x_val);
    const double val_mse = (val_pred - yn_val).squaredNorm() / n_val;
    if (!std::isfinite(val_mse)) {
      throw DivergenceError("MLP probe validation loss non-finite");
    }
    if (val_mse < best_val - 1e-12) {
      best_val = val_mse;
      best = net;
      bad_epochs = 0;
    } else if (++bad_epochs >= spec.patience) {
      break;
    }
  }

  const auto denorm = [&](const VecXd& yn) -> VecXd {
    return (yn.array() * y_std + y_mean).matrix();
  };
  *train_out = metrics_for(denorm(best.forward(x_train)), y_train);
  *test_out = metrics_for(denorm(best.forward(x_test)), y_test);
  (void)split;
  (void)stdz;
  return best_val;
}

}  // namespace

ProbeResult fit_probe(const ProbingDataset& data, const ProbeSpec& spec,
                      std::uint64_t split_seed, LinearProbeDetails* details) {
  spec.validate();
  if (data.m < 20) {
    throw SizeError("probing requires m >= 20 rows, got " + std::to_string(data.m));
  }
  if (data.m != static_cast<int>(data.targets.size()) ||
      static_cast<std::size_t>(data.m) * data.p != data.rows.size()) {
    throw BuildError("probing dataset shape metadata is inconsistent");
  }

  const SplitIdx split = make_split(data.m, split_seed);
  MatRM x_train_raw = gather_rows(data, split.train);
  MatRM x_test_raw = gather_rows(data, split.test);
  const VecXd y_train = gather_targets(data, split.train);
  const VecXd y_test = gather_targets(data, split.test);

  // Standardization statistics come from the train split only.
  const Standardizer stdz = Standardizer::fit(x_train_raw);
  const MatRM x_train = stdz.apply(x_train_raw);
  const MatRM x_test = stdz.apply(x_test_raw);

  ProbeResult result;
  result.spec_digest = spec_digest(spec);
  result.target = data.target;
  result.depth = spec.depth;
  result.split_seed = split_seed;
  result.prov = data.prov;

  SplitMetrics train_m, test_m;
  if (spec.depth == 0) {
    const double y_mean = y_train.mean();
    const VecXd y_centered = y_train.array() - y_mean;
    // Thin SVD solve of the ridge problem; the normal-equations oracle in the
    // test suite provides the independent route.
    Eigen::BDCSVD<MatRM> svd(x_train, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const VecXd s = svd.singularValues();
    VecXd shrink(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      shrink[i] = s[i] / (s[i] * s[i] + spec.ridge_lambda);
    }
    const VecXd coef =
        svd.matrixV() * (shrink.array() * (svd.matrixU().transpose() * y_centered).array()).matrix();
    const VecXd pred_train = (x_train * coef).array() + y_mean;
    const VecXd pred_test = (x_test * coef).array() + y_mean;
    train_m = metrics_for(pred_train, y_train);
    test_m = metrics_for(pred_test, y_test);
    if (details) {
      details->coef.assign(coef.data(), coef.data() + coef.size());
      details->intercept = y_mean;
      details->feat_mean.assign(stdz.mean.data(), stdz.mean.data() + stdz.mean.size());
      details->feat_std.assign(stdz.std.data(), stdz.std.data() + stdz.std.size());
      details->train_idx = split.train;
      details->test_idx = split.test;
    }
  } else {
    if (details) throw ConfigError("linear probe details only exist at depth 0");
    mlp_fit_and_eval(data, spec, split, stdz, x_train, y_train, x_test, y_test,
                     &train_m, &test_m);
  }

  result.r2_train = train_m.r2;
  result.r2_test = test_m.r2;
  result.mse_train = train_m.mse;
  result.mse_test = test_m.mse;
  return result;
}

std::vector<ProbeResult> complexity_sweep(const ProbingDataset& data,
                                          const ProbeSpec& base_spec,
                                          const std::vector<int>& depths,
                                          const std::vector<std::uint64_t>& seeds) {
  if (depths.empty() || depths.front() != 0 ||
      !std::is_sorted(depths.begin(), depths.end())) {
    throw ConfigError("complexity sweep depths must be sorted ascending and include 0");
  }
  if (seeds.empty()) throw ConfigError("complexity sweep needs at least one seed");
  std::vector<ProbeResult> out;
  out.reserve(depths.size() * seeds.size());
  for (int depth : depths) {
    for (std::uint64_t seed : seeds) {
      ProbeSpec spec = base_spec;
      spec.depth = depth;
      spec.seed = Rng::derive(base_spec.seed, {static_cast<std::uint64_t>(depth), seed});
      out.push_back(fit_probe(data, spec, seed));
    }
  }
  return out;
}

std::string to_ndjson_line(const ProbeResult& r) {
  nlohmann::ordered_json j;
  j["spec_digest"] = hex64(r.spec_digest);
  j["target_name"] = target_name_str(r.target);
  j["layer"] = r.prov.layer;
  j["depth"] = r.depth;
  j["split_seed"] = r.split_seed;
  j["r2_train"] = r.r2_train;
  j["r2_test"] = r.r2_test;
  j["mse_train"] = r.mse_train;
  j["mse_test"] = r.mse_test;
  nlohmann::ordered_json prov;
  prov["layer"] = r.prov.layer;
  prov["token_sel"] = r.prov.token_sel;
  prov["flatten_order"] = r.prov.flatten_order;
  auto digests = nlohmann::ordered_json::array();
  for (std::uint64_t d : r.prov.fit_digests) digests.push_back(hex64(d));
  prov["fit_digests"] = std::move(digests);
  j["provenance"] = std::move(prov);
  return j.dump();
}

ProbeResult result_from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid probe-result JSON: ") + e.what());
  }
  ProbeResult r;
  r.spec_digest = parse_hex64(j.at("spec_digest").get<std::string>());
  r.target = target_from_str(j.at("target_name").get<std::string>());
  r.depth = j.at("depth").get<int>();
  r.split_seed = j.at("split_seed").get<std::uint64_t>();
  r.r2_train = j.at("r2_train").get<double>();
  r.r2_test = j.at("r2_test").get<double>();
  r.mse_train = j.at("mse_train").get<double>();
  r.mse_test = j.at("mse_test").get<double>();
  const auto& prov = j.at("provenance");
  r.prov.layer = prov.at("layer").get<int>();
  r.prov.token_sel = prov.at("token_sel").get<std::string>();
  r.prov.flatten_order = prov.at("flatten_order").get<std::string>();
  for (const auto& d : prov.at("fit_digests")) {
    r.prov.fit_digests.push_back(parse_hex64(d.get<std::string>()));
  }
  return r;
}

}  // namespace tabprobe::probekit
