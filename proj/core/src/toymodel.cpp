#include "tabprobe/toymodel.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "json.hpp"

namespace tabprobe::toymodel {

using nlohmann::json;
using synthgen::Family;
using synthgen::Split;
using synthgen::TabularDataset;

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// All buffers that Eigen kernels read or write use Eigen-aligned storage, so
// GEMM code paths (and therefore float summation order) do not depend on
// where the allocator happened to place a std::vector.
using AVec = std::vector<float, Eigen::aligned_allocator<float>>;
using VecXf = Eigen::VectorXf;
using StrideRM = Eigen::OuterStride<>;
using MapM = Eigen::Map<MatRM, 0, StrideRM>;
using CMapM = Eigen::Map<const MatRM, 0, StrideRM>;

namespace {

constexpr float kLnEps = 1e-5f;
constexpr float kStdGuard = 1e-6f;

// ---------------------------------------------------------------------------
// Parameter layout: one flat float buffer, tensors registered in a canonical
// order so checkpoints, digests and Adam state all share the same indexing.
// ---------------------------------------------------------------------------

enum class InitKind {
  proj_in,    // N(0, 1/sqrt(rows)): input projections
  proj_out,   // N(0, depth_scale/sqrt(rows)): residual-writing projections
  embed_vec,  // N(0, 1/sqrt(cols)): embedding-style row vectors
  zeros,
  ones,
};

struct TensorInfo {
  std::string name;
  int rows = 0, cols = 0;
  std::size_t offset = 0;
  bool trainable = true;
  InitKind kind = InitKind::zeros;
};

struct BlockOffsets {
  std::size_t ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  std::size_t sa_wq, sa_wk, sa_wv, sa_wo, sa_bq, sa_bk, sa_bv, sa_bo;
  std::size_t fa_wq, fa_wk, fa_wv, fa_wo, fa_bq, fa_bk, fa_bv, fa_bo;
  std::size_t mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct Layout {
  std::size_t feat_w, feat_b, feat_perturb, label_w, label_b, dummy_label;
  std::vector<BlockOffsets> blocks;
  std::size_t lnf_g, lnf_b, head_w, head_b;
  std::size_t total = 0;
  std::vector<TensorInfo> tensors;

  std::size_t add(std::string name, int rows, int cols, InitKind kind,
                  bool trainable = true) {
    const std::size_t off = total;
    tensors.push_back({std::move(name), rows, cols, off, trainable, kind});
    total += static_cast<std::size_t>(rows) * cols;
    return off;
  }
};

Layout make_layout(const ModelConfig& cfg) {
  const int k = cfg.embed_dim;
  const int m = cfg.mlp_hidden();
  Layout L;
  L.feat_w = L.add("embed.feature_w", cfg.max_features, k, InitKind::embed_vec);
  L.feat_b = L.add("embed.feature_b", cfg.max_features, k, InitKind::zeros);
  L.feat_perturb =
      L.add("embed.feature_perturb", cfg.max_features, k, InitKind::embed_vec, false);
  L.label_w = L.add("embed.label_w", 1, k, InitKind::embed_vec);
  L.label_b = L.add("embed.label_b", 1, k, InitKind::zeros);
  L.dummy_label = L.add("embed.dummy_label", 1, k, InitKind::embed_vec);
  char name[64];
  for (int b = 0; b < cfg.n_layers; ++b) {
    BlockOffsets off{};
    const auto reg = [&](const char* suffix, int r, int c, InitKind kind) {
      std::snprintf(name, sizeof name, "block%02d.%s", b, suffix);
      return L.add(name, r, c, kind);
    };
    off.ln1_g = reg("ln_sample.gain", 1, k, InitKind::ones);
    off.ln1_b = reg("ln_sample.bias", 1, k, InitKind::zeros);
    off.sa_wq = reg("sample_attn.wq", k, k, InitKind::proj_in);
    off.sa_wk = reg("sample_attn.wk", k, k, InitKind::proj_in);
    off.sa_wv = reg("sample_attn.wv", k, k, InitKind::proj_in);
    off.sa_wo = reg("sample_attn.wo", k, k, InitKind::proj_out);
    off.sa_bq = reg("sample_attn.bq", 1, k, InitKind::zeros);
    off.sa_bk = reg("sample_attn.bk", 1, k, InitKind::zeros);
    off.sa_bv = reg("sample_attn.bv", 1, k, InitKind::zeros);
    off.sa_bo = reg("sample_attn.bo", 1, k, InitKind::zeros);
    off.ln2_g = reg("ln_feature.gain", 1, k, InitKind::ones);
    off.ln2_b = reg("ln_feature.bias", 1, k, InitKind::zeros);
    off.fa_wq = reg("feature_attn.wq", k, k, InitKind::proj_in);
    off.fa_wk = reg("feature_attn.wk", k, k, InitKind::proj_in);
    off.fa_wv = reg("feature_attn.wv", k, k, InitKind::proj_in);
    off.fa_wo = reg("feature_attn.wo", k, k, InitKind::proj_out);
    off.fa_bq = reg("feature_attn.bq", 1, k, InitKind::zeros);
    off.fa_bk = reg("feature_attn.bk", 1, k, InitKind::zeros);
    off.fa_bv = reg("feature_attn.bv", 1, k, InitKind::zeros);
    off.fa_bo = reg("feature_attn.bo", 1, k, InitKind::zeros);
    off.ln3_g = reg("ln_mlp.gain", 1, k, InitKind::ones);
    off.ln3_b = reg("ln_mlp.bias", 1, k, InitKind::zeros);
    off.mlp_w1 = reg("mlp.w1", k, m, InitKind::proj_in);
    off.mlp_b1 = reg("mlp.b1", 1, m, InitKind::zeros);
    off.mlp_w2 = reg("mlp.w2", m, k, InitKind::proj_out);
    off.mlp_b2 = reg("mlp.b2", 1, k, InitKind::zeros);
    L.blocks.push_back(off);
  }
  L.lnf_g = L.add("final_norm.gain", 1, k, InitKind::ones);
  L.lnf_b = L.add("final_norm.bias", 1, k, InitKind::zeros);
  L.head_w = L.add("head.w", 1, k, InitKind::embed_vec);
  L.head_b = L.add("head.b", 1, 1, InitKind::zeros);
  return L;
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation), vectorized; the tanh values are cached so the
// backward pass needs no transcendental calls.
// ---------------------------------------------------------------------------

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

}  // namespace

// ---------------------------------------------------------------------------
// Model::Impl
// ---------------------------------------------------------------------------

struct Model::Impl {
  ModelConfig cfg;
  Layout layout;
  AVec params;

  int k() const { return cfg.embed_dim; }
  int heads() const { return cfg.n_heads; }
  int head_dim() const { return cfg.embed_dim / cfg.n_heads; }
  int mlp_m() const { return cfg.mlp_hidden(); }

  Eigen::Map<MatRM> mat(AVec& buf, std::size_t off, int r, int c) const {
    return Eigen::Map<MatRM>(buf.data() + off, r, c);
  }
  Eigen::Map<const MatRM> cmat(const AVec& buf, std::size_t off, int r,
                               int c) const {
    return Eigen::Map<const MatRM>(buf.data() + off, r, c);
  }
  Eigen::Map<const Eigen::RowVectorXf> crow(const AVec& buf,
                                            std::size_t off, int c) const {
    return Eigen::Map<const Eigen::RowVectorXf>(buf.data() + off, c);
  }

  void init_parameters();
};

void Model::Impl::init_parameters() {
  params.assign(layout.total, 0.0f);
  const double depth_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  for (const TensorInfo& t : layout.tensors) {
    Rng rng(Rng::derive(cfg.seed, "init." + t.name));
    float* p = params.data() + t.offset;
    const std::size_t count = static_cast<std::size_t>(t.rows) * t.cols;
    double std = 0.0;
    switch (t.kind) {
      case InitKind::zeros:
        continue;
      case InitKind::ones:
        std::fill(p, p + count, 1.0f);
        continue;
      case InitKind::proj_in:
        std = 1.0 / std::sqrt(static_cast<double>(t.rows));
        break;
      case InitKind::proj_out:
        std = depth_scale / std::sqrt(static_cast<double>(t.rows));
        break;
      case InitKind::embed_vec:
        std = 1.0 / std::sqrt(static_cast<double>(t.cols));
        break;
    }
    for (std::size_t i = 0; i < count; ++i) {
      p[i] = static_cast<float>(rng.normal(0.0, std));
    }
  }
}

// ---------------------------------------------------------------------------
// Config validation and JSON round trip.
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  if (n_heads < 1 || embed_dim % n_heads != 0) {
    throw ConfigError("embed_dim must be divisible by n_heads");
  }
  if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be > 0");
  if (max_features < 1) throw ConfigError("max_features must be >= 1");
  if (context_cap < 2) throw ConfigError("context_cap must be >= 2");
}

namespace {

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["n_layers"] = cfg.n_layers;
  j["embed_dim"] = cfg.embed_dim;
  j["n_heads"] = cfg.n_heads;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["max_features"] = cfg.max_features;
  j["context_cap"] = cfg.context_cap;
  j["attention_order"] = cfg.attention_order == AttentionOrder::sample_then_feature
                             ? "sample_then_feature"
                             : "feature_then_sample";
  j["seed"] = cfg.seed;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.mlp_ratio = j.at("mlp_ratio").get<double>();
  cfg.max_features = j.at("max_features").get<int>();
  cfg.context_cap = j.at("context_cap").get<int>();
  const std::string order = j.at("attention_order").get<std::string>();
  if (order == "sample_then_feature") {
    cfg.attention_order = AttentionOrder::sample_then_feature;
  } else if (order == "feature_then_sample") {
    cfg.attention_order = AttentionOrder::feature_then_sample;
  } else {
    throw ConfigError("unknown attention_order: " + order);
  }
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Dataset preparation: internal row order is train rows first (dataset
// order), then test rows (dataset order). Features and labels are z-scored
// with train-split statistics.
// ---------------------------------------------------------------------------

struct Prepared {
  int n = 0, d = 0, T = 0, n_train = 0, n_test = 0;
  std::vector<int> dataset_row;  // internal row index -> dataset row index
  FitStats stats;
  AVec xnorm;  // n x d, internal order
  AVec znorm;  // n, internal order (test entries used by trainer)
};

FitStats compute_fit_stats(const TabularDataset& data) {
  FitStats st;
  const int d = data.n_features;
  st.feat_mean.assign(static_cast<std::size_t>(d), 0.0f);
  st.feat_std.assign(static_cast<std::size_t>(d), 1.0f);
  int n_train = 0;
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  double zmean = 0.0;
  for (int r = 0; r < data.n_rows; ++r) {
    if (data.split[static_cast<std::size_t>(r)] != Split::train) continue;
    ++n_train;
    for (int c = 0; c < d; ++c) mean[static_cast<std::size_t>(c)] += data.at(r, c);
    zmean += data.z[static_cast<std::size_t>(r)];
  }
  if (n_train == 0) throw ConfigError("dataset has no train rows");
  for (int c = 0; c < d; ++c) mean[static_cast<std::size_t>(c)] /= n_train;
  zmean /= n_train;
  std::vector<double> var(static_cast<std::size_t>(d), 0.0);
  double zvar = 0.0;
  for (int r = 0; r < data.n_rows; ++r) {
    if (data.split[static_cast<std::size_t>(r)] != Split::train) continue;
    for (int c = 0; c < d; ++c) {
      const double dv = data.at(r, c) - mean[static_cast<std::size_t>(c)];
      var[static_cast<std::size_t>(c)] += dv * dv;
    }
    const double dz = data.z[static_cast<std::size_t>(r)] - zmean;
    zvar += dz * dz;
  }
  for (int c = 0; c < d; ++c) {
    st.feat_mean[static_cast<std::size_t>(c)] = static_cast<float>(mean[static_cast<std::size_t>(c)]);
    const float sd = static_cast<float>(std::sqrt(var[static_cast<std::size_t>(c)] / n_train));
    st.feat_std[static_cast<std::size_t>(c)] = sd < kStdGuard ? 1.0f : sd;
  }
  st.z_mean = static_cast<float>(zmean);
  const float zsd = static_cast<float>(std::sqrt(zvar / n_train));
  st.z_std = zsd < kStdGuard ? 1.0f : zsd;
  return st;
}

Prepared prepare(const TabularDataset& data, const ModelConfig& cfg) {
  if (data.n_features > cfg.max_features) {
    throw CapacityError("dataset has " + std::to_string(data.n_features) +
                        " features; model caps at " + std::to_string(cfg.max_features));
  }
  if (data.n_rows > cfg.context_cap) {
    throw CapacityError("dataset has " + std::to_string(data.n_rows) +
                        " rows; model caps at " + std::to_string(cfg.context_cap));
  }
  Prepared p;
  p.d = data.n_features;
  p.T = p.d + 1;
  p.stats = compute_fit_stats(data);
  for (int r = 0; r < data.n_rows; ++r) {
    if (data.split[static_cast<std::size_t>(r)] == Split::train) p.dataset_row.push_back(r);
  }
  p.n_train = static_cast<int>(p.dataset_row.size());
  for (int r = 0; r < data.n_rows; ++r) {
    if (data.split[static_cast<std::size_t>(r)] == Split::test) p.dataset_row.push_back(r);
  }
  p.n = data.n_rows;
  p.n_test = p.n - p.n_train;
  if (p.n_test == 0) throw ConfigError("dataset has no test rows");
  p.xnorm.resize(static_cast<std::size_t>(p.n) * p.d);
  p.znorm.resize(static_cast<std::size_t>(p.n));
  for (int i = 0; i < p.n; ++i) {
    const int r = p.dataset_row[static_cast<std::size_t>(i)];
    for (int c = 0; c < p.d; ++c) {
      p.xnorm[static_cast<std::size_t>(i) * p.d + c] =
          (static_cast<float>(data.at(r, c)) - p.stats.feat_mean[static_cast<std::size_t>(c)]) /
          p.stats.feat_std[static_cast<std::size_t>(c)];
    }
    p.znorm[static_cast<std::size_t>(i)] =
        (static_cast<float>(data.z[static_cast<std::size_t>(r)]) - p.stats.z_mean) / p.stats.z_std;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward workspaces.
// ---------------------------------------------------------------------------

struct LnCache {
  MatRM xhat;  // (nT) x k
  MatRM xn;    // gain * xhat + bias
  VecXf sinv;  // nT
};

struct AttnCache {
  MatRM q, kk, v, oc;          // (nT) x k
  std::vector<MatRM> weights;  // sample: per token column (H*n x n_train)
                               // feature: per row (H*T x T)
};

struct BlockCache {
  LnCache ln1, ln2, ln3;
  AttnCache sample, feature;
  MatRM mlp_pre, mlp_tanh, mlp_hidden;  // (nT) x m
};

struct HeadCache {
  MatRM xhat;  // n_test x k
  VecXf sinv;  // n_test
  VecXf yhat;  // n_test (normalized predictions)
};

struct Workspace {
  MatRM S;  // (nT) x k residual stream
  std::vector<BlockCache> blocks;
  HeadCache head;
};

void layer_norm_forward(const MatRM& x, const Eigen::RowVectorXf& gain,
                        const Eigen::RowVectorXf& bias, LnCache& out) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index k = x.cols();
  out.xhat.resize(rows, k);
  out.xn.resize(rows, k);
  out.sinv.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto xr = x.row(r);
    const float mu = xr.mean();
    const float var = (xr.array() - mu).square().mean();
    const float sinv = 1.0f / std::sqrt(var + kLnEps);
    out.sinv[r] = sinv;
    auto xh = out.xhat.row(r);
    xh = (xr.array() - mu) * sinv;
    out.xn.row(r) = (xh.array() * gain.array()) + bias.array();
  }
}

/// dy -> dx (returned); accumulates parameter grads when requested.
MatRM layer_norm_backward(const MatRM& dy, const LnCache& cache,
                          const Eigen::RowVectorXf& gain, float* dgain,
                          float* dbias) {
  const Eigen::Index rows = dy.rows();
  const Eigen::Index k = dy.cols();
  if (dgain) {
    Eigen::Map<Eigen::RowVectorXf> dg(dgain, k);
    dg.array() += (dy.array() * cache.xhat.array()).colwise().sum();
    Eigen::Map<Eigen::RowVectorXf> db(dbias, k);
    db.array() += dy.array().colwise().sum();
  }
  MatRM dx(rows, k);
  const float inv_k = 1.0f / static_cast<float>(k);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto dyr = dy.row(r);
    const auto xh = cache.xhat.row(r);
    // dxhat = dy * gain, folded into running sums.
    const float m1 = (dyr.array() * gain.array()).sum() * inv_k;
    const float m2 = (dyr.array() * gain.array() * xh.array()).sum() * inv_k;
    dx.row(r) = ((dyr.array() * gain.array() - m1) - xh.array() * m2) * cache.sinv[r];
  }
  return dx;
}

/// In-place softmax over the rows of a contiguous row-major block. The exp
/// runs as one whole-matrix vectorized pass.
void softmax_rows(Eigen::Ref<MatRM> m) {
  const VecXf mx = m.rowwise().maxCoeff();
  m = (m.array().colwise() - mx.array()).exp();
  const VecXf sums = m.rowwise().sum();
  m.array().colwise() /= sums.array();
}

inline float dot_span(const float* a, const float* b, int n) {
  float acc = 0.0f;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline void axpy_span(float coeff, const float* x, float* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += coeff * x[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward pass. `ws` may cache intermediates for backward; `capture` may
// collect the residual stream after the embedding and after every block.
// ---------------------------------------------------------------------------

namespace {

struct ForwardOptions {
  bool keep_caches = false;             // fill Workspace caches for backward
  std::vector<MatRM>* capture = nullptr;  // residual stream per layer
};

void attention_sample(const Model::Impl& M, const BlockOffsets& off,
                      const Prepared& p, const LnCache& ln, MatRM& S,
                      AttnCache* cache) {
  const int k = M.k(), H = M.heads(), dh = M.head_dim(), T = p.T, n = p.n;
  const int ntr = p.n_train;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  MatRM Q = ln.xn * M.cmat(M.params, off.sa_wq, k, k);
  Q.array().rowwise() += M.crow(M.params, off.sa_bq, k).array();
  MatRM K = ln.xn * M.cmat(M.params, off.sa_wk, k, k);
  K.array().rowwise() += M.crow(M.params, off.sa_bk, k).array();
  MatRM V = ln.xn * M.cmat(M.params, off.sa_wv, k, k);
  V.array().rowwise() += M.crow(M.params, off.sa_bv, k).array();

  MatRM Oc(static_cast<Eigen::Index>(n) * T, k);
  MatRM scratch;
  if (cache) {
    cache->weights.assign(static_cast<std::size_t>(T), MatRM());
    for (int t = 0; t < T; ++t) {
      cache->weights[static_cast<std::size_t>(t)].resize(static_cast<Eigen::Index>(H) * n, ntr);
    }
  } else {
    scratch.resize(n, ntr);
  }
  for (int t = 0; t < T; ++t) {
    for (int h = 0; h < H; ++h) {
      CMapM Qth(Q.data() + static_cast<std::size_t>(t) * k + h * dh, n, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      CMapM Kth(K.data() + static_cast<std::size_t>(t) * k + h * dh, ntr, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      CMapM Vth(V.data() + static_cast<std::size_t>(t) * k + h * dh, ntr, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      auto A = cache ? cache->weights[static_cast<std::size_t>(t)].middleRows(
                           static_cast<Eigen::Index>(h) * n, n)
                     : scratch.middleRows(0, n);
      A.noalias() = (Qth * Kth.transpose()) * scale;
      softmax_rows(A);
      MapM Oth(Oc.data() + static_cast<std::size_t>(t) * k + h * dh, n, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      Oth.noalias() = A * Vth;
    }
  }
  MatRM U = Oc * M.cmat(M.params, off.sa_wo, k, k);
  U.array().rowwise() += M.crow(M.params, off.sa_bo, k).array();
  S += U;
  if (cache) {
    cache->q = std::move(Q);
    cache->kk = std::move(K);
    cache->v = std::move(V);
    cache->oc = std::move(Oc);
  }
}

void attention_feature(const Model::Impl& M, const BlockOffsets& off,
                       const Prepared& p, const LnCache& ln, MatRM& S,
                       AttnCache* cache) {
  const int k = M.k(), H = M.heads(), dh = M.head_dim(), T = p.T, n = p.n;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  MatRM Q = ln.xn * M.cmat(M.params, off.fa_wq, k, k);
  Q.array().rowwise() += M.crow(M.params, off.fa_bq, k).array();
  MatRM K = ln.xn * M.cmat(M.params, off.fa_wk, k, k);
  K.array().rowwise() += M.crow(M.params, off.fa_bk, k).array();
  MatRM V = ln.xn * M.cmat(M.params, off.fa_wv, k, k);
  V.array().rowwise() += M.crow(M.params, off.fa_bv, k).array();

  MatRM Oc(static_cast<Eigen::Index>(n) * T, k);
  if (cache) {
    cache->weights.assign(1, MatRM());
    cache->weights[0].resize(static_cast<Eigen::Index>(n) * H * T, T);
  }
  // Per-row attention over T <= max_features+1 tokens: hand-rolled loops,
  // since Eigen call overhead dwarfs the arithmetic at this size.
  std::vector<float> sscratch;
  if (!cache) sscratch.resize(static_cast<std::size_t>(T) * T);
  for (int i = 0; i < n; ++i) {
    const Eigen::Index base = static_cast<Eigen::Index>(i) * T;
    for (int h = 0; h < H; ++h) {
      const int col = h * dh;
      float* srow = cache ? cache->weights[0].data() +
                                (static_cast<std::size_t>(i) * H + h) * T * T
                          : sscratch.data();
      for (int a = 0; a < T; ++a) {
        const float* qa = Q.data() + (base + a) * k + col;
        float mx = -std::numeric_limits<float>::infinity();
        float* s = srow + a * T;
        for (int b = 0; b < T; ++b) {
          s[b] = scale * dot_span(qa, K.data() + (base + b) * k + col, dh);
          mx = std::max(mx, s[b]);
        }
        float sum = 0.0f;
        for (int b = 0; b < T; ++b) {
          s[b] = std::exp(s[b] - mx);
          sum += s[b];
        }
        const float inv = 1.0f / sum;
        float* out = Oc.data() + (base + a) * k + col;
        std::fill(out, out + dh, 0.0f);
        for (int b = 0; b < T; ++b) {
          s[b] *= inv;
          axpy_span(s[b], V.data() + (base + b) * k + col, out, dh);
        }
      }
    }
  }
  MatRM U = Oc * M.cmat(M.params, off.fa_wo, k, k);
  U.array().rowwise() += M.crow(M.params, off.fa_bo, k).array();
  S += U;
  if (cache) {
    cache->q = std::move(Q);
    cache->kk = std::move(K);
    cache->v = std::move(V);
    cache->oc = std::move(Oc);
  }
}

void mlp_forward(const Model::Impl& M, const BlockOffsets& off, const LnCache& ln,
                 MatRM& S, BlockCache* cache) {
  const int k = M.k(), m = M.mlp_m();
  MatRM pre = ln.xn * M.cmat(M.params, off.mlp_w1, k, m);
  pre.array().rowwise() += M.crow(M.params, off.mlp_b1, m).array();
  MatRM th = (kGeluC * (pre.array() + kGeluA * pre.array().cube())).tanh();
  MatRM hidden = 0.5f * pre.array() * (1.0f + th.array());
  S.noalias() += hidden * M.cmat(M.params, off.mlp_w2, m, k);
  S.array().rowwise() += M.crow(M.params, off.mlp_b2, k).array();
  if (cache) {
    cache->mlp_pre = std::move(pre);
    cache->mlp_tanh = std::move(th);
    cache->mlp_hidden = std::move(hidden);
  }
}

void embed_internal(const Model::Impl& M, const Prepared& p, MatRM& S) {
  const int k = M.k(), T = p.T, d = p.d, n = p.n;
  S.resize(static_cast<Eigen::Index>(n) * T, k);
  const auto fw = M.cmat(M.params, M.layout.feat_w, M.cfg.max_features, k);
  const auto fb = M.cmat(M.params, M.layout.feat_b, M.cfg.max_features, k);
  const auto fp = M.cmat(M.params, M.layout.feat_perturb, M.cfg.max_features, k);
  const auto lw = M.crow(M.params, M.layout.label_w, k);
  const auto lb = M.crow(M.params, M.layout.label_b, k);
  const auto dummy = M.crow(M.params, M.layout.dummy_label, k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      const float v = p.xnorm[static_cast<std::size_t>(i) * d + j];
      S.row(static_cast<Eigen::Index>(i) * T + j) = v * fw.row(j) + fb.row(j) + fp.row(j);
    }
    if (i < p.n_train) {
      S.row(static_cast<Eigen::Index>(i) * T + d) =
          p.znorm[static_cast<std::size_t>(i)] * lw + lb;
    } else {
      S.row(static_cast<Eigen::Index>(i) * T + d) = dummy;
    }
  }
}

void forward_internal(const Model::Impl& M, const Prepared& p, Workspace& ws,
                      const ForwardOptions& opt) {
  embed_internal(M, p, ws.S);
  if (opt.capture) opt.capture->push_back(ws.S);
  if (opt.keep_caches) ws.blocks.resize(static_cast<std::size_t>(M.cfg.n_layers));

  const int k = M.k();
  for (int b = 0; b < M.cfg.n_layers; ++b) {
    const BlockOffsets& off = M.layout.blocks[static_cast<std::size_t>(b)];
    BlockCache* bc = opt.keep_caches ? &ws.blocks[static_cast<std::size_t>(b)] : nullptr;
    LnCache scratch1, scratch2, scratch3;
    LnCache& ln1 = bc ? bc->ln1 : scratch1;
    LnCache& ln2 = bc ? bc->ln2 : scratch2;
    LnCache& ln3 = bc ? bc->ln3 : scratch3;

    const bool sample_first =
        M.cfg.attention_order == AttentionOrder::sample_then_feature;
    layer_norm_forward(ws.S, M.crow(M.params, off.ln1_g, k), M.crow(M.params, off.ln1_b, k), ln1);
    if (sample_first) {
      attention_sample(M, off, p, ln1, ws.S, bc ? &bc->sample : nullptr);
    } else {
      attention_feature(M, off, p, ln1, ws.S, bc ? &bc->feature : nullptr);
    }
    layer_norm_forward(ws.S, M.crow(M.params, off.ln2_g, k), M.crow(M.params, off.ln2_b, k), ln2);
    if (sample_first) {
      attention_feature(M, off, p, ln2, ws.S, bc ? &bc->feature : nullptr);
    } else {
      attention_sample(M, off, p, ln2, ws.S, bc ? &bc->sample : nullptr);
    }
    layer_norm_forward(ws.S, M.crow(M.params, off.ln3_g, k), M.crow(M.params, off.ln3_b, k), ln3);
    mlp_forward(M, off, ln3, ws.S, bc);
    if (opt.capture) opt.capture->push_back(ws.S);
  }
}

/// Head for the training path: caches the final-norm intermediates of the
/// test-row label tokens.
void head_forward_cached(const Model::Impl& M, const Prepared& p, Workspace& ws) {
  const int k = M.k(), T = p.T;
  MatRM states(p.n_test, k);
  for (int i = 0; i < p.n_test; ++i) {
    states.row(i) = ws.S.row(static_cast<Eigen::Index>(p.n_train + i) * T + (T - 1));
  }
  LnCache ln;
  layer_norm_forward(states, M.crow(M.params, M.layout.lnf_g, k),
                     M.crow(M.params, M.layout.lnf_b, k), ln);
  const auto w = M.crow(M.params, M.layout.head_w, k);
  ws.head.yhat = (ln.xn * w.transpose()).col(0);
  ws.head.yhat.array() += M.params[M.layout.head_b];
  ws.head.xhat = std::move(ln.xhat);
  ws.head.sinv = std::move(ln.sinv);
}

}  // namespace

// ---------------------------------------------------------------------------
// Backward pass: accumulates parameter gradients into `grad` (same layout as
// params), scaled by `loss_scale`, for the squared-error test-row loss.
// ---------------------------------------------------------------------------

namespace {

void attention_sample_backward(const Model::Impl& M, const BlockOffsets& off,
                               const Prepared& p, const LnCache& ln,
                               const AttnCache& cache, const MatRM& dU,
                               AVec& grad, MatRM& dXn) {
  const int k = M.k(), H = M.heads(), dh = M.head_dim(), T = p.T, n = p.n;
  const int ntr = p.n_train;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  M.mat(grad, off.sa_wo, k, k).noalias() += cache.oc.transpose() * dU;
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.sa_bo, k).array() +=
      dU.array().colwise().sum();
  MatRM dOc = dU * M.cmat(M.params, off.sa_wo, k, k).transpose();

  MatRM dQ = MatRM::Zero(static_cast<Eigen::Index>(n) * T, k);
  MatRM dK = MatRM::Zero(static_cast<Eigen::Index>(n) * T, k);
  MatRM dV = MatRM::Zero(static_cast<Eigen::Index>(n) * T, k);

  MatRM dA(n, ntr);
  VecXf dot(n);
  for (int t = 0; t < T; ++t) {
    const MatRM& Wt = cache.weights[static_cast<std::size_t>(t)];
    for (int h = 0; h < H; ++h) {
      const auto A = Wt.middleRows(static_cast<Eigen::Index>(h) * n, n);
      CMapM Qth(cache.q.data() + static_cast<std::size_t>(t) * k + h * dh, n, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      CMapM Kth(cache.kk.data() + static_cast<std::size_t>(t) * k + h * dh, ntr, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      CMapM Vth(cache.v.data() + static_cast<std::size_t>(t) * k + h * dh, ntr, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      CMapM dOth(dOc.data() + static_cast<std::size_t>(t) * k + h * dh, n, dh, StrideRM(static_cast<Eigen::Index>(T) * k));

      dA.noalias() = dOth * Vth.transpose();  // n x ntr
      MapM dVth(dV.data() + static_cast<std::size_t>(t) * k + h * dh, ntr, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      dVth.noalias() += A.transpose() * dOth;

      dot.noalias() = (dA.array() * A.array()).matrix().rowwise().sum();
      // Softmax jacobian applied in place, then the score scale.
      dA = (A.array() * (dA.array().colwise() - dot.array())) * scale;

      MapM dQth(dQ.data() + static_cast<std::size_t>(t) * k + h * dh, n, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      dQth.noalias() += dA * Kth;
      MapM dKth(dK.data() + static_cast<std::size_t>(t) * k + h * dh, ntr, dh, StrideRM(static_cast<Eigen::Index>(T) * k));
      dKth.noalias() += dA.transpose() * Qth;
    }
  }

  M.mat(grad, off.sa_wq, k, k).noalias() += ln.xn.transpose() * dQ;
  M.mat(grad, off.sa_wk, k, k).noalias() += ln.xn.transpose() * dK;
  M.mat(grad, off.sa_wv, k, k).noalias() += ln.xn.transpose() * dV;
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.sa_bq, k).array() += dQ.array().colwise().sum();
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.sa_bk, k).array() += dK.array().colwise().sum();
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.sa_bv, k).array() += dV.array().colwise().sum();

  dXn.noalias() = dQ * M.cmat(M.params, off.sa_wq, k, k).transpose();
  dXn.noalias() += dK * M.cmat(M.params, off.sa_wk, k, k).transpose();
  dXn.noalias() += dV * M.cmat(M.params, off.sa_wv, k, k).transpose();
}

void attention_feature_backward(const Model::Impl& M, const BlockOffsets& off,
                                const Prepared& p, const LnCache& ln,
                                const AttnCache& cache, const MatRM& dU,
                                AVec& grad, MatRM& dXn) {
  const int k = M.k(), H = M.heads(), dh = M.head_dim(), T = p.T, n = p.n;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  M.mat(grad, off.fa_wo, k, k).noalias() += cache.oc.transpose() * dU;
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.fa_bo, k).array() +=
      dU.array().colwise().sum();
  MatRM dOc = dU * M.cmat(M.params, off.fa_wo, k, k).transpose();

  MatRM dQ = MatRM::Zero(static_cast<Eigen::Index>(n) * T, k);
  MatRM dK = MatRM::Zero(static_cast<Eigen::Index>(n) * T, k);
  MatRM dV = MatRM::Zero(static_cast<Eigen::Index>(n) * T, k);

  const MatRM& W = cache.weights[0];
  std::vector<float> dA(static_cast<std::size_t>(T) * T);
  for (int i = 0; i < n; ++i) {
    const Eigen::Index base = static_cast<Eigen::Index>(i) * T;
    for (int h = 0; h < H; ++h) {
      const int col = h * dh;
      const float* A = W.data() + (static_cast<std::size_t>(i) * H + h) * T * T;
      const auto row_of = [&](const MatRM& m, int b) { return m.data() + (base + b) * k + col; };
      const auto mrow_of = [&](MatRM& m, int b) { return m.data() + (base + b) * k + col; };

      for (int a = 0; a < T; ++a) {
        const float* dOa = row_of(dOc, a);
        float* da = dA.data() + a * T;
        for (int b = 0; b < T; ++b) da[b] = dot_span(dOa, row_of(cache.v, b), dh);
        for (int b = 0; b < T; ++b) axpy_span(A[a * T + b], dOa, mrow_of(dV, b), dh);
      }
      for (int a = 0; a < T; ++a) {
        float* da = dA.data() + a * T;
        const float* Aa = A + a * T;
        float dotv = 0.0f;
        for (int b = 0; b < T; ++b) dotv += da[b] * Aa[b];
        for (int b = 0; b < T; ++b) da[b] = Aa[b] * (da[b] - dotv) * scale;
        float* dQa = mrow_of(dQ, a);
        for (int b = 0; b < T; ++b) {
          axpy_span(da[b], row_of(cache.kk, b), dQa, dh);
          axpy_span(da[b], row_of(cache.q, a), mrow_of(dK, b), dh);
        }
      }
    }
  }

  M.mat(grad, off.fa_wq, k, k).noalias() += ln.xn.transpose() * dQ;
  M.mat(grad, off.fa_wk, k, k).noalias() += ln.xn.transpose() * dK;
  M.mat(grad, off.fa_wv, k, k).noalias() += ln.xn.transpose() * dV;
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.fa_bq, k).array() += dQ.array().colwise().sum();
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.fa_bk, k).array() += dK.array().colwise().sum();
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.fa_bv, k).array() += dV.array().colwise().sum();

  dXn.noalias() = dQ * M.cmat(M.params, off.fa_wq, k, k).transpose();
  dXn.noalias() += dK * M.cmat(M.params, off.fa_wk, k, k).transpose();
  dXn.noalias() += dV * M.cmat(M.params, off.fa_wv, k, k).transpose();
}

/// Returns the per-task loss; accumulates dL/dparams into grad.
double backward_internal(const Model::Impl& M, const Prepared& p, Workspace& ws,
                         AVec& grad, double loss_scale) {
  const int k = M.k(), T = p.T, d = p.d, n = p.n, m = M.mlp_m();

  // Loss and head gradient.
  double loss = 0.0;
  VecXf dy(p.n_test);
  for (int i = 0; i < p.n_test; ++i) {
    const double diff = static_cast<double>(ws.head.yhat[i]) -
                        static_cast<double>(p.znorm[static_cast<std::size_t>(p.n_train + i)]);
    loss += diff * diff;
    dy[i] = static_cast<float>(2.0 * diff / p.n_test * loss_scale);
  }
  loss /= p.n_test;

  // Head backward (through the final LayerNorm of test label tokens).
  const auto w = M.crow(M.params, M.layout.head_w, k);
  MatRM xn_final = ws.head.xhat;
  xn_final.array().rowwise() *= M.crow(M.params, M.layout.lnf_g, k).array();
  xn_final.array().rowwise() += M.crow(M.params, M.layout.lnf_b, k).array();
  Eigen::Map<Eigen::RowVectorXf>(grad.data() + M.layout.head_w, k).noalias() +=
      dy.transpose() * xn_final;
  grad[M.layout.head_b] += dy.sum();

  MatRM dxn_final = dy * w;  // n_test x k
  LnCache final_cache;
  final_cache.xhat = ws.head.xhat;
  final_cache.sinv = ws.head.sinv;
  MatRM dstates = layer_norm_backward(dxn_final, final_cache,
                                      M.crow(M.params, M.layout.lnf_g, k),
                                      grad.data() + M.layout.lnf_g,
                                      grad.data() + M.layout.lnf_b);

  MatRM dS = MatRM::Zero(static_cast<Eigen::Index>(n) * T, k);
  for (int i = 0; i < p.n_test; ++i) {
    dS.row(static_cast<Eigen::Index>(p.n_train + i) * T + (T - 1)) = dstates.row(i);
  }

  // Blocks in reverse.
  for (int b = M.cfg.n_layers - 1; b >= 0; --b) {
    const BlockOffsets& off = M.layout.blocks[static_cast<std::size_t>(b)];
    BlockCache& bc = ws.blocks[static_cast<std::size_t>(b)];
    const bool sample_first =
        M.cfg.attention_order == AttentionOrder::sample_then_feature;

    // MLP.
    {
      M.mat(grad, off.mlp_w2, m, k).noalias() += bc.mlp_hidden.transpose() * dS;
      Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.mlp_b2, k).array() +=
          dS.array().colwise().sum();
      MatRM dHidden = dS * M.cmat(M.params, off.mlp_w2, m, k).transpose();
      // gelu'(x) = 0.5(1+th) + 0.5 x (1-th^2) c (1+3a x^2), th cached.
      const auto x = bc.mlp_pre.array();
      const auto th = bc.mlp_tanh.array();
      MatRM dPre = dHidden.array() *
                   (0.5f * (1.0f + th) +
                    0.5f * x * (1.0f - th.square()) * (kGeluC * (1.0f + 3.0f * kGeluA * x.square())));
      M.mat(grad, off.mlp_w1, k, m).noalias() += bc.ln3.xn.transpose() * dPre;
      Eigen::Map<Eigen::RowVectorXf>(grad.data() + off.mlp_b1, m).array() +=
          dPre.array().colwise().sum();
      MatRM dXn3 = dPre * M.cmat(M.params, off.mlp_w1, k, m).transpose();
      dS += layer_norm_backward(dXn3, bc.ln3, M.crow(M.params, off.ln3_g, k),
                                grad.data() + off.ln3_g, grad.data() + off.ln3_b);
    }

    // Second attention of the block.
    {
      MatRM dXn(static_cast<Eigen::Index>(n) * T, k);
      if (sample_first) {
        attention_feature_backward(M, off, p, bc.ln2, bc.feature, dS, grad, dXn);
      } else {
        attention_sample_backward(M, off, p, bc.ln2, bc.sample, dS, grad, dXn);
      }
      dS += layer_norm_backward(dXn, bc.ln2, M.crow(M.params, off.ln2_g, k),
                                grad.data() + off.ln2_g, grad.data() + off.ln2_b);
    }

    // First attention of the block.
    {
      MatRM dXn(static_cast<Eigen::Index>(n) * T, k);
      if (sample_first) {
        attention_sample_backward(M, off, p, bc.ln1, bc.sample, dS, grad, dXn);
      } else {
        attention_feature_backward(M, off, p, bc.ln1, bc.feature, dS, grad, dXn);
      }
      dS += layer_norm_backward(dXn, bc.ln1, M.crow(M.params, off.ln1_g, k),
                                grad.data() + off.ln1_g, grad.data() + off.ln1_b);
    }
  }

  // Embedding backward.
  auto dFw = M.mat(grad, M.layout.feat_w, M.cfg.max_features, k);
  auto dFb = M.mat(grad, M.layout.feat_b, M.cfg.max_features, k);
  Eigen::Map<Eigen::RowVectorXf> dLw(grad.data() + M.layout.label_w, k);
  Eigen::Map<Eigen::RowVectorXf> dLb(grad.data() + M.layout.label_b, k);
  Eigen::Map<Eigen::RowVectorXf> dDummy(grad.data() + M.layout.dummy_label, k);
  for (int j = 0; j < d; ++j) {
    CMapM G(dS.data() + static_cast<std::size_t>(j) * k, n, k, StrideRM(static_cast<Eigen::Index>(T) * k));
    Eigen::Map<const Eigen::VectorXf, 0, Eigen::InnerStride<>> xj(
        p.xnorm.data() + j, n, Eigen::InnerStride<>(d));
    dFw.row(j).noalias() += xj.transpose() * G;
    dFb.row(j).array() += G.array().colwise().sum();
  }
  for (int i = 0; i < n; ++i) {
    const auto g = dS.row(static_cast<Eigen::Index>(i) * T + d);
    if (i < p.n_train) {
      dLw.noalias() += p.znorm[static_cast<std::size_t>(i)] * g;
      dLb += g;
    } else {
      dDummy += g;
    }
  }

  return loss;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model public interface.
// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& config) : impl_(std::make_unique<Impl>()) {
  config.validate();
  impl_->cfg = config;
  impl_->layout = make_layout(config);
  impl_->init_parameters();
}

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

const ModelConfig& Model::config() const { return impl_->cfg; }

std::uint64_t Model::param_digest() const {
  return fnv1a64(impl_->params.data(), impl_->params.size() * sizeof(float));
}

std::size_t Model::param_count() const { return impl_->params.size(); }

FitStats Model::fit_stats(const TabularDataset& data) const {
  return compute_fit_stats(data);
}

TokenGrid Model::embed(const TabularDataset& data) const {
  const Prepared p = prepare(data, impl_->cfg);
  MatRM S;
  embed_internal(*impl_, p, S);
  TokenGrid grid;
  grid.n_rows = p.n;
  grid.n_tokens = p.T;
  grid.k = impl_->k();
  grid.states.resize(static_cast<std::size_t>(p.n) * p.T * impl_->k());
  for (int i = 0; i < p.n; ++i) {
    const int dst = p.dataset_row[static_cast<std::size_t>(i)];
    std::memcpy(grid.states.data() +
                    (static_cast<std::size_t>(dst) * p.T) * impl_->k(),
                S.data() + static_cast<std::size_t>(i) * p.T * impl_->k(),
                static_cast<std::size_t>(p.T) * impl_->k() * sizeof(float));
  }
  return grid;
}

HeadDescriptor Model::output_head() const {
  const int k = impl_->k();
  HeadDescriptor h;
  h.norm_gain.assign(impl_->params.data() + impl_->layout.lnf_g,
                     impl_->params.data() + impl_->layout.lnf_g + k);
  h.norm_bias.assign(impl_->params.data() + impl_->layout.lnf_b,
                     impl_->params.data() + impl_->layout.lnf_b + k);
  h.norm_eps = kLnEps;
  h.w.assign(impl_->params.data() + impl_->layout.head_w,
             impl_->params.data() + impl_->layout.head_w + k);
  h.b = impl_->params[impl_->layout.head_b];
  return h;
}

float Model::apply_head(const HeadDescriptor& head, const float* state, int k) {
  double mu = 0.0;
  for (int i = 0; i < k; ++i) mu += state[i];
  mu /= k;
  double var = 0.0;
  for (int i = 0; i < k; ++i) {
    const double c = state[i] - mu;
    var += c * c;
  }
  var /= k;
  const double sinv = 1.0 / std::sqrt(var + static_cast<double>(head.norm_eps));
  double acc = static_cast<double>(head.b);
  for (int i = 0; i < k; ++i) {
    const double xhat = (state[i] - mu) * sinv;
    acc += static_cast<double>(head.w[static_cast<std::size_t>(i)]) *
           (xhat * head.norm_gain[static_cast<std::size_t>(i)] +
            head.norm_bias[static_cast<std::size_t>(i)]);
  }
  return static_cast<float>(acc);
}

double Model::denormalize(const FitStats& stats, float normalized) {
  return static_cast<double>(stats.z_mean) +
         static_cast<double>(stats.z_std) * static_cast<double>(normalized);
}

namespace {

std::vector<double> predictions_from_stream(const Model::Impl& M, const Prepared& p,
                                            const MatRM& S, const HeadDescriptor& head) {
  std::vector<double> out(static_cast<std::size_t>(p.n_test));
  for (int i = 0; i < p.n_test; ++i) {
    const float* state = S.data() + (static_cast<std::size_t>(p.n_train + i) * p.T + (p.T - 1)) * M.k();
    const float y = Model::apply_head(head, state, M.k());
    out[static_cast<std::size_t>(i)] = Model::denormalize(p.stats, y);
  }
  return out;
}

}  // namespace

std::vector<double> Model::predict(const TabularDataset& data) const {
  const Prepared p = prepare(data, impl_->cfg);
  Workspace ws;
  ForwardOptions opt;
  forward_internal(*impl_, p, ws, opt);
  return predictions_from_stream(*impl_, p, ws.S, output_head());
}

ForwardResult Model::forward_capture(const TabularDataset& data) const {
  const Prepared p = prepare(data, impl_->cfg);
  Workspace ws;
  std::vector<MatRM> captured;
  ForwardOptions opt;
  opt.capture = &captured;
  forward_internal(*impl_, p, ws, opt);

  ForwardResult result;
  result.predictions = predictions_from_stream(*impl_, p, ws.S, output_head());
  result.layers.reserve(captured.size());
  const int k = impl_->k();
  for (const MatRM& S : captured) {
    TokenGrid grid;
    grid.n_rows = p.n;
    grid.n_tokens = p.T;
    grid.k = k;
    grid.states.resize(static_cast<std::size_t>(p.n) * p.T * k);
    for (int i = 0; i < p.n; ++i) {
      const int dst = p.dataset_row[static_cast<std::size_t>(i)];
      std::memcpy(grid.states.data() + (static_cast<std::size_t>(dst) * p.T) * k,
                  S.data() + static_cast<std::size_t>(i) * p.T * k,
                  static_cast<std::size_t>(p.T) * k * sizeof(float));
    }
    result.layers.push_back(std::move(grid));
  }
  return result;
}

double Model::training_loss(const TabularDataset& data) const {
  const Prepared p = prepare(data, impl_->cfg);
  Workspace ws;
  ForwardOptions opt;
  forward_internal(*impl_, p, ws, opt);
  head_forward_cached(*impl_, p, ws);
  double loss = 0.0;
  for (int i = 0; i < p.n_test; ++i) {
    const double diff = static_cast<double>(ws.head.yhat[i]) -
                        static_cast<double>(p.znorm[static_cast<std::size_t>(p.n_train + i)]);
    loss += diff * diff;
  }
  return loss / p.n_test;
}

std::vector<float> Model::training_gradient(const TabularDataset& data,
                                            double* loss_out) const {
  const Prepared p = prepare(data, impl_->cfg);
  Workspace ws;
  ForwardOptions opt;
  opt.keep_caches = true;
  forward_internal(*impl_, p, ws, opt);
  head_forward_cached(*impl_, p, ws);
  AVec grad(impl_->params.size(), 0.0f);
  const double loss = backward_internal(*impl_, p, ws, grad, 1.0);
  if (loss_out) *loss_out = loss;
  return std::vector<float>(grad.begin(), grad.end());
}

void Model::nudge_parameters(const std::vector<float>& direction, float eps) {
  if (direction.size() != impl_->params.size()) {
    throw ConfigError("direction length must equal parameter count");
  }
  for (const TensorInfo& t : impl_->layout.tensors) {
    if (!t.trainable) continue;
    const std::size_t count = static_cast<std::size_t>(t.rows) * t.cols;
    for (std::size_t i = t.offset; i < t.offset + count; ++i) {
      impl_->params[i] += eps * direction[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint IO: "TPFN" magic, u32 version, u64 manifest length, manifest
// JSON (config, tensor table, digest), then raw little-endian float32 data.
// ---------------------------------------------------------------------------

void Model::save(const std::filesystem::path& checkpoint_path) const {
  json manifest;
  manifest["config"] = config_to_json(impl_->cfg);
  manifest["tensors"] = json::array();
  for (const TensorInfo& t : impl_->layout.tensors) {
    manifest["tensors"].push_back({{"name", t.name},
                                   {"shape", {t.rows, t.cols}},
                                   {"offset", t.offset},
                                   {"trainable", t.trainable}});
  }
  manifest["float_count"] = impl_->params.size();
  manifest["param_digest"] = hex64(param_digest());
  const std::string mtext = manifest.dump();

  std::string blob;
  blob.reserve(16 + mtext.size() + impl_->params.size() * sizeof(float));
  blob.append("TPFN", 4);
  const std::uint32_t version = 1;
  blob.append(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t mlen = mtext.size();
  blob.append(reinterpret_cast<const char*>(&mlen), 8);
  blob.append(mtext);
  blob.append(reinterpret_cast<const char*>(impl_->params.data()),
              impl_->params.size() * sizeof(float));
  write_file_atomic(checkpoint_path, blob.data(), blob.size());

  const auto dir = checkpoint_path.has_parent_path()
                       ? checkpoint_path.parent_path()
                       : std::filesystem::path(".");
  write_file_atomic(dir / "model.json", config_to_json(impl_->cfg).dump(2) + "\n");
}

Model Model::load(const std::filesystem::path& checkpoint_path) {
  const std::vector<std::uint8_t> blob = read_binary_file(checkpoint_path);
  if (blob.size() < 16 || std::memcmp(blob.data(), "TPFN", 4) != 0) {
    throw ConfigError("not a toy-model checkpoint: " + checkpoint_path.string());
  }
  std::uint32_t version = 0;
  std::memcpy(&version, blob.data() + 4, 4);
  if (version != 1) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t mlen = 0;
  std::memcpy(&mlen, blob.data() + 8, 8);
  if (blob.size() < 16 + mlen) throw CorruptionError("truncated checkpoint manifest");
  json manifest;
  try {
    manifest = json::parse(blob.begin() + 16, blob.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("unreadable checkpoint manifest: ") + e.what());
  }
  Model model(config_from_json(manifest.at("config")));
  const std::size_t floats = manifest.at("float_count").get<std::size_t>();
  if (floats != model.impl_->params.size()) {
    throw CorruptionError("checkpoint parameter count does not match config");
  }
  if (blob.size() != 16 + mlen + floats * sizeof(float)) {
    throw CorruptionError("checkpoint payload size mismatch");
  }
  std::memcpy(model.impl_->params.data(), blob.data() + 16 + mlen,
              floats * sizeof(float));
  const std::string want = manifest.at("param_digest").get<std::string>();
  if (hex64(model.param_digest()) != want) {
    throw CorruptionError("checkpoint parameter digest mismatch");
  }
  return model;
}

// ---------------------------------------------------------------------------
// Meta-training.
// ---------------------------------------------------------------------------

struct TrainerAccess {
  static Model::Impl& impl(Model& m) { return *m.impl_; }
};

void TrainConfig::validate() const {
  if (prior_mix.empty()) throw ConfigError("prior_mix must be non-empty");
  double total = 0.0;
  for (const PriorComponent& c : prior_mix) {
    if (c.weight <= 0.0) throw ConfigError("prior weights must be positive");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("prior weights must sum to 1");
  if (n_steps < 0) throw ConfigError("n_steps must be >= 0");
  if (batch_tasks < 1) throw ConfigError("batch_tasks must be >= 1");
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
  if (clip_norm <= 0.0) throw ConfigError("clip_norm must be > 0");
  if (min_train_rows < 2 || max_train_rows < min_train_rows) {
    throw ConfigError("invalid train-row range");
  }
  if (test_rows < 1) throw ConfigError("test_rows must be >= 1");
  if (switch_min_pairs < 2 || switch_max_pairs < switch_min_pairs) {
    throw ConfigError("invalid switch pair range");
  }
}

namespace {

synthgen::TaskSpec sample_task_spec(Family family, const TrainConfig& cfg,
                                    std::uint64_t task_seed) {
  Rng rng(task_seed);
  synthgen::TaskSpec spec;
  spec.family = family;
  spec.noise_sigma = cfg.noise_sigma;
  spec.seed = Rng::derive(task_seed, "realize");
  const int d_in = synthgen::sampled_inputs(family);
  spec.input_ranges.assign(static_cast<std::size_t>(d_in), cfg.input_range);
  switch (family) {
    case Family::linear: {
      spec.coefficient_table = {synthgen::SwitchCoeff{
          0, rng.uniform(cfg.coeff_range.low, cfg.coeff_range.high),
          rng.uniform(cfg.coeff_range.low, cfg.coeff_range.high)}};
      spec.n_train = cfg.min_train_rows +
                     static_cast<int>(rng.below(static_cast<std::uint64_t>(
                         cfg.max_train_rows - cfg.min_train_rows + 1)));
      spec.n_test = cfg.test_rows;
      break;
    }
    case Family::switch_: {
      const int pairs = cfg.switch_min_pairs +
                        static_cast<int>(rng.below(static_cast<std::uint64_t>(
                            cfg.switch_max_pairs - cfg.switch_min_pairs + 1)));
      // Rejection keeps coefficient pairs pairwise distinct; collisions of
      // two continuous uniforms are measure-zero but the contract is exact.
      std::vector<synthgen::SwitchCoeff> table;
      while (static_cast<int>(table.size()) < pairs) {
        synthgen::SwitchCoeff c{static_cast<int>(table.size()),
                                rng.uniform(cfg.coeff_range.low, cfg.coeff_range.high),
                                rng.uniform(cfg.coeff_range.low, cfg.coeff_range.high)};
        bool dup = false;
        for (const auto& e : table) dup = dup || (e.alpha == c.alpha && e.beta == c.beta);
        if (!dup) table.push_back(c);
      }
      spec.coefficient_table = std::move(table);
      spec.n_train = cfg.switch_min_rows_per_pair +
                     static_cast<int>(rng.below(static_cast<std::uint64_t>(
                         cfg.switch_max_rows_per_pair - cfg.switch_min_rows_per_pair + 1)));
      spec.n_test = std::max(1, cfg.test_rows / pairs + 1);
      break;
    }
    case Family::compound: {
      spec.n_train = cfg.min_train_rows +
                     static_cast<int>(rng.below(static_cast<std::uint64_t>(
                         cfg.max_train_rows - cfg.min_train_rows + 1)));
      spec.n_test = cfg.test_rows;
      break;
    }
  }
  return spec;
}

Family pick_family(const std::vector<PriorComponent>& mix, double u) {
  double acc = 0.0;
  for (const PriorComponent& c : mix) {
    acc += c.weight;
    if (u < acc) return c.family;
  }
  return mix.back().family;
}

double lr_at_step(const TrainConfig& cfg, long step) {
  const double base = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.n_steps <= cfg.warmup_steps) return base;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.n_steps - cfg.warmup_steps);
  const double floor = cfg.final_lr_fraction;
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
}

}  // namespace

double evaluate_family_r2(const Model& model, Family family, const TrainConfig& cfg,
                          std::uint64_t eval_seed, int n_tasks) {
  double r2_sum = 0.0;
  for (int t = 0; t < n_tasks; ++t) {
    const std::uint64_t task_seed =
        Rng::derive(eval_seed, {static_cast<std::uint64_t>(family), static_cast<std::uint64_t>(t)});
    TrainConfig eval_cfg = cfg;
    // Representative held-out sizes, matched to the probe-time defaults.
    eval_cfg.min_train_rows = eval_cfg.max_train_rows = 128;
    eval_cfg.test_rows = 32;
    eval_cfg.switch_min_pairs = eval_cfg.switch_max_pairs = 8;
    eval_cfg.switch_min_rows_per_pair = eval_cfg.switch_max_rows_per_pair = 16;
    const synthgen::TaskSpec spec = sample_task_spec(family, eval_cfg, task_seed);
    const TabularDataset data = synthgen::generate(spec);
    const std::vector<double> pred = model.predict(data);
    double sse = 0.0, sst = 0.0, mean = 0.0;
    int idx = 0, n_test = 0;
    for (int r = 0; r < data.n_rows; ++r) {
      if (data.split[static_cast<std::size_t>(r)] != Split::test) continue;
      mean += data.z[static_cast<std::size_t>(r)];
      ++n_test;
    }
    mean /= n_test;
    for (int r = 0; r < data.n_rows; ++r) {
      if (data.split[static_cast<std::size_t>(r)] != Split::test) continue;
      const double diff = pred[static_cast<std::size_t>(idx++)] - data.z[static_cast<std::size_t>(r)];
      sse += diff * diff;
      const double c = data.z[static_cast<std::size_t>(r)] - mean;
      sst += c * c;
    }
    r2_sum += sst > 0.0 ? 1.0 - sse / sst : 0.0;
  }
  return r2_sum / n_tasks;
}

TrainState meta_train(Model& model, const TrainConfig& cfg, const TrainLogger& logger) {
  cfg.validate();
  if (model.config().n_layers < 2) {
    throw ConfigError("meta-training requires n_layers >= 2");
  }
  Model::Impl& M = TrainerAccess::impl(model);

  AVec grad(M.params.size(), 0.0f);
  AVec adam_m(M.params.size(), 0.0f);
  AVec adam_v(M.params.size(), 0.0f);

  double loss_ema = 0.0;
  bool ema_init = false;

  const auto log_eval = [&](long step, double loss) {
    EvalPoint pt;
    pt.step = step;
    pt.loss = loss;
    for (const PriorComponent& c : cfg.prior_mix) {
      const double r2 = evaluate_family_r2(model, c.family, cfg,
                                           Rng::derive(cfg.seed, "eval"),
                                           cfg.eval_tasks_per_family);
      pt.r2_by_family.emplace_back(synthgen::family_name(c.family), r2);
    }
    if (logger) {
      json j;
      j["step"] = step;
      j["loss"] = loss;
      for (const auto& [fam, r2] : pt.r2_by_family) j["eval_r2"][fam] = r2;
      logger(j.dump());
    }
    return pt;
  };

  TrainState state;
  state.prior_mix = cfg.prior_mix;

  for (long step = 0; step < cfg.n_steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0f);
    double batch_loss = 0.0;
    for (int task = 0; task < cfg.batch_tasks; ++task) {
      const std::uint64_t task_seed = Rng::derive(
          cfg.seed, {0x7461736bULL, static_cast<std::uint64_t>(step),
                     static_cast<std::uint64_t>(task)});
      Rng pick(Rng::derive(task_seed, "family"));
      const Family family = pick_family(cfg.prior_mix, pick.uniform());
      const synthgen::TaskSpec spec = sample_task_spec(family, cfg, task_seed);
      const TabularDataset data = synthgen::generate(spec);
      const Prepared p = prepare(data, M.cfg);
      Workspace ws;
      ForwardOptions opt;
      opt.keep_caches = true;
      forward_internal(M, p, ws, opt);
      head_forward_cached(M, p, ws);
      batch_loss += backward_internal(M, p, ws, grad, 1.0 / cfg.batch_tasks);
    }
    batch_loss /= cfg.batch_tasks;
    if (!std::isfinite(batch_loss)) {
      throw DivergenceError("training loss became non-finite at step " +
                            std::to_string(step));
    }

    // Global-norm clip.
    double gnorm_sq = 0.0;
    for (const TensorInfo& t : M.layout.tensors) {
      if (!t.trainable) continue;
      const std::size_t count = static_cast<std::size_t>(t.rows) * t.cols;
      for (std::size_t i = t.offset; i < t.offset + count; ++i) {
        gnorm_sq += static_cast<double>(grad[i]) * grad[i];
      }
    }
    const double gnorm = std::sqrt(gnorm_sq);
    const float clip_scale =
        gnorm > cfg.clip_norm ? static_cast<float>(cfg.clip_norm / gnorm) : 1.0f;

    const double lr = lr_at_step(cfg, step);
    const double b1t = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step + 1));
    const double b2t = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step + 1));
    for (const TensorInfo& t : M.layout.tensors) {
      if (!t.trainable) continue;
      const std::size_t count = static_cast<std::size_t>(t.rows) * t.cols;
      for (std::size_t i = t.offset; i < t.offset + count; ++i) {
        const double g = static_cast<double>(grad[i]) * clip_scale;
        adam_m[i] = static_cast<float>(cfg.adam_beta1 * adam_m[i] + (1.0 - cfg.adam_beta1) * g);
        adam_v[i] = static_cast<float>(cfg.adam_beta2 * adam_v[i] + (1.0 - cfg.adam_beta2) * g * g);
        const double mhat = adam_m[i] / b1t;
        const double vhat = adam_v[i] / b2t;
        M.params[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
      }
    }

    loss_ema = ema_init ? 0.99 * loss_ema + 0.01 * batch_loss : batch_loss;
    ema_init = true;

    if (cfg.eval_interval > 0 &&
        ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.n_steps)) {
      state.eval_history.push_back(log_eval(step + 1, loss_ema));
    } else if (logger && (step + 1) % 50 == 0) {
      json j;
      j["step"] = step + 1;
      j["loss"] = loss_ema;
      logger(j.dump());
    }
  }

  state.param_digest = model.param_digest();
  state.steps = cfg.n_steps;
  state.final_loss = loss_ema;
  return state;
}

std::string train_state_to_json(const TrainState& state) {
  json j;
  j["param_digest"] = hex64(state.param_digest);
  j["steps"] = state.steps;
  j["final_loss"] = state.final_loss;
  j["prior_mix"] = json::array();
  for (const PriorComponent& c : state.prior_mix) {
    j["prior_mix"].push_back({{"family", synthgen::family_name(c.family)},
                              {"weight", c.weight}});
  }
  j["eval_history"] = json::array();
  for (const EvalPoint& pt : state.eval_history) {
    json e;
    e["step"] = pt.step;
    e["loss"] = pt.loss;
    for (const auto& [fam, r2] : pt.r2_by_family) e["eval_r2"][fam] = r2;
    j["eval_history"].push_back(e);
  }
  return j.dump(2) + "\n";
}

}  // namespace tabprobe::toymodel
