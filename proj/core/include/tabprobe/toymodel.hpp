#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tabprobe/common.hpp"
#include "tabprobe/synthgen.hpp"

namespace tabprobe::toymodel {

enum class AttentionOrder { sample_then_feature, feature_then_sample };

struct ModelConfig {
  int n_layers = 8;
  int embed_dim = 64;  // k
  int n_heads = 4;
  double mlp_ratio = 4.0;
  int max_features = 8;
  int context_cap = 4096;  // max rows per fitted dataset
  AttentionOrder attention_order = AttentionOrder::sample_then_feature;
  std::uint64_t seed = 0;

  void validate() const;
  int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio + 0.5); }
};

/// Residual-stream states for one layer; row-major (row, token, channel).
/// Token index n_tokens-1 is the label/answer token of each row.
struct TokenGrid {
  int n_rows = 0;
  int n_tokens = 0;  // d + 1
  int k = 0;
  std::vector<float> states;

  const float* row_token(int row, int token) const {
    return states.data() + (static_cast<std::size_t>(row) * n_tokens + token) * k;
  }
};

/// Per-dataset preprocessing statistics (train split only).
struct FitStats {
  std::vector<float> feat_mean, feat_std;
  float z_mean = 0.0f;
  float z_std = 1.0f;
};

/// The exact scalar output pipeline: LayerNorm followed by a linear map.
struct HeadDescriptor {
  std::vector<float> norm_gain, norm_bias;
  float norm_eps = 1e-5f;
  std::vector<float> w;
  float b = 0.0f;
};

struct ForwardResult {
  std::vector<double> predictions;  // raw units, test rows in dataset order
  std::vector<TokenGrid> layers;    // n_layers + 1 grids (0 = embedding output)
};

class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  static Model load(const std::filesystem::path& checkpoint_path);

  /// Writes the checkpoint (versioned header + JSON shape manifest + raw
  /// little-endian float32 parameters) plus model.json alongside.
  void save(const std::filesystem::path& checkpoint_path) const;

  const ModelConfig& config() const;
  std::uint64_t param_digest() const;
  std::size_t param_count() const;

  FitStats fit_stats(const synthgen::TabularDataset& data) const;

  /// Layer-0 token grid in dataset row order.
  TokenGrid embed(const synthgen::TabularDataset& data) const;

  std::vector<double> predict(const synthgen::TabularDataset& data) const;

  /// Predictions plus every layer's full token grid (dataset row order).
  ForwardResult forward_capture(const synthgen::TabularDataset& data) const;

  HeadDescriptor output_head() const;

  /// Applies the head to one answer-token state; predict() routes through
  /// this same function, so lens decoding at the final layer is bit-exact.
  static float apply_head(const HeadDescriptor& head, const float* state, int k);
  static double denormalize(const FitStats& stats, float normalized);

  /// Mean squared error of normalized test-row predictions for one task.
  double training_loss(const synthgen::TabularDataset& data) const;

  /// Full parameter gradient of training_loss (flat, checkpoint layout;
  /// non-trainable buffers get zero). Exposed for the finite-difference
  /// gradient check.
  std::vector<float> training_gradient(const synthgen::TabularDataset& data,
                                       double* loss_out = nullptr) const;

  /// Perturbs trainable parameters by eps * direction (gradient-check helper).
  void nudge_parameters(const std::vector<float>& direction, float eps);

  struct Impl;  // opaque

 private:
  std::unique_ptr<Impl> impl_;
  friend struct TrainerAccess;
};

struct PriorComponent {
  synthgen::Family family = synthgen::Family::linear;
  double weight = 0.0;
};

struct TrainConfig {
  std::vector<PriorComponent> prior_mix = {
      {synthgen::Family::linear, 0.4},
      {synthgen::Family::switch_, 0.3},
      {synthgen::Family::compound, 0.3},
  };
  long n_steps = 6000;
  int batch_tasks = 32;
  double learning_rate = 3e-4;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  long warmup_steps = 200;
  double final_lr_fraction = 0.1;  // cosine decay floor
  long eval_interval = 500;
  int eval_tasks_per_family = 16;
  std::uint64_t seed = 0;

  // Task sampling ranges for the synthetic prior.
  int min_train_rows = 16;
  int max_train_rows = 128;
  int test_rows = 8;
  int switch_min_pairs = 3;
  int switch_max_pairs = 12;
  int switch_min_rows_per_pair = 4;
  int switch_max_rows_per_pair = 16;
  synthgen::Range coeff_range = synthgen::default_coeff_range();
  synthgen::Range input_range{-1.0, 1.0};
  double noise_sigma = 0.0;

  void validate() const;
};

struct EvalPoint {
  long step = 0;
  double loss = 0.0;
  std::vector<std::pair<std::string, double>> r2_by_family;
};

struct TrainState {
  std::uint64_t param_digest = 0;
  long steps = 0;
  double final_loss = 0.0;
  std::vector<PriorComponent> prior_mix;
  std::vector<EvalPoint> eval_history;
};

using TrainLogger = std::function<void(const std::string& ndjson_line)>;

/// Meta-trains in place on freshly sampled prior tasks (MSE on test-row
/// predictions, Adam, global-norm clipping). Throws DivergenceError if the
/// loss becomes non-finite.
TrainState meta_train(Model& model, const TrainConfig& cfg,
                      const TrainLogger& logger = {});

/// Held-out evaluation used by the trainer and by the acceptance gate:
/// mean per-task prediction R^2 on freshly sampled tasks of one family.
double evaluate_family_r2(const Model& model, synthgen::Family family,
                          const TrainConfig& cfg, std::uint64_t eval_seed,
                          int n_tasks);

std::string train_state_to_json(const TrainState& state);

}  // namespace tabprobe::toymodel
