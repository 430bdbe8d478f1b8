#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "tabprobe/synthgen.hpp"
#include "tabprobe/toymodel.hpp"
#include "test_util.hpp"

using namespace tabprobe;
using namespace tabprobe::toymodel;
using tabprobe::synthgen::Split;
using tabprobe::synthgen::TabularDataset;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.embed_dim = 32;
  cfg.n_heads = 4;
  cfg.max_features = 6;
  cfg.seed = 11;
  return cfg;
}

ModelConfig miniature_config() {
  // Frozen miniature used by the gradient check.
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.max_features = 4;
  cfg.seed = 7;
  return cfg;
}

TabularDataset drop_test_row(const TabularDataset& d, int dataset_row) {
  TabularDataset out = d;
  out.x.clear();
  out.z.clear();
  out.split.clear();
  out.intermediaries.clear();
  out.n_rows = 0;
  for (int r = 0; r < d.n_rows; ++r) {
    if (r == dataset_row) continue;
    for (int c = 0; c < d.n_features; ++c) out.x.push_back(d.at(r, c));
    out.z.push_back(d.z[r]);
    out.split.push_back(d.split[r]);
    if (!d.intermediaries.empty()) out.intermediaries.push_back(d.intermediaries[r]);
    ++out.n_rows;
  }
  return out;
}

}  // namespace

TEST_CASE("embed produces the documented token grid shape") {
  ModelConfig cfg = small_config();
  Model model(cfg);
  const TabularDataset d = synthgen::gen_compound(7, 3, 5);
  const TokenGrid grid = model.embed(d);
  CHECK(grid.n_rows == 10);
  CHECK(grid.n_tokens == 4);
  CHECK(grid.k == 32);
  CHECK(grid.states.size() == 10u * 4u * 32u);
}

TEST_CASE("test-row label tokens all equal the dummy embedding at layer 0") {
  Model model(small_config());
  const TabularDataset d = synthgen::gen_linear(1.0, -1.0, 8, 4, 3);
  const TokenGrid grid = model.embed(d);
  const float* first = nullptr;
  for (int r = 0; r < d.n_rows; ++r) {
    if (d.split[r] != Split::test) continue;
    const float* tok = grid.row_token(r, grid.n_tokens - 1);
    if (!first) {
      first = tok;
      continue;
    }
    CHECK(std::memcmp(first, tok, sizeof(float) * grid.k) == 0);
  }
}

TEST_CASE("identical values in different feature slots embed differently") {
  Model model(small_config());
  TabularDataset d = synthgen::gen_linear(1.0, 1.0, 4, 1, 9);
  d.x[0] = 0.37;
  d.x[1] = 0.37;
  const TokenGrid grid = model.embed(d);
  bool differs = false;
  for (int c = 0; c < grid.k; ++c) {
    differs = differs || grid.row_token(0, 0)[c] != grid.row_token(0, 1)[c];
  }
  CHECK(differs);
}

TEST_CASE("forward returns n_layers+1 grids shaped like the input") {
  Model model(small_config());
  const TabularDataset d = synthgen::gen_compound(12, 5, 21);
  const ForwardResult fr = model.forward_capture(d);
  CHECK(fr.layers.size() == 3);  // embedding + 2 blocks
  for (const TokenGrid& g : fr.layers) {
    CHECK(g.n_rows == d.n_rows);
    CHECK(g.n_tokens == d.n_features + 1);
    CHECK(g.k == 32);
  }
  CHECK(fr.predictions.size() == 5);
}

TEST_CASE("head applied to the final answer-token state reproduces predict") {
  Model model(small_config());
  const TabularDataset d = synthgen::gen_linear(0.8, 0.1, 16, 6, 2);
  const ForwardResult fr = model.forward_capture(d);
  const std::vector<double> direct = model.predict(d);
  const HeadDescriptor head = model.output_head();
  const FitStats stats = model.fit_stats(d);
  const TokenGrid& last = fr.layers.back();
  int ti = 0;
  for (int r = 0; r < d.n_rows; ++r) {
    if (d.split[r] != Split::test) continue;
    const float y = Model::apply_head(head, last.row_token(r, last.n_tokens - 1), last.k);
    const double raw = Model::denormalize(stats, y);
    CHECK(raw == fr.predictions[ti]);
    CHECK(raw == direct[ti]);
    ++ti;
  }
}

TEST_CASE("masking: removing another test row leaves predictions unchanged") {
  Model model(small_config());
  const TabularDataset d = synthgen::gen_linear(1.5, -0.5, 20, 4, 17);
  const std::vector<double> full = model.predict(d);

  int first_test = -1, second_test = -1;
  for (int r = 0; r < d.n_rows; ++r) {
    if (d.split[r] == Split::test) {
      if (first_test < 0) {
        first_test = r;
      } else if (second_test < 0) {
        second_test = r;
      }
    }
  }
  const TabularDataset smaller = drop_test_row(d, second_test);
  const std::vector<double> part = model.predict(smaller);
  CHECK(part.size() == full.size() - 1);
  // No information flows from the removed test row; only float kernel
  // tails differ with the changed matrix extents.
  CHECK(part[0] == doctest::Approx(full[0]).epsilon(1e-5));
}

TEST_CASE("duplicated test rows get identical predictions") {
  Model model(small_config());
  TabularDataset d = synthgen::gen_linear(0.3, 0.9, 16, 2, 8);
  // Append a copy of the first test row.
  int first_test = -1;
  for (int r = 0; r < d.n_rows; ++r) {
    if (d.split[r] == Split::test) {
      first_test = r;
      break;
    }
  }
  for (int c = 0; c < d.n_features; ++c) d.x.push_back(d.at(first_test, c));
  d.z.push_back(d.z[first_test]);
  d.split.push_back(Split::test);
  ++d.n_rows;

  const std::vector<double> pred = model.predict(d);
  CHECK(pred.front() == pred.back());
}

TEST_CASE("initialization and checkpoints are deterministic") {
  testutil::TempDir tmp("toymodel");
  ModelConfig cfg = small_config();
  Model a(cfg);
  Model b(cfg);
  CHECK(a.param_digest() == b.param_digest());

  const auto path = tmp.path() / "ckpt.tpfn";
  a.save(path);
  Model c = Model::load(path);
  CHECK(c.param_digest() == a.param_digest());

  const TabularDataset d = synthgen::gen_compound(10, 4, 6);
  CHECK(a.predict(d) == c.predict(d));
  CHECK(std::filesystem::exists(tmp.path() / "model.json"));
}

TEST_CASE("capacity errors") {
  ModelConfig cfg = small_config();
  cfg.max_features = 2;
  Model model(cfg);
  CHECK_THROWS_AS(model.predict(synthgen::gen_compound(8, 2, 1)), CapacityError);

  ModelConfig tiny = small_config();
  tiny.context_cap = 8;
  Model capped(tiny);
  CHECK_THROWS_AS(capped.predict(synthgen::gen_linear(1, 1, 16, 4, 1)), CapacityError);
}

TEST_CASE("config invariants") {
  ModelConfig cfg;
  cfg.embed_dim = 30;
  cfg.n_heads = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.n_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("gradient matches finite differences on the frozen miniature") {
  testutil::TempDir tmp("gradcheck");
  const auto check_config = [&](const ModelConfig& cfg, std::uint64_t data_seed) {
    Model model(cfg);
    const TabularDataset d = synthgen::gen_linear(1.2, -0.7, 6, 3, data_seed);

    double loss0 = 0.0;
    const std::vector<float> grad = model.training_gradient(d, &loss0);
    double gnorm = 0.0;
    for (float g : grad) gnorm += static_cast<double>(g) * g;
    gnorm = std::sqrt(gnorm);
    REQUIRE(gnorm > 0.0);

    std::vector<float> dir(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) {
      dir[i] = static_cast<float>(grad[i] / gnorm);
    }
    const double analytic = gnorm;  // g . (g/|g|)

    const auto ckpt = tmp.path() / "grad.tpfn";
    model.save(ckpt);
    const float eps = 1e-3f;

    Model plus = Model::load(ckpt);
    plus.nudge_parameters(dir, eps);
    const double lp = plus.training_loss(d);

    Model minus = Model::load(ckpt);
    minus.nudge_parameters(dir, -eps);
    const double lm = minus.training_loss(d);

    const double fd = (lp - lm) / (2.0 * static_cast<double>(eps));
    const double rel = std::abs(fd - analytic) / std::max(std::abs(analytic), 1e-12);
    INFO("analytic=" << analytic << " fd=" << fd << " rel=" << rel);
    CHECK(rel <= 1e-3);
  };

  check_config(miniature_config(), 3);

  ModelConfig two = miniature_config();
  two.n_layers = 2;
  check_config(two, 13);

  ModelConfig rev = miniature_config();
  rev.n_layers = 2;
  rev.attention_order = AttentionOrder::feature_then_sample;
  check_config(rev, 23);
}

TEST_CASE("meta_train with zero steps keeps the initialization") {
  Model model(small_config());
  const std::uint64_t before = model.param_digest();
  TrainConfig tc;
  tc.n_steps = 0;
  tc.eval_interval = 0;
  const TrainState st = meta_train(model, tc);
  CHECK(st.param_digest == before);
  CHECK(model.param_digest() == before);

  const double r2 = evaluate_family_r2(model, synthgen::Family::linear, tc, 17, 8);
  CHECK(r2 < 0.2);  // untrained baseline has no predictive skill
}

TEST_CASE("meta_train is deterministic and moves the loss") {
  TrainConfig tc;
  tc.n_steps = 20;
  tc.batch_tasks = 4;
  tc.eval_interval = 0;
  tc.max_train_rows = 24;
  tc.seed = 5;

  ModelConfig cfg = small_config();
  Model a(cfg);
  const TrainState sa = meta_train(a, tc);
  Model b(cfg);
  const TrainState sb = meta_train(b, tc);
  CHECK(sa.param_digest == sb.param_digest);
  CHECK(sa.param_digest != Model(cfg).param_digest());
  CHECK(std::isfinite(sa.final_loss));
}

TEST_CASE("train config invariants") {
  TrainConfig tc;
  tc.prior_mix = {{synthgen::Family::linear, 0.5}};
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc.prior_mix = {{synthgen::Family::linear, -0.2}, {synthgen::Family::compound, 1.2}};
  CHECK_THROWS_AS(tc.validate(), ConfigError);

  Model one_layer(miniature_config());
  TrainConfig ok;
  CHECK_THROWS_AS(meta_train(one_layer, ok), ConfigError);
}
