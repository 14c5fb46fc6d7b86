#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "sflab/grad_check.hpp"
#include "sflab/scene_gen.hpp"
#include "sflab/training.hpp"

using namespace sflab;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.n_input = 32;
  c.level_sizes = {8, 6, 4, 3};
  c.level_widths = {3, 4, 5, 6};
  c.embed_width = 5;
  c.flow_feat_width = 3;
  c.scale_factor = 1;
  c.seed = 2;
  return c;
}

// A pyramid with chosen flows, for loss tests that bypass the network.
FlowPyramid manual_pyramid(const std::vector<std::vector<double>>& flows) {
  FlowPyramid p;
  for (int l = 0; l < 4; ++l) {
    const int64_t n = static_cast<int64_t>(flows[l].size()) / 3;
    std::vector<double> coords(n * 3, 0.0);
    p.levels[l].coords = DiffArray::leaf({n, 3}, coords);
    p.levels[l].flow = DiffArray::leaf({n, 3}, flows[l], /*requires_grad=*/true);
    p.levels[l].input_indices.resize(n);
    std::iota(p.levels[l].input_indices.begin(), p.levels[l].input_indices.end(), 0);
  }
  return p;
}

LevelTargets manual_targets(const FlowPyramid& p, const std::vector<std::vector<double>>& gts,
                            std::vector<std::vector<uint8_t>> masks = {}) {
  LevelTargets t;
  for (int l = 0; l < 4; ++l) {
    t.gt[l] = gts[l];
    if (masks.empty()) {
      t.mask[l].assign(gts[l].size() / 3, 1);
    } else {
      t.mask[l] = masks[l];
    }
  }
  return t;
}

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "sflab_train_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("learning rate schedule hits the documented boundaries") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == 0.001);
  CHECK(lr_at(79, cfg) == 0.001);
  CHECK(lr_at(80, cfg) == 0.0005);
  CHECK(lr_at(160, cfg) == 0.00025);
  CHECK_THROWS_AS(lr_at(-1, cfg), std::invalid_argument);

  double prev = lr_at(0, cfg);
  for (int e = 1; e < 400; ++e) {
    const double lr = lr_at(e, cfg);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("loss is zero when every level matches its target") {
  std::vector<std::vector<double>> flows{
      {0.1, 0.2, 0.3, -0.1, 0.0, 0.5},
      {0.4, 0.4, 0.4},
      {0.0, 0.0, 0.0},
      {1.0, -1.0, 0.25},
  };
  FlowPyramid p = manual_pyramid(flows);
  LevelTargets t = manual_targets(p, flows);
  DiffArray loss = multiscale_loss(p, t, LossConfig{});
  CHECK(loss.item() == 0.0);
}

TEST_CASE("single-point 3-4-5 loss with the finest weight") {
  std::vector<std::vector<double>> flows{
      {3.0, 4.0, 0.0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  std::vector<std::vector<double>> gts{{0.0, 0.0, 0.0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  FlowPyramid p = manual_pyramid(flows);
  LevelTargets t = manual_targets(p, gts);
  DiffArray loss = multiscale_loss(p, t, LossConfig{});
  CHECK(loss.item() == Catch::Approx(0.1).margin(1e-15));  // 0.02 * 5
}

TEST_CASE("masking drops points from both the sum and the count") {
  std::vector<std::vector<double>> flows{
      {1, 0, 0, 5, 0, 0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  std::vector<std::vector<double>> gts{{0, 0, 0, 0, 0, 0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  FlowPyramid p = manual_pyramid(flows);

  LevelTargets all_valid = manual_targets(p, gts);
  LossConfig cfg;
  const double unmasked = multiscale_loss(p, all_valid, cfg).item();
  CHECK(unmasked == Catch::Approx(0.02 * 3.0).margin(1e-15));  // mean(1, 5) = 3

  cfg.mask_mode = MaskMode::none;
  CHECK(multiscale_loss(p, all_valid, cfg).item() == unmasked);  // bit-exact

  cfg.mask_mode = MaskMode::exclude_invalid;
  LevelTargets half = manual_targets(
      p, gts, {{1, 0}, {1}, {1}, {1}});
  CHECK(multiscale_loss(p, half, cfg).item() == Catch::Approx(0.02 * 1.0).margin(1e-15));
}

TEST_CASE("fully masked levels contribute zero loss and zero gradients") {
  std::vector<std::vector<double>> flows{
      {2, 2, 2}, {3, 3, 3}, {4, 4, 4}, {5, 5, 5}};
  std::vector<std::vector<double>> gts{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  FlowPyramid p = manual_pyramid(flows);
  LevelTargets t = manual_targets(p, gts, {{0}, {0}, {0}, {0}});
  DiffArray loss = multiscale_loss(p, t, LossConfig{});
  CHECK(loss.item() == 0.0);
  backprop(loss);
  for (int l = 0; l < 4; ++l) {
    REQUIRE(p.levels[l].flow.has_grad());
    for (double g : p.levels[l].flow.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("level target count mismatch is rejected") {
  std::vector<std::vector<double>> flows{
      {1, 0, 0, 0, 1, 0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  FlowPyramid p = manual_pyramid(flows);
  LevelTargets t = manual_targets(p, {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
  CHECK_THROWS_AS(multiscale_loss(p, t, LossConfig{}), std::invalid_argument);
}

TEST_CASE("per-point loss gradient norm is bounded by psi over the level count") {
  Rng rng(17);
  std::vector<std::vector<double>> flows(4), gts(4);
  const int64_t counts[4] = {6, 5, 3, 2};
  for (int l = 0; l < 4; ++l) {
    for (int64_t i = 0; i < counts[l] * 3; ++i) {
      flows[l].push_back(uniform(rng, -1, 1));
      gts[l].push_back(uniform(rng, -1, 1));
    }
  }
  FlowPyramid p = manual_pyramid(flows);
  LevelTargets t = manual_targets(p, gts);
  LossConfig cfg;
  backprop(multiscale_loss(p, t, cfg));
  for (int l = 0; l < 4; ++l) {
    auto grad = p.levels[l].flow.grad();
    for (int64_t i = 0; i < counts[l]; ++i) {
      double norm2 = 0.0;
      for (int c = 0; c < 3; ++c) norm2 += grad[i * 3 + c] * grad[i * 3 + c];
      CHECK(std::sqrt(norm2) <= cfg.psi[l] / counts[l] + 1e-12);
    }
  }
}

TEST_CASE("loss gradient matches finite differences through the pyramid") {
  Rng rng(23);
  std::vector<std::vector<double>> flows(4), gts(4);
  const int64_t counts[4] = {5, 4, 3, 2};
  for (int l = 0; l < 4; ++l) {
    for (int64_t i = 0; i < counts[l] * 3; ++i) {
      flows[l].push_back(uniform(rng, -1, 1));
      gts[l].push_back(uniform(rng, -1, 1));
    }
  }
  FlowPyramid p = manual_pyramid(flows);
  LevelTargets t = manual_targets(p, gts);
  std::vector<DiffArray> leaves;
  for (int l = 0; l < 4; ++l) leaves.push_back(p.levels[l].flow);
  double err = grad_check([&]() { return multiscale_loss(p, t, LossConfig{}); }, leaves, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("one epoch over one sample performs exactly one optimizer step") {
  Model m = build(tiny_config());
  SceneGenConfig g;
  g.n_points = 32;
  g.seed = 5;
  std::vector<ScenePair> pairs{generate(g)};
  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.batch_size = 1;
  TrainResult r = train(m, pairs, tcfg, LossConfig{}, "");
  CHECK(m.store.step_count() == 1);
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].lr == 0.001);
}

TEST_CASE("training is deterministic: identical checkpoints and logs per seed") {
  SceneGenConfig g;
  g.n_points = 32;
  std::vector<ScenePair> pairs;
  for (int i = 0; i < 3; ++i) {
    g.seed = 50 + i;
    pairs.push_back(generate(g));
  }
  TrainConfig tcfg;
  tcfg.epochs = 3;
  tcfg.batch_size = 2;
  tcfg.seed = 7;

  fs::path d1 = scratch_dir("run1");
  fs::path d2 = scratch_dir("run2");
  Model m1 = build(tiny_config());
  Model m2 = build(tiny_config());
  train(m1, pairs, tcfg, LossConfig{}, d1.string());
  train(m2, pairs, tcfg, LossConfig{}, d2.string());

  CHECK(file_bytes((d1 / "checkpoint_final.ckpt").string()) ==
        file_bytes((d2 / "checkpoint_final.ckpt").string()));
  CHECK(file_bytes((d1 / "loss_log.csv").string()) ==
        file_bytes((d2 / "loss_log.csv").string()));
}

TEST_CASE("a short run on two pairs reduces the loss") {
  SceneGenConfig g;
  g.n_points = 32;
  g.n_objects = 1;
  g.translation_range = 0.3;
  g.rotation_range = 0.0;
  std::vector<ScenePair> pairs;
  for (int i = 0; i < 2; ++i) {
    g.seed = 70 + i;
    pairs.push_back(generate(g));
  }
  Model m = build(tiny_config());
  TrainConfig tcfg;
  tcfg.epochs = 40;
  tcfg.batch_size = 2;
  TrainResult r = train(m, pairs, tcfg, LossConfig{}, "");
  REQUIRE(r.log.size() == 40);
  CHECK(r.log.back().mean_loss < 0.6 * r.log.front().mean_loss);
}

TEST_CASE("non-finite losses abort with the epoch and batch named") {
  Model m = build(tiny_config());
  // Corrupt the finest residual head: the resulting flow overflows the loss
  // but feeds no further layer.
  {
    auto w = m.store.at("refine1.predictor.head.W").mutable_values();
    for (auto& v : w) v = 1e300;
  }
  SceneGenConfig g;
  g.n_points = 32;
  g.seed = 5;
  std::vector<ScenePair> pairs{generate(g)};
  TrainConfig tcfg;
  tcfg.epochs = 1;
  CHECK_THROWS_WITH(train(m, pairs, tcfg, LossConfig{}, ""),
                    Catch::Matchers::ContainsSubstring("epoch 0") &&
                        Catch::Matchers::ContainsSubstring("batch 0"));
}

TEST_CASE("checkpoints resume cleanly through the store") {
  fs::path dir = scratch_dir("resume");
  Model m = build(tiny_config());
  SceneGenConfig g;
  g.n_points = 32;
  g.seed = 81;
  std::vector<ScenePair> pairs{generate(g)};
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 1;
  train(m, pairs, tcfg, LossConfig{}, dir.string());

  Model resumed = build(tiny_config());
  resumed.store.load((dir / "checkpoint_final.ckpt").string());
  CHECK(resumed.store.step_count() == m.store.step_count());
  // One more epoch continues from the loaded state without error.
  TrainResult r = train(resumed, pairs, tcfg, LossConfig{}, "");
  CHECK(resumed.store.step_count() == 2 * m.store.step_count());
  CHECK(r.log.size() == 2);
}
