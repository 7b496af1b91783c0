#include <gtest/gtest.h>

#include <cmath>

#include "detox/erasure.hpp"
#include "detox/error.hpp"
#include "detox/finetune.hpp"
#include "detox/model.hpp"
#include "detox/util.hpp"
#include "support.hpp"

namespace detox {
namespace {

using testing::linear;
using testing::make_batch;
using testing::make_tensor;

// Input (3, 1, 1) -> "fc" (identity, 3 wide) -> "head" (1 logit).
Model identity_model(std::vector<double> head_w = {0.5, -1.0, 2.0}, double head_b = 0.25) {
  std::vector<Block> blocks;
  blocks.push_back(Block{"fc", {Flatten{}, linear(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0})}});
  blocks.push_back(Block{"head", {linear(3, 1, std::move(head_w), {head_b})}});
  return Model("toy:3x1x1", {3, 1, 1}, std::move(blocks));
}

LabeledBatch rows(const std::vector<std::vector<double>>& r) {
  std::vector<double> v;
  for (const auto& row : r) v.insert(v.end(), row.begin(), row.end());
  const std::size_t n = r.size(), d = r.front().size();
  return make_batch(make_tensor({n, d, 1, 1}, v), std::vector<int>(n, 0), std::vector<int>(n, 0));
}

LabeledBatch random_images(const Model& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> shape = m.input_shape();
  shape.insert(shape.begin(), n);
  Tensor t(shape);
  for (double& v : t.values()) v = rng.uniform();
  std::vector<int> y(n), a(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 2);
    a[i] = static_cast<int>((i / 2) % 2);
  }
  return make_batch(std::move(t), std::move(y), std::move(a));
}

TEST(Layers, MlpRegistry) {
  const Model m = make_model("mlp:3x4x4", 0);
  const auto layers = m.list_layers();
  ASSERT_EQ(layers.size(), 2u);
  EXPECT_EQ(layers[0], (LayerId{"fc1", 8}));
  EXPECT_EQ(layers[1], (LayerId{"fc2", 1}));
  EXPECT_EQ(m.list_layers(), layers);
}

TEST(Layers, SmallCnnHasFourBlocksAndHead) {
  const Model m = make_model("small_cnn:3x32x32", 0);
  const auto layers = m.list_layers();
  ASSERT_EQ(layers.size(), 5u);
  const std::size_t dims[] = {8, 16, 32, 32, 1};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(layers[i].dim, dims[i]);
  EXPECT_EQ(m.default_target_layer().name, "block4");
  EXPECT_LT(m.parameter_count(), 100000u);
}

TEST(Layers, UnknownLayerAndArchitecture) {
  const Model m = make_model("mlp:1x2x2", 0);
  try {
    m.layer("nope");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownLayer);
  }
  try {
    make_model("resnet:3x32x32", 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnsupportedArchitecture);
  }
  EXPECT_THROW(make_model("mlp:3x32", 0), Error);
}

TEST(Capture, IdentityLayerReturnsInput) {
  const Model m = identity_model();
  const auto acts = m.capture_activations(rows({{1, 2, 3}}), m.layer("fc"));
  EXPECT_EQ(acts.values.rows(), 1);
  EXPECT_EQ(acts.values(0, 0), 1.0);
  EXPECT_EQ(acts.values(0, 1), 2.0);
  EXPECT_EQ(acts.values(0, 2), 3.0);
}

TEST(Capture, ConstantEraserMakesRowsConstant) {
  const Model m = identity_model();
  AffineEraser e = AffineEraser::identity(m.layer("fc"));
  e.matrix.setZero();
  e.bias = Eigen::Vector3d(0.1, 0.2, 0.3);
  const Model edited = m.install_eraser(e);
  const auto batch = rows({{1, 2, 3}, {-4, 5, 0}, {7, 7, 7}});
  const auto acts = edited.capture_activations(batch, edited.layer("fc"));
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_TRUE(acts.values.row(i).transpose().isApprox(e.bias));
  const auto scores = edited.predict_scores(batch);
  EXPECT_EQ(scores[0], scores[1]);
  EXPECT_EQ(scores[1], scores[2]);
}

TEST(Capture, HandComputedMlp) {
  // fc1: W1 = [[1, -1], [0.5, 2]], b1 = [0.1, -0.2], tanh; head: w = [1, -2], b = 0.3.
  std::vector<Block> blocks;
  blocks.push_back(Block{"fc1", {Flatten{}, linear(2, 2, {1, -1, 0.5, 2}, {0.1, -0.2}), Tanh{}}});
  blocks.push_back(Block{"fc2", {linear(2, 1, {1, -2}, {0.3})}});
  const Model m("toy:2x1x1", {2, 1, 1}, std::move(blocks));
  const auto batch = rows({{0.3, -0.7}, {1.0, 0.5}, {0.0, 0.0}});
  const auto acts = m.capture_activations(batch, m.layer("fc1"));
  const auto scores = m.predict_scores(batch);
  const double in[3][2] = {{0.3, -0.7}, {1.0, 0.5}, {0.0, 0.0}};
  for (int i = 0; i < 3; ++i) {
    const double h0 = std::tanh(in[i][0] - in[i][1] + 0.1);
    const double h1 = std::tanh(0.5 * in[i][0] + 2 * in[i][1] - 0.2);
    EXPECT_NEAR(acts.values(i, 0), h0, 1e-12);
    EXPECT_NEAR(acts.values(i, 1), h1, 1e-12);
    EXPECT_NEAR(scores[static_cast<std::size_t>(i)], 1.0 / (1.0 + std::exp(-(h0 - 2 * h1 + 0.3))),
                1e-6);
  }
}

TEST(Capture, EmptyBatchRaises) {
  const Model m = identity_model();
  LabeledBatch empty{Tensor({0, 3, 1, 1}), {}, {}};
  try {
    m.predict_scores(empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyBatch);
  }
}

TEST(Scores, ZeroWeightsGiveHalf) {
  const Model m = identity_model({0, 0, 0}, 0.0);
  for (double s : m.predict_scores(rows({{1, 2, 3}, {-5, 0, 9}}))) EXPECT_EQ(s, 0.5);
}

TEST(Scores, LogisticAtZeroIsSigmoidOfBias) {
  std::vector<Block> blocks;
  blocks.push_back(Block{"fc", {Flatten{}, linear(1, 1, {2.0}, {-0.7})}});
  const Model m("logistic:1x1x1", {1, 1, 1}, std::move(blocks));
  EXPECT_NEAR(m.predict_scores(rows({{0.0}}))[0], 1.0 / (1.0 + std::exp(0.7)), 1e-15);
}

TEST(Scores, TwoLogitHeadIsSoftmax) {
  std::vector<Block> blocks;
  blocks.push_back(Block{"fc", {Flatten{}, linear(1, 2, {1.0, -1.0}, {0.2, 0.0})}});
  const Model m("pair:1x1x1", {1, 1, 1}, std::move(blocks));
  const double x = 0.4, l0 = x + 0.2, l1 = -x;
  EXPECT_NEAR(m.predict_scores(rows({{x}}))[0], std::exp(l1) / (std::exp(l0) + std::exp(l1)),
              1e-12);
}

TEST(Eraser, IdentityEditPreservesScores) {
  const Model m = make_model("small_cnn:3x16x16", 1);
  const auto batch = random_images(m, 6, 2);
  const Model edited = m.install_eraser(AffineEraser::identity(m.layer("block2")));
  EXPECT_EQ(m.predict_scores(batch), edited.predict_scores(batch));
}

TEST(Eraser, ConstantAtLastHiddenLayerGivesConstantScores) {
  const Model m = make_model("small_cnn:3x16x16", 1);
  AffineEraser e = AffineEraser::identity(m.layer("block4"));
  e.matrix.setZero();
  e.bias.setConstant(0.3);
  const auto scores = m.install_eraser(e).predict_scores(random_images(m, 5, 3));
  for (double s : scores) EXPECT_EQ(s, scores[0]);
}

TEST(Eraser, DimensionMismatchRejected) {
  const Model m = identity_model();
  AffineEraser e;
  e.layer = LayerId{"fc", 3};
  e.matrix = Eigen::MatrixXd::Identity(2, 2);
  e.bias = Eigen::VectorXd::Zero(2);
  try {
    m.install_eraser(e);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kDimensionMismatch);
  }
  e.layer.name = "missing";
  EXPECT_THROW(m.install_eraser(e), Error);
}

TEST(Eraser, LeaceTwoPathEquivalence) {
  Model m = make_model("mlp:2x3x3:h6", 4);
  const auto batch = random_images(m, 40, 5);
  const LayerId layer = m.layer("fc1");
  const auto acts = m.capture_activations(batch, layer);
  const AffineEraser e = fit_leace(acts, batch.a);
  const auto erased = apply_eraser(acts, e);
  // Head by hand: sigmoid(w . x + b).
  const Linear& head = std::get<Linear>(m.blocks()[1].ops[0]);
  const auto scores = m.install_eraser(e).predict_scores(batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double z = head.bias[0];
    for (std::size_t j = 0; j < 6; ++j) z += head.weight[j] * erased.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    EXPECT_NEAR(scores[i], sigmoid(z), 1e-12);
  }
}

TEST(Eraser, SpatialEditEqualsPooledEditBeforeGlobalPooling) {
  // The head averages over space, so a per-location affine edit of block4
  // equals the same edit of the pooled vector.
  const Model m = make_model("small_cnn:3x32x32", 6);
  const auto batch = random_images(m, 4, 7);
  const LayerId layer = m.layer("block4");
  const auto acts = m.capture_activations(batch, layer);
  Rng rng(8);
  AffineEraser e = AffineEraser::identity(layer);
  for (Eigen::Index i = 0; i < e.matrix.size(); ++i) e.matrix.data()[i] += 0.1 * rng.normal();
  for (Eigen::Index i = 0; i < e.bias.size(); ++i) e.bias(i) = 0.1 * rng.normal();
  const auto pooled = apply_eraser(acts, e);
  const auto edited = m.install_eraser(e);
  const auto after = edited.capture_activations(batch, layer);
  EXPECT_TRUE(after.values.isApprox(pooled.values, 1e-12));
}

TEST(Invariants, EditLocality) {
  const Model m = make_model("small_cnn:3x16x16", 9);
  const auto batch = random_images(m, 4, 10);
  AffineEraser e = AffineEraser::identity(m.layer("block3"));
  e.bias.setConstant(0.5);
  const Model edited = m.install_eraser(e);
  for (const char* before : {"block1", "block2"}) {
    EXPECT_EQ(m.capture_activations(batch, m.layer(before)).values,
              edited.capture_activations(batch, edited.layer(before)).values);
  }
  EXPECT_NE(m.capture_activations(batch, m.layer("block3")).values,
            edited.capture_activations(batch, edited.layer("block3")).values);
}

TEST(Invariants, CloneIsolation) {
  const Model original = make_model("small_cnn:3x16x16", 11);
  const auto batch = random_images(original, 6, 12);
  const auto scores = original.predict_scores(batch);
  const auto hash = original.weight_hash();
  Model clone = original.clone();
  clone.set_mode(Mode::kFinetune);
  Optimizer opt(OptimizerKind::kAdam, 1e-2);
  const LossFn loss = [](std::span<const double> m, const LabeledBatch& b) {
    return task_loss(m, b.y);
  };
  for (int i = 0; i < 3; ++i) finetune_step(clone, batch, loss, TrainableScope::kAll, opt);
  clone = clone.install_eraser(AffineEraser::identity(clone.layer("block1")));
  EXPECT_EQ(original.predict_scores(batch), scores);
  EXPECT_EQ(original.weight_hash(), hash);
  EXPECT_NE(clone.weight_hash(), hash);
}

TEST(Invariants, InferenceIsDeterministic) {
  const Model m = make_model("smooth_cnn:3x8x8", 13);
  const auto batch = random_images(m, 5, 14);
  EXPECT_EQ(m.predict_scores(batch), m.predict_scores(batch));
  EXPECT_EQ(m.capture_activations(batch, m.layer("conv1")).values,
            m.capture_activations(batch, m.layer("conv1")).values);
}

// One-parameter toy: margin = w * 1 + b with x = 1.
Model scalar_model() {
  std::vector<Block> blocks;
  blocks.push_back(Block{"fc", {Flatten{}, linear(1, 1, {0.0}, {0.0})}});
  return Model("logistic:1x1x1", {1, 1, 1}, std::move(blocks));
}

TEST(FinetuneStep, QuadraticToyTakesAnalyticStep) {
  Model m = scalar_model();
  m.set_mode(Mode::kFinetune);
  const auto batch = rows({{1.0}});
  const LossFn quad = [](std::span<const double> margin, const LabeledBatch&) {
    return LossValue{(margin[0] - 3) * (margin[0] - 3), {2 * (margin[0] - 3)}, false, 0.0};
  };
  Optimizer sgd(OptimizerKind::kSgd, 0.1);
  const double loss = finetune_step(m, batch, quad, TrainableScope::kAll, sgd);
  EXPECT_DOUBLE_EQ(loss, 9.0);
  const Linear& fc = std::get<Linear>(m.blocks()[0].ops[1]);
  EXPECT_NEAR(fc.weight[0], 0.6, 1e-15);
}

TEST(FinetuneStep, ZeroLearningRateLeavesParameters) {
  Model m = make_model("mlp:1x3x3", 15);
  m.set_mode(Mode::kFinetune);
  const auto hash = m.weight_hash();
  const auto batch = random_images(m, 8, 16);
  const double loss = finetune_step(m, batch, LossSpec{}, 0.0);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_EQ(m.weight_hash(), hash);
}

TEST(FinetuneStep, RequiresFinetuneMode) {
  Model m = make_model("mlp:1x3x3", 15);
  try {
    finetune_step(m, random_images(m, 4, 1), LossSpec{}, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidState);
  }
}

TEST(FinetuneStep, NonFiniteLossLeavesParameters) {
  Model m = make_model("mlp:1x3x3", 17);
  m.set_mode(Mode::kFinetune);
  const auto hash = m.weight_hash();
  const LossFn bad = [](std::span<const double> margin, const LabeledBatch&) {
    return LossValue{std::nan(""), std::vector<double>(margin.size(), 0.0), false, 0.0};
  };
  Optimizer sgd(OptimizerKind::kSgd, 0.1);
  try {
    finetune_step(m, random_images(m, 4, 1), bad, TrainableScope::kAll, sgd);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteLoss);
  }
  EXPECT_EQ(m.weight_hash(), hash);
}

TEST(FinetuneStep, LossFallsOnSeparableToy) {
  // Label = sign of the first pixel.
  Model m = make_model("mlp:1x2x2", 18);
  m.set_mode(Mode::kFinetune);
  Rng rng(19);
  const std::size_t n = 64;
  Tensor x({n, 1, 2, 2});
  std::vector<int> y(n), a(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 4; ++j) x[i * 4 + j] = rng.uniform(-1, 1);
    y[i] = x[i * 4] > 0 ? 1 : 0;
    a[i] = static_cast<int>(i % 2);
  }
  const auto batch = make_batch(std::move(x), y, a);
  LossSpec spec;
  spec.lambda = 0.0;
  spec.scope = TrainableScope::kAll;
  std::vector<double> losses;
  for (int s = 0; s < 50; ++s) losses.push_back(finetune_step(m, batch, spec, 0.5));
  // Smoothed over windows of 10 steps.
  for (std::size_t w = 10; w < 50; w += 10) {
    double prev = 0, cur = 0;
    for (std::size_t k = 0; k < 10; ++k) {
      prev += losses[w - 10 + k];
      cur += losses[w + k];
    }
    EXPECT_LT(cur, prev);
  }
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
  for (const char* arch : {"small_cnn:3x16x16", "smooth_cnn:3x8x8", "mlp:2x3x3"}) {
    Model m = make_model(arch, 20);
    const auto batch = random_images(m, 3, 21);
    ForwardOptions fo;
    fo.keep_trace = true;
    const auto pass = m.forward(batch.images, fo);
    const std::vector<double> ones(batch.size(), 1.0);
    const auto grads = m.backward(pass, ones);
    const auto sum_margin = [&](const Model& mm) {
      const auto p = mm.forward(batch.images);
      double s = 0;
      for (double v : p.margin) s += v;
      return s;
    };
    Rng rng(22);
    auto params = m.parameters();
    for (int k = 0; k < 20; ++k) {
      const std::size_t pi = rng.index(params.size());
      const std::size_t idx = rng.index(params[pi].tensor->size());
      const double orig = (*params[pi].tensor)[idx];
      (*params[pi].tensor)[idx] = orig + 1e-5;
      const double up = sum_margin(m);
      (*params[pi].tensor)[idx] = orig - 1e-5;
      const double down = sum_margin(m);
      (*params[pi].tensor)[idx] = orig;
      const double fd = (up - down) / 2e-5;
      const double an = grads.params[pi][idx];
      EXPECT_NEAR(an, fd, 1e-5 * std::max(1.0, std::abs(fd))) << arch << " param " << pi;
    }
  }
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  testing::TempDir dir;
  const Model m = make_model("small_cnn:3x16x16", 23);
  AffineEraser e = AffineEraser::identity(m.layer("block4"));
  e.bias.setConstant(0.25);
  e.kind = EraserKind::kPClarc;
  const Model edited = m.install_eraser(e);
  save_model(edited, dir / "m.dtx");
  const Model loaded = load_model(dir / "m.dtx", "small_cnn:3x16x16");
  EXPECT_EQ(loaded.fingerprint(), edited.fingerprint());
  const auto batch = random_images(m, 3, 24);
  EXPECT_EQ(loaded.predict_scores(batch), edited.predict_scores(batch));
  EXPECT_THROW(load_model(dir / "m.dtx", "small_cnn:3x32x32"), Error);
  EXPECT_THROW(load_model(dir / "missing.dtx", "small_cnn:3x16x16"), Error);
}

TEST(Registry, CustomArchitecture) {
  register_architecture("tiny_test", [](const std::vector<std::size_t>& shape, std::string_view,
                                        std::uint64_t) {
    std::vector<Block> blocks;
    blocks.push_back(Block{"fc", {Flatten{}, linear(shape_size(shape), 1,
                                                    std::vector<double>(shape_size(shape), 0.0),
                                                    {0.0})}});
    return Model("tiny_test:1x2x2", shape, std::move(blocks));
  });
  const Model m = make_model("tiny_test:1x2x2", 0);
  EXPECT_EQ(m.parameter_count(), 5u);
  const auto names = registered_architectures();
  EXPECT_NE(std::find(names.begin(), names.end(), "tiny_test"), names.end());
}

}  // namespace
}  // namespace detox
