#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "m2unet/trainer.hpp"
#include "test_util.hpp"

using namespace m2unet;
using m2unet::testing::random_tensor;

namespace {

ParameterStore<double> scalar_store(double v) {
  ParameterStore<double> p;
  p.add("theta", Tensor<double>({1, 1, 1, 1}, v), 1, true);
  return p;
}

std::map<std::string, Tensor<double>> scalar_grad(double g) { return {{"theta", Tensor<double>({1, 1, 1, 1}, g)}}; }

ModelGraph<float> small_model(std::uint64_t seed = 0) {
  auto g = build_graph<float>(mini_layers(), 32, 32);
  init_weights(g, seed);
  return g;
}

}  // namespace

TEST(AdamW, ZeroGradientIsPureDecay) {
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  auto p = scalar_store(2.0);
  AdamWState<double> s;
  adamw_step(p, scalar_grad(0.0), s, cfg);
  EXPECT_DOUBLE_EQ(p["theta"][0], 2.0 * (1 - cfg.lr * 0.1));
  EXPECT_EQ(s.t, 1u);
}

TEST(AdamW, FirstStepByHand) {
  TrainConfig cfg;
  auto p = scalar_store(1.0);
  AdamWState<double> s;
  adamw_step(p, scalar_grad(1.0), s, cfg);
  EXPECT_NEAR(p["theta"][0], 1.0 - cfg.lr * (1.0 / (1.0 + cfg.eps)) - cfg.lr * cfg.weight_decay, 1e-15);
}

TEST(AdamW, FixedPointWithoutDecay) {
  TrainConfig cfg;
  cfg.weight_decay = 0;
  auto p = scalar_store(0.7);
  AdamWState<double> s;
  for (int i = 0; i < 3; ++i) adamw_step(p, scalar_grad(0.0), s, cfg);
  EXPECT_EQ(p["theta"][0], 0.7);
}

TEST(AdamW, NonFiniteGradientAbortsStep) {
  TrainConfig cfg;
  ParameterStore<double> p;
  p.add("a", Tensor<double>({1, 1, 1, 1}, 1.0), 1, true);
  p.add("b", Tensor<double>({1, 1, 1, 1}, 1.0), 1, true);
  AdamWState<double> s;
  std::map<std::string, Tensor<double>> g{{"a", Tensor<double>({1, 1, 1, 1}, 1.0)},
                                          {"b", Tensor<double>({1, 1, 1, 1}, std::numeric_limits<double>::quiet_NaN())}};
  EXPECT_THROW(adamw_step(p, g, s, cfg), NumericError);
  EXPECT_EQ(p["a"][0], 1.0);
  EXPECT_EQ(s.t, 0u);
}

TEST(AdamW, DecreasesQuadratic) {
  TrainConfig cfg;
  cfg.weight_decay = 0;
  for (double start : {-2.0, 0.5, 10.0}) {
    auto p = scalar_store(start);
    AdamWState<double> s;
    auto f = [](double t) { return (t - 3) * (t - 3); };
    const double before = f(p["theta"][0]);
    adamw_step(p, scalar_grad(2 * (p["theta"][0] - 3)), s, cfg);
    EXPECT_LT(f(p["theta"][0]), before);
  }
}

TEST(Init, DeterministicInSeed) {
  const auto a = small_model(5), b = small_model(5), c = small_model(6);
  bool differs = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params.entries()[i].value.vec(), b.params.entries()[i].value.vec());
    differs |= a.params.entries()[i].value.vec() != c.params.entries()[i].value.vec();
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.params["layers.0.0.conv.bn.gamma"][0], 1.0f);
  EXPECT_EQ(a.params["layers.0.0.conv.bn.beta"][0], 0.0f);
  for (float v : a.params["layers.0.0.conv.weight"].vec()) EXPECT_LE(std::abs(v), 1.0f / std::sqrt(27.0f));
}

TEST(Init, PretrainedEncoder) {
  auto donor = small_model(1);
  const auto wf = to_weight_file(donor);
  auto g = small_model(2);
  init_pretrained_encoder(g, wf, 3);
  EXPECT_EQ(g.params["layers.0.0.conv.weight"].vec(), donor.params["layers.0.0.conv.weight"].vec());
  EXPECT_EQ(g.params["layers.1.0.project.weight"].vec(), donor.params["layers.1.0.project.weight"].vec());
  EXPECT_NE(g.params["layers.3.0.expand.weight"].vec(), donor.params["layers.3.0.expand.weight"].vec());
}

TEST(Init, PretrainedShapeMismatchNamesTensor) {
  auto wf = to_weight_file(small_model(1));
  for (auto& t : wf.tensors) {
    if (t.name == "layers.1.0.dw.weight") t.value = Tensor<float>({48, 1, 5, 5});
  }
  auto g = small_model(2);
  const auto before = g.params["layers.0.0.conv.weight"].vec();
  try {
    init_pretrained_encoder(g, wf, 3);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.1.0.dw.weight"), std::string::npos);
  }
  EXPECT_EQ(g.params["layers.0.0.conv.weight"].vec(), before);
}

TEST(SelectBest, ArgmaxWithEarliestTie) {
  std::vector<EpochRecord> h{{1, 0.9, 0.5}, {2, 0.8, 0.7}, {3, 0.7, 0.7}, {4, 0.6, 0.6}};
  EXPECT_EQ(select_best(h), 1u);
  h.push_back({5, 0.5, 0.71});
  EXPECT_EQ(select_best(h), 4u);
  const std::vector<EpochRecord> none{{1, 0.9}, {2, 0.8}};
  EXPECT_EQ(select_best(none), 1u);
  EXPECT_THROW(select_best({}), UsageError);
}

TEST(Train, SingleEpochWithoutValidation) {
  auto g = small_model();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  const std::vector<Sample> data{synthetic_vessel_sample(32, 32, 1, "a"), synthetic_vessel_sample(32, 32, 2, "b")};
  const auto r = train(g, data, {}, cfg);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_TRUE(std::isnan(r.history[0].val_dice));
  EXPECT_FALSE(r.diverged);
}

TEST(Train, ReproducibleUnderSeed) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 9;
  const std::vector<Sample> data{synthetic_vessel_sample(32, 32, 1, "a"), synthetic_vessel_sample(32, 32, 2, "b"),
                                 synthetic_vessel_sample(32, 32, 3, "c")};
  const std::vector<Sample> val{synthetic_vessel_sample(32, 32, 4, "v")};
  auto g1 = small_model(), g2 = small_model();
  const auto a = train(g1, data, val, cfg), b = train(g2, data, val, cfg);
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].val_dice, b.history[i].val_dice);
  }
  EXPECT_EQ(a.best_epoch, select_best(a.history) + 1);
}

TEST(Train, ZeroLearningRateFreezesParameters) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 1;
  cfg.lr = 0;
  cfg.augment = false;
  auto g = small_model();
  const auto before = g;
  const auto r = train(g, {synthetic_vessel_sample(32, 32, 1)}, {}, cfg);
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    if (!g.params.entries()[i].trainable) continue;
    EXPECT_EQ(g.params.entries()[i].value.vec(), before.params.entries()[i].value.vec());
  }
  EXPECT_NEAR(r.history[0].loss, r.history[1].loss, 1e-6);
}

TEST(Train, AccumulationMatchesLargerBatchOnIdenticalSamples) {
  const auto s = synthetic_vessel_sample(32, 32, 1);
  auto g = small_model();
  const auto one_img = stack_images<float>({&s.image}), one_mask = stack_images<float>({&s.mask});
  const auto two_img = stack_images<float>({&s.image, &s.image}), two_mask = stack_images<float>({&s.mask, &s.mask});
  std::map<std::string, Tensor<float>> big, acc;
  const double l2 = batch_gradients(g, two_img, two_mask, 0.3, 1.0, big);
  const double l1a = batch_gradients(g, one_img, one_mask, 0.3, 0.5, acc);
  const double l1b = batch_gradients(g, one_img, one_mask, 0.3, 0.5, acc);
  EXPECT_NEAR(l2, 0.5 * (l1a + l1b), 1e-5);
  ASSERT_EQ(big.size(), acc.size());
  double num = 0, den = 0;
  for (const auto& [name, grad] : big) {
    num = std::max(num, static_cast<double>(max_abs_diff(grad, acc.at(name))));
    for (float v : grad.vec()) den = std::max(den, static_cast<double>(std::abs(v)));
  }
  EXPECT_LT(num / den, 1e-4);
}

TEST(Train, AccumulationRunsFullEpochs) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 1;
  cfg.accumulation = 2;
  cfg.augment = false;
  const std::vector<Sample> data{synthetic_vessel_sample(32, 32, 1, "a"), synthetic_vessel_sample(32, 32, 2, "b"),
                                 synthetic_vessel_sample(32, 32, 3, "c")};
  auto g = small_model();
  const auto before = g.params["layers.0.0.conv.weight"].vec();
  const auto r = train(g, data, {}, cfg);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_NE(r.best.params["layers.0.0.conv.weight"].vec(), before);
}

TEST(Train, DivergenceReturnsLastGoodCheckpoint) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 1;
  cfg.augment = false;
  auto bad = synthetic_vessel_sample(32, 32, 1);
  bad.image[5] = std::numeric_limits<float>::quiet_NaN();
  auto g = small_model();
  const auto before = g;
  const auto r = train(g, {bad}, {}, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best.params.entries()[0].value.vec(), before.params.entries()[0].value.vec());
}

TEST(Train, RejectsBadConfig) {
  auto g = small_model();
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train(g, {synthetic_vessel_sample(32, 32, 1)}, {}, cfg), ConfigError);
  cfg.epochs = 1;
  cfg.lr = -1;
  EXPECT_THROW(train(g, {synthetic_vessel_sample(32, 32, 1)}, {}, cfg), ConfigError);
}

TEST(History, CsvLayout) {
  const auto path = std::filesystem::temp_directory_path() / "m2u_history_test.csv";
  write_history({{1, 0.5, 0.25}, {2, 0.4}}, path);
  std::ifstream in(path);
  std::string a, b, c;
  std::getline(in, a);
  std::getline(in, b);
  std::getline(in, c);
  EXPECT_EQ(a, "epoch,loss,val_dice");
  EXPECT_EQ(b, "1,0.5,0.25");
  EXPECT_EQ(c, "2,0.4,");
  std::filesystem::remove(path);
}

TEST(Synthetic, VesselSampleIsDeterministicAndBinary) {
  const auto a = synthetic_vessel_sample(64, 64, 3), b = synthetic_vessel_sample(64, 64, 3);
  EXPECT_EQ(a.image.vec(), b.image.vec());
  EXPECT_EQ(a.mask.vec(), b.mask.vec());
  double pos = 0;
  for (float v : a.mask.vec()) {
    EXPECT_TRUE(v == 0.0f || v == 1.0f);
    pos += v;
  }
  EXPECT_GT(pos, 0.0);
  EXPECT_LT(pos, 4096.0);
}

TEST(Config, JsonRoundTripAndDefaults) {
  TrainConfig cfg;
  cfg.lr = 5e-4;
  cfg.epochs = 7;
  cfg.augmentation.rotation_deg = 9;
  const auto back = train_config_from_json(nlohmann::json(cfg));
  EXPECT_EQ(back.lr, 5e-4);
  EXPECT_EQ(back.epochs, 7u);
  EXPECT_EQ(back.augmentation.rotation_deg, 9);
  const auto partial = train_config_from_json(nlohmann::json::parse(R"({"batch_size": 2})"));
  EXPECT_EQ(partial.batch_size, 2u);
  EXPECT_EQ(partial.lr, TrainConfig{}.lr);
  EXPECT_EQ(partial.augmentation.c_hue, AugmentConfig{}.c_hue);
}

TEST(Config, RejectsUnknownAndInvalidFields) {
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"learning_rate": 1})")), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"augmentation": {"spin": 1}})")), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"lr": "fast"})")), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse(R"({"epochs": 0})")), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::parse("[1, 2]")), ConfigError);
}
