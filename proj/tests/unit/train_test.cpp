#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>
#include <unistd.h>
#include <vector>

#include "expertnet/data.hpp"
#include "expertnet/errors.hpp"
#include "expertnet/model.hpp"
#include "expertnet/train.hpp"

namespace fs = std::filesystem;
using namespace expertnet;

namespace {

ModelConfig small_config(std::size_t classes) {
  auto config = parse_config(desk_config_text());
  config.in_channels = 1;
  config.in_height = config.in_width = 16;
  config.layers.back().out = classes;
  return config;
}

data::Dataset small_dataset(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  data::SynthSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.size = 16;
  spec.seed = seed;
  auto d = data::synth_dataset(spec);
  for (auto& s : d.samples) {
    TensorF gray(Shape(1, 1, 16, 16));
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = s.image[i];
    s.image = gray;
  }
  return d;
}

std::vector<TensorF> snapshot(Network<float>& net) {
  std::vector<TensorF> out;
  for (const auto* p : net.parameters()) out.push_back(*p);
  return out;
}

bool bit_equal(const TensorF& a, const TensorF& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  }
  return true;
}

train::Metrics run(const data::Dataset& d, const ModelConfig& config, train::TrainConfig tc, Network<float>* out = nullptr) {
  SeededRng rng(tc.seed);
  auto net = Network<float>::build(config, rng);
  auto m = train::train_loop(net, d, tc);
  if (out) *out = std::move(net);
  return m;
}

}  // namespace

TEST(SgdTest, PlainStep) {
  TensorF w(Shape(1, 1, 1, 1), 1.0f);
  std::vector<TensorF*> params{&w};
  std::vector<TensorF> grads{TensorF(w.shape(), 0.5f)};
  train::Sgd<float> sgd(0.1, 0.0);
  sgd.step(params, grads);
  EXPECT_FLOAT_EQ(w[0], 0.95f);
}

TEST(SgdTest, ZeroGradientLeavesParams) {
  SeededRng rng(1);
  TensorF w = TensorF::randn(Shape(1, 2, 3, 3), 1.0f, rng);
  const TensorF before = w;
  std::vector<TensorF*> params{&w};
  std::vector<TensorF> grads{TensorF(w.shape())};
  train::Sgd<float> sgd(0.1, 0.9);
  sgd.step(params, grads);
  EXPECT_TRUE(bit_equal(w, before));
}

TEST(SgdTest, MomentumHandIteration) {
  TensorD w(Shape(1, 1, 1, 1), 0.0);
  std::vector<TensorD*> params{&w};
  std::vector<TensorD> grads{TensorD(w.shape(), 1.0)};
  train::Sgd<double> sgd(0.1, 0.9);
  sgd.step(params, grads);
  EXPECT_NEAR(w[0], -0.1, 1e-15);
  sgd.step(params, grads);
  EXPECT_NEAR(sgd.velocity()[0][0], 1.9, 1e-15);
  EXPECT_NEAR(w[0], -0.29, 1e-15);
}

TEST(SgdTest, MomentumZeroIsTextbookBitExact) {
  SeededRng rng(2);
  TensorF w = TensorF::randn(Shape(1, 1, 4, 4), 1.0f, rng);
  const TensorF g = TensorF::randn(w.shape(), 1.0f, rng);
  TensorF expected = w;
  const float lr = 0.003f;
  for (std::size_t i = 0; i < w.size(); ++i) expected[i] = w[i] - lr * g[i];
  std::vector<TensorF*> params{&w};
  std::vector<TensorF> grads{g};
  train::Sgd<float> sgd(lr, 0.0);
  sgd.step(params, grads);
  EXPECT_TRUE(bit_equal(w, expected));
}

TEST(SgdTest, ShapeMismatch) {
  TensorF w(Shape(1, 1, 1, 2));
  std::vector<TensorF*> params{&w};
  std::vector<TensorF> grads{TensorF(Shape(1, 1, 1, 3))};
  train::Sgd<float> sgd(0.1, 0.0);
  EXPECT_THROW(sgd.step(params, grads), ShapeError);
  EXPECT_THROW(sgd.step(params, {}), ShapeError);
}

TEST(TrainConfigTest, Validation) {
  train::TrainConfig tc;
  EXPECT_NO_THROW(tc.validate());
  EXPECT_EQ(tc.learning_rate, 1e-3);
  EXPECT_EQ(tc.batch_size, 35u);
  EXPECT_EQ(tc.epochs, 200u);
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), ArgumentError);
  tc = {};
  tc.momentum = 1.0;
  EXPECT_THROW(tc.validate(), ArgumentError);
  tc = {};
  tc.learning_rate = -1.0;
  EXPECT_THROW(tc.validate(), ArgumentError);
}

TEST(TrainLoopTest, ZeroLearningRateFreezesParameters) {
  const auto d = small_dataset(3, 6, 1);
  const auto config = small_config(3);
  SeededRng rng(3);
  auto net = Network<float>::build(config, rng);
  const auto before = snapshot(net);
  train::TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 3;
  tc.batch_size = 4;
  train::train_loop(net, d, tc);
  const auto after = snapshot(net);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(bit_equal(before[i], after[i]));
}

TEST(TrainLoopTest, SameSeedSameLosses) {
  auto d = small_dataset(3, 8, 2);
  data::split_dataset(d, 2);
  train::TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 5;
  tc.seed = 4;
  const auto a = run(d, small_config(3), tc);
  const auto b = run(d, small_config(3), tc);
  ASSERT_EQ(a.epochs.size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(a.epochs[e].train_loss, b.epochs[e].train_loss);
    EXPECT_EQ(a.epochs[e].val_accuracy, b.epochs[e].val_accuracy);
    EXPECT_GE(a.epochs[e].train_accuracy, 0.0);
    EXPECT_LE(a.epochs[e].train_accuracy, 100.0);
  }
}

TEST(TrainLoopTest, ThreadedGradientsAgreeWithSequential) {
  const auto config = small_config(3);
  SeededRng rng(5);
  const auto net = Network<float>::build(config, rng);
  const auto batch = TensorF::randn(Shape(7, 1, 16, 16), 1.0f, rng);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, 0};
  const auto seq = train::batch_gradients(net, batch, labels, 1);
  const auto par = train::batch_gradients(net, batch, labels, 3);
  const auto par2 = train::batch_gradients(net, batch, labels, 3);
  EXPECT_NEAR(seq.loss, par.loss, 1e-5);
  ASSERT_EQ(seq.grads.size(), par.grads.size());
  for (std::size_t p = 0; p < seq.grads.size(); ++p) {
    EXPECT_TRUE(bit_equal(par.grads[p], par2.grads[p]));
    for (std::size_t i = 0; i < seq.grads[p].size(); ++i) {
      EXPECT_NEAR(seq.grads[p][i], par.grads[p][i], 1e-5 + 1e-4 * std::abs(seq.grads[p][i]));
    }
  }
}

TEST(TrainLoopTest, LogHeaderAndLines) {
  auto d = small_dataset(2, 6, 3);
  data::split_dataset(d, 3);
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 6;
  SeededRng rng(6);
  auto net = Network<float>::build(small_config(2), rng);
  std::ostringstream log;
  train::train_loop(net, d, tc, &log);
  const std::string text = log.str();
  EXPECT_EQ(text.rfind("# lr=0.001 batch=35 epochs=2 momentum=0 seed=6", 0), 0u) << text;
  EXPECT_NE(text.find("\nepoch\ttrain_loss\ttrain_acc\tval_acc\n"), std::string::npos);
  EXPECT_NE(text.find("\n1\t"), std::string::npos);
  EXPECT_NE(text.find("\n2\t"), std::string::npos);
}

TEST(TrainLoopTest, Checkpoint) {
  const fs::path path = fs::temp_directory_path() / ("expertnet_ckpt_" + std::to_string(::getpid()) + ".bin");
  const auto d = small_dataset(2, 4, 4);
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.checkpoint_every = 1;
  tc.checkpoint_path = path.string();
  Network<float> net = Network<float>::zeros(small_config(2));
  run(d, small_config(2), tc, &net);
  const auto loaded = load_model_file<float>(path.string());
  EXPECT_EQ(loaded.parameter_count(), net.parameter_count());
  fs::remove(path);
}

TEST(TrainLoopTest, EmptyTrainSplit) {
  auto d = small_dataset(2, 4, 5);
  for (auto& s : d.samples) s.tag = data::SplitTag::test;
  SeededRng rng(7);
  auto net = Network<float>::build(small_config(2), rng);
  EXPECT_THROW(train::train_loop(net, d, train::TrainConfig{}), UsageError);
}

TEST(EvaluateTest, AccuracyArithmetic) {
  const std::vector<std::size_t> labels{0, 1, 2, 3};
  EXPECT_EQ(train::score_predictions(labels, std::vector<std::size_t>{0, 1, 2, 0}, 4).accuracy, 75.0);
  EXPECT_EQ(train::score_predictions(labels, labels, 4).accuracy, 100.0);
  EXPECT_EQ(train::recognition_accuracy(3, 4), 75.0);
  EXPECT_THROW(train::recognition_accuracy(0, 0), UsageError);
}

TEST(EvaluateTest, RandomPredictorNearChance) {
  const std::size_t n = 7000, k = 7;
  SeededRng rng(8);
  std::vector<std::size_t> labels, predictions;
  for (std::size_t i = 0; i < n; ++i) {
    labels.push_back(i % k);
    predictions.push_back(rng.uniform_index(k));
  }
  const double p = 1.0 / static_cast<double>(k);
  const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n)) * 100.0;
  ASSERT_LE(12.0, p * 100.0 - 4.0 * sigma);
  ASSERT_GE(16.6, p * 100.0 + 4.0 * sigma);
  const auto r = train::score_predictions(labels, predictions, k);
  EXPECT_GE(r.accuracy, 12.0);
  EXPECT_LE(r.accuracy, 16.6);
}

TEST(EvaluateTest, ConfusionConsistency) {
  SeededRng rng(9);
  std::vector<std::size_t> labels, predictions;
  for (int i = 0; i < 200; ++i) {
    labels.push_back(rng.uniform_index(5));
    predictions.push_back(rng.uniform_index(5));
  }
  const auto r = train::score_predictions(labels, predictions, 5);
  EXPECT_EQ(r.confusion.total(), 200u);
  EXPECT_EQ(r.accuracy, static_cast<double>(r.confusion.trace()) / 200.0 * 100.0);
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_EQ(r.confusion.row_sum(c), static_cast<std::size_t>(std::count(labels.begin(), labels.end(), c)));
  }
}

TEST(EvaluateTest, ArgmaxTieTakesLowestIndex) {
  const std::vector<float> v{1.0f, 3.0f, 3.0f, 2.0f};
  EXPECT_EQ(train::argmax<float>(v), 1u);
}

TEST(EvaluateTest, BatchSizeDoesNotChangePredictions) {
  const auto d = small_dataset(3, 5, 6);
  SeededRng rng(10);
  const auto net = Network<float>::build(small_config(3), rng);
  std::vector<std::size_t> all(d.samples.size());
  std::iota(all.begin(), all.end(), 0);
  const auto one = train::evaluate(net, d, all, 1);
  const auto big = train::evaluate(net, d, all, 64);
  EXPECT_EQ(one.predictions, big.predictions);
  EXPECT_THROW(train::evaluate(net, d, std::vector<std::size_t>{}), UsageError);
}

TEST(CrossValidationTest, FiveFoldsOn400) {
  data::SynthSpec spec;
  spec.classes = 4;
  spec.per_class = 100;
  spec.size = 32;
  spec.seed = 3;
  const auto d = data::synth_dataset(spec);
  train::TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  tc.seed = 2;
  const auto cv = train::crossvalidate(parse_config(desk_config_text()), tc, d, 5);
  ASSERT_EQ(cv.folds.size(), 5u);
  double sum = 0.0;
  for (const auto& f : cv.folds) {
    EXPECT_EQ(f.test_size, 80u);
    sum += f.test_accuracy;
  }
  EXPECT_DOUBLE_EQ(cv.mean_accuracy, sum / 5.0);
}

TEST(CrossValidationTest, RerunReproduces) {
  const auto d = small_dataset(2, 4, 7);
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 3;
  tc.seed = 11;
  const auto a = train::crossvalidate(small_config(2), tc, d, 2);
  const auto b = train::crossvalidate(small_config(2), tc, d, 2);
  ASSERT_EQ(a.folds.size(), 2u);
  for (std::size_t f = 0; f < 2; ++f) {
    EXPECT_EQ(a.folds[f].test_accuracy, b.folds[f].test_accuracy);
    EXPECT_EQ(a.folds[f].metrics.epochs.back().train_loss, b.folds[f].metrics.epochs.back().train_loss);
  }
}

TEST(CrossValidationTest, TooManyFolds) {
  const auto d = small_dataset(2, 4, 8);
  EXPECT_THROW(train::crossvalidate(small_config(2), train::TrainConfig{}, d, 5), DataError);
}
