#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "expertnet/data.hpp"
#include "expertnet/model.hpp"

namespace expertnet::train {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 35;
  std::size_t epochs = 200;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  bool shuffle = true;
  // Save a checkpoint to checkpoint_path every this many epochs (0: never).
  std::size_t checkpoint_every = 0;
  std::string checkpoint_path;
  // Workers per mini-batch. Results are bit-reproducible for a fixed thread
  // count; 1 matches the sequential reference exactly.
  std::size_t threads = 1;

  // Throws ArgumentError.
  void validate() const;
};

// v <- momentum * v + g;  w <- w - lr * v. Plain SGD when momentum == 0.
template <Real T>
class Sgd {
 public:
  Sgd(double learning_rate, double momentum);

  // Throws ShapeError when the lists are misaligned.
  void step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads);

  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

 private:
  T lr_;
  T momentum_;
  std::vector<Tensor<T>> velocity_;
};

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row = true class, column = predicted

  explicit ConfusionMatrix(std::size_t n = 0) : classes(n), counts(n * n, 0) {}

  std::size_t& at(std::size_t truth, std::size_t predicted) { return counts[truth * classes + predicted]; }
  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts[truth * classes + predicted];
  }
  std::size_t trace() const;
  std::size_t total() const;
  std::size_t row_sum(std::size_t truth) const;
  std::string format(std::span<const std::string> class_names = {}) const;
};

// Correct / total * 100.
double recognition_accuracy(std::size_t correct, std::size_t total);

// Index of the largest value; the lowest index wins ties.
template <Real T>
std::size_t argmax(std::span<const T> values);

struct EvalResult {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<std::size_t> predictions;
};

// Evaluates on labels/predictions directly.
EvalResult score_predictions(std::span<const std::size_t> labels,
                             std::span<const std::size_t> predictions, std::size_t classes);

// Throws UsageError for an empty index list.
template <Real T>
EvalResult evaluate(const Network<T>& net, const data::Dataset& dataset,
                    std::span<const std::size_t> indices, std::size_t batch_size = 64);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

struct Metrics {
  std::vector<EpochMetrics> epochs;
  std::optional<double> test_accuracy;
};

// Stacks the images of `indices` into one (N, C, H, W) batch.
template <Real T>
Tensor<T> make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices);

// Mean loss and mean gradient over one mini-batch, split across
// config.threads workers.
template <Real T>
LossAndGrads<T> batch_gradients(const Network<T>& net, const Tensor<T>& batch,
                                std::span<const std::size_t> labels, std::size_t threads);

// Per epoch: seeded shuffle of the train split, mini-batches of
// batch_size (the last may be short), mean softmax cross-entropy, backward,
// SGD step. Training accuracy is measured on the mini-batch forward passes;
// validation accuracy on the val split after the epoch. When `log` is set,
// writes a '#' header with the resolved settings and one
// `epoch\ttrain_loss\ttrain_acc\tval_acc` line per epoch.
// Throws UsageError for an empty train split and NumericError on a
// non-finite loss.
template <Real T>
Metrics train_loop(Network<T>& net, const data::Dataset& dataset, const TrainConfig& config,
                   std::ostream* log = nullptr,
                   const std::function<void(const EpochMetrics&)>& on_epoch = {});

struct FoldResult {
  std::size_t fold = 0;
  std::size_t test_size = 0;
  Metrics metrics;
  double test_accuracy = 0.0;
};

struct CrossValidation {
  std::vector<FoldResult> folds;
  double mean_accuracy = 0.0;
  double stddev_accuracy = 0.0;  // population standard deviation
};

// Trains a freshly initialized network per fold (seed + fold index) on the
// other N - 1 folds and scores it on the held-out fold.
CrossValidation crossvalidate(const ModelConfig& model, const TrainConfig& config,
                              const data::Dataset& dataset, std::size_t folds);

}  // namespace expertnet::train
