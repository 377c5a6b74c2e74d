#include "expertnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string_view>
#include <exception>
#include <thread>
#include <type_traits>

namespace expertnet::train {

namespace {

void shuffle_indices(std::vector<std::size_t>& v, SeededRng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_index(i)]);
}

std::string format_number(double v) {
  std::ostringstream out;
  out << std::setprecision(6) << v;
  return out.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ArgumentError("learning rate must be a finite value >= 0");
  }
  if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  if (epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must be in [0, 1)");
  if (threads < 1) throw ArgumentError("threads must be >= 1");
  if (checkpoint_every > 0 && checkpoint_path.empty()) {
    throw ArgumentError("checkpoint interval set without a checkpoint path");
  }
}

template <Real T>
Sgd<T>::Sgd(double learning_rate, double momentum)
    : lr_(static_cast<T>(learning_rate)), momentum_(static_cast<T>(momentum)) {
  if (!(learning_rate >= 0.0)) throw ArgumentError("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must be in [0, 1)");
}

template <Real T>
void Sgd<T>::step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p]->shape() != grads[p].shape()) {
      throw ShapeError("sgd: parameter " + std::to_string(p) + " has shape " +
                       params[p]->shape().str() + ", gradient " + grads[p].shape().str());
    }
  }
  if (momentum_ == T(0)) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto w = params[p]->data();
      auto g = grads[p].data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
    }
    return;
  }
  if (velocity_.empty()) {
    for (const auto& g : grads) velocity_.emplace_back(g.shape(), T(0));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p]->data();
    auto v = velocity_[p].data();
    auto g = grads[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= lr_ * v[i];
    }
  }
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < classes; ++i) t += at(i, i);
  return t;
}

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (std::size_t c : counts) t += c;
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t t = 0;
  for (std::size_t p = 0; p < classes; ++p) t += at(truth, p);
  return t;
}

std::string ConfusionMatrix::format(std::span<const std::string> class_names) const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < classes; ++i) {
    names.push_back(i < class_names.size() ? class_names[i] : std::to_string(i));
  }
  std::size_t width = std::string_view("true\\pred").size();
  for (const auto& n : names) width = std::max(width, n.size());
  for (std::size_t c : counts) width = std::max(width, std::to_string(c).size());
  std::ostringstream out;
  out << std::setw(static_cast<int>(width)) << "true\\pred";
  for (const auto& n : names) out << ' ' << std::setw(static_cast<int>(width)) << n;
  out << '\n';
  for (std::size_t t = 0; t < classes; ++t) {
    out << std::setw(static_cast<int>(width)) << names[t];
    for (std::size_t p = 0; p < classes; ++p) out << ' ' << std::setw(static_cast<int>(width)) << at(t, p);
    out << '\n';
  }
  return out.str();
}

double recognition_accuracy(std::size_t correct, std::size_t total) {
  if (total == 0) throw UsageError("accuracy of zero samples is undefined");
  return static_cast<double>(correct) / static_cast<double>(total) * 100.0;
}

template <Real T>
std::size_t argmax(std::span<const T> values) {
  if (values.empty()) throw ArgumentError("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

EvalResult score_predictions(std::span<const std::size_t> labels,
                             std::span<const std::size_t> predictions, std::size_t classes) {
  if (labels.size() != predictions.size()) {
    throw ArgumentError("score: " + std::to_string(labels.size()) + " labels but " +
                        std::to_string(predictions.size()) + " predictions");
  }
  if (labels.empty()) throw UsageError("cannot score zero samples");
  EvalResult result{0.0, ConfusionMatrix(classes), {predictions.begin(), predictions.end()}};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predictions[i] >= classes) {
      throw ArgumentError("score: class index out of range");
    }
    ++result.confusion.at(labels[i], predictions[i]);
  }
  result.accuracy = recognition_accuracy(result.confusion.trace(), labels.size());
  return result;
}

template <Real T>
Tensor<T> make_batch(const data::Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw UsageError("cannot build an empty batch");
  std::vector<Tensor<T>> parts;
  parts.reserve(indices.size());
  for (std::size_t i : indices) {
    if constexpr (std::is_same_v<T, float>) {
      parts.push_back(dataset.samples.at(i).image);
    } else {
      parts.push_back(dataset.samples.at(i).image.template cast<T>());
    }
  }
  return concat_batch<T>(parts);
}

template <Real T>
EvalResult evaluate(const Network<T>& net, const data::Dataset& dataset,
                    std::span<const std::size_t> indices, std::size_t batch_size) {
  if (indices.empty()) throw UsageError("cannot evaluate zero samples");
  if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  const std::size_t classes = net.config().num_classes();
  std::vector<std::size_t> labels, predictions;
  for (std::size_t first = 0; first < indices.size(); first += batch_size) {
    const auto chunk = indices.subspan(first, std::min(batch_size, indices.size() - first));
    const auto logits = net.forward(make_batch<T>(dataset, chunk)).logits;
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      const auto row = std::span<const T>(logits.data()).subspan(n * classes, classes);
      predictions.push_back(argmax(row));
      labels.push_back(dataset.samples[chunk[n]].label);
    }
  }
  return score_predictions(labels, predictions, classes);
}

template <Real T>
LossAndGrads<T> batch_gradients(const Network<T>& net, const Tensor<T>& batch,
                                std::span<const std::size_t> labels, std::size_t threads) {
  const std::size_t n = batch.shape().n();
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, n);
  if (workers == 1) return loss_and_gradients(net, batch, labels);

  std::vector<std::size_t> bounds(workers + 1, 0);
  for (std::size_t w = 0; w <= workers; ++w) bounds[w] = n * w / workers;
  std::vector<LossAndGrads<T>> partial(workers);
  std::vector<std::exception_ptr> failures(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          const std::size_t first = bounds[w], count = bounds[w + 1] - bounds[w];
          partial[w] = loss_and_gradients(net, batch.batch_slice(first, count),
                                          labels.subspan(first, count));
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  LossAndGrads<T> total{T(0), {}, {}, {}};
  std::vector<Tensor<T>> logit_parts;
  for (std::size_t w = 0; w < workers; ++w) {
    const T weight = static_cast<T>(bounds[w + 1] - bounds[w]) / static_cast<T>(n);
    total.loss += weight * partial[w].loss;
    total.per_item.insert(total.per_item.end(), partial[w].per_item.begin(), partial[w].per_item.end());
    logit_parts.push_back(std::move(partial[w].logits));
    if (w == 0) {
      total.grads = std::move(partial[0].grads);
      for (auto& g : total.grads) {
        for (T& v : g.data()) v *= weight;
      }
    } else {
      for (std::size_t p = 0; p < total.grads.size(); ++p) {
        auto dst = total.grads[p].data();
        auto src = partial[w].grads[p].data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += weight * src[i];
      }
    }
  }
  total.logits = concat_batch<T>(logit_parts);
  return total;
}

template <Real T>
Metrics train_loop(Network<T>& net, const data::Dataset& dataset, const TrainConfig& config,
                   std::ostream* log, const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  std::vector<std::size_t> order = dataset.indices(data::SplitTag::train);
  if (order.empty()) throw UsageError("training split is empty");
  const std::vector<std::size_t> val = dataset.indices(data::SplitTag::val);
  const std::size_t classes = net.config().num_classes();
  for (std::size_t i : order) {
    if (dataset.samples[i].label >= classes) {
      throw DataError("sample " + dataset.samples[i].source + " has label " +
                      std::to_string(dataset.samples[i].label) + " but the model has " +
                      std::to_string(classes) + " classes");
    }
  }

  if (log) {
    *log << "# lr=" << format_number(config.learning_rate) << " batch=" << config.batch_size
         << " epochs=" << config.epochs << " momentum=" << format_number(config.momentum)
         << " seed=" << config.seed << " threads=" << config.threads << " train=" << order.size()
         << " val=" << val.size() << '\n'
         << "epoch\ttrain_loss\ttrain_acc\tval_acc\n";
  }

  SeededRng rng(config.seed);
  Sgd<T> sgd(config.learning_rate, config.momentum);
  auto params = net.parameters();
  Metrics metrics;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.shuffle) shuffle_indices(order, rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      const auto chunk =
          std::span<const std::size_t>(order).subspan(first, std::min(config.batch_size, order.size() - first));
      std::vector<std::size_t> labels;
      for (std::size_t i : chunk) labels.push_back(dataset.samples[i].label);
      auto step = batch_gradients(net, make_batch<T>(dataset, chunk), labels, config.threads);
      if (!std::isfinite(static_cast<double>(step.loss))) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      loss_sum += static_cast<double>(step.loss) * static_cast<double>(chunk.size());
      for (std::size_t n = 0; n < chunk.size(); ++n) {
        const auto row = std::span<const T>(step.logits.data()).subspan(n * classes, classes);
        if (argmax(row) == labels[n]) ++correct;
      }
      sgd.step(params, step.grads);
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(order.size());
    em.train_accuracy = recognition_accuracy(correct, order.size());
    if (!val.empty()) em.val_accuracy = evaluate(net, dataset, val).accuracy;
    metrics.epochs.push_back(em);
    if (log) {
      *log << epoch << '\t' << std::fixed << std::setprecision(6) << em.train_loss << '\t'
           << std::setprecision(2) << em.train_accuracy << '\t';
      if (em.val_accuracy) {
        *log << *em.val_accuracy;
      } else {
        *log << "nan";
      }
      *log << std::defaultfloat << std::setprecision(6) << '\n' << std::flush;
    }
    if (on_epoch) on_epoch(em);
    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) {
      save_model_file(net, config.checkpoint_path);
    }
  }
  return metrics;
}

CrossValidation crossvalidate(const ModelConfig& model, const TrainConfig& config,
                              const data::Dataset& dataset, std::size_t folds) {
  config.validate();
  const auto partition = data::kfold_partition(dataset, folds, config.seed);
  CrossValidation cv;
  for (std::size_t f = 0; f < partition.size(); ++f) {
    data::Dataset fold_data;
    fold_data.class_names = dataset.class_names;
    fold_data.samples = dataset.samples;
    for (auto& s : fold_data.samples) s.tag = data::SplitTag::train;
    for (std::size_t i : partition[f].test) fold_data.samples[i].tag = data::SplitTag::test;

    TrainConfig fold_config = config;
    fold_config.seed = config.seed + f;
    SeededRng rng(fold_config.seed);
    auto net = Network<float>::build(model, rng);
    FoldResult result;
    result.fold = f;
    result.test_size = partition[f].test.size();
    result.metrics = train_loop(net, fold_data, fold_config);
    result.test_accuracy = evaluate(net, fold_data, partition[f].test).accuracy;
    result.metrics.test_accuracy = result.test_accuracy;
    cv.folds.push_back(std::move(result));
  }
  double sum = 0.0;
  for (const auto& r : cv.folds) sum += r.test_accuracy;
  cv.mean_accuracy = sum / static_cast<double>(cv.folds.size());
  double var = 0.0;
  for (const auto& r : cv.folds) var += (r.test_accuracy - cv.mean_accuracy) * (r.test_accuracy - cv.mean_accuracy);
  cv.stddev_accuracy = std::sqrt(var / static_cast<double>(cv.folds.size()));
  return cv;
}

#define EXPERTNET_INSTANTIATE(T)                                                                  \
  template class Sgd<T>;                                                                          \
  template std::size_t argmax(std::span<const T>);                                                \
  template Tensor<T> make_batch<T>(const data::Dataset&, std::span<const std::size_t>);          \
  template EvalResult evaluate(const Network<T>&, const data::Dataset&,                           \
                               std::span<const std::size_t>, std::size_t);                        \
  template LossAndGrads<T> batch_gradients(const Network<T>&, const Tensor<T>&,                   \
                                           std::span<const std::size_t>, std::size_t);            \
  template Metrics train_loop(Network<T>&, const data::Dataset&, const TrainConfig&,              \
                              std::ostream*, const std::function<void(const EpochMetrics&)>&);

EXPERTNET_INSTANTIATE(float)
EXPERTNET_INSTANTIATE(double)

#undef EXPERTNET_INSTANTIATE

}  // namespace expertnet::train
