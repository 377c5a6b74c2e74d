#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "expertnet/data.hpp"
#include "expertnet/model.hpp"
#include "expertnet/netpbm.hpp"
#include "expertnet/train.hpp"
#include "expertnet/verify.hpp"

namespace fs = std::filesystem;
using namespace expertnet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("EXPERTNET_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used, 10);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("EXPERTNET_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

std::uint64_t announce_seed(const std::optional<std::uint64_t>& flag) {
  const std::uint64_t seed = resolve_seed(flag);
  std::cout << "seed: " << seed << '\n';
  return seed;
}

// A config file path, or one of the built-in names when no such file exists.
ModelConfig resolve_config(const std::string& spec) {
  if (!fs::exists(spec)) {
    if (spec == "desk") return parse_config(desk_config_text());
    if (spec == "canonical") return parse_config(canonical_config_text());
    throw ConfigError("config file " + spec + " not found");
  }
  return load_config(spec);
}

struct SynthOptions {
  std::string out;
  data::SynthSpec spec;
  std::optional<std::uint64_t> seed;
};

struct TrainOptions {
  std::string data_dir;
  std::string config = "desk";
  train::TrainConfig train;
  std::size_t augment = 0;
  std::optional<std::uint64_t> seed;
  std::string out = "model.bin";
  std::string log;
  std::string manifest;
};

struct CrossvalOptions {
  std::string data_dir;
  std::string config = "desk";
  train::TrainConfig train;
  std::size_t folds = 5;
  std::optional<std::uint64_t> seed;
};

struct EvalOptions {
  std::string data_dir;
  std::string model;
  std::string split = "test";
  std::string manifest;
  std::optional<std::uint64_t> seed;
  std::size_t batch = 64;
};

struct ParamsOptions {
  std::string config = "canonical";
  std::optional<std::uint64_t> seed;
};

struct GradcheckOptions {
  std::optional<std::uint64_t> seed;
  std::string op;
};

struct DumpOptions {
  std::string model;
  std::string image;
  std::vector<std::string> layers;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_train_flags(CLI::App* cmd, train::TrainConfig& t) {
  cmd->add_option("--lr", t.learning_rate, "Learning rate")->check(CLI::NonNegativeNumber);
  cmd->add_option("--batch", t.batch_size, "Mini-batch size");
  cmd->add_option("--epochs", t.epochs, "Training epochs");
  cmd->add_option("--momentum", t.momentum, "SGD momentum in [0, 1)");
  cmd->add_option("--threads", t.threads, "Worker threads per mini-batch; 1 is bit-deterministic");
}

void check_classes(const ModelConfig& config, const data::Dataset& dataset) {
  if (dataset.class_count() != config.num_classes()) {
    throw DataError("dataset has " + std::to_string(dataset.class_count()) + " classes but the model has " +
                    std::to_string(config.num_classes()));
  }
}

void report_skipped(const data::Dataset& dataset) {
  for (const auto& e : dataset.errors) std::cerr << "skipped " << e << '\n';
}

int run_synth(const SynthOptions& o) {
  data::SynthSpec spec = o.spec;
  spec.seed = announce_seed(o.seed);
  if (spec.classes < 2) throw UsageError("--classes must be >= 2");
  if (spec.per_class < 1) throw UsageError("--per-class must be >= 1");
  if (spec.size < 16) throw UsageError("--size must be >= 16");
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw DataError("cannot create " + o.out + ": " + ec.message());
  const std::size_t files = data::write_synth_dataset(spec, o.out);
  std::cout << "wrote " << files << " files to " << o.out << '\n';
  return kOk;
}

int run_train(const TrainOptions& o) {
  train::TrainConfig config = o.train;
  config.seed = announce_seed(o.seed);
  config.validate();
  const ModelConfig model = resolve_config(o.config);
  auto dataset = data::ingest_dataset(o.data_dir, model.in_channels, model.in_height, model.in_width);
  report_skipped(dataset);
  check_classes(model, dataset);
  data::split_dataset(dataset, config.seed);
  if (o.augment > 0) {
    data::AugmentSpec aug;
    aug.copies = o.augment;
    aug.seed = config.seed;
    data::augment_dataset(dataset, aug);
  }
  if (!o.manifest.empty()) data::write_split_manifest(dataset, o.manifest);
  std::cout << "samples: train=" << dataset.indices(data::SplitTag::train).size()
            << " val=" << dataset.indices(data::SplitTag::val).size()
            << " test=" << dataset.indices(data::SplitTag::test).size() << '\n';

  SeededRng init(config.seed);
  auto net = Network<float>::build(model, init);
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!o.log.empty()) {
    log_file.open(o.log);
    if (!log_file) throw DataError("cannot write log " + o.log);
    log = &log_file;
  }
  train::train_loop(net, dataset, config, log, [&](const train::EpochMetrics& m) {
    if (log != &std::cout && (m.epoch % 10 == 0 || m.epoch == config.epochs)) {
      std::cout << "epoch " << m.epoch << " loss " << m.train_loss << " train_acc " << m.train_accuracy << '\n';
    }
  });
  const auto test = dataset.indices(data::SplitTag::test);
  if (!test.empty()) {
    const auto result = train::evaluate(net, dataset, test);
    std::cout << "test accuracy: " << std::fixed << std::setprecision(1) << result.accuracy << '\n'
              << std::defaultfloat;
  }
  save_model_file(net, o.out);
  std::cout << "model: " << o.out << '\n';
  return kOk;
}

int run_crossval(const CrossvalOptions& o) {
  train::TrainConfig config = o.train;
  config.seed = announce_seed(o.seed);
  const ModelConfig model = resolve_config(o.config);
  const auto dataset = data::ingest_dataset(o.data_dir, model.in_channels, model.in_height, model.in_width);
  report_skipped(dataset);
  check_classes(model, dataset);
  const auto cv = train::crossvalidate(model, config, dataset, o.folds);
  std::cout << std::fixed << std::setprecision(1);
  for (const auto& f : cv.folds) {
    std::cout << "fold " << f.fold << ": accuracy " << f.test_accuracy << " (" << f.test_size << " samples)\n";
  }
  std::cout << "mean accuracy: " << cv.mean_accuracy << " stddev: " << cv.stddev_accuracy << '\n';
  return kOk;
}

int run_eval(const EvalOptions& o) {
  const std::uint64_t seed = announce_seed(o.seed);
  const auto net = load_model_file<float>(o.model);
  const ModelConfig& model = net.config();
  auto dataset = data::ingest_dataset(o.data_dir, model.in_channels, model.in_height, model.in_width);
  report_skipped(dataset);
  check_classes(model, dataset);
  if (!o.manifest.empty()) {
    data::apply_split_manifest(dataset, o.manifest);
  } else {
    data::split_dataset(dataset, seed);
  }
  std::vector<std::size_t> indices;
  if (o.split == "all") {
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) indices.push_back(i);
  } else {
    indices = dataset.indices(data::parse_split_tag(o.split));
  }
  if (indices.empty()) throw DataError("split '" + o.split + "' is empty");
  const auto result = train::evaluate(net, dataset, indices, o.batch);
  std::cout << "accuracy: " << std::fixed << std::setprecision(1) << result.accuracy << '\n'
            << std::defaultfloat << "samples: " << result.confusion.total() << '\n'
            << result.confusion.format(dataset.class_names);
  return kOk;
}

int run_params(const ParamsOptions& o) {
  announce_seed(o.seed);
  std::cout << format_audit(audit_parameters(resolve_config(o.config)));
  return kOk;
}

int run_gradcheck(const GradcheckOptions& o) {
  const std::uint64_t seed = announce_seed(o.seed);
  bool ok = true;
  for (const auto& r : verify::run_gradcheck_suite(seed, o.op)) {
    std::cout << verify::format_result(r) << '\n';
    ok = ok && r.passed();
  }
  std::cout << (ok ? "all checks passed" : "gradient check FAILED") << '\n';
  return ok ? kOk : kNumeric;
}

int run_dump(const DumpOptions& o) {
  announce_seed(o.seed);
  const auto net = load_model_file<float>(o.model);
  const ModelConfig& model = net.config();
  std::set<std::string> capture;
  for (const auto& l : o.layers) {
    net.layer_index(l);
    capture.insert(l);
  }
  const TensorF image = data::load_image(o.image, model.in_channels, model.in_height, model.in_width);
  const auto fwd = net.forward(image, capture);
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw DataError("cannot create " + o.out + ": " + ec.message());
  std::size_t written = 0;
  for (const auto& l : o.layers) {
    const auto maps = dump_feature_maps(fwd.captures, l);
    for (std::size_t c = 0; c < maps.size(); ++c) {
      write_file(fs::path(o.out) / (l + "_" + std::to_string(c) + ".pgm"), encode_pgm(maps[c]));
      ++written;
    }
  }
  std::cout << "wrote " << written << " feature maps to " << o.out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expression-recognition CNN: synthesis, training, evaluation and diagnostics"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic oriented-pattern dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--classes", synth.spec.classes, "Number of classes");
  synth_cmd->add_option("--per-class", synth.spec.per_class, "Images per class");
  synth_cmd->add_option("--size", synth.spec.size, "Image side length");
  synth_cmd->add_option("--noise", synth.spec.noise, "Gaussian pixel noise stddev");
  synth_cmd->add_option("--seed", synth.seed, "Seed (default: $EXPERTNET_SEED or 0)");

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Split, train and save a model");
  train_cmd->add_option("--data", tr.data_dir, "Dataset root with one directory per class")->required();
  train_cmd->add_option("--config", tr.config, "Model config file, or built-in 'desk' / 'canonical'");
  add_train_flags(train_cmd, tr.train);
  train_cmd->add_option("--augment", tr.augment, "Rotated copies per training image (0: none)");
  train_cmd->add_option("--seed", tr.seed, "Seed (default: $EXPERTNET_SEED or 0)");
  train_cmd->add_option("--out", tr.out, "Model output path");
  train_cmd->add_option("--log", tr.log, "Metrics log path (default: standard output)");
  train_cmd->add_option("--manifest", tr.manifest, "Write the train/val/test assignment here");
  train_cmd->add_option("--checkpoint-every", tr.train.checkpoint_every, "Checkpoint interval in epochs (0: off)");
  train_cmd->add_option("--checkpoint", tr.train.checkpoint_path, "Checkpoint path");

  CrossvalOptions cv;
  auto* cv_cmd = app.add_subcommand("crossval", "N-fold cross-validation");
  cv_cmd->add_option("--data", cv.data_dir, "Dataset root")->required();
  cv_cmd->add_option("--config", cv.config, "Model config file, or built-in 'desk' / 'canonical'");
  cv_cmd->add_option("--folds", cv.folds, "Number of folds");
  add_train_flags(cv_cmd, cv.train);
  cv_cmd->add_option("--seed", cv.seed, "Seed (default: $EXPERTNET_SEED or 0)");

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy and confusion matrix of a saved model");
  eval_cmd->add_option("--data", ev.data_dir, "Dataset root")->required();
  eval_cmd->add_option("--model", ev.model, "Model file")->required();
  eval_cmd->add_option("--split", ev.split, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval_cmd->add_option("--manifest", ev.manifest, "Split manifest written by train (overrides --seed)");
  eval_cmd->add_option("--batch", ev.batch, "Evaluation batch size")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ev.seed, "Seed used to reproduce the training split");

  ParamsOptions pa;
  auto* params_cmd = app.add_subcommand("params", "Per-layer output shapes and parameter counts");
  params_cmd->add_option("--config", pa.config, "Model config file, or built-in 'desk' / 'canonical'");
  params_cmd->add_option("--seed", pa.seed, "Seed (unused; echoed)");

  GradcheckOptions gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit");
  gc_cmd->add_option("--seed", gc.seed, "Seed (default: $EXPERTNET_SEED or 0)");
  gc_cmd->add_option("--op", gc.op, "Check one op or family: conv2d, relu, elective, additive, fc, softmax_xent, network");

  DumpOptions du;
  auto* dump_cmd = app.add_subcommand("dump-features", "Write per-channel feature maps as PGM files");
  dump_cmd->add_option("--model", du.model, "Model file")->required();
  dump_cmd->add_option("--image", du.image, "Input PGM/PPM image")->required();
  dump_cmd->add_option("--layers", du.layers, "Comma-separated layer names")->required()->delimiter(',');
  dump_cmd->add_option("--out", du.out, "Output directory")->required();
  dump_cmd->add_option("--seed", du.seed, "Seed (unused; echoed)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(tr);
    if (*cv_cmd) return run_crossval(cv);
    if (*eval_cmd) return run_eval(ev);
    if (*params_cmd) return run_params(pa);
    if (*gc_cmd) return run_gradcheck(gc);
    if (*dump_cmd) return run_dump(du);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
