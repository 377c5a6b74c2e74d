#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "expertnet/gradcheck.hpp"
#include "expertnet/netpbm.hpp"
#include "expertnet/ops.hpp"
#include "expertnet/tensor.hpp"

namespace expertnet {

enum class LayerKind { conv, exfeat, add, fc, classifier };

std::string_view to_string(LayerKind kind);

// Kernel extents of the four ExFeat branches.
inline constexpr std::array<std::size_t, 4> kExfeatKernels{1, 3, 5, 7};

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;
  std::size_t kernel = 0;  // conv only
  std::size_t out = 0;     // conv channels, fc units, classifier classes
  int stride = 1;          // conv only
  ops::Activation act = ops::Activation::identity;
  std::string skip;  // add only

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  ops::ElectiveMode elective_mode = ops::ElectiveMode::literal;
  std::vector<LayerSpec> layers;

  std::size_t num_classes() const;
  Shape input_shape(std::size_t batch = 1) const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One declaration per line:
//   input channels=3 height=128 width=128
//   elective mode=literal
//   conv name=Conv1 k=5 out=32 stride=1 act=relu
//   exfeat name=ExFeat1
//   add name=Add1 skip=Conv2
//   fc name=FC1 out=512 act=relu
//   classifier name=Classifier classes=7
// '#' starts a comment. Layer order defines the wiring: every layer reads
// the previous layer's output; add layers also read their skip source.
// Throws ConfigError with the offending line number.
ModelConfig parse_config(std::string_view text);
ModelConfig load_config(const std::string& path);
std::string format_config(const ModelConfig& config);

// Built-in configurations: the full 128x128 network and the 32x32 desk
// profile (8/16/24/32 channels, two ExFeat blocks).
std::string_view canonical_config_text();
std::string_view desk_config_text();

struct LayerInfo {
  std::string name;
  LayerKind kind;
  Shape output;  // (1, C, H, W)
  std::size_t params = 0;
};

// Validates the config and returns the per-layer output shapes and closed-
// form parameter counts. Throws ConfigError.
std::vector<LayerInfo> propagate_shapes(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Parameter audit against the reference per-layer counts.

struct ReferenceCount {
  std::string_view layer;
  std::string_view printed;  // as printed, e.g. "86K"
  std::size_t nominal;       // printed value in units, e.g. 86000
};

// Reference "# Param" column, keyed by layer name.
std::span<const ReferenceCount> reference_counts();

struct AuditRow {
  std::string name;
  LayerKind kind;
  Shape output;
  std::size_t params = 0;
  std::optional<ReferenceCount> reference;
  // Computed count rounded half-up to thousands equals the printed value.
  bool matches_reference = true;
  long long delta = 0;  // params - nominal
};

struct ParamAudit {
  std::vector<AuditRow> rows;
  std::size_t total = 0;
  bool canonical = false;  // every reference layer present with the reference shapes
};

ParamAudit audit_parameters(const ModelConfig& config);
std::string format_audit(const ParamAudit& audit);

// ---------------------------------------------------------------------------

template <Real T>
using FeatureCapture = std::map<std::string, Tensor<T>>;

template <Real T>
class Network {
 public:
  // Saved activations of one forward pass, consumed by backward().
  struct Trace {
    struct Layer {
      Tensor<T> output;
      std::vector<Tensor<T>> branches;  // ExFeat branch responses
    };
    Tensor<T> input;
    std::vector<Layer> layers;
    bool valid = false;
  };

  struct ForwardResult {
    Tensor<T> logits;  // (N, classes, 1, 1)
    FeatureCapture<T> captures;
    Trace trace;
  };

  // Weights ~ N(0, 2 / fan_in), biases 0.
  static Network build(const ModelConfig& config, SeededRng& rng);
  // All parameters zero; used when loading.
  static Network zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<LayerInfo>& layers() const { return layers_; }
  std::size_t layer_index(std::string_view name) const;

  // Flat parameter list in declaration order (per layer: weights then bias;
  // ExFeat branches in kernel order 1, 3, 5, 7). Pointers stay valid until
  // the network is moved or destroyed.
  std::vector<Tensor<T>*> parameters();
  std::vector<const Tensor<T>*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  // Throws ShapeError when the batch does not match the configured input and
  // LookupError for unknown capture names.
  ForwardResult forward(const Tensor<T>& batch, const std::set<std::string>& capture = {}) const;

  // Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(logits).
  // Throws UsageError when the trace is not from a forward pass.
  std::vector<Tensor<T>> backward(const Trace& trace, const Tensor<T>& grad_logits) const;

  // Hash of every piecewise-linear branch decision in a trace: ReLU masks and
  // the elective argmax/argmin/nearest/sign choices.
  std::uint64_t decision_signature(const Trace& trace) const;

  template <Real U>
  Network<U> cast() const;

 private:
  template <Real U>
  friend class Network;

  struct LayerParams {
    std::vector<ops::ConvParams<T>> convs;  // conv: 1, exfeat: 4
    std::optional<ops::FcParams<T>> fc;
  };

  ModelConfig config_;
  std::vector<LayerInfo> layers_;
  std::vector<LayerParams> params_;
  std::vector<std::size_t> skip_index_;  // add layers; otherwise unused
};

// Mean softmax cross-entropy of a forward pass plus gradients, for training
// and verification.
template <Real T>
struct LossAndGrads {
  T loss;
  std::vector<T> per_item;
  Tensor<T> logits;
  std::vector<Tensor<T>> grads;
};

template <Real T>
LossAndGrads<T> loss_and_gradients(const Network<T>& net, const Tensor<T>& batch,
                                   std::span<const std::size_t> labels);

// Finite-difference check of full-network parameter gradients on `coords`
// randomly sampled coordinates. Coordinates whose +-eps probes change any
// ReLU/elective decision are replaced by fresh draws.
gradcheck::Report check_network(Network<double>& net, const TensorD& batch,
                                std::span<const std::size_t> labels, std::size_t coords,
                                SeededRng& rng, double eps = 1e-5);

// ---------------------------------------------------------------------------
// Serialization: "XPNM0001", version u32, config text (u32 length + UTF-8),
// precision tag u32 (32 or 64), then every parameter tensor in declaration
// order in the raw tensor dump format. Throws FormatError.

inline constexpr std::uint32_t kModelFormatVersion = 1;

template <Real T>
void save_model(const Network<T>& net, std::ostream& out);

template <Real T>
Network<T> load_model(std::istream& in);

template <Real T>
void save_model_file(const Network<T>& net, const std::string& path);

template <Real T>
Network<T> load_model_file(const std::string& path);

// ---------------------------------------------------------------------------

// One image per channel of batch item `item`, each linearly mapped from its
// own [min, max] to [0, 255]; constant channels become all-zero images.
// Throws LookupError when the layer was not captured.
template <Real T>
std::vector<GrayImage> dump_feature_maps(const FeatureCapture<T>& captures, std::string_view layer,
                                         std::size_t item = 0);

}  // namespace expertnet
