#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "expertnet/tensor.hpp"

// Layer primitives with hand-written backward passes. Every backward takes
// the upstream gradient of the forward output and returns gradients shaped
// exactly like the forward inputs and parameters.
namespace expertnet::ops {

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), square odd kernels, stride 1 or 2.

template <Real T>
struct ConvParams {
  Tensor<T> weights;  // (out_channels, in_channels, k, k)
  Tensor<T> bias;     // (1, 1, 1, out_channels)
  int stride = 1;
  int padding = -1;  // pixels per side; negative selects k / 2

  std::size_t kernel() const { return weights.shape().h(); }
  std::size_t out_channels() const { return weights.shape().n(); }
  std::size_t in_channels() const { return weights.shape().c(); }
  std::size_t pad() const {
    return padding < 0 ? kernel() / 2 : static_cast<std::size_t>(padding);
  }
};

template <Real T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

// Spatial output extent for one axis; throws ShapeError when < 1.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad,
                            std::size_t stride);

template <Real T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params);

template <Real T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& params,
                             const Tensor<T>& grad_out);

// ---------------------------------------------------------------------------
// ReLU. The subgradient at exactly 0 is 0.

template <Real T>
Tensor<T> relu(const Tensor<T>& input);

// `forward_value` may be either the ReLU input or its output: both are > 0
// at the same positions.
template <Real T>
Tensor<T> relu_backward(const Tensor<T>& forward_value, const Tensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Elective fusion of the four ExFeat branch responses, elementwise.
//
//   mid  = (max_n r_n + min_n r_n) / 2
//   d_n  = |mid - r_n|
//   literal:        out = mid + min_n d_n
//   nearest_branch: out = r_{argmin_n d_n}
//
// Ties resolve to the lowest branch index.

enum class ElectiveMode { literal, nearest_branch };

inline constexpr std::size_t kElectiveBranches = 4;

std::string_view to_string(ElectiveMode mode);
ElectiveMode parse_elective_mode(std::string_view text);

template <Real T>
Tensor<T> elective_fuse(std::span<const Tensor<T>> branches,
                        ElectiveMode mode = ElectiveMode::literal);

template <Real T>
std::array<Tensor<T>, kElectiveBranches> elective_backward(std::span<const Tensor<T>> branches,
                                                           const Tensor<T>& grad_out,
                                                           ElectiveMode mode = ElectiveMode::literal);

// Smallest distance between any two quantities whose ordering decides the
// elective subgradient (branch pairs, distance pairs, mid vs. the selected
// branch). Used to keep finite-difference probes away from kinks.
template <Real T>
T elective_kink_margin(std::span<const Tensor<T>> branches);

// Per-position decision code packing argmax, argmin, nearest branch and the
// sign of (mid - nearest). Equal codes mean the same linear piece.
template <Real T>
std::vector<std::uint8_t> elective_decisions(std::span<const Tensor<T>> branches);

// ---------------------------------------------------------------------------
// Additive (residual) layer.

template <Real T>
Tensor<T> additive(const Tensor<T>& a, const Tensor<T>& b);

// ---------------------------------------------------------------------------
// Fully connected: out = act(M z + bias), z the flattened batch item.

enum class Activation { identity, relu };

std::string_view to_string(Activation act);
Activation parse_activation(std::string_view text);

template <Real T>
struct FcParams {
  Tensor<T> weights;  // (1, 1, out_units, in_length)
  Tensor<T> bias;     // (1, 1, 1, out_units)

  std::size_t out_units() const { return weights.shape().h(); }
  std::size_t in_length() const { return weights.shape().w(); }
};

template <Real T>
struct FcGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

// Input (N, C, H, W) with C*H*W == in_length; output (N, out_units, 1, 1).
template <Real T>
Tensor<T> fc_forward(const Tensor<T>& input, const FcParams<T>& params, Activation act);

template <Real T>
FcGrads<T> fc_backward(const Tensor<T>& input, const FcParams<T>& params, Activation act,
                       const Tensor<T>& output, const Tensor<T>& grad_out);

// ---------------------------------------------------------------------------
// Softmax cross-entropy.

template <Real T>
struct XentResult {
  T loss;
  std::vector<T> grad_logits;
};

template <Real T>
XentResult<T> softmax_xent(std::span<const T> logits, std::size_t label);

template <Real T>
struct BatchXentResult {
  T mean_loss;
  std::vector<T> losses;  // per item
  Tensor<T> grad_logits;  // d(mean_loss)/d(logits)
};

// Logits (N, C, 1, 1), one label per batch item.
template <Real T>
BatchXentResult<T> softmax_xent_batch(const Tensor<T>& logits, std::span<const std::size_t> labels);

}  // namespace expertnet::ops
