#include "expertnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace expertnet::ops {

namespace {

// Output positions o in [lo, hi) whose input index stride*o + offset - pad
// lands inside [0, in_extent).
struct Range {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

Range valid_range(std::size_t out_extent, std::size_t in_extent, std::size_t offset,
                  std::size_t pad, std::size_t stride) {
  const auto shift = static_cast<std::ptrdiff_t>(offset) - static_cast<std::ptrdiff_t>(pad);
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = shift < 0 ? (-shift + s - 1) / s : 0;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in_extent) - 1 - shift;
  if (last < 0) return {};
  std::ptrdiff_t hi = std::min(last / s + 1, static_cast<std::ptrdiff_t>(out_extent));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Flat offset of padded coordinate (py, px) = (row + pad, kx + pad) for the
// first column; may be negative before adding the column index.
std::ptrdiff_t row_offset(std::size_t padded_row, std::size_t kx, std::size_t pad,
                          std::size_t width) {
  const auto p = static_cast<std::ptrdiff_t>(pad);
  return (static_cast<std::ptrdiff_t>(padded_row) - p) * static_cast<std::ptrdiff_t>(width) +
         static_cast<std::ptrdiff_t>(kx) - p;
}

template <Real T>
void validate_conv(const Tensor<T>& input, const ConvParams<T>& params) {
  const Shape& ws = params.weights.shape();
  if (ws.h() != ws.w()) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  if (ws.h() % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd, got " + ws.str());
  if (params.stride != 1 && params.stride != 2) {
    throw ArgumentError("conv2d: stride must be 1 or 2, got " + std::to_string(params.stride));
  }
  if (params.bias.size() != ws.n()) {
    throw ShapeError("conv2d: bias length " + std::to_string(params.bias.size()) +
                     " does not match " + std::to_string(ws.n()) + " filters");
  }
  if (input.shape().c() != ws.c()) {
    throw ShapeError("conv2d: input has " + std::to_string(input.shape().c()) +
                     " channels, filters expect " + std::to_string(ws.c()));
  }
}

template <Real T>
Shape conv_output_shape(const Tensor<T>& input, const ConvParams<T>& params) {
  const Shape& in = input.shape();
  const std::size_t k = params.kernel();
  const std::size_t p = params.pad();
  const auto s = static_cast<std::size_t>(params.stride);
  return Shape(static_cast<std::int64_t>(in.n()), static_cast<std::int64_t>(params.out_channels()),
               static_cast<std::int64_t>(conv_out_extent(in.h(), k, p, s)),
               static_cast<std::int64_t>(conv_out_extent(in.w(), k, p, s)));
}

template <Real T>
struct ElectivePoint {
  T value;
  T mid;
  T sign;  // sign(mid - r[nearest]), 0 on ties
  std::size_t argmax;
  std::size_t argmin;
  std::size_t nearest;
  std::array<T, kElectiveBranches> distance;
};

template <Real T>
ElectivePoint<T> elective_point(const std::array<T, kElectiveBranches>& r, ElectiveMode mode) {
  ElectivePoint<T> p{};
  for (std::size_t n = 1; n < kElectiveBranches; ++n) {
    if (r[n] > r[p.argmax]) p.argmax = n;
    if (r[n] < r[p.argmin]) p.argmin = n;
  }
  p.mid = T(0.5) * (r[p.argmax] + r[p.argmin]);
  for (std::size_t n = 0; n < kElectiveBranches; ++n) {
    p.distance[n] = std::abs(p.mid - r[n]);
    if (p.distance[n] < p.distance[p.nearest]) p.nearest = n;
  }
  const T diff = p.mid - r[p.nearest];
  p.sign = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
  p.value = mode == ElectiveMode::literal ? p.mid + p.distance[p.nearest] : r[p.nearest];
  return p;
}

template <Real T>
void validate_branches(std::span<const Tensor<T>> branches) {
  if (branches.size() != kElectiveBranches) {
    throw ArityError("elective_fuse: expected 4 branches, got " + std::to_string(branches.size()));
  }
  for (const auto& b : branches) {
    if (b.shape() != branches[0].shape()) {
      throw ShapeError("elective_fuse: branch shape " + b.shape().str() + " vs " +
                       branches[0].shape().str());
    }
  }
}

template <Real T>
std::array<T, kElectiveBranches> gather(std::span<const Tensor<T>> branches, std::size_t i) {
  return {branches[0][i], branches[1][i], branches[2][i], branches[3][i]};
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad,
                            std::size_t stride) {
  if (in + 2 * pad < kernel) {
    throw ShapeError("conv2d: padded extent " + std::to_string(in + 2 * pad) +
                     " smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

template <Real T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params) {
  validate_conv(input, params);
  const Shape out_shape = conv_output_shape(input, params);
  Tensor<T> out(out_shape);

  const Shape& in = input.shape();
  const std::size_t k = params.kernel();
  const std::size_t pad = params.pad();
  const auto stride = static_cast<std::size_t>(params.stride);
  const std::size_t oh = out_shape.h(), ow = out_shape.w();
  const T* w = params.weights.raw();

  for (std::size_t n = 0; n < in.n(); ++n) {
    for (std::size_t o = 0; o < out_shape.c(); ++o) {
      T* plane = out.raw() + out.index(n, o, 0, 0);
      std::fill(plane, plane + oh * ow, params.bias[o]);
      for (std::size_t c = 0; c < in.c(); ++c) {
        const T* src = input.raw() + input.index(n, c, 0, 0);
        for (std::size_t ky = 0; ky < k; ++ky) {
          const Range ys = valid_range(oh, in.h(), ky, pad, stride);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const Range xs = valid_range(ow, in.w(), kx, pad, stride);
            const T wv = w[((o * in.c() + c) * k + ky) * k + kx];
            if (xs.lo >= xs.hi) continue;
            const std::size_t count = xs.hi - xs.lo;
            for (std::size_t y = ys.lo; y < ys.hi; ++y) {
              const T* row = src + row_offset(stride * y + ky, kx, pad, in.w()) +
                             static_cast<std::ptrdiff_t>(stride * xs.lo);
              T* dst = plane + y * ow + xs.lo;
              if (stride == 1) {
                for (std::size_t i = 0; i < count; ++i) dst[i] += wv * row[i];
              } else {
                for (std::size_t i = 0; i < count; ++i) dst[i] += wv * row[2 * i];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <Real T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& params,
                             const Tensor<T>& grad_out) {
  validate_conv(input, params);
  const Shape out_shape = conv_output_shape(input, params);
  if (grad_out.shape() != out_shape) {
    throw ShapeError("conv2d_backward: upstream " + grad_out.shape().str() + " vs output " +
                     out_shape.str());
  }
  ConvGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(params.weights.shape()),
                 Tensor<T>(params.bias.shape())};

  const Shape& in = input.shape();
  const std::size_t k = params.kernel();
  const std::size_t pad = params.pad();
  const auto stride = static_cast<std::size_t>(params.stride);
  const std::size_t oh = out_shape.h(), ow = out_shape.w();
  const T* w = params.weights.raw();

  for (std::size_t n = 0; n < in.n(); ++n) {
    for (std::size_t o = 0; o < out_shape.c(); ++o) {
      const T* gplane = grad_out.raw() + grad_out.index(n, o, 0, 0);
      T bsum = T(0);
      for (std::size_t i = 0; i < oh * ow; ++i) bsum += gplane[i];
      g.bias[o] += bsum;
      for (std::size_t c = 0; c < in.c(); ++c) {
        const T* src = input.raw() + input.index(n, c, 0, 0);
        T* gsrc = g.input.raw() + g.input.index(n, c, 0, 0);
        for (std::size_t ky = 0; ky < k; ++ky) {
          const Range ys = valid_range(oh, in.h(), ky, pad, stride);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const Range xs = valid_range(ow, in.w(), kx, pad, stride);
            const std::size_t widx = ((o * in.c() + c) * k + ky) * k + kx;
            const T wv = w[widx];
            T wsum = T(0);
            for (std::size_t y = ys.lo; y < ys.hi && xs.lo < xs.hi; ++y) {
              const std::ptrdiff_t offset = row_offset(stride * y + ky, kx, pad, in.w()) +
                                            static_cast<std::ptrdiff_t>(stride * xs.lo);
              const T* row = src + offset;
              T* grow = gsrc + offset;
              const T* gy = gplane + y * ow + xs.lo;
              for (std::size_t i = 0; i < xs.hi - xs.lo; ++i) {
                wsum += gy[i] * row[stride * i];
                grow[stride * i] += wv * gy[i];
              }
            }
            g.weights[widx] += wsum;
          }
        }
      }
    }
  }
  return g;
}

template <Real T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <Real T>
Tensor<T> relu_backward(const Tensor<T>& forward_value, const Tensor<T>& grad_out) {
  return zip_elementwise(forward_value, grad_out,
                         [](T x, T g) { return x > T(0) ? g : T(0); });
}

std::string_view to_string(ElectiveMode mode) {
  return mode == ElectiveMode::literal ? "literal" : "nearest-branch";
}

ElectiveMode parse_elective_mode(std::string_view text) {
  if (text == "literal") return ElectiveMode::literal;
  if (text == "nearest-branch" || text == "nearest_branch") return ElectiveMode::nearest_branch;
  throw ConfigError("unknown elective mode '" + std::string(text) + "'");
}

template <Real T>
Tensor<T> elective_fuse(std::span<const Tensor<T>> branches, ElectiveMode mode) {
  validate_branches(branches);
  Tensor<T> out(branches[0].shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = elective_point(gather(branches, i), mode).value;
  }
  return out;
}

template <Real T>
std::array<Tensor<T>, kElectiveBranches> elective_backward(std::span<const Tensor<T>> branches,
                                                           const Tensor<T>& grad_out,
                                                           ElectiveMode mode) {
  validate_branches(branches);
  if (grad_out.shape() != branches[0].shape()) {
    throw ShapeError("elective_backward: upstream " + grad_out.shape().str() + " vs " +
                     branches[0].shape().str());
  }
  const Shape& shape = branches[0].shape();
  std::array<Tensor<T>, kElectiveBranches> grads{Tensor<T>(shape), Tensor<T>(shape),
                                                 Tensor<T>(shape), Tensor<T>(shape)};
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const auto p = elective_point(gather(branches, i), mode);
    const T g = grad_out[i];
    if (mode == ElectiveMode::nearest_branch) {
      grads[p.nearest][i] += g;
      continue;
    }
    // d/dr_j [mid + |mid - r_n*|] = dmid_j (1 + s) - s [j == n*]
    const T through_mid = T(0.5) * g * (T(1) + p.sign);
    grads[p.argmax][i] += through_mid;
    grads[p.argmin][i] += through_mid;
    grads[p.nearest][i] -= p.sign * g;
  }
  return grads;
}

template <Real T>
T elective_kink_margin(std::span<const Tensor<T>> branches) {
  validate_branches(branches);
  T margin = std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < branches[0].size(); ++i) {
    const auto r = gather(branches, i);
    const auto p = elective_point(r, ElectiveMode::literal);
    for (std::size_t a = 0; a < kElectiveBranches; ++a) {
      for (std::size_t b = a + 1; b < kElectiveBranches; ++b) {
        margin = std::min(margin, std::abs(r[a] - r[b]));
        // The extremes are always equidistant from the midrange.
        const bool extremes = (a == p.argmax && b == p.argmin) || (a == p.argmin && b == p.argmax);
        if (!extremes) margin = std::min(margin, std::abs(p.distance[a] - p.distance[b]));
      }
    }
    margin = std::min(margin, p.distance[p.nearest]);
  }
  return margin;
}

template <Real T>
std::vector<std::uint8_t> elective_decisions(std::span<const Tensor<T>> branches) {
  validate_branches(branches);
  std::vector<std::uint8_t> codes(branches[0].size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto p = elective_point(gather(branches, i), ElectiveMode::literal);
    const auto sign = static_cast<std::size_t>(p.sign + T(1));
    codes[i] = static_cast<std::uint8_t>(p.argmax | (p.argmin << 2) | (p.nearest << 4) | (sign << 6));
  }
  return codes;
}

template <Real T>
Tensor<T> additive(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("additive: " + a.shape().str() + " vs " + b.shape().str());
  }
  return zip_elementwise(a, b, [](T x, T y) { return x + y; });
}

std::string_view to_string(Activation act) {
  return act == Activation::relu ? "relu" : "identity";
}

Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::relu;
  if (text == "identity" || text == "none") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(text) + "'");
}

template <Real T>
Tensor<T> fc_forward(const Tensor<T>& input, const FcParams<T>& params, Activation act) {
  const std::size_t len = params.in_length();
  const std::size_t units = params.out_units();
  if (input.shape().item_size() != len) {
    throw ShapeError("fc_forward: input length " + std::to_string(input.shape().item_size()) +
                     " does not match " + std::to_string(len));
  }
  if (params.bias.size() != units) throw ShapeError("fc_forward: bias length mismatch");
  const std::size_t batch = input.shape().n();
  Tensor<T> out(Shape(static_cast<std::int64_t>(batch), static_cast<std::int64_t>(units), 1, 1));
  for (std::size_t n = 0; n < batch; ++n) {
    const T* z = input.raw() + n * len;
    for (std::size_t o = 0; o < units; ++o) {
      const T* row = params.weights.raw() + o * len;
      T acc = T(0);
      for (std::size_t i = 0; i < len; ++i) acc += row[i] * z[i];
      acc += params.bias[o];
      out[n * units + o] = (act == Activation::relu && !(acc > T(0))) ? T(0) : acc;
    }
  }
  return out;
}

template <Real T>
FcGrads<T> fc_backward(const Tensor<T>& input, const FcParams<T>& params, Activation act,
                       const Tensor<T>& output, const Tensor<T>& grad_out) {
  const std::size_t len = params.in_length();
  const std::size_t units = params.out_units();
  const std::size_t batch = input.shape().n();
  if (input.shape().item_size() != len) throw ShapeError("fc_backward: input length mismatch");
  if (grad_out.size() != batch * units || output.size() != batch * units) {
    throw ShapeError("fc_backward: upstream shape " + grad_out.shape().str());
  }
  FcGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(params.weights.shape()),
               Tensor<T>(params.bias.shape())};
  for (std::size_t n = 0; n < batch; ++n) {
    const T* z = input.raw() + n * len;
    T* gz = g.input.raw() + n * len;
    for (std::size_t o = 0; o < units; ++o) {
      T gp = grad_out[n * units + o];
      if (act == Activation::relu && !(output[n * units + o] > T(0))) gp = T(0);
      if (gp == T(0)) continue;
      g.bias[o] += gp;
      const T* row = params.weights.raw() + o * len;
      T* grow = g.weights.raw() + o * len;
      for (std::size_t i = 0; i < len; ++i) {
        grow[i] += gp * z[i];
        gz[i] += row[i] * gp;
      }
    }
  }
  return g;
}

template <Real T>
XentResult<T> softmax_xent(std::span<const T> logits, std::size_t label) {
  if (logits.empty()) throw ArgumentError("softmax_xent: empty logits");
  if (label >= logits.size()) {
    throw ArgumentError("softmax_xent: label " + std::to_string(label) + " out of range for " +
                        std::to_string(logits.size()) + " classes");
  }
  const T peak = *std::max_element(logits.begin(), logits.end());
  XentResult<T> r{T(0), std::vector<T>(logits.size())};
  T total = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.grad_logits[i] = std::exp(logits[i] - peak);
    total += r.grad_logits[i];
  }
  r.loss = std::log(total) + peak - logits[label];
  for (auto& g : r.grad_logits) g /= total;
  r.grad_logits[label] -= T(1);
  return r;
}

template <Real T>
BatchXentResult<T> softmax_xent_batch(const Tensor<T>& logits,
                                      std::span<const std::size_t> labels) {
  const std::size_t batch = logits.shape().n();
  const std::size_t classes = logits.shape().item_size();
  if (labels.size() != batch) {
    throw ShapeError("softmax_xent_batch: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }
  BatchXentResult<T> r{T(0), std::vector<T>(batch), Tensor<T>(logits.shape())};
  const T scale = T(1) / static_cast<T>(batch);
  T sum = T(0);
  for (std::size_t n = 0; n < batch; ++n) {
    const auto item = softmax_xent(logits.data().subspan(n * classes, classes), labels[n]);
    r.losses[n] = item.loss;
    sum += item.loss;
    for (std::size_t c = 0; c < classes; ++c) r.grad_logits[n * classes + c] = item.grad_logits[c] * scale;
  }
  r.mean_loss = sum * scale;
  return r;
}

#define EXPERTNET_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);                            \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const ConvParams<T>&,                 \
                                        const Tensor<T>&);                                      \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> elective_fuse(std::span<const Tensor<T>>, ElectiveMode);                   \
  template std::array<Tensor<T>, kElectiveBranches> elective_backward(                          \
      std::span<const Tensor<T>>, const Tensor<T>&, ElectiveMode);                              \
  template T elective_kink_margin(std::span<const Tensor<T>>);                                  \
  template std::vector<std::uint8_t> elective_decisions(std::span<const Tensor<T>>);            \
  template Tensor<T> additive(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> fc_forward(const Tensor<T>&, const FcParams<T>&, Activation);              \
  template FcGrads<T> fc_backward(const Tensor<T>&, const FcParams<T>&, Activation,             \
                                  const Tensor<T>&, const Tensor<T>&);                          \
  template XentResult<T> softmax_xent(std::span<const T>, std::size_t);                         \
  template BatchXentResult<T> softmax_xent_batch(const Tensor<T>&, std::span<const std::size_t>);

EXPERTNET_INSTANTIATE_OPS(float)
EXPERTNET_INSTANTIATE_OPS(double)

#undef EXPERTNET_INSTANTIATE_OPS

}  // namespace expertnet::ops
