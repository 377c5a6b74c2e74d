#pragma once

#include <array>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "expertnet/errors.hpp"
#include "expertnet/rng.hpp"

namespace expertnet {

// Extents in N, C, H, W order. Lower-rank data (vectors, matrices) uses
// leading 1s, e.g. a bias of length k is (1, 1, 1, k).
class Shape {
 public:
  Shape() = default;
  Shape(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);

  // Accepts 1 to 4 extents and left-pads with 1s.
  static Shape from_extents(std::span<const std::int64_t> extents);

  std::size_t n() const { return dims_[0]; }
  std::size_t c() const { return dims_[1]; }
  std::size_t h() const { return dims_[2]; }
  std::size_t w() const { return dims_[3]; }
  std::size_t operator[](std::size_t axis) const { return dims_[axis]; }
  const std::array<std::size_t, 4>& dims() const { return dims_; }

  std::size_t numel() const { return dims_[0] * dims_[1] * dims_[2] * dims_[3]; }
  // Elements per batch item.
  std::size_t item_size() const { return dims_[1] * dims_[2] * dims_[3]; }

  Shape with_batch(std::size_t n) const;

  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::array<std::size_t, 4> dims_{1, 1, 1, 1};
};

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

// Dense row-major N,C,H,W array. Instantiated for float (default) and double
// (finite-difference verification).
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}
  explicit Tensor(const Shape& shape, T fill = T{0})
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(const Shape& shape, std::vector<T> values);

  static Tensor randn(const Shape& shape, T stddev, SeededRng& rng);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c() + c) * shape_.h() + h) * shape_.w() + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  // In-place.
  void fill(T value);
  void add_inplace(const Tensor& other);

  // Same data under a new shape with equal element count.
  Tensor reshaped(const Shape& shape) const;
  // Copy of batch items [first, first + count).
  Tensor batch_slice(std::size_t first, std::size_t count) const;

  bool all_finite() const;
  // Throws NumericError naming `what` on NaN/Inf.
  void check_finite(const std::string& what) const;

  template <Real U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// c[i] = f(a[i], b[i]).
template <Real T, typename F>
Tensor<T> zip_elementwise(const Tensor<T>& a, const Tensor<T>& b, F&& f) {
  if (a.shape() != b.shape()) {
    throw ShapeError("zip_elementwise: " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

// Stacks batch items along N. All parts must agree on C, H, W.
template <Real T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts);

// Raw dump: "XPNT0001", rank u32, extents u32, then little-endian IEEE
// values. 32-bit tensors use that magic; 64-bit tensors use "XPND0001" with
// 8-byte elements.
template <Real T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor);

template <Real T>
Tensor<T> read_tensor(std::istream& in);

namespace detail {
void write_u32(std::ostream& out, std::uint32_t value);
std::uint32_t read_u32(std::istream& in, const char* what);
}  // namespace detail

}  // namespace expertnet
