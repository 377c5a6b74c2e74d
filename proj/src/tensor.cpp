#include "expertnet/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>

namespace expertnet {

namespace {

constexpr char kMagicF32[8] = {'X', 'P', 'N', 'T', '0', '0', '0', '1'};
constexpr char kMagicF64[8] = {'X', 'P', 'N', 'D', '0', '0', '0', '1'};

std::size_t checked_extent(std::int64_t extent) {
  if (extent < 1) {
    throw ShapeError("extent must be >= 1, got " + std::to_string(extent));
  }
  return static_cast<std::size_t>(extent);
}

template <typename U>
void write_le(std::ostream& out, U bits) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) {
    throw FormatError(std::string("truncated stream reading ") + what);
  }
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(buf[i]) << (8 * i);
  return bits;
}

}  // namespace

namespace detail {

void write_u32(std::ostream& out, std::uint32_t value) { write_le(out, value); }

std::uint32_t read_u32(std::istream& in, const char* what) {
  return read_le<std::uint32_t>(in, what);
}

}  // namespace detail

Shape::Shape(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w)
    : dims_{checked_extent(n), checked_extent(c), checked_extent(h), checked_extent(w)} {
  std::size_t total = 1;
  for (std::size_t d : dims_) {
    if (total > std::numeric_limits<std::size_t>::max() / d) {
      throw ShapeError("element count overflows index range");
    }
    total *= d;
  }
}

Shape Shape::from_extents(std::span<const std::int64_t> extents) {
  if (extents.empty() || extents.size() > 4) {
    throw ShapeError("rank must be 1..4, got " + std::to_string(extents.size()));
  }
  std::array<std::int64_t, 4> padded{1, 1, 1, 1};
  std::copy(extents.begin(), extents.end(), padded.end() - extents.size());
  return Shape(padded[0], padded[1], padded[2], padded[3]);
}

Shape Shape::with_batch(std::size_t n) const {
  return Shape(static_cast<std::int64_t>(n), static_cast<std::int64_t>(c()),
               static_cast<std::int64_t>(h()), static_cast<std::int64_t>(w()));
}

std::string Shape::str() const {
  return "(" + std::to_string(dims_[0]) + "," + std::to_string(dims_[1]) + "," +
         std::to_string(dims_[2]) + "," + std::to_string(dims_[3]) + ")";
}

template <Real T>
Tensor<T>::Tensor(const Shape& shape, std::vector<T> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
}

template <Real T>
Tensor<T> Tensor<T>::randn(const Shape& shape, T stddev, SeededRng& rng) {
  if (!(stddev >= T{0})) throw ArgumentError("randn: stddev must be >= 0");
  Tensor out(shape);
  for (auto& v : out.data_) v = static_cast<T>(stddev * rng.normal());
  return out;
}

template <Real T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <Real T>
void Tensor<T>::add_inplace(const Tensor& other) {
  if (shape_ != other.shape_) {
    throw ShapeError("add_inplace: " + shape_.str() + " vs " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

template <Real T>
Tensor<T> Tensor<T>::reshaped(const Shape& shape) const {
  if (shape.numel() != shape_.numel()) {
    throw ShapeError("reshape " + shape_.str() + " -> " + shape.str());
  }
  return Tensor(shape, data_);
}

template <Real T>
Tensor<T> Tensor<T>::batch_slice(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > shape_.n()) {
    throw ShapeError("batch_slice out of range for " + shape_.str());
  }
  const std::size_t item = shape_.item_size();
  std::vector<T> values(data_.begin() + static_cast<std::ptrdiff_t>(first * item),
                        data_.begin() + static_cast<std::ptrdiff_t>((first + count) * item));
  return Tensor(shape_.with_batch(count), std::move(values));
}

template <Real T>
bool Tensor<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <Real T>
void Tensor<T>::check_finite(const std::string& what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

template <Real T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no parts");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().item_size() != parts[0].shape().item_size() ||
        p.shape().with_batch(1) != parts[0].shape().with_batch(1)) {
      throw ShapeError("concat_batch: " + p.shape().str() + " vs " + parts[0].shape().str());
    }
    total += p.shape().n();
  }
  std::vector<T> values;
  values.reserve(total * parts[0].shape().item_size());
  for (const auto& p : parts) values.insert(values.end(), p.data().begin(), p.data().end());
  return Tensor<T>(parts[0].shape().with_batch(total), std::move(values));
}

template <Real T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor) {
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  out.write(std::is_same_v<T, float> ? kMagicF32 : kMagicF64, 8);
  write_le<std::uint32_t>(out, 4);
  for (std::size_t d : tensor.shape().dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("extent exceeds u32");
    write_le(out, static_cast<std::uint32_t>(d));
  }
  for (T v : tensor.data()) write_le(out, std::bit_cast<Bits>(v));
  if (!out) throw FormatError("write_tensor: stream failure");
}

template <Real T>
Tensor<T> read_tensor(std::istream& in) {
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  char magic[8];
  if (!in.read(magic, 8)) throw FormatError("truncated stream reading tensor magic");
  const char* expected = std::is_same_v<T, float> ? kMagicF32 : kMagicF64;
  if (std::memcmp(magic, expected, 8) != 0) {
    const char* other = std::is_same_v<T, float> ? kMagicF64 : kMagicF32;
    if (std::memcmp(magic, other, 8) == 0) throw FormatError("tensor precision mismatch");
    throw FormatError("bad tensor magic");
  }
  const std::uint32_t rank = read_le<std::uint32_t>(in, "tensor rank");
  if (rank < 1 || rank > 4) throw FormatError("unsupported tensor rank " + std::to_string(rank));
  std::vector<std::int64_t> extents(rank);
  for (auto& e : extents) e = read_le<std::uint32_t>(in, "tensor extent");
  Shape shape;
  try {
    shape = Shape::from_extents(extents);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid tensor extents: ") + e.what());
  }
  Tensor<T> tensor(shape);
  for (auto& v : tensor.data()) v = std::bit_cast<T>(read_le<Bits>(in, "tensor data"));
  return tensor;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> concat_batch(std::span<const Tensor<float>>);
template Tensor<double> concat_batch(std::span<const Tensor<double>>);
template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);

}  // namespace expertnet
