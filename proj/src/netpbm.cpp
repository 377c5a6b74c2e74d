#include "expertnet/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace expertnet {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  // Skips whitespace and '#' comments, then parses a decimal integer.
  std::uint64_t next_uint(const char* what) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) {
      throw FormatError(std::string("netpbm: expected ") + what);
    }
    std::uint64_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > (1u << 30)) throw FormatError(std::string("netpbm: ") + what + " too large");
      ++pos_;
    }
    return value;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw FormatError("netpbm: missing separator before raster");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

TensorF decode_netpbm_native(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("netpbm: unsupported magic (expected P5 or P6)");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader header(bytes);
  const std::uint64_t width = header.next_uint("width");
  const std::uint64_t height = header.next_uint("height");
  const std::uint64_t maxval = header.next_uint("maxval");
  if (width == 0 || height == 0) throw FormatError("netpbm: zero image extent");
  if (maxval == 0 || maxval > 65535) {
    throw FormatError("netpbm: maxval must be in 1..65535, got " + std::to_string(maxval));
  }
  const std::size_t start = header.raster_start();
  const std::size_t sample_bytes = maxval > 255 ? 2 : 1;
  const std::size_t samples = width * height * channels;
  if (bytes.size() - std::min(bytes.size(), start) < samples * sample_bytes) {
    throw FormatError("netpbm: truncated raster");
  }

  TensorF out(Shape(1, static_cast<std::int64_t>(channels), static_cast<std::int64_t>(height),
                    static_cast<std::int64_t>(width)));
  const double scale = 1.0 / static_cast<double>(maxval);
  const std::uint8_t* raster = bytes.data() + start;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t s = (y * width + x) * channels + c;
        // 16-bit samples are big-endian.
        const std::uint32_t v = sample_bytes == 1
                                    ? raster[s]
                                    : (static_cast<std::uint32_t>(raster[2 * s]) << 8) | raster[2 * s + 1];
        out.at(0, c, y, x) = static_cast<float>(std::min<double>(v * scale, 1.0));
      }
    }
  }
  return out;
}

TensorF decode_netpbm(std::span<const std::uint8_t> bytes) {
  TensorF native = decode_netpbm_native(bytes);
  if (native.shape().c() == 3) return native;
  const Shape& s = native.shape();
  TensorF out(Shape(1, 3, static_cast<std::int64_t>(s.h()), static_cast<std::int64_t>(s.w())));
  const std::size_t plane = s.h() * s.w();
  for (std::size_t c = 0; c < 3; ++c) {
    std::copy(native.data().begin(), native.data().end(), out.data().begin() + c * plane);
  }
  return out;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
  if (image.width == 0 || image.height == 0 || image.pixels.size() != image.width * image.height) {
    throw FormatError("encode_pgm: pixel count does not match extents");
  }
  const std::string header =
      "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

GrayImage to_gray(const TensorF& image, std::size_t channel) {
  const Shape& s = image.shape();
  if (channel >= s.c()) throw ShapeError("to_gray: channel out of range");
  GrayImage out{s.w(), s.h(), std::vector<std::uint8_t>(s.h() * s.w())};
  for (std::size_t y = 0; y < s.h(); ++y) {
    for (std::size_t x = 0; x < s.w(); ++x) {
      const float v = std::clamp(image.at(0, channel, y, x), 0.0f, 1.0f);
      out.pixels[y * s.w() + x] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace expertnet
