#include "expertnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

#include "expertnet/netpbm.hpp"

namespace fs = std::filesystem;

namespace expertnet::data {

namespace {

bool is_netpbm_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".pgm" || ext == ".ppm";
}

// Exact values at multiples of 90 degrees so quarter turns are pure
// permutations.
std::pair<double, double> sin_cos_degrees(double degrees) {
  const double quarter = degrees / 90.0;
  if (quarter == std::round(quarter)) {
    switch (((static_cast<long long>(quarter) % 4) + 4) % 4) {
      case 0:
        return {0.0, 1.0};
      case 1:
        return {1.0, 0.0};
      case 2:
        return {0.0, -1.0};
      default:
        return {-1.0, 0.0};
    }
  }
  const double rad = degrees * std::numbers::pi / 180.0;
  return {std::sin(rad), std::cos(rad)};
}

template <typename It>
void shuffle(It first, It last, SeededRng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1), first + static_cast<std::ptrdiff_t>(j));
  }
}

std::vector<std::vector<std::size_t>> by_class(const Dataset& dataset) {
  std::vector<std::vector<std::size_t>> groups(dataset.class_count());
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const std::size_t label = dataset.samples[i].label;
    if (label >= groups.size()) {
      throw DataError("sample " + dataset.samples[i].source + " has label " + std::to_string(label) +
                      " outside " + std::to_string(groups.size()) + " classes");
    }
    groups[label].push_back(i);
  }
  return groups;
}

TensorF to_channels(const TensorF& native, std::size_t channels) {
  const Shape& s = native.shape();
  if (s.c() == channels) return native;
  const std::size_t plane = s.h() * s.w();
  TensorF out(Shape(1, static_cast<std::int64_t>(channels), static_cast<std::int64_t>(s.h()),
                    static_cast<std::int64_t>(s.w())));
  if (channels == 3) {
    for (std::size_t c = 0; c < 3; ++c) {
      std::copy(native.data().begin(), native.data().end(), out.data().begin() + c * plane);
    }
  } else {
    for (std::size_t i = 0; i < plane; ++i) {
      out[i] = (native[i] + native[plane + i] + native[2 * plane + i]) / 3.0f;
    }
  }
  return out;
}

GrayImage synth_image(std::size_t label, const SynthSpec& spec, SeededRng& rng) {
  const std::size_t s = spec.size;
  const double theta = static_cast<double>(label) * std::numbers::pi / static_cast<double>(spec.classes);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double centre = (static_cast<double>(s) - 1.0) / 2.0;
  const double edge_width = static_cast<double>(s) / 8.0;
  const double omega = 2.0 * std::numbers::pi * 4.0 / static_cast<double>(s);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  GrayImage img{s, s, std::vector<std::uint8_t>(s * s)};
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double u = (static_cast<double>(x) - centre) * ct + (static_cast<double>(y) - centre) * st;
      double v = 0.5 + 0.2 * std::tanh(u / edge_width) + 0.2 * std::cos(omega * u + phase);
      if (spec.noise > 0.0) v += spec.noise * rng.normal();
      img.pixels[y * s + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return img;
}

void validate_synth(const SynthSpec& spec) {
  if (spec.classes < 2) throw ArgumentError("synth: classes must be >= 2");
  if (spec.size < 16) throw ArgumentError("synth: size must be >= 16");
  if (spec.per_class < 1) throw ArgumentError("synth: per_class must be >= 1");
  if (spec.noise < 0.0) throw ArgumentError("synth: noise must be >= 0");
}

// Encoded PGM bytes for every synthetic image, in class-major order.
std::vector<std::vector<std::uint8_t>> synth_files(const SynthSpec& spec) {
  validate_synth(spec);
  SeededRng rng(spec.seed);
  std::vector<std::vector<std::uint8_t>> files;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) files.push_back(encode_pgm(synth_image(c, spec, rng)));
  }
  return files;
}

std::string synth_file_name(std::size_t index) {
  std::ostringstream name;
  name << "img_" << std::setw(4) << std::setfill('0') << index << ".pgm";
  return name.str();
}

}  // namespace

std::string_view to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train:
      return "train";
    case SplitTag::val:
      return "val";
    case SplitTag::test:
      return "test";
  }
  return "?";
}

SplitTag parse_split_tag(std::string_view text) {
  if (text == "train") return SplitTag::train;
  if (text == "val") return SplitTag::val;
  if (text == "test") return SplitTag::test;
  throw ArgumentError("unknown split '" + std::string(text) + "'");
}

std::vector<std::size_t> Dataset::indices(SplitTag tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].tag == tag) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::class_sizes() const {
  std::vector<std::size_t> sizes(class_count(), 0);
  for (const auto& s : samples) {
    if (s.label < sizes.size()) ++sizes[s.label];
  }
  return sizes;
}

TensorF resize_nearest(const TensorF& image, std::size_t height, std::size_t width) {
  const Shape& s = image.shape();
  if (s.h() == height && s.w() == width) return image;
  TensorF out(Shape(1, static_cast<std::int64_t>(s.c()), static_cast<std::int64_t>(height),
                    static_cast<std::int64_t>(width)));
  for (std::size_t c = 0; c < s.c(); ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = std::min(s.h() - 1, (2 * y + 1) * s.h() / (2 * height));
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t sx = std::min(s.w() - 1, (2 * x + 1) * s.w() / (2 * width));
        out.at(0, c, y, x) = image.at(0, c, sy, sx);
      }
    }
  }
  return out;
}

TensorF load_image(const fs::path& path, std::size_t channels, std::size_t height, std::size_t width) {
  if (channels != 1 && channels != 3) throw ArgumentError("image channels must be 1 or 3");
  return resize_nearest(to_channels(decode_netpbm_native(read_file(path)), channels), height, width);
}

Dataset ingest_dataset(const fs::path& root, std::size_t channels, std::size_t height,
                       std::size_t width) {
  if (channels != 1 && channels != 3) throw ArgumentError("ingest: channels must be 1 or 3");
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("dataset root " + root.string() + " is not a directory");

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError("dataset root " + root.string() + " has no class directories");

  Dataset dataset;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    const fs::path& dir = class_dirs[label];
    dataset.class_names.push_back(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && is_netpbm_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("class directory " + dir.string() + " has no images");
    for (const auto& file : files) {
      const std::string source = (dir.filename() / file.filename()).generic_string();
      try {
        dataset.samples.push_back({load_image(file, channels, height, width), label, source});
      } catch (const FormatError& e) {
        dataset.errors.push_back(source + ": " + e.what());
      }
    }
  }
  return dataset;
}

Sample transform_sample(const Sample& sample, double degrees, double dx, double dy) {
  if (std::abs(degrees) > 180.0) throw ArgumentError("rotation angle must be within [-180, 180]");
  const TensorF& in = sample.image;
  const Shape& s = in.shape();
  Sample out{TensorF(s), sample.label, sample.source, sample.tag};
  const auto [sn, cs] = sin_cos_degrees(degrees);
  const double cx = (static_cast<double>(s.w()) - 1.0) / 2.0;
  const double cy = (static_cast<double>(s.h()) - 1.0) / 2.0;
  const auto w = static_cast<long long>(s.w());
  const auto h = static_cast<long long>(s.h());
  for (std::size_t c = 0; c < s.c(); ++c) {
    auto pixel = [&](long long x, long long y) -> double {
      if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
      return in.at(0, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    };
    for (std::size_t y = 0; y < s.h(); ++y) {
      for (std::size_t x = 0; x < s.w(); ++x) {
        // Inverse map: output -> source.
        const double ox = static_cast<double>(x) - cx - dx;
        const double oy = static_cast<double>(y) - cy - dy;
        const double sx = ox * cs - oy * sn + cx;
        const double sy = ox * sn + oy * cs + cy;
        const double fx0 = std::floor(sx), fy0 = std::floor(sy);
        const double fx = sx - fx0, fy = sy - fy0;
        const auto x0 = static_cast<long long>(fx0), y0 = static_cast<long long>(fy0);
        const double v = (1.0 - fx) * (1.0 - fy) * pixel(x0, y0) + fx * (1.0 - fy) * pixel(x0 + 1, y0) +
                         (1.0 - fx) * fy * pixel(x0, y0 + 1) + fx * fy * pixel(x0 + 1, y0 + 1);
        out.image.at(0, c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

std::vector<double> augment_dataset(Dataset& dataset, const AugmentSpec& spec) {
  if (spec.min_degrees > spec.max_degrees) throw ArgumentError("augment: min angle exceeds max angle");
  if (spec.max_shift < 0.0) throw ArgumentError("augment: max_shift must be >= 0");
  SeededRng rng(spec.seed);
  std::vector<double> angles;
  const auto train = dataset.indices(SplitTag::train);
  for (std::size_t idx : train) {
    for (std::size_t k = 0; k < spec.copies; ++k) {
      const double angle = rng.uniform(spec.min_degrees, spec.max_degrees);
      double dx = 0.0, dy = 0.0;
      if (spec.translate) {
        const Shape& s = dataset.samples[idx].image.shape();
        dx = rng.uniform(-spec.max_shift, spec.max_shift) * static_cast<double>(s.w());
        dy = rng.uniform(-spec.max_shift, spec.max_shift) * static_cast<double>(s.h());
      }
      Sample copy = transform_sample(dataset.samples[idx], angle, dx, dy);
      copy.source += "#aug" + std::to_string(k);
      copy.tag = SplitTag::train;
      dataset.samples.push_back(std::move(copy));
      angles.push_back(angle);
    }
  }
  return angles;
}

void split_dataset(Dataset& dataset, std::uint64_t seed) {
  SeededRng rng(seed);
  auto groups = by_class(dataset);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto& idx = groups[c];
    const std::size_t n = idx.size();
    if (n < 3) {
      throw DataError("class '" + dataset.class_names[c] + "' has " + std::to_string(n) +
                      " samples; at least 3 are needed for train/val/test");
    }
    shuffle(idx.begin(), idx.end(), rng);
    // round(0.2 n) and round(0.3 rest), halves rounded up, in integers.
    const std::size_t test = (2 * n + 5) / 10;
    const std::size_t val = (3 * (n - test) + 5) / 10;
    for (std::size_t k = 0; k < n; ++k) {
      dataset.samples[idx[k]].tag =
          k < test ? SplitTag::test : (k < test + val ? SplitTag::val : SplitTag::train);
    }
  }
}

std::vector<Fold> kfold_partition(const Dataset& dataset, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw DataError("k-fold partition needs at least 2 folds, got " + std::to_string(folds));
  auto groups = by_class(dataset);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].size() < folds) {
      throw DataError("class '" + dataset.class_names[c] + "' has " + std::to_string(groups[c].size()) +
                      " samples, fewer than " + std::to_string(folds) + " folds");
    }
  }
  SeededRng rng(seed);
  std::vector<std::size_t> fold_of(dataset.samples.size(), 0);
  std::size_t next = 0;
  for (auto& idx : groups) {
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) {
      fold_of[i] = next;
      next = (next + 1) % folds;
    }
  }
  std::vector<Fold> out(folds);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    for (std::size_t f = 0; f < folds; ++f) (f == fold_of[i] ? out[f].test : out[f].train).push_back(i);
  }
  return out;
}

std::string class_dir_name(std::size_t label, std::size_t classes) {
  const std::size_t digits = std::to_string(classes - 1).size();
  std::ostringstream name;
  name << "class_" << std::setw(static_cast<int>(digits)) << std::setfill('0') << label;
  return name.str();
}

Dataset synth_dataset(const SynthSpec& spec) {
  const auto files = synth_files(spec);
  Dataset dataset;
  for (std::size_t c = 0; c < spec.classes; ++c) dataset.class_names.push_back(class_dir_name(c, spec.classes));
  for (std::size_t k = 0; k < files.size(); ++k) {
    const std::size_t label = k / spec.per_class;
    dataset.samples.push_back({decode_netpbm(files[k]), label,
                               dataset.class_names[label] + "/" + synth_file_name(k % spec.per_class)});
  }
  return dataset;
}

std::size_t write_synth_dataset(const SynthSpec& spec, const fs::path& root) {
  const auto files = synth_files(spec);
  std::error_code ec;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    fs::create_directories(root / class_dir_name(c, spec.classes), ec);
    if (ec) throw FormatError("cannot create " + (root / class_dir_name(c, spec.classes)).string() + ": " + ec.message());
  }
  for (std::size_t k = 0; k < files.size(); ++k) {
    const std::size_t label = k / spec.per_class;
    write_file(root / class_dir_name(label, spec.classes) / synth_file_name(k % spec.per_class), files[k]);
  }
  return files.size();
}

void write_split_manifest(const Dataset& dataset, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write manifest " + path.string());
  for (const auto& s : dataset.samples) {
    out << s.source << '\t' << dataset.class_names.at(s.label) << '\t' << to_string(s.tag) << '\n';
  }
}

void apply_split_manifest(Dataset& dataset, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::map<std::string, SplitTag> tags;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = line.rfind('\t');
    if (a == std::string::npos || a == b) throw DataError("malformed manifest line: " + line);
    tags[line.substr(0, a)] = parse_split_tag(line.substr(b + 1));
  }
  for (auto& s : dataset.samples) {
    auto it = tags.find(s.source);
    if (it == tags.end()) throw DataError("manifest does not list " + s.source);
    s.tag = it->second;
  }
}

}  // namespace expertnet::data
