#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "expertnet/rng.hpp"
#include "expertnet/tensor.hpp"

namespace expertnet::data {

enum class SplitTag { train, val, test };

std::string_view to_string(SplitTag tag);
SplitTag parse_split_tag(std::string_view text);

struct Sample {
  TensorF image;  // (1, C, H, W), values in [0, 1]
  std::size_t label = 0;
  std::string source;
  SplitTag tag = SplitTag::train;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  // Files skipped during ingestion, one "path: reason" line each.
  std::vector<std::string> errors;

  std::size_t class_count() const { return class_names.size(); }
  std::vector<std::size_t> indices(SplitTag tag) const;
  std::vector<std::size_t> class_sizes() const;
};

// Nearest-neighbour resampling of a (1, C, H, W) image.
TensorF resize_nearest(const TensorF& image, std::size_t height, std::size_t width);

// Decodes a PGM/PPM file into a (1, channels, height, width) image: gray is
// replicated to three channels, colour averaged to one, then resized.
TensorF load_image(const std::filesystem::path& path, std::size_t channels, std::size_t height,
                   std::size_t width);

// Reads root/<class>/*.pgm|*.ppm. Classes are the sorted subdirectory names;
// samples follow sorted path order. Images are decoded, converted to
// `channels` (1 or 3) and resized to height x width. Undecodable files are
// recorded in Dataset::errors. Throws DataError for a missing or empty root
// or an empty class directory.
Dataset ingest_dataset(const std::filesystem::path& root, std::size_t channels, std::size_t height,
                       std::size_t width);

// Rotation by `degrees` (counter-clockwise as displayed) about the image
// centre, optionally followed by a shift of (dx, dy) pixels. Bilinear
// sampling; source positions outside the image read as 0.
Sample transform_sample(const Sample& sample, double degrees, double dx = 0.0, double dy = 0.0);

inline Sample rotate_augment(const Sample& sample, double degrees) {
  return transform_sample(sample, degrees);
}

struct AugmentSpec {
  double min_degrees = -30.0;
  double max_degrees = 30.0;
  std::size_t copies = 4;
  std::uint64_t seed = 0;
  // Optional uniform shift of up to max_shift * extent along each axis.
  bool translate = false;
  double max_shift = 0.1;
};

// Appends `copies` randomly transformed versions of every train-tagged
// sample. Angles are uniform in [min_degrees, max_degrees]. The returned
// angles (one per appended copy, in order) support auditing the range.
std::vector<double> augment_dataset(Dataset& dataset, const AugmentSpec& spec);

// Per class: 20% test (rounded half up), then 30% of the remainder as
// validation (rounded half up), the rest train. Seeded shuffle within each
// class. Throws DataError for classes with fewer than 3 samples.
void split_dataset(Dataset& dataset, std::uint64_t seed);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified N-fold partition. Each class is shuffled and dealt round-robin
// across folds, continuing from where the previous class stopped, so fold
// sizes differ by at most one both per class and overall.
std::vector<Fold> kfold_partition(const Dataset& dataset, std::size_t folds, std::uint64_t seed);

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t per_class = 100;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  double noise = 0.05;
};

// Class c is an oriented pattern at c * 180 / K degrees: a soft half-plane
// edge plus a sinusoidal grating with random phase, with Gaussian pixel
// noise. Images are quantized to 8 bits exactly as written to disk.
Dataset synth_dataset(const SynthSpec& spec);

// Writes the same dataset as PGM files under root/<class>/img_NNNN.pgm and
// returns the file count.
std::size_t write_synth_dataset(const SynthSpec& spec, const std::filesystem::path& root);

std::string class_dir_name(std::size_t label, std::size_t classes);

// Tab-separated `<source>\t<class>\t<train|val|test>` lines.
void write_split_manifest(const Dataset& dataset, const std::filesystem::path& path);
// Applies tags from a manifest; every sample must be listed.
void apply_split_manifest(Dataset& dataset, const std::filesystem::path& path);

}  // namespace expertnet::data
