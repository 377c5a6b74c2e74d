#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "expertnet/data.hpp"
#include "expertnet/errors.hpp"
#include "expertnet/netpbm.hpp"

namespace fs = std::filesystem;
using namespace expertnet;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(fs::temp_directory_path() / ("expertnet_unit_" + std::to_string(::getpid()) + "_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<std::uint8_t> bytes_of(const std::string& header, std::vector<std::uint8_t> body) {
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

data::Dataset labelled(std::size_t classes, std::size_t per_class) {
  data::Dataset d;
  for (std::size_t c = 0; c < classes; ++c) {
    d.class_names.push_back("c" + std::to_string(c));
    for (std::size_t i = 0; i < per_class; ++i) {
      d.samples.push_back({TensorF(Shape(1, 1, 1, 1)), c, "c" + std::to_string(c) + "/" + std::to_string(i)});
    }
  }
  return d;
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

}  // namespace

TEST(NetpbmTest, P5Example) {
  const auto t = decode_netpbm(bytes_of("P5\n2 2\n255\n", {0, 128, 255, 64}));
  ASSERT_EQ(t.shape(), Shape(1, 3, 2, 2));
  const float want[4] = {0.0f, 128.0f / 255.0f, 1.0f, 64.0f / 255.0f};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(t[c * 4 + i], want[i]);
  }
}

TEST(NetpbmTest, P6PrimaryColour) {
  const auto t = decode_netpbm(bytes_of("P6\n1 1\n255\n", {255, 0, 0}));
  EXPECT_EQ(t[0], 1.0f);
  EXPECT_EQ(t[1], 0.0f);
  EXPECT_EQ(t[2], 0.0f);
}

TEST(NetpbmTest, CommentsAndWideSamples) {
  const auto t = decode_netpbm_native(bytes_of("P5 # note\n# more\n2 1\n65535\n", {0xFF, 0xFF, 0x80, 0x00}));
  ASSERT_EQ(t.shape(), Shape(1, 1, 1, 2));
  EXPECT_EQ(t[0], 1.0f);
  EXPECT_FLOAT_EQ(t[1], 32768.0f / 65535.0f);
}

TEST(NetpbmTest, Errors) {
  EXPECT_THROW(decode_netpbm(bytes_of("P4\n1 1\n", {0})), FormatError);
  EXPECT_THROW(decode_netpbm(bytes_of("P5\n2 2\n255\n", {1, 2, 3})), FormatError);
  EXPECT_THROW(decode_netpbm(bytes_of("P5\n0 2\n255\n", {})), FormatError);
  EXPECT_THROW(decode_netpbm(bytes_of("P5\n1 1\n70000\n", {0, 0})), FormatError);
  EXPECT_THROW(read_file("/nonexistent/img.pgm"), FormatError);
}

TEST(NetpbmTest, EncodeDecodeIdentity) {
  SeededRng rng(1);
  GrayImage img{5, 3, {}};
  for (int i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint8_t>(rng.uniform_index(256)));
  const auto bytes = encode_pgm(img);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 11), "P5\n5 3\n255\n");
  EXPECT_EQ(to_gray(decode_netpbm_native(bytes)), img);
}

TEST(IngestTest, SevenNamedClasses) {
  TempDir tmp("ingest7");
  const std::vector<std::string> names{"anger", "disgust", "fear", "happy", "neutral", "sad", "surprise"};
  for (const auto& n : names) {
    fs::create_directories(tmp.path() / n);
    for (int i = 0; i < 2; ++i) {
      write_file(tmp.path() / n / ("f" + std::to_string(i) + ".pgm"), encode_pgm({4, 4, std::vector<std::uint8_t>(16, 9)}));
    }
  }
  write_file(tmp.path() / "sad" / "broken.pgm", bytes_of("P5\n4 4\n255\n", {1, 2}));
  const auto a = data::ingest_dataset(tmp.path(), 3, 8, 8);
  EXPECT_EQ(a.class_names, names);
  EXPECT_EQ(a.samples.size(), 14u);
  EXPECT_EQ(a.errors.size(), 1u);
  EXPECT_EQ(a.samples.front().image.shape(), Shape(1, 3, 8, 8));
  const auto b = data::ingest_dataset(tmp.path(), 3, 8, 8);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].source, b.samples[i].source);
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
  }
}

TEST(IngestTest, Errors) {
  TempDir tmp("ingest_err");
  EXPECT_THROW(data::ingest_dataset(tmp.path(), 3, 8, 8), DataError);
  EXPECT_THROW(data::ingest_dataset(tmp.path() / "missing", 3, 8, 8), DataError);
  fs::create_directories(tmp.path() / "empty");
  EXPECT_THROW(data::ingest_dataset(tmp.path(), 3, 8, 8), DataError);
}

TEST(RotationTest, ZeroAngleIsIdentity) {
  SeededRng rng(2);
  data::Sample s{TensorF::randn(Shape(1, 3, 9, 7), 1.0f, rng), 0, "x"};
  const auto r = data::rotate_augment(s, 0.0);
  for (std::size_t i = 0; i < s.image.size(); ++i) EXPECT_EQ(r.image[i], s.image[i]);
}

TEST(RotationTest, QuarterTurnPermutesPixels) {
  // Counter-clockwise as displayed with y pointing down: (x, y) -> (cx + (y - cy), cy - (x - cx)).
  for (std::size_t y = 0; y < 3; ++y) {
    for (std::size_t x = 0; x < 3; ++x) {
      data::Sample s{TensorF(Shape(1, 1, 3, 3)), 0, "x"};
      s.image.at(0, 0, y, x) = 1.0f;
      const auto r = data::rotate_augment(s, 90.0);
      const std::size_t tx = 1 + y - 1, ty = 1 - (x - 1);
      for (std::size_t yy = 0; yy < 3; ++yy) {
        for (std::size_t xx = 0; xx < 3; ++xx) {
          EXPECT_EQ(r.image.at(0, 0, yy, xx), (xx == tx && yy == ty) ? 1.0f : 0.0f) << x << "," << y;
        }
      }
    }
  }
}

TEST(RotationTest, InverseRotationRecoversInterior) {
  data::SynthSpec spec;
  spec.classes = 4;
  spec.per_class = 1;
  spec.size = 32;
  spec.seed = 3;
  spec.noise = 0.0;
  for (const auto& s : data::synth_dataset(spec).samples) {
    for (double theta : {10.0, 30.0}) {
      const auto back = data::rotate_augment(data::rotate_augment(s, theta), -theta);
      double err = 0.0;
      std::size_t n = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 2; y < 30; ++y) {
          for (std::size_t x = 2; x < 30; ++x) {
            const double dx = static_cast<double>(x) - 15.5, dy = static_cast<double>(y) - 15.5;
            if (dx * dx + dy * dy > 13.5 * 13.5) continue;
            err += std::abs(back.image.at(0, c, y, x) - s.image.at(0, c, y, x));
            ++n;
          }
        }
      }
      EXPECT_LT(err / static_cast<double>(n), 0.02) << "theta " << theta;
    }
  }
}

TEST(RotationTest, AngleLimit) {
  data::Sample s{TensorF(Shape(1, 1, 3, 3)), 0, "x"};
  EXPECT_THROW(data::rotate_augment(s, 181.0), ArgumentError);
}

TEST(AugmentTest, TrainOnlyAndAnglesInRange) {
  auto d = labelled(2, 10);
  data::split_dataset(d, 1);
  const std::size_t train = d.indices(data::SplitTag::train).size();
  data::AugmentSpec spec;
  spec.seed = 4;
  const auto angles = data::augment_dataset(d, spec);
  EXPECT_EQ(angles.size(), train * 4);
  EXPECT_EQ(d.samples.size(), 20 + train * 4);
  EXPECT_EQ(d.indices(data::SplitTag::train).size(), train * 5);
  for (double a : angles) {
    EXPECT_GE(a, -30.0);
    EXPECT_LE(a, 30.0);
  }
}

TEST(SplitTest, HundredPerClass) {
  auto d = labelled(3, 100);
  data::split_dataset(d, 5);
  for (std::size_t c = 0; c < 3; ++c) {
    std::map<data::SplitTag, int> counts;
    for (const auto& s : d.samples) {
      if (s.label == c) ++counts[s.tag];
    }
    EXPECT_EQ(counts[data::SplitTag::test], 20);
    EXPECT_EQ(counts[data::SplitTag::val], 24);
    EXPECT_EQ(counts[data::SplitTag::train], 56);
  }
}

TEST(SplitTest, TenSamples) {
  auto d = labelled(1, 10);
  data::split_dataset(d, 5);
  EXPECT_EQ(d.indices(data::SplitTag::test).size(), 2u);
  EXPECT_EQ(d.indices(data::SplitTag::val).size(), 2u);
  EXPECT_EQ(d.indices(data::SplitTag::train).size(), 6u);
}

TEST(SplitTest, RatiosWithinOneSample) {
  for (std::size_t n = 3; n <= 60; ++n) {
    auto d = labelled(1, n);
    data::split_dataset(d, n);
    const double total = static_cast<double>(n);
    const double test = static_cast<double>(d.indices(data::SplitTag::test).size());
    const double val = static_cast<double>(d.indices(data::SplitTag::val).size());
    EXPECT_LE(std::abs(test / total - 0.2), 1.0 / total) << n;
    EXPECT_LE(std::abs(val / (total - test) - 0.3), 1.0 / (total - test)) << n;
    EXPECT_GE(d.indices(data::SplitTag::train).size(), 1u) << n;
  }
}

TEST(SplitTest, DeterministicAndGuarded) {
  auto a = labelled(2, 17), b = labelled(2, 17);
  data::split_dataset(a, 9);
  data::split_dataset(b, 9);
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_EQ(a.samples[i].tag, b.samples[i].tag);
  auto small = labelled(2, 2);
  EXPECT_THROW(data::split_dataset(small, 1), DataError);
}

TEST(SplitTest, ManifestRoundTrip) {
  TempDir tmp("manifest");
  auto a = labelled(2, 12);
  data::split_dataset(a, 3);
  data::write_split_manifest(a, tmp.path() / "split.tsv");
  auto b = labelled(2, 12);
  data::apply_split_manifest(b, tmp.path() / "split.tsv");
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_EQ(a.samples[i].tag, b.samples[i].tag);
}

TEST(KfoldTest, ExactDivision) {
  const auto folds = data::kfold_partition(labelled(1, 10), 5, 1);
  std::vector<int> hits(10, 0);
  for (const auto& f : folds) {
    EXPECT_EQ(f.test.size(), 2u);
    EXPECT_EQ(f.train.size(), 8u);
    for (std::size_t i : f.test) ++hits[i];
  }
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(KfoldTest, RemainderGoesToFirstFolds) {
  const auto folds = data::kfold_partition(labelled(1, 11), 5, 1);
  std::vector<std::size_t> sizes;
  for (const auto& f : folds) sizes.push_back(f.test.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 2, 2, 2, 2}));
}

TEST(KfoldTest, DisjointAndCovering) {
  const auto d = labelled(4, 23);
  const auto folds = data::kfold_partition(d, 5, 2);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (const auto& f : folds) {
    total += f.test.size();
    seen.insert(f.test.begin(), f.test.end());
    std::set<std::size_t> train(f.train.begin(), f.train.end());
    for (std::size_t i : f.test) EXPECT_FALSE(train.contains(i));
    EXPECT_EQ(f.train.size() + f.test.size(), d.samples.size());
  }
  EXPECT_EQ(total, d.samples.size());
  EXPECT_EQ(seen.size(), d.samples.size());
}

TEST(KfoldTest, Errors) {
  EXPECT_THROW(data::kfold_partition(labelled(2, 10), 1, 1), DataError);
  EXPECT_THROW(data::kfold_partition(labelled(2, 4), 5, 1), DataError);
}

TEST(SynthTest, ByteIdenticalRerun) {
  TempDir a("synth_a"), b("synth_b");
  data::SynthSpec spec;
  spec.classes = 4;
  spec.per_class = 100;
  spec.size = 32;
  spec.seed = 7;
  EXPECT_EQ(data::write_synth_dataset(spec, a.path()), 400u);
  EXPECT_EQ(data::write_synth_dataset(spec, b.path()), 400u);
  const auto ta = tree_contents(a.path());
  EXPECT_EQ(ta.size(), 400u);
  EXPECT_TRUE(ta == tree_contents(b.path()));
}

TEST(SynthTest, InMemoryMatchesDisk) {
  TempDir tmp("synth_mem");
  data::SynthSpec spec;
  spec.classes = 3;
  spec.per_class = 4;
  spec.size = 16;
  spec.seed = 2;
  data::write_synth_dataset(spec, tmp.path());
  const auto disk = data::ingest_dataset(tmp.path(), 3, 16, 16);
  const auto mem = data::synth_dataset(spec);
  ASSERT_EQ(disk.samples.size(), mem.samples.size());
  for (std::size_t i = 0; i < mem.samples.size(); ++i) {
    EXPECT_EQ(disk.samples[i].label, mem.samples[i].label);
    for (std::size_t j = 0; j < mem.samples[i].image.size(); ++j) {
      ASSERT_EQ(disk.samples[i].image[j], mem.samples[i].image[j]);
    }
  }
}

TEST(SynthTest, TwoClassesAreOrthogonalOrientations) {
  data::SynthSpec spec;
  spec.classes = 2;
  spec.per_class = 1;
  spec.size = 32;
  spec.noise = 0.0;
  const auto d = data::synth_dataset(spec);
  // Class 0 varies along x only, class 1 along y only.
  const auto& a = d.samples[0].image;
  const auto& b = d.samples[1].image;
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 32; ++x) {
      EXPECT_EQ(a.at(0, 0, y, x), a.at(0, 0, 0, x));
      EXPECT_EQ(b.at(0, 0, y, x), b.at(0, 0, y, 0));
    }
  }
}

TEST(SynthTest, NoiselessTwoClassLinearlySeparable) {
  data::SynthSpec spec;
  spec.classes = 2;
  spec.per_class = 300;
  spec.size = 16;
  spec.seed = 11;
  spec.noise = 0.0;
  const auto d = data::synth_dataset(spec);
  const auto n = static_cast<Eigen::Index>(d.samples.size());
  const Eigen::Index dim = 16 * 16 + 1;
  Eigen::MatrixXd X(n, dim);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& img = d.samples[static_cast<std::size_t>(i)].image;
    for (Eigen::Index j = 0; j < 256; ++j) X(i, j) = img[static_cast<std::size_t>(j)];
    X(i, 256) = 1.0;
    y(i) = d.samples[static_cast<std::size_t>(i)].label == 0 ? -1.0 : 1.0;
  }
  const Eigen::VectorXd w = X.completeOrthogonalDecomposition().solve(y);
  const Eigen::VectorXd score = X * w;
  for (Eigen::Index i = 0; i < n; ++i) EXPECT_GT(score(i) * y(i), 0.0) << "sample " << i;
}

TEST(SynthTest, Preconditions) {
  data::SynthSpec spec;
  spec.classes = 1;
  EXPECT_THROW(data::synth_dataset(spec), ArgumentError);
  spec.classes = 2;
  spec.size = 8;
  EXPECT_THROW(data::synth_dataset(spec), ArgumentError);
}
