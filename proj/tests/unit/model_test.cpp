#include <gtest/gtest.h>

#include <array>
#include <bit>
#include <fstream>
#include <sstream>
#include <map>
#include <set>
#include <string>

#include "expertnet/errors.hpp"
#include "expertnet/model.hpp"

using namespace expertnet;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Closed-form counts, written independently of the library.
std::size_t conv_count(std::size_t k, std::size_t in, std::size_t out) { return k * k * in * out + out; }
std::size_t exfeat_count(std::size_t c) {
  std::size_t total = 0;
  for (std::size_t s : {1, 3, 5, 7}) total += s * s * c * c + c;
  return total;
}
std::size_t fc_count(std::size_t in, std::size_t out) { return in * out + out; }

const std::array<std::pair<const char*, std::array<std::size_t, 3>>, 17> kReferenceShapes{{
    {"Conv1", {128, 128, 32}}, {"Conv2", {64, 64, 32}},  {"ExFeat1", {64, 64, 32}}, {"Add1", {64, 64, 32}},
    {"Conv4", {32, 32, 64}},   {"ExFeat2", {32, 32, 64}}, {"Add2", {32, 32, 64}},   {"Conv5", {16, 16, 96}},
    {"ExFeat3", {16, 16, 96}}, {"Add3", {16, 16, 96}},  {"Conv7", {8, 8, 128}},   {"ExFeat4", {8, 8, 128}},
    {"Add4", {8, 8, 128}},     {"Conv9", {4, 4, 184}},  {"Conv10", {2, 2, 256}},  {"FC1", {1, 1, 512}},
    {"FC2", {1, 1, 1024}},
}};

const char* kTinyConfig = R"(
input channels=1 height=8 width=8
conv name=C1 k=3 out=2 stride=1 act=relu
exfeat name=X1
add name=A1 skip=C1
conv name=C2 k=3 out=3 stride=2 act=relu
fc name=F1 out=5 act=relu
classifier name=Out classes=3
)";

Network<float> desk_net(std::uint64_t seed) {
  SeededRng rng(seed);
  return Network<float>::build(parse_config(desk_config_text()), rng);
}

void expect_bit_equal(const TensorF& a, const TensorF& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(std::bit_cast<std::uint32_t>(a[i]), std::bit_cast<std::uint32_t>(b[i])) << "index " << i;
  }
}

}  // namespace

TEST(ConfigTest, ShippedFilesMatchBuiltins) {
  EXPECT_EQ(read_text(EXPERTNET_CONFIG_DIR "/canonical.cfg"), canonical_config_text());
  EXPECT_EQ(read_text(EXPERTNET_CONFIG_DIR "/desk.cfg"), desk_config_text());
}

TEST(ConfigTest, FormatRoundTrip) {
  for (auto text : {canonical_config_text(), desk_config_text()}) {
    const auto a = parse_config(text);
    const auto b = parse_config(format_config(a));
    EXPECT_EQ(a.layers, b.layers);
    EXPECT_EQ(a.in_height, b.in_height);
    EXPECT_EQ(a.elective_mode, b.elective_mode);
  }
}

TEST(ConfigTest, Errors) {
  EXPECT_THROW(parse_config("input channels=3 height=8 width=8\nconv name=A k=3 out=2 speed=4\nclassifier name=C classes=2\n"),
               ConfigError);
  EXPECT_THROW(parse_config("input channels=3 height=8 width=8\nadd name=A skip=Nope\nclassifier name=C classes=2\n"),
               ConfigError);
  EXPECT_THROW(parse_config("input channels=3 height=8 width=8\nclassifier name=C classes=1\n"), ConfigError);
  EXPECT_THROW(parse_config("input channels=3 height=8 width=8\nconv name=A k=4 out=2 stride=1 act=relu\nclassifier name=C classes=2\n"),
               ConfigError);
  EXPECT_THROW(parse_config("bogus\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/x.cfg"), ConfigError);
}

TEST(ShapePropagationTest, CanonicalMatchesReferenceShapes) {
  const auto infos = propagate_shapes(parse_config(canonical_config_text()));
  for (const auto& [name, hwc] : kReferenceShapes) {
    const auto it = std::find_if(infos.begin(), infos.end(), [&](const LayerInfo& l) { return l.name == name; });
    ASSERT_NE(it, infos.end()) << name;
    EXPECT_EQ(it->output, Shape(1, static_cast<std::int64_t>(hwc[2]), static_cast<std::int64_t>(hwc[0]),
                                static_cast<std::int64_t>(hwc[1])))
        << name;
  }
}

TEST(ShapePropagationTest, OddInputRoundsUp) {
  auto config = parse_config(canonical_config_text());
  config.in_height = config.in_width = 127;
  const auto infos = propagate_shapes(config);
  std::vector<std::size_t> strided;
  for (const auto& l : infos) {
    if (l.kind == LayerKind::conv && l.name != "Conv1") strided.push_back(l.output.h());
  }
  EXPECT_EQ(strided, (std::vector<std::size_t>{64, 32, 16, 8, 4, 2}));
}

TEST(ParamCountTest, ClosedForm) {
  const auto audit = audit_parameters(parse_config(canonical_config_text()));
  std::map<std::string, std::size_t> got;
  for (const auto& r : audit.rows) got[r.name] = r.params;
  EXPECT_EQ(got["Conv1"], 2432u);
  EXPECT_EQ(got["Conv1"], conv_count(5, 3, 32));
  EXPECT_EQ(got["ExFeat1"], 86144u);
  EXPECT_EQ(got["ExFeat1"], exfeat_count(32));
  EXPECT_EQ(got["ExFeat4"], 1376768u);
  EXPECT_EQ(got["FC1"], 524800u);
  EXPECT_EQ(got["FC1"], fc_count(1024, 512));
  const std::size_t total = conv_count(5, 3, 32) + conv_count(3, 32, 32) + exfeat_count(32) + conv_count(3, 32, 64) +
                            exfeat_count(64) + conv_count(3, 64, 96) + exfeat_count(96) + conv_count(3, 96, 128) +
                            exfeat_count(128) + conv_count(3, 128, 184) + conv_count(3, 184, 256) +
                            fc_count(1024, 512) + fc_count(512, 1024) + fc_count(1024, 7);
  EXPECT_EQ(total, 4471679u);
  EXPECT_EQ(audit.total, total);
  EXPECT_TRUE(audit.canonical);
}

TEST(ParamCountTest, AuditFlagsOnlyMismatchedRows) {
  const auto audit = audit_parameters(parse_config(canonical_config_text()));
  std::set<std::string> flagged;
  for (const auto& r : audit.rows) {
    if (r.reference && !r.matches_reference) flagged.insert(r.name);
  }
  EXPECT_EQ(flagged, (std::set<std::string>{"ExFeat2", "ExFeat3", "ExFeat4"}));
  const std::string text = format_audit(audit);
  EXPECT_NE(text.find("1,376,768"), std::string::npos);
  EXPECT_NE(text.find("4,471,679"), std::string::npos);
}

TEST(ParamCountTest, DeskIsSmall) {
  const auto net = desk_net(1);
  EXPECT_LT(net.parameter_count(), 100000u);
  EXPECT_EQ(net.parameter_count(), audit_parameters(net.config()).total);
}

TEST(NetworkTest, CanonicalBatchForward) {
  SeededRng rng(3);
  const auto net = Network<float>::build(parse_config(canonical_config_text()), rng);
  const auto x = TensorF::randn(Shape(2, 3, 128, 128), 1.0f, rng);
  const auto fwd = net.forward(x, {"ExFeat1"});
  EXPECT_EQ(fwd.logits.shape(), Shape(2, 7, 1, 1));
  EXPECT_EQ(fwd.captures.at("ExFeat1").shape(), Shape(2, 32, 64, 64));
  const auto maps = dump_feature_maps(fwd.captures, "ExFeat1");
  ASSERT_EQ(maps.size(), 32u);
  for (const auto& m : maps) {
    EXPECT_EQ(m.width, 64u);
    EXPECT_EQ(m.height, 64u);
  }
}

TEST(NetworkTest, ZeroInputZeroBiasGivesEqualLogits) {
  auto net = desk_net(4);
  const auto names = net.parameter_names();
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i].ends_with(".bias")) params[i]->fill(0.0f);
  }
  const auto logits = net.forward(TensorF(Shape(1, 3, 32, 32))).logits;
  for (std::size_t i = 1; i < logits.size(); ++i) EXPECT_EQ(logits[i], logits[0]);
}

TEST(NetworkTest, BatchDecomposes) {
  const auto net = desk_net(5);
  SeededRng rng(6);
  const auto x = TensorF::randn(Shape(3, 3, 32, 32), 1.0f, rng);
  const auto whole = net.forward(x).logits;
  for (std::size_t n = 0; n < 3; ++n) {
    expect_bit_equal(net.forward(x.batch_slice(n, 1)).logits, whole.batch_slice(n, 1));
  }
}

TEST(NetworkTest, WrongInputShape) {
  const auto net = desk_net(7);
  EXPECT_THROW(net.forward(TensorF(Shape(1, 3, 30, 32))), ShapeError);
  EXPECT_THROW(net.forward(TensorF(Shape(1, 3, 32, 32)), {"Nope"}), LookupError);
  EXPECT_THROW(net.layer_index("Nope"), LookupError);
}

TEST(NetworkTest, ZeroUpstreamGivesZeroGradients) {
  const auto net = desk_net(8);
  SeededRng rng(9);
  const auto fwd = net.forward(TensorF::randn(Shape(2, 3, 32, 32), 1.0f, rng));
  for (const auto& g : net.backward(fwd.trace, TensorF(fwd.logits.shape()))) {
    for (float v : g.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(NetworkTest, DeskGradientCheck) {
  SeededRng rng(10);
  auto net = Network<float>::build(parse_config(desk_config_text()), rng).cast<double>();
  const auto x = TensorD::randn(Shape(1, 3, 32, 32), 0.5, rng);
  const std::array<std::size_t, 1> labels{2};
  const auto report = check_network(net, x, labels, 50, rng);
  EXPECT_LT(report.max_rel_error(), 1e-3);
}

TEST(NetworkTest, SkipPathGradientCheck) {
  SeededRng rng(11);
  auto net = Network<double>::build(parse_config(kTinyConfig), rng);
  const auto x = TensorD::randn(Shape(2, 1, 8, 8), 1.0, rng);
  const std::array<std::size_t, 2> labels{0, 2};
  std::size_t coords = 0;
  for (const auto* p : net.parameters()) coords += p->size();
  const auto report = check_network(net, x, labels, std::min<std::size_t>(coords, 200), rng);
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(NetworkTest, NearestBranchModeGradientCheck) {
  auto config = parse_config(kTinyConfig);
  config.elective_mode = ops::ElectiveMode::nearest_branch;
  SeededRng rng(12);
  auto net = Network<double>::build(config, rng);
  const auto x = TensorD::randn(Shape(1, 1, 8, 8), 1.0, rng);
  const std::array<std::size_t, 1> labels{1};
  EXPECT_LT(check_network(net, x, labels, 100, rng).max_rel_error(), 1e-4);
}

TEST(SerializationTest, RoundTripBitIdentical) {
  const auto net = desk_net(13);
  std::stringstream s;
  save_model(net, s);
  EXPECT_EQ(s.str().substr(0, 8), "XPNM0001");
  const auto back = load_model<float>(s);
  SeededRng rng(14);
  const auto x = TensorF::randn(Shape(2, 3, 32, 32), 1.0f, rng);
  expect_bit_equal(net.forward(x).logits, back.forward(x).logits);
  EXPECT_EQ(format_config(back.config()), format_config(net.config()));
}

TEST(SerializationTest, Errors) {
  const auto net = desk_net(15);
  std::stringstream s;
  save_model(net, s);
  std::string bytes = s.str();

  std::string corrupt = bytes;
  corrupt[0] = 'Y';
  std::istringstream bad_magic(corrupt);
  EXPECT_THROW(load_model<float>(bad_magic), FormatError);

  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_model<float>(truncated), FormatError);

  std::stringstream wide;
  save_model(net.cast<double>(), wide);
  EXPECT_THROW(load_model<float>(wide), FormatError);
  wide.seekg(0);
  EXPECT_NO_THROW(load_model<double>(wide));
}

TEST(FeatureMapTest, Normalization) {
  FeatureCapture<float> cap;
  TensorF t(Shape(1, 2, 1, 256));
  for (std::size_t x = 0; x < 256; ++x) {
    t.at(0, 0, 0, x) = static_cast<float>(x) / 255.0f;
    t.at(0, 1, 0, x) = 0.7f;
  }
  cap["L"] = t;
  const auto maps = dump_feature_maps(cap, "L");
  ASSERT_EQ(maps.size(), 2u);
  for (std::size_t x = 0; x < 256; ++x) {
    EXPECT_EQ(maps[0].pixels[x], x);
    EXPECT_EQ(maps[1].pixels[x], 0);
  }
  EXPECT_THROW(dump_feature_maps(cap, "M"), LookupError);
}
