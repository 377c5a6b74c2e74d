#include "expertnet/verify.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <iomanip>
#include <sstream>

#include "expertnet/data.hpp"
#include "expertnet/model.hpp"

namespace expertnet::verify {

namespace {

struct Check {
  std::string_view name;
  std::string_view family;
  std::function<CheckResult(SeededRng&)> run;
};

CheckResult op(gradcheck::Report r) { return {std::move(r), kOpTolerance}; }

CheckResult network_check(SeededRng& rng) {
  const ModelConfig config = parse_config(desk_config_text());
  auto net = Network<float>::build(config, rng).cast<double>();
  data::SynthSpec spec;
  spec.classes = config.num_classes();
  spec.per_class = 1;
  spec.size = config.in_height;
  spec.seed = rng.next_u64();
  const auto dataset = data::synth_dataset(spec);
  const std::size_t pick = rng.uniform_index(dataset.samples.size());
  const TensorD batch = dataset.samples[pick].image.cast<double>();
  const std::array<std::size_t, 1> labels{dataset.samples[pick].label};
  return {check_network(net, batch, labels, kNetworkCoordinates, rng), kNetworkTolerance};
}

const std::vector<Check>& checks() {
  static const std::vector<Check> all{
      {"conv2d", "conv2d", [](SeededRng& r) { return op(gradcheck::check_conv2d(r, 1)); }},
      {"conv2d_s2", "conv2d", [](SeededRng& r) { return op(gradcheck::check_conv2d(r, 2)); }},
      {"relu", "relu", [](SeededRng& r) { return op(gradcheck::check_relu(r)); }},
      {"elective", "elective",
       [](SeededRng& r) { return op(gradcheck::check_elective(r, ops::ElectiveMode::literal)); }},
      {"elective_nearest", "elective",
       [](SeededRng& r) { return op(gradcheck::check_elective(r, ops::ElectiveMode::nearest_branch)); }},
      {"additive", "additive", [](SeededRng& r) { return op(gradcheck::check_additive(r)); }},
      {"fc", "fc", [](SeededRng& r) { return op(gradcheck::check_fc(r, ops::Activation::relu)); }},
      {"fc_identity", "fc",
       [](SeededRng& r) { return op(gradcheck::check_fc(r, ops::Activation::identity)); }},
      {"softmax_xent", "softmax_xent", [](SeededRng& r) { return op(gradcheck::check_softmax_xent(r)); }},
      {"network", "network", network_check},
  };
  return all;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> out;
  for (const auto& c : checks()) out.emplace_back(c.name);
  return out;
}

std::vector<std::string> gradcheck_filters() {
  std::vector<std::string> out;
  for (const auto& c : checks()) {
    if (std::find(out.begin(), out.end(), c.family) == out.end()) out.emplace_back(c.family);
    if (std::find(out.begin(), out.end(), c.name) == out.end()) out.emplace_back(c.name);
  }
  return out;
}

std::vector<CheckResult> run_gradcheck_suite(std::uint64_t seed, std::string_view filter) {
  if (!filter.empty()) {
    const auto filters = gradcheck_filters();
    if (std::find(filters.begin(), filters.end(), filter) == filters.end()) {
      std::string valid;
      for (const auto& f : filters) valid += (valid.empty() ? "" : ", ") + f;
      throw ArgumentError("unknown gradcheck op '" + std::string(filter) + "' (valid: " + valid + ")");
    }
  }
  std::vector<CheckResult> results;
  const auto& all = checks();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (!filter.empty() && filter != all[i].name && filter != all[i].family) continue;
    SeededRng rng(seed * 0x9E3779B97F4A7C15ULL + i);
    results.push_back(all[i].run(rng));
  }
  return results;
}

std::string format_result(const CheckResult& result) {
  const auto& r = result.report;
  std::ostringstream out;
  out << (result.passed() ? "PASS " : "FAIL ") << r.op << "  max_rel_error=" << std::scientific
      << std::setprecision(3) << r.max_rel_error() << "  tolerance=" << result.tolerance;
  if (!result.passed() && !r.entries.empty()) {
    const auto& w = r.worst();
    out << "  worst=" << w.name << "[" << w.worst_index << "] analytic=" << w.worst_analytic
        << " numeric=" << w.worst_numeric;
  }
  return out.str();
}

}  // namespace expertnet::verify
