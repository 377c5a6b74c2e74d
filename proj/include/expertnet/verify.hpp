#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "expertnet/gradcheck.hpp"

namespace expertnet::verify {

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kNetworkTolerance = 1e-3;
inline constexpr std::size_t kNetworkCoordinates = 50;

struct CheckResult {
  gradcheck::Report report;
  double tolerance = kOpTolerance;
  bool passed() const { return report.passed(tolerance); }
};

// Individual check names, in run order.
std::vector<std::string> gradcheck_names();
// Names accepted by run_gradcheck_suite: every check name plus the families
// "conv2d", "elective" and "fc", which select all their variants.
std::vector<std::string> gradcheck_filters();

// Runs every check, or those selected by `filter`, in 64-bit mode. Each
// check draws from its own stream seeded from `seed` and its position, so a
// filtered run reproduces the numbers of the full run. Throws ArgumentError
// for an unknown filter.
std::vector<CheckResult> run_gradcheck_suite(std::uint64_t seed, std::string_view filter = {});

std::string format_result(const CheckResult& result);

}  // namespace expertnet::verify
