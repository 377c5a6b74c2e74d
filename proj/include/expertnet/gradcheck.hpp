#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "expertnet/ops.hpp"
#include "expertnet/rng.hpp"
#include "expertnet/tensor.hpp"

// Central finite-difference verification of analytic gradients, 64-bit only.
namespace expertnet::gradcheck {

// |a - n| / max(1e-8, |a| + |n|)
double relative_error(double analytic, double numeric);

struct Entry {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct Report {
  std::string op;
  double eps = 0.0;
  std::vector<Entry> entries;

  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
  const Entry& worst() const;
};

// One differentiable quantity: the tensor the loss reads (perturbed in place
// during the probe and restored bit-exactly) and its analytic gradient.
struct Probe {
  std::string name;
  TensorD* value;
  TensorD analytic;
};

// Compares every coordinate of every probe against
// (loss(x + eps) - loss(x - eps)) / (2 eps). Throws NumericError when a loss
// evaluation is not finite.
Report check_gradients(const std::string& op, std::vector<Probe>& probes,
                       const std::function<double()>& loss, double eps);

// Per-op checks on random inputs. Each scalarizes the op output as
// sum(out * upstream) with a random upstream tensor; inputs near a kink
// (within 10 * eps) are resampled.
Report check_conv2d(SeededRng& rng, int stride, double eps = 1e-5);
Report check_relu(SeededRng& rng, double eps = 1e-5);
Report check_elective(SeededRng& rng, ops::ElectiveMode mode, double eps = 1e-5);
Report check_additive(SeededRng& rng, double eps = 1e-5);
Report check_fc(SeededRng& rng, ops::Activation act, double eps = 1e-5);
Report check_softmax_xent(SeededRng& rng, double eps = 1e-5);

}  // namespace expertnet::gradcheck
