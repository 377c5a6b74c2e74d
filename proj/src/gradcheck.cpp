#include "expertnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>

namespace expertnet::gradcheck {

namespace {

constexpr int kMaxResamples = 1000;

TensorD randn(const Shape& shape, SeededRng& rng, double stddev = 1.0) {
  return TensorD::randn(shape, stddev, rng);
}

double dot(const TensorD& a, const TensorD& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double min_abs(const TensorD& t) {
  double m = std::abs(t[0]);
  for (double v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

double Report::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

const Entry& Report::worst() const {
  return *std::max_element(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.max_rel_error < b.max_rel_error;
  });
}

Report check_gradients(const std::string& op, std::vector<Probe>& probes,
                       const std::function<double()>& loss, double eps) {
  Report report{op, eps, {}};
  for (auto& probe : probes) {
    if (probe.analytic.shape() != probe.value->shape()) {
      throw ShapeError("gradcheck " + op + ": analytic gradient for " + probe.name + " has shape " +
                       probe.analytic.shape().str() + ", value " + probe.value->shape().str());
    }
    probe.analytic.check_finite("gradcheck " + op + " analytic " + probe.name);
    Entry entry{probe.name, probe.value->size()};
    for (std::size_t i = 0; i < probe.value->size(); ++i) {
      double& x = (*probe.value)[i];
      const double saved = x;
      x = saved + eps;
      const double up = loss();
      x = saved - eps;
      const double down = loss();
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("gradcheck " + op + ": non-finite loss probing " + probe.name + "[" +
                           std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(probe.analytic[i], numeric);
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.worst_analytic = probe.analytic[i];
        entry.worst_numeric = numeric;
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

Report check_conv2d(SeededRng& rng, int stride, double eps) {
  TensorD input = randn(Shape(1, 2, 6, 6), rng);
  ops::ConvParams<double> params{randn(Shape(3, 2, 3, 3), rng, 0.5), randn(Shape(1, 1, 1, 3), rng),
                                 stride};
  const TensorD upstream = randn(ops::conv2d(input, params).shape(), rng);

  const auto grads = ops::conv2d_backward(input, params, upstream);
  std::vector<Probe> probes{{"input", &input, grads.input},
                            {"weights", &params.weights, grads.weights},
                            {"bias", &params.bias, grads.bias}};
  return check_gradients(stride == 1 ? "conv2d" : "conv2d_s2", probes,
                         [&] { return dot(ops::conv2d(input, params), upstream); }, eps);
}

Report check_relu(SeededRng& rng, double eps) {
  TensorD input = randn(Shape(1, 2, 4, 4), rng);
  for (int attempt = 0; min_abs(input) <= 10 * eps; ++attempt) {
    if (attempt == kMaxResamples) throw NumericError("gradcheck relu: could not avoid the kink");
    input = randn(input.shape(), rng);
  }
  const TensorD upstream = randn(input.shape(), rng);
  std::vector<Probe> probes{{"input", &input, ops::relu_backward(input, upstream)}};
  return check_gradients("relu", probes, [&] { return dot(ops::relu(input), upstream); }, eps);
}

Report check_elective(SeededRng& rng, ops::ElectiveMode mode, double eps) {
  const Shape shape(1, 2, 3, 3);
  std::vector<TensorD> branches;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxResamples) throw NumericError("gradcheck elective: could not avoid ties");
    branches.clear();
    for (std::size_t b = 0; b < ops::kElectiveBranches; ++b) branches.push_back(randn(shape, rng));
    if (ops::elective_kink_margin<double>(branches) > 10 * eps) break;
  }
  const TensorD upstream = randn(shape, rng);
  const auto grads = ops::elective_backward<double>(branches, upstream, mode);
  std::vector<Probe> probes;
  for (std::size_t b = 0; b < ops::kElectiveBranches; ++b) {
    probes.push_back({"branch" + std::to_string(b), &branches[b], grads[b]});
  }
  const std::string name =
      mode == ops::ElectiveMode::literal ? "elective" : "elective_nearest";
  return check_gradients(
      name, probes,
      [&] { return dot(ops::elective_fuse<double>(branches, mode), upstream); }, eps);
}

Report check_additive(SeededRng& rng, double eps) {
  TensorD a = randn(Shape(1, 2, 3, 3), rng);
  TensorD b = randn(a.shape(), rng);
  const TensorD upstream = randn(a.shape(), rng);
  std::vector<Probe> probes{{"a", &a, upstream}, {"b", &b, upstream}};
  return check_gradients("additive", probes, [&] { return dot(ops::additive(a, b), upstream); },
                         eps);
}

Report check_fc(SeededRng& rng, ops::Activation act, double eps) {
  TensorD input = randn(Shape(2, 3, 2, 2), rng);
  ops::FcParams<double> params{randn(Shape(1, 1, 5, 12), rng, 0.4), randn(Shape(1, 1, 1, 5), rng)};
  if (act == ops::Activation::relu) {
    // Keep pre-activations clear of 0 so no probe crosses the kink.
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxResamples) throw NumericError("gradcheck fc: could not avoid the kink");
      const TensorD pre = ops::fc_forward(input, params, ops::Activation::identity);
      if (min_abs(pre) > 100 * eps) break;
      params.bias = randn(params.bias.shape(), rng);
    }
  }
  const TensorD output = ops::fc_forward(input, params, act);
  const TensorD upstream = randn(output.shape(), rng);
  const auto grads = ops::fc_backward(input, params, act, output, upstream);
  std::vector<Probe> probes{{"input", &input, grads.input},
                            {"weights", &params.weights, grads.weights},
                            {"bias", &params.bias, grads.bias}};
  return check_gradients(act == ops::Activation::relu ? "fc" : "fc_identity", probes,
                         [&] { return dot(ops::fc_forward(input, params, act), upstream); }, eps);
}

Report check_softmax_xent(SeededRng& rng, double eps) {
  TensorD logits = randn(Shape(1, 1, 1, 7), rng, 2.0);
  const std::size_t label = rng.uniform_index(7);
  const auto result = ops::softmax_xent<double>(logits.data(), label);
  std::vector<Probe> probes{
      {"logits", &logits, TensorD(logits.shape(), result.grad_logits)}};
  return check_gradients(
      "softmax_xent", probes,
      [&] { return ops::softmax_xent<double>(std::as_const(logits).data(), label).loss; }, eps);
}

}  // namespace expertnet::gradcheck
