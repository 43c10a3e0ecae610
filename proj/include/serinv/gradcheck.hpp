#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "serinv/autodiff.hpp"
#include "serinv/rng.hpp"

namespace serinv::ad {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  std::vector<double> per_input_errors;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kKinkMargin = 1e-3;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Smallest |pre-activation| seen by any ReLU while `fn` runs.
inline double kink_distance(const std::function<void()>& fn) {
  auto& m = kink_monitor();
  const KinkMonitor saved = m;
  m.active = true;
  m.min_abs = std::numeric_limits<double>::infinity();
  fn();
  const double d = m.min_abs;
  m = saved;
  return d;
}

/// Compares given analytic gradients against central differences of
/// `objective`, perturbing every element of every tensor in `wrt` in place.
inline GradCheckReport compare_with_finite_differences(std::string name,
                                                       const std::vector<std::vector<double>>& analytic,
                                                       const std::function<double()>& objective,
                                                       std::span<Tensor> wrt, double h = kFiniteDifferenceStep) {
  GradCheckReport report;
  report.op_name = std::move(name);
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto values = wrt[i].data();
    double worst = 0.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double original = values[j];
      values[j] = original + h;
      const double up = objective();
      values[j] = original - h;
      const double down = objective();
      values[j] = original;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, relative_error(analytic[i][j], numeric));
    }
    report.per_input_errors.push_back(worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

/// Compares backward() gradients of the scalar produced by `loss_fn` against
/// central differences. `loss_fn` must rebuild the tape from the current
/// values each call.
inline GradCheckReport check_gradients(std::string name, const std::function<Tensor()>& loss_fn,
                                       std::span<Tensor> wrt, double h = kFiniteDifferenceStep) {
  const Tensor loss = loss_fn();
  const auto analytic = gradients(loss, std::span<const Tensor>(wrt.data(), wrt.size()));
  return compare_with_finite_differences(std::move(name), analytic, [&] { return loss_fn().item(); }, wrt, h);
}

using OpUnderTest = std::function<Tensor(std::span<const Tensor>)>;

/// Draws standard-normal inputs of the given shapes and checks `op` after
/// projecting its output onto a fixed random direction. Sample points within
/// kKinkMargin of a ReLU kink are redrawn.
inline GradCheckReport check_gradients(std::string name, const OpUnderTest& op,
                                       std::span<const Shape> input_shapes, std::uint64_t seed) {
  constexpr int kMaxDraws = 64;
  for (int attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Tensor> inputs;
    for (const auto& s : input_shapes) {
      std::vector<double> v(numel_of(s));
      for (double& x : v) x = normal(rng);
      inputs.push_back(Tensor::from(s, std::move(v), true));
    }
    Tensor probe;
    const double distance = kink_distance([&] { probe = op(inputs); });
    if (distance < kKinkMargin && attempt + 1 < kMaxDraws) continue;
    std::vector<double> direction(probe.numel());
    for (double& x : direction) x = normal(rng);
    const Tensor weights = Tensor::from(probe.shape(), std::move(direction));
    auto loss_fn = [&] { return sum(mul(op(inputs), weights)); };
    return check_gradients(std::move(name), loss_fn, inputs);
  }
}

}  // namespace serinv::ad
