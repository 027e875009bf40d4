#pragma once

// Central-difference gradient oracle for the test suites. Builds the graph
// analytically once, then probes every leaf coordinate with +/- h forward
// evaluations. Independent of the backward implementation by construction.

#include <cmath>
#include <functional>
#include <vector>

#include "bikd/rng.hpp"
#include "bikd/tensor.hpp"

namespace bikd::testing {

// Scaled relative error: |a - b| / max(1, |a|, |b|). The floor of 1 keeps
// near-zero coordinates (FD noise ~1e-11) from blowing up the ratio.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Builder: (tape, leaves) -> scalar loss tensor. Must rebuild from the
// leaves' current values on every call.
using GraphBuilder = std::function<Tensor<double>(
    Tape<double>&, const std::vector<Tensor<double>>&)>;

// Max scaled relative error between analytic and central-difference
// gradients over every coordinate of every leaf.
inline double gradcheck_max_rel_err(std::vector<Tensor<double>> leaves,
                                    const GraphBuilder& build, double h = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tape<double> tape;
  Tensor<double> loss = build(tape, leaves);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

  auto value_at = [&]() {
    Tape<double> fresh;
    fresh.set_recording(false);
    return build(fresh, leaves).item();
  };

  double worst = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& vals = leaves[l].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = value_at();
      vals[i] = orig - h;
      const double down = value_at();
      vals[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[l][i], fd));
    }
  }
  return worst;
}

inline Tensor<double> random_tensor(Shape shape, RngStream& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor<double>::leaf(std::move(shape), std::move(v));
}

// Max scaled relative error between two flat vectors.
inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
  return worst;
}

}  // namespace bikd::testing
