#pragma once

// Central finite-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "magnifier/ops.hpp"
#include "magnifier/rng.hpp"
#include "magnifier/tape.hpp"

namespace magnifier::testing {

using BuildFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_rel_err = 0;
  std::size_t checked = 0;
  double kink_margin = 0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// near-zero entries from turning O(h^2) truncation noise into large ratios.
inline double rel_err(double a, double n, double floor = 1e-2) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline double evaluate(const BuildFn& build, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  return build(tape, vars).value().item();
}

inline GradCheckResult check_gradients(const BuildFn& build, std::vector<Tensor<double>> inputs,
                                       double h = 1e-3) {
  GradCheckResult res;
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  auto root = build(tape, vars);
  tape.backward(root);
  res.kink_margin = tape.kink_margin();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto analytic = tape.grad(vars[i]);
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      const double orig = inputs[i][e];
      inputs[i][e] = orig + h;
      const double up = evaluate(build, inputs);
      inputs[i][e] = orig - h;
      const double down = evaluate(build, inputs);
      inputs[i][e] = orig;
      const double numeric = (up - down) / (2 * h);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[e], numeric));
      ++res.checked;
    }
  }
  return res;
}

// Draws instances until `count` of them sit at least `min_margin` away from
// every non-smooth switching surface, and checks each one.
struct SuiteResult {
  double worst = 0;
  std::size_t instances = 0;
  std::size_t rejected = 0;
};

inline SuiteResult check_random_instances(
    std::size_t count, const std::function<std::vector<Tensor<double>>(RngStream&)>& generate,
    const BuildFn& build, std::uint64_t seed, double min_margin = 0.01, double h = 1e-3) {
  SuiteResult out;
  RngStream rng(seed);
  while (out.instances < count) {
    auto inputs = generate(rng);
    {
      Tape<double> scout;
      std::vector<Var<double>> vars;
      for (const auto& t : inputs) vars.push_back(scout.variable(t));
      build(scout, vars);
      if (scout.kink_margin() < min_margin) {
        if (++out.rejected > 50 * count) break;
        continue;
      }
    }
    const auto r = check_gradients(build, std::move(inputs), h);
    out.worst = std::max(out.worst, r.max_rel_err);
    ++out.instances;
  }
  return out;
}

inline Tensor<double> random_tensor(RngStream& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Tensor<double> uniform_tensor(RngStream& rng, Shape shape, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Positive feature maps [B,C,H,W] whose values inside each plane are separated
// by at least 0.04, so max-pooling switches are far from any FD perturbation.
inline Tensor<double> spaced_feature_map(RngStream& rng, Shape shape) {
  Tensor<double> t(shape);
  const std::size_t hw = shape[2] * shape[3];
  const std::size_t planes = t.size() / hw;
  std::vector<std::size_t> perm(hw);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < hw; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    for (std::size_t i = 0; i < hw; ++i)
      t[p * hw + i] = 0.1 + 0.05 * static_cast<double>(perm[i]) + rng.uniform(-0.005, 0.005);
  }
  return t;
}

// Weighted sum of all entries, turning any output into a scalar probe.
// Weights come from a fixed seed so every re-evaluation uses the same probe.
inline Var<double> probe(Var<double> out, std::uint64_t seed = 99) {
  RngStream rng(seed);
  auto w = random_tensor(rng, out.shape());
  return sum(mul(out, out.tape->constant(std::move(w))));
}

}  // namespace magnifier::testing
