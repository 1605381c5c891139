#pragma once

#include <string>

#include "magnifier/parameter.hpp"

namespace magnifier {

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerHyper {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Coupled L2: added to the gradient before the moment updates.
  double weight_decay = 5e-4;
};

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

// Applies one update from the gradients left by backward(), then zeroes them.
// Throws ContractError when no backward pass has populated gradients.
template <typename T>
void optimizer_step(ParameterSet<T>& params, double lr, const OptimizerHyper& hyper);

extern template void optimizer_step(ParameterSet<float>&, double, const OptimizerHyper&);
extern template void optimizer_step(ParameterSet<double>&, double, const OptimizerHyper&);

}  // namespace magnifier
