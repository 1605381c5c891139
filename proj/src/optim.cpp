#include "magnifier/optim.hpp"

#include <cmath>

#include "magnifier/errors.hpp"

namespace magnifier {

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer kind '" + name + "' (expected adam|sgd)");
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "sgd";
}

template <typename T>
void optimizer_step(ParameterSet<T>& params, double lr, const OptimizerHyper& hyper) {
  if (!params.grads_ready())
    throw ContractError("optimizer_step: no gradients; call backward() first");
  for (auto& [name, p] : params) {
    auto value = p.value.data();
    auto grad = p.grad.data();
    if (hyper.kind == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) + hyper.weight_decay * value[i];
        value[i] = static_cast<T>(value[i] - lr * g);
      }
      ++p.step;
      continue;
    }
    ++p.step;
    auto m = p.moment1.data();
    auto v = p.moment2.data();
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(p.step));
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = static_cast<double>(grad[i]) + hyper.weight_decay * value[i];
      m[i] = static_cast<T>(hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g);
      v[i] = static_cast<T>(hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g);
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      value[i] = static_cast<T>(value[i] - lr * m_hat / (std::sqrt(v_hat) + hyper.eps));
    }
  }
  params.zero_grad();
}

template void optimizer_step(ParameterSet<float>&, double, const OptimizerHyper&);
template void optimizer_step(ParameterSet<double>&, double, const OptimizerHyper&);

}  // namespace magnifier
