#include "scoregrade/optim.hpp"

#include <cmath>

#include "scoregrade/error.hpp"

namespace scoregrade {

template <typename T>
AdamState<T>::AdamState(std::span<const Tensor<T>> params, AdamHyper h) : hyper(h) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.emplace_back(p.numel(), T{0});
    v.emplace_back(p.numel(), T{0});
  }
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  if (params.size() != state.m.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != state.m[i].size()) {
      throw DimensionError("adam_step: moment buffer shape mismatch for parameter " + std::to_string(i));
    }
  }
  const auto& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    const auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      g += h.weight_decay * static_cast<double>(theta[j]);
      const double mj = h.beta1 * static_cast<double>(m[j]) + (1.0 - h.beta1) * g;
      const double vj = h.beta2 * static_cast<double>(v[j]) + (1.0 - h.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = h.learning_rate * (mj / bc1) / (std::sqrt(vj / bc2) + h.epsilon);
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) - update);
    }
  }
}

template <typename T>
double global_grad_norm(std::span<const Tensor<T>> params) {
  double total = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

template <typename T>
double clip_gradients(std::span<Tensor<T>> params, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_gradients: max_norm must be positive");
  const double norm = global_grad_norm<T>(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

template <typename T>
void add_l2_gradient(std::span<Tensor<T>> params, double coeff) {
  if (coeff == 0.0) return;
  for (auto& p : params) {
    auto g = p.mutable_grad();
    const auto theta = p.data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      g[j] = static_cast<T>(static_cast<double>(g[j]) + coeff * static_cast<double>(theta[j]));
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::span<Tensor<float>>, AdamState<float>&);
template void adam_step(std::span<Tensor<double>>, AdamState<double>&);
template double clip_gradients(std::span<Tensor<float>>, double);
template double clip_gradients(std::span<Tensor<double>>, double);
template double global_grad_norm(std::span<const Tensor<float>>);
template double global_grad_norm(std::span<const Tensor<double>>);
template void add_l2_gradient(std::span<Tensor<float>>, double);
template void add_l2_gradient(std::span<Tensor<double>>, double);

}  // namespace scoregrade
