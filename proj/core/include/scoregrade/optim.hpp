#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "scoregrade/tensor.hpp"

namespace scoregrade {

struct AdamHyper {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// L2 coefficient added to the gradient before the moment update.
  double weight_decay = 0.0;
};

/// Moments for one fixed, ordered list of parameters.
template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  AdamHyper hyper;

  AdamState() = default;
  AdamState(std::span<const Tensor<T>> params, AdamHyper h);
};

/// One bias-corrected Adam update. A parameter without a gradient buffer is
/// treated as having a zero gradient.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
template <typename T>
double clip_gradients(std::span<Tensor<T>> params, double max_norm);

template <typename T>
double global_grad_norm(std::span<const Tensor<T>> params);

/// Adds coeff * theta to each gradient (materializing buffers as needed).
template <typename T>
void add_l2_gradient(std::span<Tensor<T>> params, double coeff);

}  // namespace scoregrade
