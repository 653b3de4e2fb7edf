#include "scoregrade/ordinal.hpp"

#include <cmath>

#include "scoregrade/error.hpp"

namespace scoregrade {

std::vector<int> ordinal_encode(std::size_t c, std::size_t num_classes) {
  if (num_classes < 2) throw ContractError("ordinal_encode: need at least 2 classes");
  if (c >= num_classes) {
    throw ValidationError("ordinal_encode: class " + std::to_string(c) + " outside [0, " +
                          std::to_string(num_classes) + ")");
  }
  std::vector<int> t(num_classes - 1, 0);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = c > i ? 1 : 0;
  return t;
}

std::size_t ordinal_decode(std::span<const double> probs) {
  std::size_t n = 0;
  for (double p : probs) n += p > 0.5 ? 1 : 0;
  return n;
}

std::size_t ordinal_decode_logits(std::span<const double> logits) {
  std::size_t n = 0;
  for (double z : logits) n += z > 0.0 ? 1 : 0;
  return n;
}

double ordinal_expected(std::span<const double> logits) {
  double total = 0.0;
  for (double z : logits) total += 1.0 / (1.0 + std::exp(-z));
  return total;
}

template <typename T>
Tensor<T> ordinal_loss(const Tensor<T>& logits, std::size_t c) {
  const auto target = ordinal_encode(c, logits.numel() + 1);
  std::vector<T> values(target.begin(), target.end());
  return bce_with_logits(logits, Tensor<T>(logits.shape(), std::move(values)));
}

template <typename T>
Tensor<T> ordinal_loss_batch(const Tensor<T>& logits, std::span<const std::size_t> classes) {
  if (logits.rank() != 2 || logits.dim(0) != classes.size()) {
    throw DimensionError("ordinal_loss_batch: one class per logits row required");
  }
  const std::size_t k = logits.dim(1) + 1;
  std::vector<T> values;
  values.reserve(logits.numel());
  for (std::size_t c : classes) {
    const auto t = ordinal_encode(c, k);
    values.insert(values.end(), t.begin(), t.end());
  }
  return bce_with_logits(logits, Tensor<T>(logits.shape(), std::move(values)));
}

template Tensor<float> ordinal_loss(const Tensor<float>&, std::size_t);
template Tensor<double> ordinal_loss(const Tensor<double>&, std::size_t);
template Tensor<float> ordinal_loss_batch(const Tensor<float>&, std::span<const std::size_t>);
template Tensor<double> ordinal_loss_batch(const Tensor<double>&, std::span<const std::size_t>);

}  // namespace scoregrade
