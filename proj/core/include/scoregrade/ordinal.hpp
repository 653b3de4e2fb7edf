#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "scoregrade/tensor.hpp"

namespace scoregrade {

// Cumulative ordinal targets: class c of K becomes K-1 binary outputs with
// t_i = 1 when c > i. A prediction counts the outputs above 0.5.

std::vector<int> ordinal_encode(std::size_t c, std::size_t num_classes);

std::size_t ordinal_decode(std::span<const double> probs);

/// Decode straight from logits (sigmoid(z) > 0.5 <=> z > 0).
std::size_t ordinal_decode_logits(std::span<const double> logits);

/// Expected class index sum_i sigmoid(z_i); a continuous difficulty score.
double ordinal_expected(std::span<const double> logits);

/// Mean binary cross-entropy between sigmoid(logits) and ordinal_encode(c).
/// `logits` holds K-1 values in any shape.
template <typename T>
Tensor<T> ordinal_loss(const Tensor<T>& logits, std::size_t c);

/// Batch form: row r of `logits` ([B x (K-1)]) is scored against classes[r].
template <typename T>
Tensor<T> ordinal_loss_batch(const Tensor<T>& logits, std::span<const std::size_t> classes);

}  // namespace scoregrade
