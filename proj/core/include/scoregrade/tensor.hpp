#pragma once

// Dense row-major tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap handle onto shared storage. Results of primitives are
// immutable; only leaf parameters are written to, by the optimizer and the
// checkpoint loader. Instantiated for float (training) and double (gradient
// verification).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "scoregrade/random.hpp"

namespace scoregrade {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until materialized
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into its inputs.
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  [[nodiscard]] std::size_t numel() const { return node_->data.size(); }
  /// Product of all extents but the last.
  [[nodiscard]] std::size_t rows() const;
  /// Last extent.
  [[nodiscard]] std::size_t cols() const { return node_->shape.back(); }

  [[nodiscard]] std::span<const T> data() const { return node_->data; }
  /// Write access for optimizers and loaders. Never call on a graph output.
  [[nodiscard]] std::span<T> mutable_data() { return node_->data; }
  [[nodiscard]] T item() const;
  [[nodiscard]] T at(std::size_t row, std::size_t col) const {
    return node_->data[row * cols() + col];
  }

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
  [[nodiscard]] std::span<T> mutable_grad() { return node_->ensure_grad(); }
  /// Drops the gradient buffer.
  void zero_grad() { node_->grad.clear(); }
  [[nodiscard]] bool is_leaf() const { return node_->inputs.empty(); }
  [[nodiscard]] const char* op_name() const { return node_->op; }

  /// Copy of the values without any graph history.
  [[nodiscard]] Tensor detach() const { return Tensor(shape(), node_->data, false); }

  [[nodiscard]] const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Primitives. All 2-D operands are [rows x cols] row-major.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// x[r, c] + bias[c]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Exact Gaussian-CDF form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

/// Causal 1-D convolution over frames. `kernel` is [k x c_in x c_out]; tap
/// k-1 multiplies the current frame. Rows of `x` may hold several independent
/// sequences; `segments` gives their lengths (empty means one sequence).
template <typename T>
Tensor<T> conv1d_causal(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                        std::span<const std::size_t> segments = {});

/// Row gather; also serves as a general row selector.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids);

/// Rows sampled at fractional positions with linear interpolation.
template <typename T>
Tensor<T> lerp_rows(const Tensor<T>& table, std::span<const double> positions);

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& top, const Tensor<T>& bottom);

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count);

/// Mean of consecutive row groups with the given sizes.
template <typename T>
Tensor<T> segment_mean_rows(const Tensor<T>& x, std::span<const std::size_t> counts);

/// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

/// Constant keys/values that precede each segment's own rows in attention.
template <typename T>
struct AttentionPrefix {
  std::vector<Tensor<T>> keys;    // per segment, [P_s x d] or undefined
  std::vector<Tensor<T>> values;  // same shapes as keys
};

/// Multi-head causal attention. q, k, v are [N x d] with the rows split into
/// segments. Row i of a segment sees the whole prefix of that segment plus its
/// own rows 0..i.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::size_t> segments, std::size_t n_heads,
                           const AttentionPrefix<T>* prefix = nullptr);

/// Mean negative log-likelihood of integer targets under row-wise softmax.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

/// Mean binary cross-entropy between sigmoid(logits) and constant targets.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

// ---------------------------------------------------------------------------

/// Reverse-mode accumulation from a scalar into every reachable tensor that
/// requires grad. Leaf gradients accumulate across calls.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
struct FiniteDiffResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences against backward(). The error of one coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
template <typename T>
FiniteDiffResult<T> finite_diff_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    std::vector<Tensor<T>> point, double eps, double floor = 1e-3);

}  // namespace scoregrade
