#include "scoregrade/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "scoregrade/error.hpp"

namespace scoregrade {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
ConstMatMap<T> as_mat(const std::vector<T>& buf, std::size_t r, std::size_t c) {
  return ConstMatMap<T>(buf.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
MatMap<T> as_mut(std::span<T> buf, std::size_t r, std::size_t c) {
  return MatMap<T>(buf.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor");
  }
}

// Wraps a freshly computed buffer as a tensor and records the graph node when
// any input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<NodePtr<T>> inputs,
                      const char* op, std::function<void(detail::Node<T>&)> bw) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool needs = g_grad_enabled &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr<T>& n) { return n && n->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(bw);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
bool wants(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  node_->data.assign(shape_numel(shape), T{0});
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return node_->shape.empty() ? 1 : numel() / node_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor with " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
  require(b.dim(0) == k, "matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
  std::vector<T> out(r * c);
  as_mut<T>(out, r, c).noalias() = as_mat(a.node()->data, r, k) * as_mat(b.node()->data, k, c);
  return make_result<T>({r, c}, std::move(out), {a.node(), b.node()}, "matmul",
                        [r, k, c](detail::Node<T>& self) {
                          auto& na = self.inputs[0];
                          auto& nb = self.inputs[1];
                          auto g = as_mat(self.grad, r, c);
                          if (wants(na)) {
                            as_mut(na->ensure_grad(), r, k).noalias() +=
                                g * as_mat(nb->data, k, c).transpose();
                          }
                          if (wants(nb)) {
                            as_mut(nb->ensure_grad(), k, c).noalias() +=
                                as_mat(na->data, r, k).transpose() * g;
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shapes differ " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  std::vector<T> out(a.numel());
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, "add",
                        [](detail::Node<T>& self) {
                          for (auto& in : self.inputs) {
                            if (!wants(in)) continue;
                            auto g = in->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shapes differ " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  std::vector<T> out(a.numel());
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, "mul",
                        [](detail::Node<T>& self) {
                          auto& na = self.inputs[0];
                          auto& nb = self.inputs[1];
                          if (wants(na)) {
                            auto g = na->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->data[i];
                          }
                          if (wants(nb)) {
                            auto g = nb->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->data[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(x.shape(), std::move(out), {x.node()}, "scale",
                        [factor](detail::Node<T>& self) {
                          auto g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
                        });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = x.cols();
  require(bias.numel() == c, "add_bias: bias length " + std::to_string(bias.numel()) +
                                 " does not match " + std::to_string(c) + " columns");
  const std::size_t r = x.rows();
  std::vector<T> out(x.numel());
  const auto& xd = x.node()->data;
  const auto& bd = bias.node()->data;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xd[i * c + j] + bd[j];
  }
  return make_result<T>(x.shape(), std::move(out), {x.node(), bias.node()}, "add_bias",
                        [r, c](detail::Node<T>& self) {
                          auto& nx = self.inputs[0];
                          auto& nb = self.inputs[1];
                          if (wants(nx)) {
                            auto g = nx->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (wants(nb)) {
                            auto g = nb->ensure_grad();
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>({1}, {total}, {x.node()}, "sum", [](detail::Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  const T n = static_cast<T>(x.numel());
  return make_result<T>({1}, {total / n}, {x.node()}, "mean", [n](detail::Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const auto& xd = x.node()->data;
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * T(std::numbers::sqrt2 / 2)));
  }
  return make_result<T>(x.shape(), std::move(out), {x.node()}, "gelu", [](detail::Node<T>& self) {
    auto& in = self.inputs[0];
    auto g = in->ensure_grad();
    const T inv_sqrt_2pi = T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = in->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t c = x.cols(), r = x.rows();
  require(c >= 1, "softmax_lastdim: empty last extent");
  const auto& xd = x.node()->data;
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * c;
    T* o = out.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= total;
  }
  return make_result<T>(x.shape(), out, {x.node()}, "softmax",
                        [r, c, y = out](detail::Node<T>& self) {
                          auto g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < r; ++i) {
                            T dot = 0;
                            for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * y[i * c + j];
                            for (std::size_t j = 0; j < c; ++j) {
                              g[i * c + j] += y[i * c + j] * (self.grad[i * c + j] - dot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.cols(), r = x.rows();
  require(d >= 1, "layer_norm: empty feature extent");
  require(gain.numel() == d && bias.numel() == d, "layer_norm: affine parameters must have length " +
                                                      std::to_string(d));
  const auto& xd = x.node()->data;
  const auto& gd = gain.node()->data;
  const auto& bd = bias.node()->data;
  std::vector<T> out(xd.size()), xhat(xd.size()), rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rstd[i];
      xhat[i * d + j] = h;
      out[i * d + j] = h * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()}, "layer_norm",
      [r, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        auto& nx = self.inputs[0];
        auto& ng = self.inputs[1];
        auto& nb = self.inputs[2];
        const auto& gy = self.grad;
        if (wants(ng)) {
          auto g = ng->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[i * d + j] * xhat[i * d + j];
        }
        if (wants(nb)) {
          auto g = nb->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[i * d + j];
        }
        if (wants(nx)) {
          auto g = nx->ensure_grad();
          std::vector<T> dxhat(d);
          for (std::size_t i = 0; i < r; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = gy[i * d + j] * ng->data[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[i * d + j];
            }
            mean_d /= static_cast<T>(d);
            mean_dx /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              g[i * d + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * d + j] * mean_dx);
            }
          }
        }
      });
}

namespace {

std::vector<std::size_t> resolve_segments(std::span<const std::size_t> segments, std::size_t rows,
                                          const char* op) {
  if (segments.empty()) return {rows};
  std::vector<std::size_t> out(segments.begin(), segments.end());
  if (std::accumulate(out.begin(), out.end(), std::size_t{0}) != rows) {
    throw DimensionError(std::string(op) + ": segment lengths do not cover the rows");
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> conv1d_causal(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                        std::span<const std::size_t> segments) {
  require_2d(x, "conv1d_causal");
  if (!kernel.defined() || kernel.rank() != 3) throw DimensionError("conv1d_causal: kernel must be 3-D");
  const std::size_t k = kernel.dim(0), cin = kernel.dim(1), cout = kernel.dim(2);
  require(k >= 1, "conv1d_causal: kernel size must be >= 1");
  require(x.dim(1) == cin, "conv1d_causal: input has " + std::to_string(x.dim(1)) +
                               " channels, kernel expects " + std::to_string(cin));
  require(bias.numel() == cout, "conv1d_causal: bias length mismatch");
  const std::size_t n = x.dim(0);
  auto segs = resolve_segments(segments, n, "conv1d_causal");

  std::vector<T> out(n * cout);
  auto y = as_mut<T>(out, n, cout);
  const auto& bd = bias.node()->data;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < cout; ++o) out[i * cout + o] = bd[o];
  const auto xm = as_mat(x.node()->data, n, cin);
  const T* wd = kernel.node()->data.data();
  const auto ci = static_cast<Eigen::Index>(cin), co = static_cast<Eigen::Index>(cout);
  std::size_t start = 0;
  for (std::size_t len : segs) {
    for (std::size_t tap = 0; tap < k; ++tap) {
      const std::size_t shift = k - 1 - tap;
      if (shift >= len) continue;
      const auto span_len = static_cast<Eigen::Index>(len - shift);
      ConstMatMap<T> w(wd + tap * cin * cout, ci, co);
      y.block(static_cast<Eigen::Index>(start + shift), 0, span_len, co).noalias() +=
          xm.block(static_cast<Eigen::Index>(start), 0, span_len, ci) * w;
    }
    start += len;
  }
  return make_result<T>(
      {n, cout}, std::move(out), {x.node(), kernel.node(), bias.node()}, "conv1d_causal",
      [n, k, cin, cout, segs](detail::Node<T>& self) {
        auto& nx = self.inputs[0];
        auto& nw = self.inputs[1];
        auto& nb = self.inputs[2];
        const auto gy = as_mat(self.grad, n, cout);
        const auto ci = static_cast<Eigen::Index>(cin), co = static_cast<Eigen::Index>(cout);
        if (wants(nb)) {
          auto g = nb->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < cout; ++o) g[o] += self.grad[i * cout + o];
        }
        std::size_t start = 0;
        for (std::size_t len : segs) {
          for (std::size_t tap = 0; tap < k; ++tap) {
            const std::size_t shift = k - 1 - tap;
            if (shift >= len) continue;
            const auto span_len = static_cast<Eigen::Index>(len - shift);
            const auto gblock = gy.block(static_cast<Eigen::Index>(start + shift), 0, span_len, co);
            if (wants(nx)) {
              ConstMatMap<T> w(nw->data.data() + tap * cin * cout, ci, co);
              as_mut(nx->ensure_grad(), n, cin)
                  .block(static_cast<Eigen::Index>(start), 0, span_len, ci)
                  .noalias() += gblock * w.transpose();
            }
            if (wants(nw)) {
              MatMap<T> gw(nw->ensure_grad().data() + tap * cin * cout, ci, co);
              gw.noalias() += as_mat(nx->data, n, cin)
                                  .block(static_cast<Eigen::Index>(start), 0, span_len, ci)
                                  .transpose() *
                              gblock;
            }
          }
          start += len;
        }
      });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids) {
  require_2d(table, "embedding_lookup");
  const std::size_t v = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding_lookup: no ids");
  std::vector<T> out(ids.size() * d);
  const auto& td = table.node()->data;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return make_result<T>({ids.size(), d}, std::move(out), {table.node()}, "embedding_lookup",
                        [d, ids = std::vector<std::size_t>(ids.begin(), ids.end())](detail::Node<T>& self) {
                          auto g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < ids.size(); ++r) {
                            for (std::size_t j = 0; j < d; ++j) g[ids[r] * d + j] += self.grad[r * d + j];
                          }
                        });
}

template <typename T>
Tensor<T> lerp_rows(const Tensor<T>& table, std::span<const double> positions) {
  require_2d(table, "lerp_rows");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  if (positions.empty()) throw DimensionError("lerp_rows: no positions");
  struct Tap {
    std::size_t lo, hi;
    T frac;
  };
  std::vector<Tap> taps;
  taps.reserve(positions.size());
  for (double p : positions) {
    if (!(p >= 0.0) || p > static_cast<double>(rows - 1)) {
      throw IndexError("lerp_rows: position outside table");
    }
    const auto lo = static_cast<std::size_t>(std::floor(p));
    taps.push_back({lo, std::min(lo + 1, rows - 1), static_cast<T>(p - static_cast<double>(lo))});
  }
  const auto& td = table.node()->data;
  std::vector<T> out(positions.size() * d);
  for (std::size_t r = 0; r < taps.size(); ++r) {
    const auto& t = taps[r];
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = (T(1) - t.frac) * td[t.lo * d + j] + t.frac * td[t.hi * d + j];
    }
  }
  return make_result<T>({positions.size(), d}, std::move(out), {table.node()}, "lerp_rows",
                        [d, taps = std::move(taps)](detail::Node<T>& self) {
                          auto g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < taps.size(); ++r) {
                            const auto& t = taps[r];
                            for (std::size_t j = 0; j < d; ++j) {
                              g[t.lo * d + j] += (T(1) - t.frac) * self.grad[r * d + j];
                              g[t.hi * d + j] += t.frac * self.grad[r * d + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& top, const Tensor<T>& bottom) {
  require_2d(top, "concat_rows");
  require_2d(bottom, "concat_rows");
  require(top.dim(1) == bottom.dim(1), "concat_rows: column counts differ");
  std::vector<T> out(top.data().begin(), top.data().end());
  out.insert(out.end(), bottom.data().begin(), bottom.data().end());
  const std::size_t split = top.numel();
  return make_result<T>({top.dim(0) + bottom.dim(0), top.dim(1)}, std::move(out),
                        {top.node(), bottom.node()}, "concat_rows", [split](detail::Node<T>& self) {
                          auto& a = self.inputs[0];
                          auto& b = self.inputs[1];
                          if (wants(a)) {
                            auto g = a->ensure_grad();
                            for (std::size_t i = 0; i < split; ++i) g[i] += self.grad[i];
                          }
                          if (wants(b)) {
                            auto g = b->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[split + i];
                          }
                        });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_2d(x, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  require(count >= 1 && begin + count <= c, "slice_cols: range outside tensor");
  std::vector<T> out(r * count);
  const auto& xd = x.node()->data;
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(i * c + begin), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  }
  return make_result<T>({r, count}, std::move(out), {x.node()}, "slice_cols",
                        [r, c, begin, count](detail::Node<T>& self) {
                          auto g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] += self.grad[i * count + j];
                        });
}

template <typename T>
Tensor<T> segment_mean_rows(const Tensor<T>& x, std::span<const std::size_t> counts) {
  require_2d(x, "segment_mean_rows");
  const std::size_t d = x.dim(1);
  auto segs = resolve_segments(counts, x.dim(0), "segment_mean_rows");
  std::vector<T> out(segs.size() * d, T{0});
  const auto& xd = x.node()->data;
  std::size_t row = 0;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    require(segs[s] >= 1, "segment_mean_rows: empty segment");
    for (std::size_t i = 0; i < segs[s]; ++i, ++row)
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += xd[row * d + j];
    for (std::size_t j = 0; j < d; ++j) out[s * d + j] /= static_cast<T>(segs[s]);
  }
  return make_result<T>({segs.size(), d}, std::move(out), {x.node()}, "segment_mean_rows",
                        [d, segs](detail::Node<T>& self) {
                          auto g = self.inputs[0]->ensure_grad();
                          std::size_t row = 0;
                          for (std::size_t s = 0; s < segs.size(); ++s) {
                            const T inv = T(1) / static_cast<T>(segs[s]);
                            for (std::size_t i = 0; i < segs[s]; ++i, ++row)
                              for (std::size_t j = 0; j < d; ++j) g[row * d + j] += self.grad[s * d + j] * inv;
                          }
                        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: rate must be < 1");
  const T keep_scale = T(1) / static_cast<T>(1.0 - p);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return make_result<T>(x.shape(), std::move(out), {x.node()}, "dropout",
                        [mask = std::move(mask)](detail::Node<T>& self) {
                          auto g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                        });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::size_t> segments, std::size_t n_heads,
                           const AttentionPrefix<T>* prefix) {
  require_2d(q, "causal_attention");
  require(q.shape() == k.shape() && q.shape() == v.shape(), "causal_attention: q, k, v shapes differ");
  const std::size_t n = q.dim(0), d = q.dim(1);
  require(n_heads >= 1 && d % n_heads == 0, "causal_attention: width not divisible by heads");
  auto segs = resolve_segments(segments, n, "causal_attention");
  if (prefix) {
    require(prefix->keys.size() == segs.size() && prefix->values.size() == segs.size(),
            "causal_attention: prefix count does not match segments");
  }
  const std::size_t hd = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  const auto D = static_cast<Eigen::Index>(d), HD = static_cast<Eigen::Index>(hd);

  // Per (segment, head): probabilities [len x (P + len)], stored for backward.
  struct Block {
    std::size_t start, len, plen;
    std::vector<T> keys, values;  // [(P + len) x d], prefix rows first
  };
  std::vector<Block> blocks;
  blocks.reserve(segs.size());
  std::vector<std::vector<T>> probs;
  probs.reserve(segs.size() * n_heads);
  std::vector<T> out(n * d, T{0});

  std::size_t start = 0;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const std::size_t len = segs[s];
    std::size_t plen = 0;
    const Tensor<T>* pk = nullptr;
    const Tensor<T>* pv = nullptr;
    if (prefix && prefix->keys[s].defined()) {
      pk = &prefix->keys[s];
      pv = &prefix->values[s];
      require(pk->rank() == 2 && pk->dim(1) == d && pv->shape() == pk->shape(),
              "causal_attention: prefix shape mismatch");
      plen = pk->dim(0);
    }
    Block blk{start, len, plen, {}, {}};
    const std::size_t total = plen + len;
    blk.keys.resize(total * d);
    blk.values.resize(total * d);
    if (plen) {
      std::copy(pk->data().begin(), pk->data().end(), blk.keys.begin());
      std::copy(pv->data().begin(), pv->data().end(), blk.values.begin());
    }
    std::copy_n(k.data().begin() + static_cast<std::ptrdiff_t>(start * d), len * d,
                blk.keys.begin() + static_cast<std::ptrdiff_t>(plen * d));
    std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(start * d), len * d,
                blk.values.begin() + static_cast<std::ptrdiff_t>(plen * d));

    const auto L = static_cast<Eigen::Index>(len), TOT = static_cast<Eigen::Index>(total);
    for (std::size_t h = 0; h < n_heads; ++h) {
      ConstStridedMap<T> qh(q.data().data() + start * d + h * hd, L, HD, Eigen::OuterStride<>(D));
      ConstStridedMap<T> kh(blk.keys.data() + h * hd, TOT, HD, Eigen::OuterStride<>(D));
      ConstStridedMap<T> vh(blk.values.data() + h * hd, TOT, HD, Eigen::OuterStride<>(D));
      std::vector<T> p(len * total);
      auto pm = as_mut<T>(p, len, total);
      pm.noalias() = qh * kh.transpose();
      for (std::size_t i = 0; i < len; ++i) {
        T* row = p.data() + i * total;
        const std::size_t visible = plen + i + 1;
        T mx = row[0] * inv_sqrt;
        for (std::size_t j = 0; j < visible; ++j) {
          row[j] *= inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < visible; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < visible; ++j) row[j] /= z;
        for (std::size_t j = visible; j < total; ++j) row[j] = T(0);
      }
      StridedMap<T> oh(out.data() + start * d + h * hd, L, HD, Eigen::OuterStride<>(D));
      oh.noalias() = pm * vh;
      probs.push_back(std::move(p));
    }
    blocks.push_back(std::move(blk));
    start += len;
  }

  return make_result<T>(
      {n, d}, std::move(out), {q.node(), k.node(), v.node()}, "causal_attention",
      [d, hd, n_heads, inv_sqrt, blocks = std::move(blocks),
       probs = std::move(probs)](detail::Node<T>& self) {
        auto& nq = self.inputs[0];
        auto& nk = self.inputs[1];
        auto& nv = self.inputs[2];
        const auto D = static_cast<Eigen::Index>(d), HD = static_cast<Eigen::Index>(hd);
        T* gq = wants(nq) ? nq->ensure_grad().data() : nullptr;
        T* gk = wants(nk) ? nk->ensure_grad().data() : nullptr;
        T* gv = wants(nv) ? nv->ensure_grad().data() : nullptr;
        for (std::size_t s = 0; s < blocks.size(); ++s) {
          const auto& blk = blocks[s];
          const std::size_t total = blk.plen + blk.len;
          const auto L = static_cast<Eigen::Index>(blk.len), TOT = static_cast<Eigen::Index>(total);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const auto& p = probs[s * n_heads + h];
            const auto pm = as_mat(p, blk.len, total);
            ConstStridedMap<T> go(self.grad.data() + blk.start * d + h * hd, L, HD, Eigen::OuterStride<>(D));
            ConstStridedMap<T> qh(nq->data.data() + blk.start * d + h * hd, L, HD, Eigen::OuterStride<>(D));
            ConstStridedMap<T> kh(blk.keys.data() + h * hd, TOT, HD, Eigen::OuterStride<>(D));
            ConstStridedMap<T> vh(blk.values.data() + h * hd, TOT, HD, Eigen::OuterStride<>(D));
            if (gv) {
              StridedMap<T> gvh(gv + blk.start * d + h * hd, L, HD, Eigen::OuterStride<>(D));
              gvh.noalias() += pm.rightCols(L).transpose() * go;
            }
            if (!gq && !gk) continue;
            RowMat<T> dp = go * vh.transpose();  // [len x total]
            for (Eigen::Index i = 0; i < L; ++i) {
              T dot = 0;
              for (Eigen::Index j = 0; j < TOT; ++j) dot += dp(i, j) * pm(i, j);
              for (Eigen::Index j = 0; j < TOT; ++j) dp(i, j) = pm(i, j) * (dp(i, j) - dot) * inv_sqrt;
            }
            if (gq) {
              StridedMap<T> gqh(gq + blk.start * d + h * hd, L, HD, Eigen::OuterStride<>(D));
              gqh.noalias() += dp * kh;
            }
            if (gk) {
              StridedMap<T> gkh(gk + blk.start * d + h * hd, L, HD, Eigen::OuterStride<>(D));
              gkh.noalias() += dp.rightCols(L).transpose() * qh;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  require_2d(logits, "cross_entropy");
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  require(targets.size() == r, "cross_entropy: one target per row required");
  const auto& ld = logits.node()->data;
  std::vector<T> soft(r * c);
  T total = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] >= c) throw IndexError("cross_entropy: target outside vocabulary");
    const T* row = ld.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      soft[i * c + j] = std::exp(row[j] - mx);
      z += soft[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) soft[i * c + j] /= z;
    total += (mx + std::log(z)) - row[targets[i]];
  }
  const T n = static_cast<T>(r);
  return make_result<T>(
      {1}, {total / n}, {logits.node()}, "cross_entropy",
      [c, n, soft = std::move(soft),
       tg = std::vector<std::size_t>(targets.begin(), targets.end())](detail::Node<T>& self) {
        auto g = self.inputs[0]->ensure_grad();
        const T up = self.grad[0] / n;
        for (std::size_t i = 0; i < tg.size(); ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            g[i * c + j] += up * (soft[i * c + j] - (j == tg[i] ? T(1) : T(0)));
          }
        }
      });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  require(logits.shape() == targets.shape(), "bce_with_logits: logits and targets differ in shape");
  const auto& z = logits.node()->data;
  const auto& t = targets.node()->data;
  T total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    total += std::max(z[i], T(0)) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  const T n = static_cast<T>(z.size());
  return make_result<T>({1}, {total / n}, {logits.node(), targets.node()}, "bce_with_logits",
                        [n](detail::Node<T>& self) {
                          auto& nz = self.inputs[0];
                          const auto& t = self.inputs[1]->data;
                          if (!wants(nz)) return;
                          auto g = nz->ensure_grad();
                          const T up = self.grad[0] / n;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T s = T(1) / (T(1) + std::exp(-nz->data[i]));
                            g[i] += up * (s - t[i]);
                          }
                        });
}

// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }
  auto root = loss.node();
  if (!root->requires_grad) throw ContractError("backward: loss is not connected to any parameter");

  // Iterative post-order DFS; input order fixes the traversal, so repeated
  // graphs are processed identically.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && !child->inputs.empty() && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
FiniteDiffResult<T> finite_diff_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f, std::vector<Tensor<T>> point,
    double eps, double floor) {
  for (auto& p : point) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  backward(f(point));
  std::vector<std::vector<T>> analytic;
  for (auto& p : point) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), T{0});
    }
  }

  FiniteDiffResult<T> result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < point.size(); ++i) {
    auto values = point[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const T saved = values[j];
      values[j] = static_cast<T>(saved + eps);
      const double up = static_cast<double>(f(point).item());
      values[j] = static_cast<T>(saved - eps);
      const double down = static_cast<double>(f(point).item());
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double exact = static_cast<double>(analytic[i][j]);
      const double denom = std::max({std::abs(exact), std::abs(numeric), floor});
      const double err = std::abs(exact - numeric) / denom;
      if (err > result.max_rel_error || (i == 0 && j == 0)) {
        result = {err, i, j, exact, numeric};
      }
    }
  }
  return result;
}

#define SCOREGRADE_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> conv1d_causal(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                   std::span<const std::size_t>);                                  \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> lerp_rows(const Tensor<T>&, std::span<const double>);                         \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> segment_mean_rows(const Tensor<T>&, std::span<const std::size_t>);            \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                      \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                      std::span<const std::size_t>, std::size_t,                   \
                                      const AttentionPrefix<T>*);                                  \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);                \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);                          \
  template void backward(const Tensor<T>&);                                                        \
  template FiniteDiffResult<T> finite_diff_check(                                                  \
      const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>&, std::vector<Tensor<T>>,      \
      double, double);

SCOREGRADE_INSTANTIATE(float)
SCOREGRADE_INSTANTIATE(double)

#undef SCOREGRADE_INSTANTIATE

}  // namespace scoregrade
