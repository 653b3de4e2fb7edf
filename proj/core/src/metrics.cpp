#include "scoregrade/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "scoregrade/error.hpp"

namespace scoregrade {

namespace {

void check_pairs(std::span<const std::size_t> preds, std::span<const std::size_t> truths, std::size_t k) {
  if (preds.size() != truths.size()) {
    throw DimensionError("metric inputs differ in length: " + std::to_string(preds.size()) + " predictions, " +
                         std::to_string(truths.size()) + " truths");
  }
  if (truths.empty()) throw ContractError("metric over an empty set");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= k || truths[i] >= k) throw ValidationError("class index outside [0, K)");
  }
}

// Per-class mean of f(pred, truth) averaged over classes present.
template <typename F>
double macro_average(std::span<const std::size_t> preds, std::span<const std::size_t> truths, std::size_t k, F f) {
  std::vector<double> total(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    total[truths[i]] += f(preds[i], truths[i]);
    ++count[truths[i]];
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c] == 0) continue;
    sum += total[c] / static_cast<double>(count[c]);
    ++present;
  }
  return sum / static_cast<double>(present);
}

std::size_t abs_diff(std::size_t a, std::size_t b) { return a > b ? a - b : b - a; }

// Pairs tied within runs of equal keys.
template <typename It, typename Eq>
std::int64_t tied_pairs(It first, It last, Eq eq) {
  std::int64_t ties = 0;
  while (first != last) {
    auto run = first + 1;
    while (run != last && eq(*first, *run)) ++run;
    const auto len = static_cast<std::int64_t>(run - first);
    ties += len * (len - 1) / 2;
    first = run;
  }
  return ties;
}

// Merge sort counting inversions of strictly greater earlier elements.
std::int64_t count_inversions(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t inv = count_inversions(v, buf, lo, mid) + count_inversions(v, buf, mid, hi);
  std::size_t i = lo, j = mid, o = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      inv += static_cast<std::int64_t>(mid - i);
      buf[o++] = v[j++];
    } else {
      buf[o++] = v[i++];
    }
  }
  while (i < mid) buf[o++] = v[i++];
  while (j < hi) buf[o++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return inv;
}

}  // namespace

double acc_within_n(std::span<const std::size_t> preds, std::span<const std::size_t> truths, std::size_t k,
                    std::size_t n) {
  check_pairs(preds, truths, k);
  return macro_average(preds, truths, k, [n](std::size_t p, std::size_t t) { return abs_diff(p, t) <= n ? 1.0 : 0.0; });
}

double macro_mse(std::span<const std::size_t> preds, std::span<const std::size_t> truths, std::size_t k) {
  check_pairs(preds, truths, k);
  return macro_average(preds, truths, k, [](std::size_t p, std::size_t t) {
    const auto d = static_cast<double>(abs_diff(p, t));
    return d * d;
  });
}

double air(std::span<const std::size_t> labels, std::size_t k) {
  if (labels.empty()) throw ContractError("air of an empty label set");
  std::vector<std::size_t> count(k, 0);
  for (auto c : labels) {
    if (c >= k) throw ValidationError("class index outside [0, K)");
    ++count[c];
  }
  const auto majority = static_cast<double>(*std::max_element(count.begin(), count.end()));
  double sum = 0.0;
  std::size_t present = 0;
  for (auto c : count) {
    if (c == 0) continue;
    sum += static_cast<double>(c) / majority;
    ++present;
  }
  return sum / static_cast<double>(present);
}

std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> preds,
                                                       std::span<const std::size_t> truths, std::size_t k) {
  check_pairs(preds, truths, k);
  std::vector<std::vector<std::size_t>> m(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) ++m[truths[i]][preds[i]];
  return m;
}

std::int64_t concordance_balance(std::span<const double> scores, std::span<const std::size_t> classes) {
  if (scores.size() != classes.size()) throw DimensionError("tau: scores and classes differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return classes[a] != classes[b] ? classes[a] < classes[b] : scores[a] < scores[b];
  });
  const auto same_class = [&](std::size_t a, std::size_t b) { return classes[a] == classes[b]; };
  const auto joint = [&](std::size_t a, std::size_t b) { return classes[a] == classes[b] && scores[a] == scores[b]; };
  const std::int64_t ties_x = tied_pairs(order.begin(), order.end(), same_class);
  const std::int64_t ties_xy = tied_pairs(order.begin(), order.end(), joint);

  std::vector<double> y(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = scores[order[i]];
  const std::int64_t discordant = count_inversions(y, buf, 0, n);  // y is now sorted
  const std::int64_t ties_y = tied_pairs(y.begin(), y.end(), [](double a, double b) { return a == b; });

  const auto total = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n - (n > 0 ? 1 : 0)) / 2;
  const std::int64_t untied = total - ties_x - ties_y + ties_xy;
  return untied - 2 * discordant;
}

double kendall_tau_c(std::span<const double> scores, std::span<const std::size_t> classes) {
  if (scores.size() != classes.size()) throw DimensionError("tau: scores and classes differ in length");
  std::vector<std::size_t> distinct(classes.begin(), classes.end());
  std::sort(distinct.begin(), distinct.end());
  const auto m = static_cast<double>(std::unique(distinct.begin(), distinct.end()) - distinct.begin());
  if (m < 2) throw UndefinedCorrelationError("tau-c needs at least two distinct classes");
  const auto n = static_cast<double>(scores.size());
  const auto balance = static_cast<double>(concordance_balance(scores, classes));
  return 2.0 * m * balance / (n * n * (m - 1.0));
}

PcaResult pca_first_component(const std::vector<std::vector<double>>& rows, double tolerance,
                              std::size_t max_iterations) {
  const std::size_t n = rows.size();
  if (n < 2) throw DegenerateDataError("pca needs at least two rows");
  const std::size_t d = rows.front().size();
  if (d == 0) throw DegenerateDataError("pca over zero-dimensional rows");
  for (const auto& r : rows) {
    if (r.size() != d) throw DimensionError("pca rows differ in length");
  }

  PcaResult out;
  out.mean.assign(d, 0.0);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += r[j];
  }
  for (auto& m : out.mean) m /= static_cast<double>(n);

  std::vector<double> centered(n * d);
  std::size_t start = 0;
  double start_norm = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = rows[i][j] - out.mean[j];
      centered[i * d + j] = c;
      norm += c * c;
    }
    if (norm > start_norm) {
      start_norm = norm;
      start = i;
    }
  }
  if (start_norm <= 0.0) throw DegenerateDataError("pca over zero-variance data");

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = &centered[i * d];
    for (std::size_t a = 0; a < d; ++a) {
      if (r[a] == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += r[a] * r[b];
    }
  }
  for (auto& c : cov) c /= static_cast<double>(n);

  std::vector<double> v(centered.begin() + static_cast<std::ptrdiff_t>(start * d),
                        centered.begin() + static_cast<std::ptrdiff_t>(start * d + d));
  const double inv = 1.0 / std::sqrt(start_norm);
  for (auto& x : v) x *= inv;
  std::vector<double> w(d);
  for (out.iterations = 0; out.iterations < max_iterations;) {
    ++out.iterations;
    double norm = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
      w[a] = s;
      norm += s * s;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) throw DegenerateDataError("pca start vector lies in the null space");
    double delta = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      w[a] /= norm;
      delta += (w[a] - v[a]) * (w[a] - v[a]);
    }
    v.swap(w);
    out.eigenvalue = norm;
    if (std::sqrt(delta) < tolerance) {
      out.converged = true;
      break;
    }
  }

  std::size_t big = 0;
  for (std::size_t a = 1; a < d; ++a) {
    if (std::abs(v[a]) > std::abs(v[big])) big = a;
  }
  if (v[big] < 0) {
    for (auto& x : v) x = -x;
  }
  out.component = v;
  out.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t a = 0; a < d; ++a) s += centered[i * d + a] * v[a];
    out.scores[i] = s;
  }
  return out;
}

FoldStat summarize(std::span<const double> values) {
  FoldStat s;
  if (values.empty()) return s;
  const auto n = static_cast<double>(values.size());
  for (double v : values) s.mean += v;
  s.mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / n);
  return s;
}

}  // namespace scoregrade
