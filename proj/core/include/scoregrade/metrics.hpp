#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace scoregrade {

// Classification metrics are macro averages: each class present in `truths`
// contributes its own mean and classes are weighted equally. Class indices are
// 0-based and must lie below K.

/// Share of pieces predicted within n levels of the truth.
double acc_within_n(std::span<const std::size_t> preds, std::span<const std::size_t> truths, std::size_t num_classes,
                    std::size_t n);

/// Mean squared class-index error.
double macro_mse(std::span<const std::size_t> preds, std::span<const std::size_t> truths, std::size_t num_classes);

/// Average imbalance ratio: mean over present classes of count / majority count.
double air(std::span<const std::size_t> labels, std::size_t num_classes);

/// confusion[t][p] counts pieces of true class t predicted as p.
std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> preds,
                                                       std::span<const std::size_t> truths,
                                                       std::size_t num_classes);

/// Concordant minus discordant pairs; pairs tied in either variable count as
/// neither. O(n log n).
std::int64_t concordance_balance(std::span<const double> scores, std::span<const std::size_t> classes);

/// Stuart's tau-c, 2m(P-Q) / (n^2 (m-1)) with m the number of distinct classes.
/// Throws UndefinedCorrelationError when m < 2.
double kendall_tau_c(std::span<const double> scores, std::span<const std::size_t> classes);

struct PcaResult {
  std::vector<double> scores;     // projection of each centered row
  std::vector<double> component;  // unit norm
  std::vector<double> mean;
  double eigenvalue = 0.0;  // variance along the component (divisor n)
  std::size_t iterations = 0;
  bool converged = false;
};

/// First principal component by power iteration on the covariance, started
/// from the largest-norm centered row. The sign is fixed so the component's
/// largest-magnitude entry is positive. Throws DegenerateDataError on zero
/// variance.
PcaResult pca_first_component(const std::vector<std::vector<double>>& rows, double tolerance = 1e-9,
                              std::size_t max_iterations = 1000);

struct FoldStat {
  double mean = 0.0;
  double std = 0.0;  // population formula
};

FoldStat summarize(std::span<const double> values);

}  // namespace scoregrade
