#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scoregrade/metrics.hpp"
#include "scoregrade/model.hpp"

namespace scoregrade {

struct PiecePrediction {
  std::string piece_id;
  std::size_t truth = 0;
  std::size_t predicted = 0;
  double score = 0.0;  // expected class index, or the ranking score
};

struct FoldMetrics {
  std::size_t fold = 0;
  std::size_t pieces = 0;
  double acc0 = 0.0;
  double acc1 = 0.0;
  double mse = 0.0;
  std::optional<double> tau_c;  // absent when the fold holds a single class
};

struct FoldResult {
  FoldMetrics metrics;
  std::vector<PiecePrediction> predictions;
  std::vector<std::vector<std::size_t>> confusion;
};

struct DatasetSummary {
  std::string dataset_id;
  std::size_t num_classes = 0;
  double air = 0.0;
  std::vector<FoldMetrics> folds;
  FoldStat acc0, acc1, mse;
  std::optional<FoldStat> tau_c;
  std::vector<PiecePrediction> predictions;
};

/// One configuration (e.g. an encoder or training mode) over one or more datasets.
struct EvalReport {
  std::string label;
  std::vector<DatasetSummary> datasets;
};

/// Metrics of one fold from decoded predictions and optional continuous scores.
FoldResult evaluate_predictions(std::span<const std::size_t> preds, std::span<const std::size_t> truths,
                                std::size_t num_classes, std::span<const double> scores = {},
                                std::span<const std::string> piece_ids = {}, std::size_t fold = 0);

/// Decodes every piece through the dataset's head and scores the fold.
template <typename T>
FoldResult evaluate_model(const GptModel<T>& model, std::span<const BootlegScore> scores,
                          std::span<const std::size_t> labels, std::string_view dataset_id, std::size_t fold = 0);

/// Mean and population std of each metric across folds.
DatasetSummary summarize_folds(std::string dataset_id, std::size_t num_classes, double air,
                               std::vector<FoldResult> folds);

struct RankResult {
  double tau_c = 0.0;
  std::vector<double> scores;
  std::vector<double> component;
  /// True when the raw principal direction was negated to agree with the
  /// model's own predictions.
  bool flipped = false;
  std::size_t pca_iterations = 0;
};

/// Orients PCA scores so they do not anti-correlate with `self_predictions`
/// (falling back to `self_scores` when the class ranking is tied) and
/// correlates the result with `truths`.
RankResult rank_embeddings(const std::vector<std::vector<double>>& embeddings,
                           std::span<const std::size_t> self_predictions, std::span<const double> self_scores,
                           std::span<const std::size_t> truths);

/// Zero-shot ranking: projection-layer embeddings of every piece, reduced to
/// one dimension by PCA, oriented by the model's own decoded predictions from
/// `head_id`, then tau-c against the ground truth.
template <typename T>
RankResult zero_shot_rank(const GptModel<T>& model, std::span<const BootlegScore> scores,
                          std::span<const std::size_t> labels, std::string_view head_id);

nlohmann::json to_json(const FoldMetrics& m);
nlohmann::json to_json(const DatasetSummary& s);
nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const RankResult& r);
EvalReport report_from_json(const nlohmann::json& j);

}  // namespace scoregrade
