#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scoregrade/dataset.hpp"
#include "scoregrade/model.hpp"
#include "scoregrade/optim.hpp"

namespace scoregrade {

// ---------------------------------------------------------------------------
// Cross-validation

inline constexpr std::size_t kDefaultFolds = 5;

struct CvSplit {
  std::size_t fold_index = 0;
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  friend bool operator==(const CvSplit&, const CvSplit&) = default;
};

/// Stratified folds: each class is shuffled and dealt over the strata with an
/// offset carried from class to class. Fold i tests on stratum i, validates on
/// stratum (i+1) mod folds and trains on the rest.
std::vector<CvSplit> make_cv_splits(const DatasetManifest& manifest, std::uint64_t seed,
                                    std::size_t folds = kDefaultFolds);

nlohmann::json split_to_json(const CvSplit& split);
CvSplit split_from_json(const nlohmann::json& j);
void save_split(const CvSplit& split, const std::filesystem::path& path);
CvSplit load_split(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Sampling

enum class SamplerMode { kBalanced, kNatural };

std::string_view to_string(SamplerMode mode);
SamplerMode parse_sampler_mode(std::string_view name);

/// One epoch of ceil(N / batch_size) batches of indices into `labels`. The
/// final batch may be short. Balanced mode draws a class uniformly among the
/// classes present, then a piece of that class uniformly (with replacement);
/// natural mode walks a fresh permutation.
std::vector<std::vector<std::size_t>> sample_epoch(std::span<const std::size_t> labels, std::size_t batch_size,
                                                   SamplerMode mode, Rng& rng);

// ---------------------------------------------------------------------------
// Early stopping

struct EarlyStopState {
  double best_acc0 = -std::numeric_limits<double>::infinity();
  double best_mse = std::numeric_limits<double>::infinity();
  std::optional<std::size_t> best_epoch;
  std::size_t epochs_without_improvement = 0;
  std::size_t patience = 10;
};

struct EarlyStopDecision {
  bool improved = false;
  bool stop = false;
};

/// Improvement: Acc0 strictly up, or Acc0 equal and MSE strictly down.
EarlyStopDecision early_stop_update(EarlyStopState& state, double val_acc0, double val_mse, std::size_t epoch);

// ---------------------------------------------------------------------------
// Pretraining

/// Non-overlapping windows of at most context_len positions per piece; a
/// trailing window shorter than two positions is dropped. Windows never span
/// two pieces.
std::vector<LmWindow> make_lm_windows(std::span<const BootlegScore> corpus, EncoderKind encoder,
                                      std::size_t context_len);

struct PretrainOptions {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double learning_rate = 3e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  /// Called after every step with (step, loss).
  std::function<void(std::size_t, double)> on_step;
};

struct PretrainResult {
  std::vector<double> loss_curve;  // loss of each step's batch before its update
  std::size_t windows = 0;
  std::size_t epochs = 0;
};

/// Next-step training of encoder, positions, body and LM head. Windows are
/// reshuffled at each pass over the corpus.
template <typename T>
PretrainResult pretrain(GptModel<T>& model, std::span<const BootlegScore> corpus, const PretrainOptions& options);

// ---------------------------------------------------------------------------
// Fine-tuning

struct LabeledSet {
  std::vector<BootlegScore> scores;
  std::vector<std::size_t> labels;
};

/// Subset of a manifest's pieces by id, in the order given.
LabeledSet select_pieces(const DatasetManifest& manifest, std::span<const BootlegScore> scores,
                         std::span<const std::string> ids);

struct FinetuneTask {
  std::string dataset_id;
  std::size_t num_classes = 0;
  LabeledSet train;
  LabeledSet validation;
};

enum class FinetuneMode { kSingle, kMulti };

struct FinetuneOptions {
  FinetuneMode mode = FinetuneMode::kSingle;
  SamplerMode sampler = SamplerMode::kBalanced;
  std::size_t batch_size = 64;
  double learning_rate = 1e-5;
  double weight_decay = 1e-4;
  double clip_norm = 1e-4;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  /// Frozen-body states above this size are recomputed per batch instead of cached.
  std::size_t context_budget_bytes = std::size_t{1} << 30;
  /// Called with the task index once a batch's gradients are final, just
  /// before the optimizer step.
  std::function<void(std::size_t)> on_gradients;
};

struct HistoryRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "validation"
  std::string dataset_id;
  double loss = 0.0;
  double acc0 = 0.0;
  double acc1 = 0.0;
  double mse = 0.0;
};

nlohmann::json history_to_json(const HistoryRecord& record);

struct FinetuneResult {
  std::vector<HistoryRecord> history;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double best_acc0 = 0.0;
  double best_mse = 0.0;
};

/// Trains the classification tail (token, projection, heads) with the body
/// frozen. Every task needs a registered head. Multi mode cycles through the
/// tasks one batch each; each head only moves on its own batches. Early
/// stopping uses the macro average of validation Acc0/MSE over tasks, and the
/// best epoch's tail is restored before returning.
template <typename T>
FinetuneResult finetune(GptModel<T>& model, const std::vector<FinetuneTask>& tasks, const FinetuneOptions& options,
                        const std::function<void(const HistoryRecord&)>& on_record = {});

struct Predictions {
  std::vector<std::size_t> classes;
  std::vector<std::vector<double>> logits;
  std::vector<std::vector<double>> embeddings;
  std::size_t truncated = 0;
};

/// Decoded classes, logits and embeddings through one head, computed with the
/// frozen-body cache path.
template <typename T>
Predictions predict(const GptModel<T>& model, std::span<const BootlegScore> scores, std::string_view dataset_id,
                    std::size_t batch_size = 64);

}  // namespace scoregrade
