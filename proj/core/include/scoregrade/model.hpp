#pragma once

// Decoder-only transformer over bootleg scores.
//
// Three input encoders share one pre-norm GPT body:
//   EMB  each column becomes 8 byte tokens looked up in a 256-row table (L = 8w)
//   FC   each 62-dim multi-hot column is projected by a linear layer (L = w)
//   CNN  columns pass through a causal 1-D convolution (L = w)
//
// Pretraining predicts the next token (EMB, softmax over 256) or the next
// column (FC/CNN, 62 independent sigmoids). For classification a learnable
// token is appended after the last column; its final state goes through a
// projection layer (linear + GELU) whose output is the piece embedding, and
// one ordinal head per dataset maps the embedding to K-1 cumulative logits.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scoregrade/bootleg.hpp"
#include "scoregrade/random.hpp"
#include "scoregrade/tensor.hpp"

namespace scoregrade {

enum class EncoderKind { kEmb, kFc, kCnn };
enum class LongInputPolicy { kInterpolate, kTruncate, kChunkMean };

std::string_view to_string(EncoderKind kind);
std::string_view to_string(LongInputPolicy policy);
EncoderKind parse_encoder_kind(std::string_view name);
LongInputPolicy parse_long_input_policy(std::string_view name);

struct GptConfig {
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  /// Learned positions; also the pretraining window length.
  std::size_t context_len = 64;
  EncoderKind encoder = EncoderKind::kFc;
  std::size_t cnn_kernel = 5;
  double dropout = 0.1;
  std::size_t max_finetune_len = 2048;
  LongInputPolicy long_input_policy = LongInputPolicy::kInterpolate;

  /// d_model 128, 4 layers, 4 heads, 64 positions.
  static GptConfig desk(EncoderKind encoder);
  /// d_model 768, 12 layers, 12 heads, 256 positions.
  static GptConfig paper(EncoderKind encoder);

  void validate() const;
  [[nodiscard]] std::size_t lm_vocabulary() const {
    return encoder == EncoderKind::kEmb ? kByteVocabulary : kStaffPositions;
  }

  friend bool operator==(const GptConfig&, const GptConfig&) = default;
};

struct HeadSpec {
  std::string dataset_id;
  std::size_t num_classes = 0;

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct TransformerBlock {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> w_qkv, b_qkv;
  Tensor<T> w_out, b_out;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> w_fc, b_fc;
  Tensor<T> w_proj, b_proj;
};

template <typename T>
struct OrdinalHead {
  Tensor<T> weight;  // [d_model x (K-1)]
  Tensor<T> bias;    // [K-1]
  std::size_t num_classes = 0;
};

enum class TrainableSet {
  kNone,
  /// Encoder, positions, body and LM head.
  kPretrain,
  /// Classification token, projection layer and heads.
  kTail,
  kAll,
};

template <typename T>
class GptModel {
 public:
  GptModel(GptConfig config, std::vector<HeadSpec> heads, std::uint64_t seed);

  // Tensors are shared handles, so a member-wise copy would alias storage.
  GptModel(const GptModel&) = delete;
  GptModel& operator=(const GptModel&) = delete;
  GptModel(GptModel&&) noexcept = default;
  GptModel& operator=(GptModel&&) noexcept = default;

  /// Deep copy.
  [[nodiscard]] GptModel clone() const;

  [[nodiscard]] const GptConfig& config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<HeadSpec>& head_specs() const noexcept { return head_specs_; }

  /// Every parameter in registration order; names are unique.
  [[nodiscard]] const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }
  [[nodiscard]] Tensor<T> parameter(std::string_view name) const;
  [[nodiscard]] bool has_parameter(std::string_view name) const;

  [[nodiscard]] bool has_head(std::string_view dataset_id) const;
  [[nodiscard]] const OrdinalHead<T>& head(std::string_view dataset_id) const;
  /// Registers a freshly initialized head. Throws on duplicates or K < 2.
  void add_head(const HeadSpec& spec, std::uint64_t seed);

  void set_trainable(TrainableSet set);
  [[nodiscard]] std::vector<Tensor<T>> pretrain_parameters() const;
  /// Classification token and projection layer.
  [[nodiscard]] std::vector<Tensor<T>> tail_shared_parameters() const;
  [[nodiscard]] std::vector<Tensor<T>> head_parameters(std::string_view dataset_id) const;
  [[nodiscard]] std::size_t parameter_count() const;

  // Encoder (only the tensors of the configured kind are defined).
  Tensor<T> token_embedding;  // EMB [256 x d]
  Tensor<T> fc_weight;        // FC  [62 x d]
  Tensor<T> fc_bias;
  Tensor<T> cnn_kernel;  // CNN [k x 62 x d]
  Tensor<T> cnn_bias;
  Tensor<T> position_embedding;  // [context_len x d]
  std::vector<TransformerBlock<T>> blocks;
  Tensor<T> lnf_gain, lnf_bias;
  Tensor<T> lm_weight, lm_bias;  // [d x V]
  Tensor<T> cls_token;           // [1 x d]
  Tensor<T> proj_weight, proj_bias;

 private:
  Tensor<T> register_param(std::string name, Shape shape, Rng* rng, T fill = T(0));

  GptConfig config_;
  std::vector<HeadSpec> head_specs_;
  std::vector<NamedTensor<T>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::map<std::string, OrdinalHead<T>, std::less<>> heads_;
};

/// Validates head specs (unique ids, K >= 2) and initializes all parameters:
/// weights ~ N(0, 0.02), biases zero, norm gains one.
template <typename T>
GptModel<T> build_model(const GptConfig& config, const std::vector<HeadSpec>& heads, std::uint64_t seed);

/// Copy of a model in another precision.
template <typename To, typename From>
GptModel<To> convert_model(const GptModel<From>& model);

/// Copies parameter values between two models with identical layout.
template <typename T>
void copy_parameters(const GptModel<T>& from, GptModel<T>& to);

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;  // dropout source, required when train and dropout > 0
};

/// Encoder output plus positions for a whole score: [8w x d] for EMB,
/// [w x d] for FC/CNN. An empty score is rejected.
template <typename T>
Tensor<T> encode_input(const GptModel<T>& model, const BootlegScore& score);

/// Number of encoder positions a score occupies (8w or w).
std::size_t encoded_length(EncoderKind encoder, std::size_t w);

/// One pretraining window: byte tokens for EMB, columns for FC/CNN.
struct LmWindow {
  std::vector<std::uint8_t> tokens;
  std::vector<BootlegColumn> columns;

  [[nodiscard]] std::size_t length(EncoderKind encoder) const {
    return encoder == EncoderKind::kEmb ? tokens.size() : columns.size();
  }
};

/// Next-step logits for every position of every window, rows stacked.
template <typename T>
Tensor<T> lm_logits(const GptModel<T>& model, const std::vector<LmWindow>& windows,
                    const ForwardOptions& options = {});

/// Mean next-step loss: NLL over 256 byte classes for EMB, BCE over 62 bits
/// for FC/CNN. Windows longer than context_len are rejected.
template <typename T>
Tensor<T> forward_lm(const GptModel<T>& model, const std::vector<LmWindow>& windows,
                     const ForwardOptions& options = {});

template <typename T>
struct ClassifyOutput {
  Tensor<T> logits;     // [B x (K-1)]
  Tensor<T> embedding;  // [B x d]
  bool truncated = false;
};

/// Full-graph classification of one piece through the given head.
template <typename T>
ClassifyOutput<T> forward_classify(const GptModel<T>& model, const BootlegScore& score,
                                   std::string_view dataset_id);

/// Frozen-body state of one piece: for each chunk, the per-layer keys and
/// values of its columns and the positional row the classification token
/// takes. Valid as long as the encoder, positions and body do not change.
template <typename T>
struct PieceContext {
  struct Chunk {
    Tensor<T> cls_position;         // [1 x d]
    std::vector<Tensor<T>> keys;    // per layer, [P x d]; undefined when P == 0
    std::vector<Tensor<T>> values;  // per layer
  };
  std::vector<Chunk> chunks;
  bool truncated = false;

  [[nodiscard]] std::size_t bytes() const;
};

template <typename T>
PieceContext<T> prepare_context(const GptModel<T>& model, const BootlegScore& score);

/// Classification tail over a batch of prepared pieces. Equivalent to
/// forward_classify up to floating-point summation order.
template <typename T>
ClassifyOutput<T> forward_tail(const GptModel<T>& model,
                               const std::vector<const PieceContext<T>*>& pieces,
                               std::string_view dataset_id);

}  // namespace scoregrade
