#include "scoregrade/model.hpp"

#include <algorithm>
#include <numeric>
#include <type_traits>

#include "scoregrade/error.hpp"

namespace scoregrade {

std::string_view to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::kEmb: return "emb";
    case EncoderKind::kFc: return "fc";
    case EncoderKind::kCnn: return "cnn";
  }
  return "?";
}

std::string_view to_string(LongInputPolicy policy) {
  switch (policy) {
    case LongInputPolicy::kInterpolate: return "interpolate";
    case LongInputPolicy::kTruncate: return "truncate";
    case LongInputPolicy::kChunkMean: return "chunk_mean";
  }
  return "?";
}

EncoderKind parse_encoder_kind(std::string_view name) {
  if (name == "emb" || name == "EMB") return EncoderKind::kEmb;
  if (name == "fc" || name == "FC") return EncoderKind::kFc;
  if (name == "cnn" || name == "CNN") return EncoderKind::kCnn;
  throw ValidationError("unknown encoder kind '" + std::string(name) + "'");
}

LongInputPolicy parse_long_input_policy(std::string_view name) {
  if (name == "interpolate") return LongInputPolicy::kInterpolate;
  if (name == "truncate") return LongInputPolicy::kTruncate;
  if (name == "chunk_mean") return LongInputPolicy::kChunkMean;
  throw ValidationError("unknown long-input policy '" + std::string(name) + "'");
}

GptConfig GptConfig::desk(EncoderKind encoder) {
  GptConfig c;
  c.encoder = encoder;
  return c;
}

GptConfig GptConfig::paper(EncoderKind encoder) {
  GptConfig c;
  c.d_model = 768;
  c.n_layers = 12;
  c.n_heads = 12;
  c.context_len = 256;
  c.encoder = encoder;
  return c;
}

void GptConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ContractError("d_model must be a positive multiple of n_heads");
  }
  if (n_layers == 0) throw ContractError("n_layers must be >= 1");
  if (context_len < 2) throw ContractError("context_len must be >= 2");
  if (cnn_kernel < 1) throw ContractError("cnn_kernel must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must be in [0, 1)");
  if (max_finetune_len < 2) throw ContractError("max_finetune_len must be >= 2");
}

std::size_t encoded_length(EncoderKind encoder, std::size_t w) {
  return encoder == EncoderKind::kEmb ? w * kBytesPerColumn : w;
}

// ---------------------------------------------------------------------------
// GptModel

namespace {

constexpr double kInitStd = 0.02;

std::string block_name(std::size_t i, const char* leaf) {
  return "blocks." + std::to_string(i) + "." + leaf;
}

}  // namespace

template <typename T>
Tensor<T> GptModel<T>::register_param(std::string name, Shape shape, Rng* rng, T fill) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name " + name);
  Tensor<T> t(std::move(shape), true);
  auto values = t.mutable_data();
  if (rng) {
    for (auto& v : values) v = static_cast<T>(kInitStd * rng->normal());
  } else {
    std::fill(values.begin(), values.end(), fill);
  }
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), t});
  return t;
}

template <typename T>
GptModel<T>::GptModel(GptConfig config, std::vector<HeadSpec> heads, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  switch (config_.encoder) {
    case EncoderKind::kEmb:
      token_embedding = register_param("encoder.token_embedding", {kByteVocabulary, d}, &rng);
      break;
    case EncoderKind::kFc:
      fc_weight = register_param("encoder.fc.weight", {kStaffPositions, d}, &rng);
      fc_bias = register_param("encoder.fc.bias", {d}, nullptr);
      break;
    case EncoderKind::kCnn:
      cnn_kernel = register_param("encoder.cnn.kernel", {config_.cnn_kernel, kStaffPositions, d}, &rng);
      cnn_bias = register_param("encoder.cnn.bias", {d}, nullptr);
      break;
  }
  position_embedding = register_param("position_embedding", {config_.context_len, d}, &rng);
  blocks.resize(config_.n_layers);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    auto& b = blocks[i];
    b.ln1_gain = register_param(block_name(i, "ln1.gain"), {d}, nullptr, T(1));
    b.ln1_bias = register_param(block_name(i, "ln1.bias"), {d}, nullptr);
    b.w_qkv = register_param(block_name(i, "attn.qkv.weight"), {d, 3 * d}, &rng);
    b.b_qkv = register_param(block_name(i, "attn.qkv.bias"), {3 * d}, nullptr);
    b.w_out = register_param(block_name(i, "attn.out.weight"), {d, d}, &rng);
    b.b_out = register_param(block_name(i, "attn.out.bias"), {d}, nullptr);
    b.ln2_gain = register_param(block_name(i, "ln2.gain"), {d}, nullptr, T(1));
    b.ln2_bias = register_param(block_name(i, "ln2.bias"), {d}, nullptr);
    b.w_fc = register_param(block_name(i, "mlp.fc.weight"), {d, 4 * d}, &rng);
    b.b_fc = register_param(block_name(i, "mlp.fc.bias"), {4 * d}, nullptr);
    b.w_proj = register_param(block_name(i, "mlp.proj.weight"), {4 * d, d}, &rng);
    b.b_proj = register_param(block_name(i, "mlp.proj.bias"), {d}, nullptr);
  }
  lnf_gain = register_param("ln_f.gain", {d}, nullptr, T(1));
  lnf_bias = register_param("ln_f.bias", {d}, nullptr);
  lm_weight = register_param("lm_head.weight", {d, config_.lm_vocabulary()}, &rng);
  lm_bias = register_param("lm_head.bias", {config_.lm_vocabulary()}, nullptr);
  cls_token = register_param("cls_token", {1, d}, &rng);
  proj_weight = register_param("projection.weight", {d, d}, &rng);
  proj_bias = register_param("projection.bias", {d}, nullptr);
  // Heads draw from a stream of their own so adding one later matches
  // building the model with it.
  for (const auto& spec : heads) add_head(spec, seed);
}

template <typename T>
GptModel<T> GptModel<T>::clone() const {
  GptModel<T> out(config_, head_specs_, 0);
  copy_parameters(*this, out);
  for (const auto& p : params_) out.parameter(p.name).set_requires_grad(p.tensor.requires_grad());
  return out;
}

template <typename T>
Tensor<T> GptModel<T>::parameter(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + std::string(name));
  return params_[it->second].tensor;
}

template <typename T>
bool GptModel<T>::has_parameter(std::string_view name) const {
  return index_.find(name) != index_.end();
}

template <typename T>
bool GptModel<T>::has_head(std::string_view dataset_id) const {
  return heads_.find(dataset_id) != heads_.end();
}

template <typename T>
const OrdinalHead<T>& GptModel<T>::head(std::string_view dataset_id) const {
  auto it = heads_.find(dataset_id);
  if (it == heads_.end()) throw ContractError("model has no head for dataset '" + std::string(dataset_id) + "'");
  return it->second;
}

template <typename T>
void GptModel<T>::add_head(const HeadSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) {
    throw ContractError("ordinal head '" + spec.dataset_id + "' needs at least 2 classes");
  }
  if (spec.dataset_id.empty()) throw ContractError("head dataset_id must not be empty");
  if (has_head(spec.dataset_id)) throw ContractError("duplicate head for dataset '" + spec.dataset_id + "'");
  std::uint64_t mixed = seed ^ 0x9E3779B97F4A7C15ull;
  for (unsigned char ch : spec.dataset_id) mixed = (mixed ^ ch) * 0x100000001B3ull;
  Rng rng(mixed);
  OrdinalHead<T> h;
  h.num_classes = spec.num_classes;
  h.weight = register_param("heads." + spec.dataset_id + ".weight", {config_.d_model, spec.num_classes - 1}, &rng);
  h.bias = register_param("heads." + spec.dataset_id + ".bias", {spec.num_classes - 1}, nullptr);
  heads_.emplace(spec.dataset_id, h);
  head_specs_.push_back(spec);
}

template <typename T>
std::vector<Tensor<T>> GptModel<T>::tail_shared_parameters() const {
  return {cls_token, proj_weight, proj_bias};
}

template <typename T>
std::vector<Tensor<T>> GptModel<T>::head_parameters(std::string_view dataset_id) const {
  const auto& h = head(dataset_id);
  return {h.weight, h.bias};
}

template <typename T>
std::vector<Tensor<T>> GptModel<T>::pretrain_parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) {
    if (p.name == "cls_token" || p.name.starts_with("projection.") || p.name.starts_with("heads.")) continue;
    out.push_back(p.tensor);
  }
  return out;
}

template <typename T>
void GptModel<T>::set_trainable(TrainableSet set) {
  for (auto& p : params_) {
    const bool tail =
        p.name == "cls_token" || p.name.starts_with("projection.") || p.name.starts_with("heads.");
    bool on = false;
    switch (set) {
      case TrainableSet::kNone: on = false; break;
      case TrainableSet::kPretrain: on = !tail; break;
      case TrainableSet::kTail: on = tail; break;
      case TrainableSet::kAll: on = true; break;
    }
    p.tensor.set_requires_grad(on);
    if (!on) p.tensor.zero_grad();
  }
}

template <typename T>
std::size_t GptModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
GptModel<T> build_model(const GptConfig& config, const std::vector<HeadSpec>& heads, std::uint64_t seed) {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].num_classes < 2) {
      throw ContractError("ordinal head '" + heads[i].dataset_id + "' needs at least 2 classes");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (heads[i].dataset_id == heads[j].dataset_id) {
        throw ContractError("duplicate dataset_id '" + heads[i].dataset_id + "'");
      }
    }
  }
  return GptModel<T>(config, heads, seed);
}

template <typename To, typename From>
GptModel<To> convert_model(const GptModel<From>& model) {
  GptModel<To> out(model.config(), model.head_specs(), 0);
  for (const auto& p : model.parameters()) {
    auto dst = out.parameter(p.name).mutable_data();
    const auto src = p.tensor.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<To>(src[i]);
    out.parameter(p.name).set_requires_grad(p.tensor.requires_grad());
  }
  return out;
}

template <typename T>
void copy_parameters(const GptModel<T>& from, GptModel<T>& to) {
  if (from.parameters().size() != to.parameters().size()) {
    throw ContractError("copy_parameters: models differ in layout");
  }
  for (const auto& p : from.parameters()) {
    auto dst = to.parameter(p.name);
    if (dst.shape() != p.tensor.shape()) throw ContractError("copy_parameters: shape mismatch for " + p.name);
    std::copy(p.tensor.data().begin(), p.tensor.data().end(), dst.mutable_data().begin());
  }
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

template <typename T>
Tensor<T> multi_hot(std::span<const BootlegColumn> columns) {
  std::vector<T> cells(columns.size() * kStaffPositions, T(0));
  for (std::size_t r = 0; r < columns.size(); ++r) {
    for (std::size_t i = 0; i < kStaffPositions; ++i) {
      if (columns[r][i]) cells[r * kStaffPositions + i] = T(1);
    }
  }
  return Tensor<T>({columns.size(), kStaffPositions}, std::move(cells));
}

// Encoder output without positions. `segments` separates independent
// sequences for the convolution.
template <typename T>
Tensor<T> embed_rows(const GptModel<T>& model, std::span<const std::uint8_t> tokens,
                     std::span<const BootlegColumn> columns, std::span<const std::size_t> segments) {
  switch (model.config().encoder) {
    case EncoderKind::kEmb: {
      std::vector<std::size_t> ids(tokens.begin(), tokens.end());
      return embedding_lookup(model.token_embedding, ids);
    }
    case EncoderKind::kFc:
      return add_bias(matmul(multi_hot<T>(columns), model.fc_weight), model.fc_bias);
    case EncoderKind::kCnn:
      return conv1d_causal(multi_hot<T>(columns), model.cnn_kernel, model.cnn_bias, segments);
  }
  throw ContractError("unknown encoder");
}

// Positional rows for a sequence of n positions. Within the learned table the
// rows are used directly; beyond it the table is resampled to n rows.
template <typename T>
Tensor<T> positions_for(const GptModel<T>& model, std::size_t n) {
  const std::size_t c = model.config().context_len;
  if (n <= c) {
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return embedding_lookup(model.position_embedding, ids);
  }
  std::vector<double> pos(n);
  const double step = static_cast<double>(c - 1) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) pos[i] = std::min(static_cast<double>(i) * step, static_cast<double>(c - 1));
  return lerp_rows(model.position_embedding, pos);
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const GptConfig& cfg, const ForwardOptions& opt) {
  if (!opt.train || cfg.dropout <= 0.0) return x;
  if (!opt.rng) throw ContractError("training forward with dropout needs an rng");
  return dropout(x, cfg.dropout, *opt.rng);
}

template <typename T>
Tensor<T> block_forward(const TransformerBlock<T>& b, const GptConfig& cfg, const Tensor<T>& x,
                        std::span<const std::size_t> segments, std::type_identity_t<const AttentionPrefix<T>*> prefix,
                        const ForwardOptions& opt, Tensor<T>* k_out = nullptr, Tensor<T>* v_out = nullptr) {
  const std::size_t d = cfg.d_model;
  auto h = layer_norm(x, b.ln1_gain, b.ln1_bias);
  auto qkv = add_bias(matmul(h, b.w_qkv), b.b_qkv);
  auto q = slice_cols(qkv, 0, d);
  auto k = slice_cols(qkv, d, d);
  auto v = slice_cols(qkv, 2 * d, d);
  if (k_out) *k_out = k.detach();
  if (v_out) *v_out = v.detach();
  auto att = causal_attention(q, k, v, segments, cfg.n_heads, prefix);
  att = maybe_dropout(add_bias(matmul(att, b.w_out), b.b_out), cfg, opt);
  auto x1 = add(x, att);
  auto m = gelu(add_bias(matmul(layer_norm(x1, b.ln2_gain, b.ln2_bias), b.w_fc), b.b_fc));
  m = maybe_dropout(add_bias(matmul(m, b.w_proj), b.b_proj), cfg, opt);
  return add(x1, m);
}

struct ChunkPlan {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) in encoder rows
  bool truncated = false;
};

ChunkPlan plan_chunks(const GptConfig& cfg, std::size_t rows) {
  ChunkPlan plan;
  const std::size_t c = cfg.context_len;
  if (rows + 1 <= c) {
    plan.ranges.emplace_back(0, rows);
    return plan;
  }
  switch (cfg.long_input_policy) {
    case LongInputPolicy::kTruncate:
      plan.ranges.emplace_back(0, c - 1);
      plan.truncated = true;
      break;
    case LongInputPolicy::kInterpolate:
      if (rows + 1 <= cfg.max_finetune_len) {
        plan.ranges.emplace_back(0, rows);
      } else {
        plan.ranges.emplace_back(0, cfg.max_finetune_len - 1);
        plan.truncated = true;
      }
      break;
    case LongInputPolicy::kChunkMean:
      for (std::size_t b = 0; b < rows; b += c - 1) plan.ranges.emplace_back(b, std::min(rows, b + c - 1));
      break;
  }
  return plan;
}

// Source rows of a score in encoder units.
struct ScoreRows {
  std::vector<std::uint8_t> tokens;
  std::span<const BootlegColumn> columns;
  std::size_t size = 0;

  ScoreRows(EncoderKind encoder, const BootlegScore& score) : columns(score.columns) {
    if (encoder == EncoderKind::kEmb) {
      tokens = tokenize_emb(score).tokens;
      size = tokens.size();
    } else {
      size = score.width();
    }
  }

  [[nodiscard]] std::span<const std::uint8_t> token_range(std::size_t b, std::size_t e) const {
    return tokens.empty() ? std::span<const std::uint8_t>{} : std::span<const std::uint8_t>(tokens).subspan(b, e - b);
  }
  [[nodiscard]] std::span<const BootlegColumn> column_range(std::size_t b, std::size_t e) const {
    return tokens.empty() ? columns.subspan(b, e - b) : std::span<const BootlegColumn>{};
  }
};

template <typename T>
Tensor<T> row_range(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> ids(end - begin);
  std::iota(ids.begin(), ids.end(), begin);
  return embedding_lookup(x, ids);
}

template <typename T>
Tensor<T> classification_tail(const GptModel<T>& model, const Tensor<T>& cls_states,
                              std::span<const std::size_t> counts, std::string_view dataset_id,
                              Tensor<T>* embedding) {
  const auto& h = model.head(dataset_id);
  auto pooled = segment_mean_rows(layer_norm(cls_states, model.lnf_gain, model.lnf_bias), counts);
  auto emb = gelu(add_bias(matmul(pooled, model.proj_weight), model.proj_bias));
  *embedding = emb;
  return add_bias(matmul(emb, h.weight), h.bias);
}

}  // namespace

template <typename T>
Tensor<T> encode_input(const GptModel<T>& model, const BootlegScore& score) {
  if (score.width() == 0) throw ContractError("encode_input: empty score");
  const ScoreRows src(model.config().encoder, score);
  auto x = embed_rows(model, src.token_range(0, src.size), src.column_range(0, src.size), {});
  return add(x, positions_for(model, src.size));
}

template <typename T>
Tensor<T> lm_logits(const GptModel<T>& model, const std::vector<LmWindow>& windows,
                    const ForwardOptions& options) {
  const auto& cfg = model.config();
  if (windows.empty()) throw ContractError("lm_logits: empty batch");
  std::vector<std::size_t> segments;
  std::vector<std::uint8_t> tokens;
  std::vector<BootlegColumn> columns;
  std::vector<std::size_t> pos_ids;
  for (const auto& w : windows) {
    const std::size_t len = w.length(cfg.encoder);
    if (len == 0) throw ContractError("lm_logits: empty window");
    if (len > cfg.context_len) {
      throw ContractError("lm window of " + std::to_string(len) + " positions exceeds context_len " +
                          std::to_string(cfg.context_len));
    }
    segments.push_back(len);
    tokens.insert(tokens.end(), w.tokens.begin(), w.tokens.end());
    columns.insert(columns.end(), w.columns.begin(), w.columns.end());
    for (std::size_t i = 0; i < len; ++i) pos_ids.push_back(i);
  }
  auto x = embed_rows(model, tokens, columns, segments);
  x = add(x, embedding_lookup(model.position_embedding, pos_ids));
  x = maybe_dropout(x, cfg, options);
  for (const auto& b : model.blocks) x = block_forward(b, cfg, x, segments, nullptr, options);
  x = layer_norm(x, model.lnf_gain, model.lnf_bias);
  return add_bias(matmul(x, model.lm_weight), model.lm_bias);
}

template <typename T>
Tensor<T> forward_lm(const GptModel<T>& model, const std::vector<LmWindow>& windows,
                     const ForwardOptions& options) {
  const auto& cfg = model.config();
  auto logits = lm_logits(model, windows, options);
  std::vector<std::size_t> rows;
  std::size_t offset = 0;
  if (cfg.encoder == EncoderKind::kEmb) {
    std::vector<std::size_t> targets;
    for (const auto& w : windows) {
      for (std::size_t i = 0; i + 1 < w.tokens.size(); ++i) {
        rows.push_back(offset + i);
        targets.push_back(w.tokens[i + 1]);
      }
      offset += w.tokens.size();
    }
    if (rows.empty()) throw ContractError("forward_lm: no next-step targets (all windows have length 1)");
    return cross_entropy(embedding_lookup(logits, rows), targets);
  }
  std::vector<BootlegColumn> next;
  for (const auto& w : windows) {
    for (std::size_t i = 0; i + 1 < w.columns.size(); ++i) {
      rows.push_back(offset + i);
      next.push_back(w.columns[i + 1]);
    }
    offset += w.columns.size();
  }
  if (rows.empty()) throw ContractError("forward_lm: no next-step targets (all windows have length 1)");
  return bce_with_logits(embedding_lookup(logits, rows), multi_hot<T>(next));
}

template <typename T>
ClassifyOutput<T> forward_classify(const GptModel<T>& model, const BootlegScore& score,
                                   std::string_view dataset_id) {
  const auto& cfg = model.config();
  (void)model.head(dataset_id);  // unknown ids fail before any work
  const ScoreRows src(cfg.encoder, score);
  const auto plan = plan_chunks(cfg, src.size);
  const ForwardOptions eval;
  Tensor<T> states;
  for (const auto& [b, e] : plan.ranges) {
    const std::size_t p = e - b;
    Tensor<T> x = model.cls_token;
    if (p > 0) {
      const std::size_t seg = p;
      x = concat_rows(embed_rows(model, src.token_range(b, e), src.column_range(b, e),
                                 std::span<const std::size_t>(&seg, 1)),
                      model.cls_token);
    }
    x = add(x, positions_for(model, p + 1));
    const std::size_t seg = p + 1;
    for (const auto& blk : model.blocks) {
      x = block_forward(blk, cfg, x, std::span<const std::size_t>(&seg, 1), nullptr, eval);
    }
    auto last = row_range(x, p, p + 1);
    states = states.defined() ? concat_rows(states, last) : last;
  }
  const std::size_t count = plan.ranges.size();
  ClassifyOutput<T> out;
  out.logits = classification_tail(model, states, std::span<const std::size_t>(&count, 1), dataset_id,
                                   &out.embedding);
  out.truncated = plan.truncated;
  return out;
}

template <typename T>
std::size_t PieceContext<T>::bytes() const {
  std::size_t n = 0;
  for (const auto& c : chunks) {
    n += c.cls_position.numel();
    for (const auto& k : c.keys) n += k.defined() ? k.numel() : 0;
    for (const auto& v : c.values) n += v.defined() ? v.numel() : 0;
  }
  return n * sizeof(T);
}

template <typename T>
PieceContext<T> prepare_context(const GptModel<T>& model, const BootlegScore& score) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const ScoreRows src(cfg.encoder, score);
  const auto plan = plan_chunks(cfg, src.size);
  const ForwardOptions eval;
  PieceContext<T> ctx;
  ctx.truncated = plan.truncated;
  for (const auto& [b, e] : plan.ranges) {
    const std::size_t p = e - b;
    typename PieceContext<T>::Chunk chunk;
    auto pos = positions_for(model, p + 1);
    chunk.cls_position = row_range(pos, p, p + 1);
    chunk.keys.resize(cfg.n_layers);
    chunk.values.resize(cfg.n_layers);
    if (p > 0) {
      const std::size_t seg = p;
      const std::span<const std::size_t> segs(&seg, 1);
      auto x = add(embed_rows(model, src.token_range(b, e), src.column_range(b, e), segs), row_range(pos, 0, p));
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        x = block_forward(model.blocks[l], cfg, x, segs, nullptr, eval, &chunk.keys[l], &chunk.values[l]);
      }
    }
    ctx.chunks.push_back(std::move(chunk));
  }
  return ctx;
}

template <typename T>
ClassifyOutput<T> forward_tail(const GptModel<T>& model, const std::vector<const PieceContext<T>*>& pieces,
                               std::string_view dataset_id) {
  const auto& cfg = model.config();
  (void)model.head(dataset_id);
  if (pieces.empty()) throw ContractError("forward_tail: empty batch");
  const std::size_t d = cfg.d_model;
  std::vector<std::size_t> counts;
  std::vector<T> pos;
  std::vector<AttentionPrefix<T>> prefixes(cfg.n_layers);
  bool truncated = false;
  for (const auto* piece : pieces) {
    counts.push_back(piece->chunks.size());
    truncated = truncated || piece->truncated;
    for (const auto& c : piece->chunks) {
      pos.insert(pos.end(), c.cls_position.data().begin(), c.cls_position.data().end());
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        prefixes[l].keys.push_back(c.keys[l]);
        prefixes[l].values.push_back(c.values[l]);
      }
    }
  }
  const std::size_t rows = pos.size() / d;
  std::vector<std::size_t> zeros(rows, 0);
  std::vector<std::size_t> segments(rows, 1);
  auto x = add(embedding_lookup(model.cls_token, zeros), Tensor<T>({rows, d}, std::move(pos)));
  const ForwardOptions eval;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    x = block_forward(model.blocks[l], cfg, x, segments, &prefixes[l], eval);
  }
  ClassifyOutput<T> out;
  out.logits = classification_tail(model, x, counts, dataset_id, &out.embedding);
  out.truncated = truncated;
  return out;
}

#define SCOREGRADE_INSTANTIATE(T)                                                                  \
  template class GptModel<T>;                                                                      \
  template GptModel<T> build_model<T>(const GptConfig&, const std::vector<HeadSpec>&, std::uint64_t); \
  template void copy_parameters(const GptModel<T>&, GptModel<T>&);                                 \
  template Tensor<T> encode_input(const GptModel<T>&, const BootlegScore&);                        \
  template Tensor<T> lm_logits(const GptModel<T>&, const std::vector<LmWindow>&, const ForwardOptions&); \
  template Tensor<T> forward_lm(const GptModel<T>&, const std::vector<LmWindow>&, const ForwardOptions&); \
  template ClassifyOutput<T> forward_classify(const GptModel<T>&, const BootlegScore&, std::string_view); \
  template struct PieceContext<T>;                                                                 \
  template PieceContext<T> prepare_context(const GptModel<T>&, const BootlegScore&);               \
  template ClassifyOutput<T> forward_tail(const GptModel<T>&, const std::vector<const PieceContext<T>*>&, \
                                          std::string_view);

SCOREGRADE_INSTANTIATE(float)
SCOREGRADE_INSTANTIATE(double)
#undef SCOREGRADE_INSTANTIATE

template GptModel<double> convert_model<double, float>(const GptModel<float>&);
template GptModel<float> convert_model<float, double>(const GptModel<double>&);
template GptModel<float> convert_model<float, float>(const GptModel<float>&);
template GptModel<double> convert_model<double, double>(const GptModel<double>&);

}  // namespace scoregrade
