#include "scoregrade/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

#include "scoregrade/error.hpp"
#include "scoregrade/metrics.hpp"
#include "scoregrade/ordinal.hpp"

namespace scoregrade {

// ---------------------------------------------------------------------------
// Cross-validation

std::vector<CvSplit> make_cv_splits(const DatasetManifest& manifest, std::uint64_t seed, std::size_t folds) {
  if (folds < 3) throw ContractError("cross-validation needs at least 3 folds");
  if (manifest.pieces.size() < folds) {
    throw ValidationError("dataset " + manifest.name + " has " + std::to_string(manifest.pieces.size()) +
                          " pieces, fewer than " + std::to_string(folds) + " folds");
  }
  std::vector<std::vector<std::size_t>> by_class(manifest.num_classes);
  for (std::size_t i = 0; i < manifest.pieces.size(); ++i) by_class.at(manifest.pieces[i].label).push_back(i);

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> strata(folds);
  std::size_t deal = 0;
  for (auto& members : by_class) {
    rng.shuffle(std::span<std::size_t>(members));
    for (auto idx : members) strata[deal++ % folds].push_back(idx);
  }
  for (auto& s : strata) std::sort(s.begin(), s.end());

  std::vector<CvSplit> out(folds);
  for (std::size_t f = 0; f < folds; ++f) {
    auto& split = out[f];
    split.fold_index = f;
    const std::size_t val = (f + 1) % folds;
    for (std::size_t s = 0; s < folds; ++s) {
      auto& dst = s == f ? split.test : s == val ? split.validation : split.train;
      for (auto idx : strata[s]) dst.push_back(manifest.pieces[idx].piece_id);
    }
  }
  return out;
}

nlohmann::json split_to_json(const CvSplit& s) {
  return {{"fold", s.fold_index}, {"train", s.train}, {"validation", s.validation}, {"test", s.test}};
}

CvSplit split_from_json(const nlohmann::json& j) {
  try {
    CvSplit s;
    s.fold_index = j.value("fold", std::size_t{0});
    s.train = j.value("train", std::vector<std::string>{});
    s.validation = j.value("validation", std::vector<std::string>{});
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("split file schema violation: ") + e.what());
  }
}

void save_split(const CvSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << split_to_json(split).dump(2) << '\n';
}

CvSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file " + path.string());
  try {
    return split_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("split file " + path.string() + " is not valid JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Sampling

std::string_view to_string(SamplerMode mode) { return mode == SamplerMode::kBalanced ? "balanced" : "natural"; }

SamplerMode parse_sampler_mode(std::string_view name) {
  if (name == "balanced") return SamplerMode::kBalanced;
  if (name == "natural") return SamplerMode::kNatural;
  throw ValidationError("unknown sampler '" + std::string(name) + "'");
}

std::vector<std::vector<std::size_t>> sample_epoch(std::span<const std::size_t> labels, std::size_t batch_size,
                                                   SamplerMode mode, Rng& rng) {
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  if (labels.empty()) throw ContractError("cannot sample from an empty split");
  const std::size_t n = labels.size();
  std::vector<std::size_t> draws(n);
  if (mode == SamplerMode::kNatural) {
    std::iota(draws.begin(), draws.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(draws));
  } else {
    std::map<std::size_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < n; ++i) members[labels[i]].push_back(i);
    std::vector<const std::vector<std::size_t>*> classes;
    for (const auto& [c, m] : members) classes.push_back(&m);
    for (auto& d : draws) {
      const auto& m = *classes[rng.below(classes.size())];
      d = m[rng.below(m.size())];
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < n; b += batch_size) {
    batches.emplace_back(draws.begin() + static_cast<std::ptrdiff_t>(b),
                         draws.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Early stopping

EarlyStopDecision early_stop_update(EarlyStopState& s, double acc0, double mse, std::size_t epoch) {
  EarlyStopDecision d;
  d.improved = acc0 > s.best_acc0 || (acc0 == s.best_acc0 && mse < s.best_mse);
  if (d.improved) {
    s.best_acc0 = acc0;
    s.best_mse = mse;
    s.best_epoch = epoch;
    s.epochs_without_improvement = 0;
  } else {
    ++s.epochs_without_improvement;
  }
  d.stop = s.epochs_without_improvement >= s.patience;
  return d;
}

// ---------------------------------------------------------------------------
// Pretraining

std::vector<LmWindow> make_lm_windows(std::span<const BootlegScore> corpus, EncoderKind encoder,
                                      std::size_t context_len) {
  if (context_len < 2) throw ContractError("context_len must be >= 2");
  std::vector<LmWindow> out;
  for (const auto& score : corpus) {
    if (encoder == EncoderKind::kEmb) {
      const auto tokens = tokenize_emb(score).tokens;
      for (std::size_t b = 0; b + 2 <= tokens.size(); b += context_len) {
        const std::size_t e = std::min(tokens.size(), b + context_len);
        LmWindow w;
        w.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(b), tokens.begin() + static_cast<std::ptrdiff_t>(e));
        out.push_back(std::move(w));
      }
    } else {
      const auto& cols = score.columns;
      for (std::size_t b = 0; b + 2 <= cols.size(); b += context_len) {
        const std::size_t e = std::min(cols.size(), b + context_len);
        LmWindow w;
        w.columns.assign(cols.begin() + static_cast<std::ptrdiff_t>(b), cols.begin() + static_cast<std::ptrdiff_t>(e));
        out.push_back(std::move(w));
      }
    }
  }
  return out;
}

namespace {

template <typename T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace

template <typename T>
PretrainResult pretrain(GptModel<T>& model, std::span<const BootlegScore> corpus, const PretrainOptions& opt) {
  if (opt.batch_size == 0) throw ContractError("pretrain: batch_size must be positive");
  const auto& cfg = model.config();
  const auto windows = make_lm_windows(corpus, cfg.encoder, cfg.context_len);
  if (windows.empty()) throw ValidationError("pretrain: corpus has no window of two or more positions");

  model.set_trainable(TrainableSet::kPretrain);
  auto params = model.pretrain_parameters();
  AdamHyper hyper;
  hyper.learning_rate = opt.learning_rate;
  AdamState<T> state(params, hyper);

  Rng rng(opt.seed);
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::size_t cursor = 0;

  PretrainResult result;
  result.windows = windows.size();
  result.epochs = 1;
  result.loss_curve.reserve(opt.steps);
  const ForwardOptions train{true, &rng};
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<LmWindow> batch;
    for (std::size_t i = 0; i < std::min(opt.batch_size, windows.size()); ++i) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
        ++result.epochs;
      }
      batch.push_back(windows[order[cursor++]]);
    }
    zero_grads(std::span<Tensor<T>>(params));
    auto loss = forward_lm(model, batch, train);
    backward(loss);
    if (opt.clip_norm > 0) clip_gradients(std::span<Tensor<T>>(params), opt.clip_norm);
    adam_step(std::span<Tensor<T>>(params), state);
    const double value = static_cast<double>(loss.item());
    result.loss_curve.push_back(value);
    if (opt.on_step) opt.on_step(step, value);
  }
  zero_grads(std::span<Tensor<T>>(params));
  model.set_trainable(TrainableSet::kNone);
  return result;
}

// ---------------------------------------------------------------------------
// Fine-tuning

LabeledSet select_pieces(const DatasetManifest& manifest, std::span<const BootlegScore> scores,
                         std::span<const std::string> ids) {
  if (scores.size() != manifest.pieces.size()) throw DimensionError("scores do not align with manifest pieces");
  std::map<std::string_view, std::size_t> index;
  for (std::size_t i = 0; i < manifest.pieces.size(); ++i) index[manifest.pieces[i].piece_id] = i;
  LabeledSet out;
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ValidationError("piece " + id + " is not in dataset " + manifest.name);
    out.scores.push_back(scores[it->second]);
    out.labels.push_back(manifest.pieces[it->second].label);
  }
  return out;
}

nlohmann::json history_to_json(const HistoryRecord& r) {
  return {{"epoch", r.epoch}, {"split", r.split}, {"dataset", r.dataset_id}, {"loss", r.loss},
          {"acc0", r.acc0},   {"acc1", r.acc1},   {"mse", r.mse}};
}

namespace {

// Frozen-body contexts, precomputed when they fit the byte budget.
template <typename T>
class ContextCache {
 public:
  ContextCache(const GptModel<T>& model, const std::vector<BootlegScore>& scores, bool precompute)
      : model_(model), scores_(scores) {
    if (precompute) {
      cached_.reserve(scores.size());
      for (const auto& s : scores) cached_.push_back(prepare_context(model, s));
    }
  }

  // Pointers stay valid until the next call.
  std::vector<const PieceContext<T>*> batch(std::span<const std::size_t> ids) {
    std::vector<const PieceContext<T>*> out;
    if (!cached_.empty()) {
      for (auto i : ids) out.push_back(&cached_[i]);
      return out;
    }
    scratch_.clear();
    scratch_.reserve(ids.size());
    for (auto i : ids) scratch_.push_back(prepare_context(model_, scores_[i]));
    for (const auto& c : scratch_) out.push_back(&c);
    return out;
  }

 private:
  const GptModel<T>& model_;
  const std::vector<BootlegScore>& scores_;
  std::vector<PieceContext<T>> cached_;
  std::vector<PieceContext<T>> scratch_;
};

std::size_t context_bytes(const GptConfig& cfg, const std::vector<BootlegScore>& scores, std::size_t elem) {
  std::size_t rows = 0;
  for (const auto& s : scores) rows += std::min(encoded_length(cfg.encoder, s.width()), cfg.max_finetune_len) + 1;
  return rows * cfg.d_model * 2 * cfg.n_layers * elem;
}

template <typename T>
std::vector<std::vector<double>> to_rows(const Tensor<T>& t) {
  std::vector<std::vector<double>> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    out[r].reserve(t.cols());
    for (std::size_t c = 0; c < t.cols(); ++c) out[r].push_back(static_cast<double>(t.at(r, c)));
  }
  return out;
}

template <typename T>
std::vector<std::size_t> decode_rows(const Tensor<T>& logits) {
  std::vector<std::size_t> out;
  for (const auto& row : to_rows(logits)) out.push_back(ordinal_decode_logits(row));
  return out;
}

struct SplitScore {
  double loss = 0.0;
  double acc0 = 0.0;
  double acc1 = 0.0;
  double mse = 0.0;
};

SplitScore score_split(std::span<const std::size_t> preds, std::span<const std::size_t> truths, std::size_t k,
                       double loss) {
  return {loss, acc_within_n(preds, truths, k, 0), acc_within_n(preds, truths, k, 1), macro_mse(preds, truths, k)};
}

template <typename T>
SplitScore evaluate_cached(const GptModel<T>& model, ContextCache<T>& cache, const LabeledSet& set,
                           const FinetuneTask& task, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<std::size_t> preds;
  double loss = 0.0;
  for (std::size_t b = 0; b < set.labels.size(); b += batch_size) {
    const std::size_t e = std::min(set.labels.size(), b + batch_size);
    std::vector<std::size_t> ids(e - b);
    std::iota(ids.begin(), ids.end(), b);
    const auto out = forward_tail(model, cache.batch(ids), task.dataset_id);
    const std::span<const std::size_t> truths(set.labels.data() + b, e - b);
    loss += static_cast<double>(ordinal_loss_batch(out.logits, truths).item()) * static_cast<double>(e - b);
    for (auto c : decode_rows(out.logits)) preds.push_back(c);
  }
  return score_split(preds, set.labels, task.num_classes, loss / static_cast<double>(set.labels.size()));
}

}  // namespace

template <typename T>
FinetuneResult finetune(GptModel<T>& model, const std::vector<FinetuneTask>& tasks, const FinetuneOptions& opt,
                        const std::function<void(const HistoryRecord&)>& on_record) {
  if (tasks.empty()) throw ContractError("finetune: no datasets");
  if (opt.mode == FinetuneMode::kSingle && tasks.size() != 1) {
    throw ContractError("finetune: single mode takes exactly one dataset, got " + std::to_string(tasks.size()));
  }
  if (opt.batch_size == 0) throw ContractError("finetune: batch_size must be positive");
  for (const auto& t : tasks) {
    const auto& head = model.head(t.dataset_id);
    if (head.num_classes != t.num_classes) {
      throw ContractError("finetune: head " + t.dataset_id + " has " + std::to_string(head.num_classes) +
                          " classes, dataset has " + std::to_string(t.num_classes));
    }
    if (t.train.labels.empty()) throw ValidationError("finetune: dataset " + t.dataset_id + " has no training pieces");
    if (t.train.scores.size() != t.train.labels.size() || t.validation.scores.size() != t.validation.labels.size()) {
      throw DimensionError("finetune: scores and labels differ in length for " + t.dataset_id);
    }
  }

  model.set_trainable(TrainableSet::kTail);
  std::size_t need = 0;
  for (const auto& t : tasks) {
    need += context_bytes(model.config(), t.train.scores, sizeof(T));
    need += context_bytes(model.config(), t.validation.scores, sizeof(T));
  }
  const bool precompute = need <= opt.context_budget_bytes;
  std::vector<ContextCache<T>> train_cache, val_cache;
  for (const auto& t : tasks) {
    train_cache.emplace_back(model, t.train.scores, precompute);
    val_cache.emplace_back(model, t.validation.scores, precompute);
  }

  AdamHyper hyper;
  hyper.learning_rate = opt.learning_rate;
  auto shared = model.tail_shared_parameters();
  AdamState<T> shared_state(shared, hyper);
  std::vector<std::vector<Tensor<T>>> heads;
  std::vector<AdamState<T>> head_states;
  for (const auto& t : tasks) {
    heads.push_back(model.head_parameters(t.dataset_id));
    head_states.emplace_back(heads.back(), hyper);
  }
  std::vector<Tensor<T>> all_tail = shared;
  for (const auto& h : heads) all_tail.insert(all_tail.end(), h.begin(), h.end());
  auto snapshot = [&] {
    std::vector<std::vector<T>> s;
    for (const auto& p : all_tail) s.emplace_back(p.data().begin(), p.data().end());
    return s;
  };
  auto best = snapshot();

  EarlyStopState stop;
  stop.patience = opt.patience;
  FinetuneResult result;
  Rng rng(opt.seed);
  auto emit = [&](HistoryRecord r) {
    if (on_record) on_record(r);
    result.history.push_back(std::move(r));
  };

  for (std::size_t epoch = 0; epoch < opt.max_epochs; ++epoch) {
    std::vector<std::vector<std::vector<std::size_t>>> plan;
    std::size_t cycles = 0;
    for (const auto& t : tasks) {
      plan.push_back(sample_epoch(t.train.labels, opt.batch_size, opt.sampler, rng));
      cycles = std::max(cycles, plan.back().size());
    }
    std::vector<double> loss_sum(tasks.size(), 0.0);
    std::vector<std::vector<std::size_t>> seen_preds(tasks.size()), seen_truths(tasks.size());
    for (std::size_t c = 0; c < cycles; ++c) {
      for (std::size_t d = 0; d < tasks.size(); ++d) {
        if (c >= plan[d].size()) continue;
        const auto& ids = plan[d][c];
        std::vector<std::size_t> truths;
        for (auto i : ids) truths.push_back(tasks[d].train.labels[i]);
        for (auto& p : all_tail) p.zero_grad();
        const auto out = forward_tail(model, train_cache[d].batch(ids), tasks[d].dataset_id);
        auto loss = ordinal_loss_batch(out.logits, truths);
        backward(loss);

        std::vector<Tensor<T>> group = shared;
        group.insert(group.end(), heads[d].begin(), heads[d].end());
        if (opt.weight_decay > 0) add_l2_gradient(std::span<Tensor<T>>(group), opt.weight_decay);
        if (opt.clip_norm > 0) clip_gradients(std::span<Tensor<T>>(group), opt.clip_norm);
        if (opt.on_gradients) opt.on_gradients(d);
        adam_step(std::span<Tensor<T>>(shared), shared_state);
        adam_step(std::span<Tensor<T>>(heads[d]), head_states[d]);

        loss_sum[d] += static_cast<double>(loss.item()) * static_cast<double>(ids.size());
        for (auto p : decode_rows(out.logits)) seen_preds[d].push_back(p);
        seen_truths[d].insert(seen_truths[d].end(), truths.begin(), truths.end());
      }
    }
    for (auto& p : all_tail) p.zero_grad();

    double acc0 = 0.0, mse = 0.0;
    for (std::size_t d = 0; d < tasks.size(); ++d) {
      const auto& t = tasks[d];
      const auto tr = score_split(seen_preds[d], seen_truths[d], t.num_classes,
                                  loss_sum[d] / static_cast<double>(seen_truths[d].size()));
      emit({epoch, "train", t.dataset_id, tr.loss, tr.acc0, tr.acc1, tr.mse});
      const auto va = t.validation.labels.empty() ? tr : evaluate_cached(model, val_cache[d], t.validation, t, opt.batch_size);
      emit({epoch, "validation", t.dataset_id, va.loss, va.acc0, va.acc1, va.mse});
      acc0 += va.acc0;
      mse += va.mse;
    }
    acc0 /= static_cast<double>(tasks.size());
    mse /= static_cast<double>(tasks.size());
    result.epochs_run = epoch + 1;
    const auto decision = early_stop_update(stop, acc0, mse, epoch);
    if (decision.improved) best = snapshot();
    if (decision.stop) break;
  }

  for (std::size_t i = 0; i < all_tail.size(); ++i) std::copy(best[i].begin(), best[i].end(), all_tail[i].mutable_data().begin());
  result.best_epoch = stop.best_epoch.value_or(0);
  result.best_acc0 = stop.best_acc0;
  result.best_mse = stop.best_mse;
  model.set_trainable(TrainableSet::kNone);
  return result;
}

template <typename T>
Predictions predict(const GptModel<T>& model, std::span<const BootlegScore> scores, std::string_view dataset_id,
                    std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("predict: batch_size must be positive");
  (void)model.head(dataset_id);
  NoGradGuard no_grad;
  Predictions out;
  for (std::size_t b = 0; b < scores.size(); b += batch_size) {
    const std::size_t e = std::min(scores.size(), b + batch_size);
    std::vector<PieceContext<T>> ctx;
    ctx.reserve(e - b);
    for (std::size_t i = b; i < e; ++i) {
      ctx.push_back(prepare_context(model, scores[i]));
      if (ctx.back().truncated) ++out.truncated;
    }
    std::vector<const PieceContext<T>*> ptrs;
    for (const auto& c : ctx) ptrs.push_back(&c);
    const auto res = forward_tail(model, ptrs, dataset_id);
    for (auto& row : to_rows(res.logits)) {
      out.classes.push_back(ordinal_decode_logits(row));
      out.logits.push_back(std::move(row));
    }
    for (auto& row : to_rows(res.embedding)) out.embeddings.push_back(std::move(row));
  }
  return out;
}

#define SCOREGRADE_INSTANTIATE(T)                                                                      \
  template PretrainResult pretrain(GptModel<T>&, std::span<const BootlegScore>, const PretrainOptions&); \
  template FinetuneResult finetune(GptModel<T>&, const std::vector<FinetuneTask>&, const FinetuneOptions&, \
                                   const std::function<void(const HistoryRecord&)>&);                  \
  template Predictions predict(const GptModel<T>&, std::span<const BootlegScore>, std::string_view, std::size_t);

SCOREGRADE_INSTANTIATE(float)
SCOREGRADE_INSTANTIATE(double)
#undef SCOREGRADE_INSTANTIATE

}  // namespace scoregrade
