#include "scoregrade/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "scoregrade/error.hpp"
#include "scoregrade/ordinal.hpp"
#include "scoregrade/pipeline.hpp"

namespace scoregrade {

namespace {

std::size_t distinct_count(std::span<const std::size_t> v) {
  std::vector<std::size_t> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  return static_cast<std::size_t>(std::unique(s.begin(), s.end()) - s.begin());
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

}  // namespace

FoldResult evaluate_predictions(std::span<const std::size_t> preds, std::span<const std::size_t> truths,
                                std::size_t k, std::span<const double> scores, std::span<const std::string> ids,
                                std::size_t fold) {
  if (!scores.empty() && scores.size() != truths.size()) throw DimensionError("scores and truths differ in length");
  if (!ids.empty() && ids.size() != truths.size()) throw DimensionError("piece ids and truths differ in length");
  FoldResult r;
  r.metrics.fold = fold;
  r.metrics.pieces = truths.size();
  r.metrics.acc0 = acc_within_n(preds, truths, k, 0);
  r.metrics.acc1 = acc_within_n(preds, truths, k, 1);
  r.metrics.mse = macro_mse(preds, truths, k);
  if (distinct_count(truths) >= 2) {
    std::vector<double> s(scores.begin(), scores.end());
    if (s.empty()) {
      for (auto p : preds) s.push_back(static_cast<double>(p));
    }
    r.metrics.tau_c = kendall_tau_c(s, truths);
  }
  r.confusion = confusion_matrix(preds, truths, k);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    r.predictions.push_back({ids.empty() ? std::to_string(i) : ids[i], truths[i], preds[i],
                             scores.empty() ? static_cast<double>(preds[i]) : scores[i]});
  }
  return r;
}

template <typename T>
FoldResult evaluate_model(const GptModel<T>& model, std::span<const BootlegScore> scores,
                          std::span<const std::size_t> labels, std::string_view dataset_id, std::size_t fold) {
  if (scores.size() != labels.size()) throw DimensionError("evaluate_model: scores and labels differ in length");
  const auto pred = predict(model, scores, dataset_id);
  std::vector<double> expected;
  for (const auto& row : pred.logits) expected.push_back(ordinal_expected(row));
  std::vector<std::string> ids;
  for (const auto& s : scores) ids.push_back(s.piece_id);
  return evaluate_predictions(pred.classes, labels, model.head(dataset_id).num_classes, expected, ids, fold);
}

DatasetSummary summarize_folds(std::string dataset_id, std::size_t num_classes, double air_value,
                               std::vector<FoldResult> folds) {
  DatasetSummary s;
  s.dataset_id = std::move(dataset_id);
  s.num_classes = num_classes;
  s.air = air_value;
  std::vector<double> a0, a1, mse, tau;
  for (auto& f : folds) {
    a0.push_back(f.metrics.acc0);
    a1.push_back(f.metrics.acc1);
    mse.push_back(f.metrics.mse);
    if (f.metrics.tau_c) tau.push_back(*f.metrics.tau_c);
    s.folds.push_back(f.metrics);
    s.predictions.insert(s.predictions.end(), f.predictions.begin(), f.predictions.end());
  }
  s.acc0 = summarize(a0);
  s.acc1 = summarize(a1);
  s.mse = summarize(mse);
  if (!tau.empty()) s.tau_c = summarize(tau);
  return s;
}

RankResult rank_embeddings(const std::vector<std::vector<double>>& embeddings,
                           std::span<const std::size_t> self_predictions, std::span<const double> self_scores,
                           std::span<const std::size_t> truths) {
  if (embeddings.size() != truths.size()) throw DimensionError("rank: embeddings and truths differ in length");
  if (distinct_count(truths) < 2) throw UndefinedCorrelationError("rank: evaluation set holds a single class");
  const auto pca = pca_first_component(embeddings);
  RankResult r;
  r.scores = pca.scores;
  r.component = pca.component;
  r.pca_iterations = pca.iterations;
  double agreement = 0.0;
  if (self_predictions.size() == truths.size()) {
    agreement = static_cast<double>(concordance_balance(r.scores, self_predictions));
  }
  if (agreement == 0.0 && self_scores.size() == truths.size()) agreement = pearson(r.scores, self_scores);
  if (agreement < 0.0) {
    r.flipped = true;
    for (auto& s : r.scores) s = -s;
    for (auto& c : r.component) c = -c;
  }
  r.tau_c = kendall_tau_c(r.scores, truths);
  return r;
}

template <typename T>
RankResult zero_shot_rank(const GptModel<T>& model, std::span<const BootlegScore> scores,
                          std::span<const std::size_t> labels, std::string_view head_id) {
  if (scores.size() != labels.size()) throw DimensionError("zero_shot_rank: scores and labels differ in length");
  if (distinct_count(labels) < 2) throw UndefinedCorrelationError("rank: evaluation set holds a single class");
  const auto pred = predict(model, scores, head_id);
  std::vector<double> expected;
  for (const auto& row : pred.logits) expected.push_back(ordinal_expected(row));
  return rank_embeddings(pred.embeddings, pred.classes, expected, labels);
}

nlohmann::json to_json(const FoldMetrics& m) {
  nlohmann::json j = {{"fold", m.fold}, {"pieces", m.pieces}, {"acc0", m.acc0}, {"acc1", m.acc1}, {"mse", m.mse}};
  j["tau_c"] = m.tau_c ? nlohmann::json(*m.tau_c) : nlohmann::json(nullptr);
  return j;
}

namespace {

nlohmann::json stat_json(const FoldStat& s) { return {{"mean", s.mean}, {"std", s.std}}; }

FoldStat stat_from(const nlohmann::json& j) { return {j.at("mean").get<double>(), j.at("std").get<double>()}; }

}  // namespace

nlohmann::json to_json(const DatasetSummary& s) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : s.folds) folds.push_back(to_json(f));
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : s.predictions) {
    preds.push_back({{"piece_id", p.piece_id}, {"truth", p.truth}, {"predicted", p.predicted}, {"score", p.score}});
  }
  nlohmann::json j = {{"dataset", s.dataset_id}, {"num_classes", s.num_classes}, {"air", s.air},
                      {"acc0", stat_json(s.acc0)}, {"acc1", stat_json(s.acc1)}, {"mse", stat_json(s.mse)},
                      {"folds", folds},           {"predictions", preds}};
  j["tau_c"] = s.tau_c ? stat_json(*s.tau_c) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& s : r.datasets) ds.push_back(to_json(s));
  return {{"label", r.label}, {"datasets", ds}};
}

nlohmann::json to_json(const RankResult& r) {
  return {{"tau_c", r.tau_c}, {"flipped", r.flipped}, {"pca_iterations", r.pca_iterations}, {"scores", r.scores}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.label = j.value("label", std::string{});
    for (const auto& d : j.at("datasets")) {
      DatasetSummary s;
      s.dataset_id = d.at("dataset").get<std::string>();
      s.num_classes = d.at("num_classes").get<std::size_t>();
      s.air = d.value("air", 0.0);
      s.acc0 = stat_from(d.at("acc0"));
      s.acc1 = stat_from(d.at("acc1"));
      s.mse = stat_from(d.at("mse"));
      if (d.contains("tau_c") && !d.at("tau_c").is_null()) s.tau_c = stat_from(d.at("tau_c"));
      for (const auto& f : d.value("folds", nlohmann::json::array())) {
        FoldMetrics m;
        m.fold = f.at("fold").get<std::size_t>();
        m.pieces = f.value("pieces", std::size_t{0});
        m.acc0 = f.at("acc0").get<double>();
        m.acc1 = f.at("acc1").get<double>();
        m.mse = f.at("mse").get<double>();
        if (f.contains("tau_c") && !f.at("tau_c").is_null()) m.tau_c = f.at("tau_c").get<double>();
        s.folds.push_back(m);
      }
      for (const auto& p : d.value("predictions", nlohmann::json::array())) {
        s.predictions.push_back({p.at("piece_id").get<std::string>(), p.at("truth").get<std::size_t>(),
                                 p.at("predicted").get<std::size_t>(), p.value("score", 0.0)});
      }
      r.datasets.push_back(std::move(s));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report schema violation: ") + e.what());
  }
}

template FoldResult evaluate_model(const GptModel<float>&, std::span<const BootlegScore>, std::span<const std::size_t>,
                                   std::string_view, std::size_t);
template FoldResult evaluate_model(const GptModel<double>&, std::span<const BootlegScore>, std::span<const std::size_t>,
                                   std::string_view, std::size_t);
template RankResult zero_shot_rank(const GptModel<float>&, std::span<const BootlegScore>, std::span<const std::size_t>,
                                   std::string_view);
template RankResult zero_shot_rank(const GptModel<double>&, std::span<const BootlegScore>, std::span<const std::size_t>,
                                   std::string_view);

}  // namespace scoregrade
