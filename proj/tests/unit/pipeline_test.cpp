#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "oracles.hpp"
#include "scoregrade/error.hpp"
#include "scoregrade/metrics.hpp"
#include "scoregrade/pipeline.hpp"

namespace scoregrade {
namespace {

DatasetManifest manifest_with(const std::vector<std::size_t>& counts, const std::string& name = "m") {
  DatasetManifest m;
  m.name = name;
  m.num_classes = counts.size();
  std::size_t id = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::size_t i = 0; i < counts[c]; ++i, ++id) {
      m.pieces.push_back({"p" + std::to_string(id), "p" + std::to_string(id) + ".bsc", c, std::nullopt});
    }
  }
  return m;
}

TEST(CvSplits, DivisibleCaseIsSixtyTwentyTwenty) {
  const auto m = manifest_with({20, 20, 20, 20, 20});
  const auto splits = make_cv_splits(m, 1);
  ASSERT_EQ(splits.size(), 5u);
  for (const auto& s : splits) {
    EXPECT_EQ(s.train.size(), 60u);
    EXPECT_EQ(s.validation.size(), 20u);
    EXPECT_EQ(s.test.size(), 20u);
  }
}

// Set-cover oracle over arbitrary class sizes.
TEST(CvSplits, PartitionAndStratification) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::size_t> counts(rng.between(2, 9));
    for (auto& c : counts) c = rng.below(25);
    counts[0] = std::max<std::size_t>(counts[0], 5);
    const auto m = manifest_with(counts);
    const auto splits = make_cv_splits(m, rng.next_u64());
    std::multiset<std::string> tests;
    for (std::size_t f = 0; f < 5; ++f) {
      const auto& s = splits[f];
      EXPECT_EQ(s.fold_index, f);
      std::set<std::string> all;
      for (const auto* part : {&s.train, &s.validation, &s.test}) all.insert(part->begin(), part->end());
      EXPECT_EQ(all.size(), m.pieces.size());
      EXPECT_EQ(s.train.size() + s.validation.size() + s.test.size(), m.pieces.size());
      EXPECT_EQ(s.validation, splits[(f + 1) % 5].test);
      tests.insert(s.test.begin(), s.test.end());
      // Per class, a stratum holds floor or ceil of count / 5.
      for (std::size_t c = 0; c < counts.size(); ++c) {
        std::size_t n = 0;
        for (const auto& id : s.test) n += m.pieces[std::stoul(id.substr(1))].label == c;
        EXPECT_GE(n, counts[c] / 5);
        EXPECT_LE(n, (counts[c] + 4) / 5);
      }
    }
    EXPECT_EQ(tests.size(), m.pieces.size());
    EXPECT_EQ(std::set<std::string>(tests.begin(), tests.end()).size(), m.pieces.size());
  }
}

TEST(CvSplits, DeterministicPerSeed) {
  const auto m = manifest_with({7, 9, 4});
  EXPECT_EQ(make_cv_splits(m, 3), make_cv_splits(m, 3));
  EXPECT_NE(make_cv_splits(m, 3), make_cv_splits(m, 4));
}

TEST(CvSplits, Errors) {
  EXPECT_THROW(make_cv_splits(manifest_with({2, 2}), 1), ValidationError);
  EXPECT_THROW(make_cv_splits(manifest_with({10}), 1, 2), ContractError);
}

TEST(CvSplits, JsonRoundTrip) {
  const auto dir = testing::scratch_dir("splits");
  const auto s = make_cv_splits(manifest_with({5, 5}), 1)[2];
  save_split(s, dir / "f.json");
  EXPECT_EQ(load_split(dir / "f.json"), s);
}

double class_one_share(SamplerMode mode, std::uint64_t seed) {
  std::vector<std::size_t> labels(90, 0);
  labels.insert(labels.end(), 10, 1);
  Rng rng(seed);
  std::size_t ones = 0, draws = 0;
  while (draws < 1000) {
    for (const auto& batch : sample_epoch(labels, 10, mode, rng)) {
      for (auto i : batch) {
        if (draws == 1000) break;
        ones += labels[i];
        ++draws;
      }
    }
  }
  return static_cast<double>(ones) / 1000.0;
}

TEST(Sampler, BalancedFrequency) { EXPECT_NEAR(class_one_share(SamplerMode::kBalanced, 5), 0.5, 0.05); }

TEST(Sampler, NaturalFrequency) { EXPECT_NEAR(1.0 - class_one_share(SamplerMode::kNatural, 5), 0.9, 0.03); }

TEST(Sampler, EpochShape) {
  Rng rng(1);
  const std::vector<std::size_t> labels(10, 2);
  for (auto mode : {SamplerMode::kBalanced, SamplerMode::kNatural}) {
    const auto epoch = sample_epoch(labels, 4, mode, rng);
    ASSERT_EQ(epoch.size(), 3u);
    EXPECT_EQ(epoch[2].size(), 2u);
    for (const auto& b : epoch) {
      for (auto i : b) EXPECT_EQ(labels[i], 2u);
    }
  }
  auto natural = sample_epoch(labels, 3, SamplerMode::kNatural, rng);
  std::vector<std::size_t> flat;
  for (const auto& b : natural) flat.insert(flat.end(), b.begin(), b.end());
  std::sort(flat.begin(), flat.end());
  for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_EQ(flat[i], i);
  EXPECT_THROW(sample_epoch({}, 3, SamplerMode::kNatural, rng), ContractError);
  EXPECT_EQ(parse_sampler_mode(to_string(SamplerMode::kNatural)), SamplerMode::kNatural);
}

TEST(EarlyStop, MonotoneNeverStops) {
  EarlyStopState s;
  for (std::size_t e = 0; e < 100; ++e) {
    const auto d = early_stop_update(s, 0.001 * static_cast<double>(e), 1.0, e);
    EXPECT_TRUE(d.improved);
    EXPECT_FALSE(d.stop);
  }
}

TEST(EarlyStop, ConstantStopsAfterPatience) {
  EarlyStopState s;
  std::size_t stopped_at = 0;
  for (std::size_t e = 0; e < 50; ++e) {
    if (early_stop_update(s, 0.5, 1.0, e).stop) {
      stopped_at = e;
      break;
    }
  }
  EXPECT_EQ(stopped_at, 10u);
  EXPECT_EQ(s.best_epoch, 0u);
}

TEST(EarlyStop, TieWithLowerMseImproves) {
  EarlyStopState s;
  early_stop_update(s, 0.5, 1.0, 0);
  EXPECT_TRUE(early_stop_update(s, 0.5, 0.9, 1).improved);
  EXPECT_FALSE(early_stop_update(s, 0.5, 0.9, 2).improved);
  EXPECT_FALSE(early_stop_update(s, 0.4, 0.1, 3).improved);
  EXPECT_EQ(s.best_epoch, 1u);
  EXPECT_EQ(s.epochs_without_improvement, 2u);
}

TEST(LmWindows, SplitWithinPieces) {
  Rng rng(3);
  std::vector<BootlegScore> corpus{testing::random_score(rng, 10), testing::random_score(rng, 9),
                                   testing::random_score(rng, 1)};
  const auto fc = make_lm_windows(corpus, EncoderKind::kFc, 4);
  std::vector<std::size_t> lengths;
  for (const auto& w : fc) lengths.push_back(w.length(EncoderKind::kFc));
  EXPECT_EQ(lengths, (std::vector<std::size_t>{4, 4, 2, 4, 4}));
  const auto emb = make_lm_windows(corpus, EncoderKind::kEmb, 32);
  std::size_t total = 0;
  for (const auto& w : emb) total += w.length(EncoderKind::kEmb);
  EXPECT_EQ(total, 8u * 20u);
}

GptConfig tiny() {
  GptConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.context_len = 16;
  c.encoder = EncoderKind::kFc;
  c.dropout = 0.0;
  return c;
}

TEST(Pretrain, MemorizesOneWindow) {
  Rng rng(4);
  const std::vector<BootlegScore> corpus{testing::random_score(rng, 16, 0.2)};
  auto m = build_model<double>(tiny(), {}, 5);
  PretrainOptions o;
  o.steps = 200;
  o.batch_size = 1;
  o.learning_rate = 1e-2;
  const auto r = pretrain(m, corpus, o);
  ASSERT_EQ(r.loss_curve.size(), 200u);
  EXPECT_EQ(r.windows, 1u);
  EXPECT_LT(r.loss_curve.back(), 0.1 * r.loss_curve.front());
}

TEST(Pretrain, ZeroHeadStartsAtLn2AndIsDeterministic) {
  Rng rng(6);
  std::vector<BootlegScore> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back(testing::random_score(rng, 20, 0.1));
  PretrainOptions o;
  o.steps = 15;
  o.batch_size = 2;
  o.seed = 9;
  auto a = build_model<float>(tiny(), {}, 7);
  for (auto& v : a.lm_weight.mutable_data()) v = 0;
  auto b = a.clone();
  std::size_t calls = 0;
  o.on_step = [&](std::size_t, double) { ++calls; };
  const auto ra = pretrain(a, corpus, o);
  const auto rb = pretrain(b, corpus, o);
  EXPECT_NEAR(ra.loss_curve.front(), std::numbers::ln2, 1e-4);
  EXPECT_EQ(ra.loss_curve, rb.loss_curve);
  EXPECT_EQ(calls, 30u);
  for (const auto& p : a.parameters()) EXPECT_FALSE(p.tensor.requires_grad());
}

struct Toy {
  DatasetManifest manifest;
  std::vector<BootlegScore> scores;
};

Toy toy_set(const std::string& name, std::size_t n, std::size_t k, std::uint64_t seed) {
  SynthParams p;
  p.name = name;
  p.n_pieces = n;
  p.num_classes = k;
  p.seed = seed;
  p.w_min = 8;
  p.w_max = 14;
  Toy t;
  t.manifest.name = name;
  t.manifest.num_classes = k;
  for (auto& s : synth_pieces(p)) {
    t.manifest.pieces.push_back({s.score.piece_id, s.score.piece_id + ".bsc", s.label, std::nullopt});
    t.scores.push_back(std::move(s.score));
  }
  return t;
}

FinetuneTask task_of(const Toy& t) {
  FinetuneTask task;
  task.dataset_id = t.manifest.name;
  task.num_classes = t.manifest.num_classes;
  std::vector<std::string> ids;
  for (const auto& p : t.manifest.pieces) ids.push_back(p.piece_id);
  task.train = select_pieces(t.manifest, t.scores, ids);
  return task;
}

std::vector<std::vector<double>> body_values(const GptModel<double>& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.pretrain_parameters()) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

TEST(Finetune, SeparableSetIsLearnedWithFrozenBody) {
  const auto toy = toy_set("a", 60, 3, 1);
  auto m = build_model<double>(tiny(), {{"a", 3}}, 2);
  PretrainOptions po;
  po.steps = 300;
  po.learning_rate = 3e-3;
  pretrain(m, toy.scores, po);
  const auto body = body_values(m);
  FinetuneOptions o;
  o.learning_rate = 1e-2;
  o.clip_norm = 1.0;
  o.batch_size = 8;
  o.max_epochs = 50;
  o.patience = 50;
  const auto r = finetune(m, {task_of(toy)}, o);
  double best_train = 0;
  for (const auto& h : r.history) {
    if (h.split == "train") best_train = std::max(best_train, h.acc0);
  }
  EXPECT_GE(best_train, 0.9);
  EXPECT_EQ(body_values(m), body);
  EXPECT_EQ(r.epochs_run, 50u);
}

TEST(Finetune, MultiWithOneTaskEqualsSingle) {
  const auto toy = toy_set("a", 30, 3, 3);
  FinetuneOptions o;
  o.learning_rate = 1e-3;
  o.batch_size = 8;
  o.max_epochs = 4;
  o.seed = 5;
  auto single = build_model<double>(tiny(), {{"a", 3}}, 4);
  auto multi = single.clone();
  const auto rs = finetune(single, {task_of(toy)}, o);
  o.mode = FinetuneMode::kMulti;
  const auto rm = finetune(multi, {task_of(toy)}, o);
  ASSERT_EQ(rs.history.size(), rm.history.size());
  for (std::size_t i = 0; i < rs.history.size(); ++i) EXPECT_EQ(rs.history[i].loss, rm.history[i].loss);
  for (std::size_t i = 0; i < single.parameters().size(); ++i) {
    const auto& a = single.parameters()[i].tensor;
    const auto& b = multi.parameters()[i].tensor;
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin())) << single.parameters()[i].name;
  }
}

TEST(Finetune, OtherHeadsGetNoGradient) {
  const auto a = toy_set("a", 20, 3, 6);
  const auto b = toy_set("b", 12, 4, 7);
  auto m = build_model<double>(tiny(), {{"a", 3}, {"b", 4}}, 8);
  const auto body = body_values(m);
  const auto head_b = std::vector<double>(m.head("b").weight.data().begin(), m.head("b").weight.data().end());
  FinetuneOptions o;
  o.mode = FinetuneMode::kMulti;
  o.batch_size = 8;
  o.max_epochs = 1;
  o.learning_rate = 1e-3;
  std::vector<std::size_t> order;
  o.on_gradients = [&](std::size_t d) {
    order.push_back(d);
    const auto& other = m.head(d == 0 ? "b" : "a");
    for (const auto* t : {&other.weight, &other.bias}) {
      for (double g : t->grad()) EXPECT_EQ(g, 0.0);
    }
    for (const auto& p : m.pretrain_parameters()) EXPECT_FALSE(p.has_grad());
  };
  finetune(m, {task_of(a), task_of(b)}, o);
  EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 0, 1, 0}));
  EXPECT_EQ(body_values(m), body);
  EXPECT_NE(std::vector<double>(m.head("b").weight.data().begin(), m.head("b").weight.data().end()), head_b);
  EXPECT_THROW(finetune(m, {task_of(a), task_of(b)}, FinetuneOptions{}), ContractError);
}

TEST(Finetune, CachedAndRecomputedContextsAgree) {
  const auto toy = toy_set("a", 16, 3, 9);
  FinetuneOptions o;
  o.learning_rate = 1e-3;
  o.batch_size = 4;
  o.max_epochs = 2;
  auto cached = build_model<double>(tiny(), {{"a", 3}}, 10);
  auto recomputed = cached.clone();
  const auto rc = finetune(cached, {task_of(toy)}, o);
  o.context_budget_bytes = 0;
  const auto rr = finetune(recomputed, {task_of(toy)}, o);
  ASSERT_EQ(rc.history.size(), rr.history.size());
  for (std::size_t i = 0; i < rc.history.size(); ++i) EXPECT_EQ(rc.history[i].loss, rr.history[i].loss);
}

TEST(Predict, MatchesFullForward) {
  const auto toy = toy_set("a", 9, 3, 11);
  auto m = build_model<double>(tiny(), {{"a", 3}}, 12);
  const auto p = predict(m, toy.scores, "a", 4);
  ASSERT_EQ(p.classes.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) {
    const auto full = forward_classify(m, toy.scores[i], "a");
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(p.logits[i][j], full.logits.at(0, j), 1e-10);
    EXPECT_EQ(p.embeddings[i].size(), 16u);
  }
}

}  // namespace
}  // namespace scoregrade
