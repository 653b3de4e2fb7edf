#include "scoregrade_cli/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "scoregrade/checkpoint.hpp"
#include "scoregrade/dataset.hpp"
#include "scoregrade/error.hpp"
#include "scoregrade/evaluation.hpp"
#include "scoregrade/pipeline.hpp"
#include "scoregrade_cli/tables.hpp"

namespace scoregrade::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointFile = "model.sgck";

// Shortest round-trip text, always with a decimal point.
std::string number(double v) { return json(v).dump(); }

fs::path default_out(std::string_view command) {
  const char* root = std::getenv(kOutEnv);
  return fs::path(root && *root ? root : "scoregrade-runs") / command;
}

fs::path resolve_out(const std::string& flag, std::string_view command) {
  return flag.empty() ? default_out(command) : fs::path(flag);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

// Every option of the subcommand with its effective value.
void write_run_json(const fs::path& dir, const CLI::App& sub, const std::vector<std::string>& args) {
  json resolved = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || name == "--help" || name == "-h") continue;
    std::string key = opt->get_single_name();
    if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_type_size() == 0) {
        resolved[key] = true;
      } else if (res.size() == 1) {
        resolved[key] = res.front();
      } else {
        resolved[key] = res;
      }
    } else if (opt->get_type_size() == 0) {
      resolved[key] = false;
    } else {
      resolved[key] = opt->get_default_str();
    }
  }
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  write_json(dir / "run.json", {{"command", sub.get_name()},
                                {"argv", args},
                                {"options", resolved},
                                {"timestamp", std::chrono::duration_cast<std::chrono::seconds>(now).count()}});
}

std::vector<BootlegScore> load_pretrain_corpus(const fs::path& path) {
  if (path.extension() == ".json") return load_scores(load_manifest(path));
  return load_corpus(path);
}

struct Log {
  std::ostream& err;
  bool quiet;
  template <typename... A>
  void operator()(const A&... parts) const {
    if (quiet) return;
    ((err << parts), ...);
    err << '\n';
  }
};

// ---------------------------------------------------------------------------

struct SynthArgs {
  SynthParams params;
  std::string out;
};

int run_synth(const SynthArgs& a, const CLI::App& sub, const std::vector<std::string>& argv, std::ostream& out,
              const Log& log) {
  const fs::path dir = resolve_out(a.out, "synth");
  const auto manifest = synth_generate(a.params, dir);
  write_run_json(dir, sub, argv);
  log("wrote ", manifest.pieces.size(), " pieces to ", dir.string());
  out << (dir / "manifest.json").string() << '\n';
  return kExitOk;
}

struct PretrainArgs {
  std::string corpus;
  std::string encoder = "fc";
  std::string preset = "desk";
  std::string policy = "interpolate";
  std::size_t context = 0;
  std::optional<double> dropout;
  PretrainOptions options;
  std::string out;
};

int run_pretrain(const PretrainArgs& a, const CLI::App& sub, const std::vector<std::string>& argv, std::ostream& out,
                 const Log& log) {
  const auto kind = parse_encoder_kind(a.encoder);
  GptConfig cfg = a.preset == "paper" ? GptConfig::paper(kind) : GptConfig::desk(kind);
  if (a.context > 0) cfg.context_len = a.context;
  if (a.dropout) cfg.dropout = *a.dropout;
  cfg.long_input_policy = parse_long_input_policy(a.policy);
  cfg.validate();

  const auto corpus = load_pretrain_corpus(a.corpus);
  if (corpus.empty()) throw ValidationError("corpus " + a.corpus + " holds no pieces");
  const fs::path dir = resolve_out(a.out, "pretrain");
  ensure_dir(dir);
  write_run_json(dir, sub, argv);

  auto model = build_model<float>(cfg, {}, a.options.seed);
  log("pretraining ", to_string(kind), " model, ", model.parameter_count(), " parameters, ", corpus.size(),
      " pieces");
  PretrainOptions opt = a.options;
  const std::size_t every = std::max<std::size_t>(1, opt.steps / 20);
  opt.on_step = [&](std::size_t step, double loss) {
    if (step % every == 0 || step + 1 == opt.steps) log("step ", step, " loss ", loss);
  };
  const auto result = pretrain(model, corpus, opt);
  save_checkpoint(model, dir / kCheckpointFile);
  write_json(dir / "loss_curve.json",
             {{"windows", result.windows}, {"epochs", result.epochs}, {"loss", result.loss_curve}});
  out << (dir / kCheckpointFile).string() << '\n';
  if (!result.loss_curve.empty()) {
    out << "initial_loss = " << number(result.loss_curve.front()) << '\n'
        << "final_loss = " << number(result.loss_curve.back()) << '\n';
  }
  return kExitOk;
}

struct FinetuneArgs {
  std::string checkpoint;
  std::vector<std::string> manifests;
  bool multitask = false;
  std::string sampler = "balanced";
  std::size_t folds = kDefaultFolds;
  std::size_t fold_limit = 0;
  std::string label;
  FinetuneOptions options;
  std::string out;
};

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<BootlegScore> scores;
  std::vector<CvSplit> splits;
};

int run_finetune(const FinetuneArgs& a, const CLI::App& sub, const std::vector<std::string>& argv, std::ostream& out,
                 const Log& log) {
  FinetuneOptions opt = a.options;
  opt.sampler = parse_sampler_mode(a.sampler);
  opt.mode = a.multitask ? FinetuneMode::kMulti : FinetuneMode::kSingle;

  const auto probe = load_checkpoint<float>(a.checkpoint);
  std::vector<LoadedDataset> data;
  std::set<std::string> names;
  for (const auto& path : a.manifests) {
    LoadedDataset d;
    d.manifest = load_manifest(path);
    if (!names.insert(d.manifest.name).second) throw ValidationError("two manifests share the name " + d.manifest.name);
    if (d.manifest.num_classes < 2) throw ValidationError("dataset " + d.manifest.name + " needs at least 2 classes");
    d.scores = load_scores(d.manifest);
    d.splits = make_cv_splits(d.manifest, opt.seed, a.folds);
    data.push_back(std::move(d));
  }

  const fs::path dir = resolve_out(a.out, "finetune");
  ensure_dir(dir);
  write_run_json(dir, sub, argv);
  for (const auto& d : data) {
    for (const auto& s : d.splits) {
      write_json(dir / "splits" / d.manifest.name / ("fold_" + std::to_string(s.fold_index) + ".json"),
                 split_to_json(s));
    }
  }

  std::vector<std::vector<std::size_t>> groups;
  if (a.multitask) {
    groups.emplace_back();
    for (std::size_t i = 0; i < data.size(); ++i) groups.back().push_back(i);
  } else {
    for (std::size_t i = 0; i < data.size(); ++i) groups.push_back({i});
  }

  std::ofstream history(dir / "history.jsonl", std::ios::trunc);
  if (!history) throw IoError("cannot write history.jsonl");
  std::vector<std::vector<FoldResult>> results(data.size());
  const std::size_t folds = a.fold_limit > 0 ? std::min(a.fold_limit, a.folds) : a.folds;
  for (std::size_t fold = 0; fold < folds; ++fold) {
    for (const auto& group : groups) {
      auto model = load_checkpoint<float>(a.checkpoint, probe.config().encoder);
      std::vector<FinetuneTask> tasks;
      std::string group_name;
      for (auto i : group) {
        const auto& d = data[i];
        const auto& split = d.splits[fold];
        if (!model.has_head(d.manifest.name)) {
          model.add_head({d.manifest.name, d.manifest.num_classes}, opt.seed + fold);
        }
        tasks.push_back({d.manifest.name, d.manifest.num_classes, select_pieces(d.manifest, d.scores, split.train),
                         select_pieces(d.manifest, d.scores, split.validation)});
        group_name += (group_name.empty() ? "" : "+") + d.manifest.name;
      }
      FinetuneOptions fold_opt = opt;
      fold_opt.seed = opt.seed + fold;
      const auto res = finetune(model, tasks, fold_opt, [&](const HistoryRecord& r) {
        auto j = history_to_json(r);
        j["fold"] = fold;
        history << j.dump() << '\n';
      });
      log("fold ", fold, " [", group_name, "] best epoch ", res.best_epoch, " of ", res.epochs_run,
          ", validation acc0 ", res.best_acc0, " mse ", res.best_mse);
      ensure_dir(dir / "models");
      save_checkpoint(model, dir / "models" / ("fold_" + std::to_string(fold) + "_" + group_name + ".sgck"));
      for (auto i : group) {
        const auto& d = data[i];
        const auto test = select_pieces(d.manifest, d.scores, d.splits[fold].test);
        results[i].push_back(evaluate_model(model, test.scores, test.labels, d.manifest.name, fold));
      }
    }
  }

  EvalReport report;
  report.label = a.label.empty() ? std::string(to_string(probe.config().encoder)) + (a.multitask ? " multi" : " single")
                                 : a.label;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto labels = data[i].manifest.labels();
    report.datasets.push_back(summarize_folds(data[i].manifest.name, data[i].manifest.num_classes,
                                              air(labels, data[i].manifest.num_classes), std::move(results[i])));
  }
  write_json(dir / "report.json", to_json(report));
  const auto tables = render_tables({report});
  std::ofstream(dir / "tables.txt", std::ios::trunc) << tables;
  out << tables;
  return kExitOk;
}

struct EvaluateArgs {
  std::string model;
  std::string predictions;
  std::string manifest;
  std::string split;
  std::string head;
  std::string out;
};

// {"piece_id": class, ...} or [{"piece_id": ..., "predicted": ...}, ...]
std::map<std::string, std::size_t> load_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::size_t> out;
  try {
    const auto j = json::parse(in);
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) out[k] = v.get<std::size_t>();
    } else {
      for (const auto& e : j) out[e.at("piece_id").get<std::string>()] = e.at("predicted").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw ValidationError("predictions file " + path.string() + ": " + e.what());
  }
  return out;
}

void print_fold(std::ostream& out, const FoldMetrics& m) {
  out << "pieces = " << m.pieces << '\n'
      << "acc0 = " << number(m.acc0) << '\n'
      << "acc1 = " << number(m.acc1) << '\n'
      << "mse = " << number(m.mse) << '\n';
  if (m.tau_c) out << "tau_c = " << number(*m.tau_c) << '\n';
}

int run_evaluate(const EvaluateArgs& a, const CLI::App& sub, const std::vector<std::string>& argv, std::ostream& out,
                 const Log& log) {
  const auto manifest = load_manifest(a.manifest);
  std::vector<std::string> ids;
  if (!a.split.empty()) {
    ids = load_split(a.split).test;
  } else {
    for (const auto& p : manifest.pieces) ids.push_back(p.piece_id);
  }
  const fs::path report_path = a.out.empty() ? default_out("evaluate") / "report.json" : fs::path(a.out);
  const std::string head = a.head.empty() ? manifest.name : a.head;

  FoldResult fold;
  if (!a.predictions.empty()) {
    const auto table = load_predictions(a.predictions);
    std::map<std::string, std::size_t> truth;
    for (const auto& p : manifest.pieces) truth[p.piece_id] = p.label;
    std::vector<std::size_t> preds, truths;
    for (const auto& id : ids) {
      auto t = truth.find(id);
      if (t == truth.end()) throw ValidationError("piece " + id + " is not in the manifest");
      auto p = table.find(id);
      if (p == table.end()) throw ValidationError("no prediction for piece " + id);
      preds.push_back(p->second);
      truths.push_back(t->second);
    }
    fold = evaluate_predictions(preds, truths, manifest.num_classes, {}, ids);
  } else {
    const auto model = load_checkpoint<float>(a.model);
    const auto scores = load_scores(manifest);
    const auto set = select_pieces(manifest, scores, ids);
    if (model.head(head).num_classes != manifest.num_classes) {
      throw ValidationError("head " + head + " does not match the class count of " + manifest.name);
    }
    fold = evaluate_model(model, set.scores, set.labels, head);
  }
  log("evaluated ", fold.metrics.pieces, " pieces of ", manifest.name);
  EvalReport report;
  report.label = a.predictions.empty() ? fs::path(a.model).stem().string() : "predictions";
  report.datasets.push_back(summarize_folds(manifest.name, manifest.num_classes,
                                            air(manifest.labels(), manifest.num_classes), {fold}));
  write_json(report_path, to_json(report));
  write_run_json(report_path.has_parent_path() ? report_path.parent_path() : fs::path("."), sub, argv);
  print_fold(out, report.datasets.front().folds.front());
  return kExitOk;
}

struct RankArgs {
  std::string model;
  std::string manifest;
  std::string head;
  std::string out;
};

int run_rank(const RankArgs& a, const CLI::App& sub, const std::vector<std::string>& argv, std::ostream& out,
             const Log& log) {
  const auto manifest = load_manifest(a.manifest);
  const auto model = load_checkpoint<float>(a.model);
  std::string head = a.head;
  if (head.empty()) {
    if (model.head_specs().size() != 1) throw ValidationError("model has several heads; pass --head");
    head = model.head_specs().front().dataset_id;
  }
  const auto scores = load_scores(manifest);
  const auto result = zero_shot_rank(model, scores, manifest.labels(), head);
  log("ranked ", scores.size(), " pieces of ", manifest.name, " through head ", head);
  const fs::path report_path = a.out.empty() ? default_out("rank") / "report.json" : fs::path(a.out);
  auto j = to_json(result);
  j["dataset"] = manifest.name;
  j["head"] = head;
  std::vector<std::string> ids;
  for (const auto& p : manifest.pieces) ids.push_back(p.piece_id);
  j["piece_ids"] = ids;
  write_json(report_path, j);
  write_run_json(report_path.has_parent_path() ? report_path.parent_path() : fs::path("."), sub, argv);
  out << "pieces = " << scores.size() << '\n' << "tau_c = " << number(result.tau_c) << '\n';
  return kExitOk;
}

struct StatsArgs {
  std::string manifest;
  std::string out;
};

int run_stats(const StatsArgs& a, const CLI::App& sub, const std::vector<std::string>& argv, std::ostream& out) {
  const auto report = validate_dataset(load_manifest(a.manifest));
  if (!a.out.empty()) {
    write_json(a.out, report_to_json(report));
    write_run_json(fs::path(a.out).has_parent_path() ? fs::path(a.out).parent_path() : fs::path("."), sub, argv);
  }
  out << "name = " << report.name << '\n'
      << "pieces = " << report.pieces << '\n'
      << "classes = " << report.num_classes << '\n'
      << "air = " << format_plain(report.air * 100.0) << "%\n"
      << "noteheads = " << report.noteheads << '\n'
      << "columns = " << report.total_columns << '\n'
      << "class_counts =";
  for (auto c : report.class_counts) out << ' ' << c;
  out << '\n' << "broken_files = " << report.broken_files.size() << '\n';
  for (const auto& f : report.broken_files) out << "  " << f << '\n';
  return kExitOk;
}

int run_tables(const std::vector<std::string>& files, std::ostream& out) {
  std::vector<EvalReport> reports;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw IoError("cannot open " + f);
    try {
      reports.push_back(report_from_json(json::parse(in)));
    } catch (const json::parse_error& e) {
      throw ValidationError(f + ": " + e.what());
    }
  }
  out << render_tables(reports);
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Difficulty estimation for piano sheet music from bootleg scores", "scoregrade"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML or INI file holding flag values");
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress logging");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic labeled corpus");
  s->add_option("--pieces", synth.params.n_pieces, "Number of pieces")->capture_default_str();
  s->add_option("--classes", synth.params.num_classes, "Number of difficulty classes")->capture_default_str();
  s->add_option("--seed", synth.params.seed, "Generator seed")->capture_default_str();
  s->add_option("--name", synth.params.name, "Dataset name")->capture_default_str();
  s->add_option("--w-min", synth.params.w_min, "Shortest piece in columns")->capture_default_str();
  s->add_option("--w-max", synth.params.w_max, "Longest piece in columns")->capture_default_str();
  s->add_option("--density-gain", synth.params.density_gain)->capture_default_str();
  s->add_option("--range-gain", synth.params.range_gain)->capture_default_str();
  s->add_option("--polyphony-gain", synth.params.polyphony_gain)->capture_default_str();
  s->add_option("--label-noise", synth.params.label_noise)->capture_default_str();
  s->add_option("--out", synth.out, "Output directory");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Next-step pretraining on a corpus of .bsc files");
  p->add_option("--corpus", pre.corpus, "Directory of .bsc files or a manifest")->required();
  p->add_option("--encoder", pre.encoder)->check(CLI::IsMember({"emb", "fc", "cnn"}))->capture_default_str();
  p->add_option("--preset", pre.preset)->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  p->add_option("--policy", pre.policy, "Long-input policy for classification")
      ->check(CLI::IsMember({"interpolate", "truncate", "chunk_mean"}))
      ->capture_default_str();
  p->add_option("--context", pre.context, "Override the preset context length");
  p->add_option("--dropout", pre.dropout, "Override the preset dropout rate");
  p->add_option("--steps", pre.options.steps)->capture_default_str();
  p->add_option("--batch", pre.options.batch_size, "Windows per step")->capture_default_str();
  p->add_option("--lr", pre.options.learning_rate)->capture_default_str();
  p->add_option("--clip", pre.options.clip_norm)->capture_default_str();
  p->add_option("--seed", pre.options.seed)->capture_default_str();
  p->add_option("--out", pre.out, "Output directory");

  FinetuneArgs fin;
  auto* f = app.add_subcommand("finetune", "Cross-validated fine-tuning of the classification tail");
  f->add_option("--checkpoint", fin.checkpoint, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
  f->add_option("--manifests", fin.manifests, "Comma-separated dataset manifests")->required()->delimiter(',');
  f->add_flag("--multitask", fin.multitask, "Train all datasets jointly with one head each");
  f->add_option("--sampler", fin.sampler)->check(CLI::IsMember({"balanced", "natural"}))->capture_default_str();
  f->add_option("--folds", fin.folds)->check(CLI::Range(3, 100))->capture_default_str();
  f->add_option("--fold-limit", fin.fold_limit, "Run only the first N folds (0 = all)")->capture_default_str();
  f->add_option("--batch", fin.options.batch_size)->capture_default_str();
  f->add_option("--lr", fin.options.learning_rate)->capture_default_str();
  f->add_option("--weight-decay", fin.options.weight_decay)->capture_default_str();
  f->add_option("--clip", fin.options.clip_norm)->capture_default_str();
  f->add_option("--epochs", fin.options.max_epochs)->capture_default_str();
  f->add_option("--patience", fin.options.patience)->capture_default_str();
  f->add_option("--seed", fin.options.seed)->capture_default_str();
  f->add_option("--label", fin.label, "Row label in the rendered tables");
  f->add_option("--out", fin.out, "Output directory");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a model or a predictions file on a dataset");
  auto* model_opt = e->add_option("--model", ev.model, "Fine-tuned checkpoint")->check(CLI::ExistingFile);
  auto* pred_opt = e->add_option("--predictions", ev.predictions, "JSON map piece_id -> class")->check(CLI::ExistingFile);
  model_opt->excludes(pred_opt);
  e->add_option("--manifest", ev.manifest)->required();
  e->add_option("--split", ev.split, "Split file; its test list is evaluated");
  e->add_option("--head", ev.head, "Head to decode with (default: manifest name)");
  e->add_option("--out", ev.out, "Report path");

  RankArgs rk;
  auto* r = app.add_subcommand("rank", "Zero-shot ranking by the first principal component of embeddings");
  r->add_option("--model", rk.model)->required()->check(CLI::ExistingFile);
  r->add_option("--manifest", rk.manifest)->required();
  r->add_option("--head", rk.head, "Head whose predictions orient the ranking");
  r->add_option("--out", rk.out, "Report path");

  StatsArgs st;
  auto* t = app.add_subcommand("stats", "Corpus statistics of a manifest");
  t->add_option("--manifest", st.manifest)->required();
  t->add_option("--out", st.out, "Optional JSON report path");

  std::vector<std::string> reports;
  auto* tb = app.add_subcommand("tables", "Render evaluation reports as text tables");
  tb->add_option("reports", reports, "Report JSON files")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (*e && ev.model.empty() && ev.predictions.empty()) {
      throw CLI::RequiredError("evaluate needs --model or --predictions");
    }
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  const Log log{err, quiet};
  try {
    if (*s) return run_synth(synth, *s, args, out, log);
    if (*p) return run_pretrain(pre, *p, args, out, log);
    if (*f) return run_finetune(fin, *f, args, out, log);
    if (*e) return run_evaluate(ev, *e, args, out, log);
    if (*r) return run_rank(rk, *r, args, out, log);
    if (*t) return run_stats(st, *t, args, out);
    if (*tb) return run_tables(reports, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

int dispatch(int argc, char** argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace scoregrade::cli
