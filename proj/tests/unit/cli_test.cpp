#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "scoregrade/dataset.hpp"
#include "scoregrade_cli/cli.hpp"
#include "scoregrade_cli/tables.hpp"

namespace scoregrade {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

TEST(Cli, SynthWritesPiecesAndManifest) {
  const auto dir = testing::scratch_dir("cli_synth");
  const auto r = run({"-q", "synth", "--pieces", "10", "--classes", "3", "--seed", "7", "--out", dir.string()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(count_ext(dir, ".bsc"), 10u);
  const auto m = load_manifest(dir / "manifest.json");
  EXPECT_EQ(m.pieces.size(), 10u);
  EXPECT_EQ(m.num_classes, 3u);
  EXPECT_TRUE(fs::exists(dir / "run.json"));
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  EXPECT_EQ(run({"synth", "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"pretrain", "--corpus", "x", "--encoder", "rnn"}).code, cli::kExitUsage);
  const auto dir = testing::scratch_dir("cli_usage");
  EXPECT_EQ(run({"-q", "synth", "--pieces", "0", "--out", dir.string()}).code, cli::kExitData);
  EXPECT_EQ(run({"-q", "stats", "--manifest", (dir / "none.json").string()}).code, cli::kExitData);
}

TEST(Cli, EvaluateOraclePredictions) {
  const auto dir = testing::scratch_dir("cli_eval");
  ASSERT_EQ(run({"-q", "synth", "--pieces", "12", "--classes", "4", "--out", dir.string()}).code, 0);
  const auto m = load_manifest(dir / "manifest.json");
  nlohmann::json preds;
  for (const auto& p : m.pieces) preds[p.piece_id] = p.label;
  std::ofstream(dir / "preds.json") << preds.dump();
  const auto r = run({"-q", "evaluate", "--predictions", (dir / "preds.json").string(), "--manifest",
                      (dir / "manifest.json").string(), "--out", (dir / "report.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("acc0 = 1.0\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("mse = 0.0\n"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "report.json"));
}

TEST(Cli, StatsReportsCounts) {
  const auto dir = testing::scratch_dir("cli_stats");
  ASSERT_EQ(run({"-q", "synth", "--pieces", "9", "--classes", "3", "--out", dir.string()}).code, 0);
  const auto r = run({"-q", "stats", "--manifest", (dir / "manifest.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("pieces = 9"), std::string::npos);
  EXPECT_NE(r.out.find("air = 100.0%"), std::string::npos) << r.out;
}

TEST(Tables, PercentFormatting) {
  EXPECT_EQ(cli::format_percent(0.40335), "40.3");
  EXPECT_EQ(cli::format_percent(1.0), "100.0");
  EXPECT_EQ(cli::format_plain(1.33), "1.3");
}

EvalReport report(const std::string& label, double acc0, double mse) {
  DatasetSummary s;
  s.dataset_id = "cipi";
  s.num_classes = 9;
  s.acc0 = {acc0, 0.01};
  s.acc1 = {0.8, 0.02};
  s.mse = {mse, 0.1};
  return {label, {s}};
}

TEST(Tables, SingleReportIsBest) {
  const auto text = cli::render_tables({report("fc", 0.40335, 1.33)});
  EXPECT_NE(text.find("40.3(1.0)*"), std::string::npos) << text;
  EXPECT_NE(text.find("1.3(0.1)*"), std::string::npos) << text;
}

TEST(Tables, DirectionOfMerit) {
  const auto text = cli::render_tables({report("a", 0.30, 1.0), report("b", 0.40, 2.0)});
  EXPECT_NE(text.find("40.0(1.0)*"), std::string::npos) << text;
  EXPECT_EQ(text.find("30.0(1.0)*"), std::string::npos) << text;
  EXPECT_NE(text.find("1.0(0.1)*"), std::string::npos) << text;
  EXPECT_EQ(text.find("2.0(0.1)*"), std::string::npos) << text;
}

TEST(Cli, FullChainEmitsArtifacts) {
  const auto dir = testing::scratch_dir("cli_chain");
  const auto data = (dir / "data").string();
  ASSERT_EQ(run({"-q", "synth", "--pieces", "25", "--classes", "3", "--w-min", "8", "--w-max", "16", "--out", data})
                .code,
            0);
  const auto pre = (dir / "pre").string();
  const auto p = run({"-q", "pretrain", "--corpus", data, "--encoder", "fc", "--steps", "3", "--batch", "2",
                      "--context", "16", "--out", pre});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("initial_loss = "), std::string::npos);
  ASSERT_TRUE(fs::exists(fs::path(pre) / "model.sgck"));
  EXPECT_TRUE(fs::exists(fs::path(pre) / "loss_curve.json"));

  const auto ft = (dir / "ft").string();
  const auto f = run({"-q", "finetune", "--checkpoint", (fs::path(pre) / "model.sgck").string(), "--manifests",
                      (fs::path(data) / "manifest.json").string(), "--fold-limit", "1", "--epochs", "2", "--batch",
                      "8", "--lr", "1e-3", "--out", ft});
  ASSERT_EQ(f.code, 0) << f.err;
  for (const char* name : {"history.jsonl", "report.json", "tables.txt", "run.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(ft) / name)) << name;
  }
  EXPECT_EQ(count_ext(fs::path(ft) / "splits", ".json"), 5u);
  EXPECT_EQ(count_ext(fs::path(ft) / "models", ".sgck"), 1u);

  fs::path model;
  for (const auto& e : fs::directory_iterator(fs::path(ft) / "models")) model = e.path();
  const auto e = run({"-q", "evaluate", "--model", model.string(), "--manifest",
                      (fs::path(data) / "manifest.json").string(), "--split",
                      (fs::path(ft) / "splits" / "synth" / "fold_0.json").string(), "--out",
                      (dir / "eval" / "report.json").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("acc0 = "), std::string::npos);

  const auto rk = run({"-q", "rank", "--model", model.string(), "--manifest",
                       (fs::path(data) / "manifest.json").string(), "--out", (dir / "rank.json").string()});
  ASSERT_EQ(rk.code, 0) << rk.err;
  EXPECT_NE(rk.out.find("tau_c = "), std::string::npos);

  const auto t = run({"tables", (fs::path(ft) / "report.json").string(), (dir / "eval" / "report.json").string()});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("Acc0 (%)"), std::string::npos) << t.out;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Cli, SameArgumentsGiveIdenticalArtifacts) {
  const auto dir = testing::scratch_dir("cli_repeat");
  const auto data = (dir / "data").string();
  ASSERT_EQ(run({"-q", "synth", "--pieces", "20", "--classes", "3", "--w-min", "8", "--w-max", "12", "--out", data})
                .code,
            0);
  for (const char* tag : {"a", "b"}) {
    const auto out = dir / tag;
    ASSERT_EQ(run({"-q", "pretrain", "--corpus", data, "--encoder", "emb", "--steps", "2", "--batch", "2",
                   "--context", "32", "--seed", "3", "--out", (out / "pre").string()})
                  .code,
              0);
    ASSERT_EQ(run({"-q", "finetune", "--checkpoint", (out / "pre" / "model.sgck").string(), "--manifests",
                   (fs::path(data) / "manifest.json").string(), "--fold-limit", "1", "--epochs", "2", "--batch", "4",
                   "--seed", "3", "--out", (out / "ft").string()})
                  .code,
              0);
  }
  for (const char* rel : {"pre/model.sgck", "pre/loss_curve.json", "ft/report.json", "ft/history.jsonl",
                          "ft/tables.txt", "ft/splits/synth/fold_0.json"}) {
    const auto a = file_bytes(dir / "a" / rel);
    EXPECT_FALSE(a.empty()) << rel;
    EXPECT_EQ(a, file_bytes(dir / "b" / rel)) << rel;
  }
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto dir = testing::scratch_dir("cli_env");
  ::setenv(cli::kOutEnv, dir.string().c_str(), 1);
  const auto r = run({"-q", "synth", "--pieces", "3"});
  ::unsetenv(cli::kOutEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_ext(dir, ".bsc"), 3u);
}

TEST(Cli, ConfigFileSuppliesFlags) {
  const auto dir = testing::scratch_dir("cli_config");
  std::ofstream(dir / "run.toml") << "[synth]\npieces = 4\nclasses = 2\nout = \"" << (dir / "d").string() << "\"\n";
  const auto r = run({"-q", "--config", (dir / "run.toml").string(), "synth"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_ext(dir / "d", ".bsc"), 4u);
}

}  // namespace
}  // namespace scoregrade
