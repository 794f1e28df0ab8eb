#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <sys/wait.h>

#include "cdsm/config.hpp"
#include "cdsm/pipeline.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace cdsm;
using cdsm::testing::TempDir;
using cdsm::testing::read_text;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string err;
};

// Runs the CLI with stdout discarded and stderr captured.
Result run(const std::string& args, const std::filesystem::path& err_file) {
  const std::string cmd = std::string(CDSM_CLI_PATH) + " " + args + " >/dev/null 2>" + err_file.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_text(err_file);
  return r;
}

std::filesystem::path tiny_config(const TempDir& dir) {
  RunConfig c;
  c.data.num_nodes = 200;
  c.data.num_topics = 4;
  c.data.intra_p = 0.2;
  c.data.inter_p = 0.01;
  c.train_edges = 100;
  c.valid_edges = 20;
  c.test_edges = 20;
  c.num_negatives = 9;
  c.dim = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 32;
  c.matcher.steps = 15;
  c.matcher.batch_size = 8;
  c.selector.steps = 15;
  c.selector.batch_size = 16;
  c.curve_ks = {0, 5};
  c.cost_tasks = 10;
  c.compare_truncation = false;
  const auto p = dir / "tiny.json";
  cdsm::testing::write_text(p, to_json(c).dump(2));
  return p;
}

std::map<std::string, std::string> artifact_hashes(const std::filesystem::path& run_dir) {
  std::map<std::string, std::string> out;
  const auto m = Manifest::open(run_dir);
  for (const auto& a : m.artifacts()) out[a.path] = a.sha256;
  return out;
}

}  // namespace

TEST(Cli, GenerateDataWritesDatasetAndManifest) {
  TempDir dir;
  const auto cfg = tiny_config(dir);
  auto r = run("generate-data --config " + cfg.string() + " --out " + (dir / "r1").string(), dir / "err");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"nodes.jsonl", "edges.tsv", "ground_truth.jsonl", "splits.jsonl", "manifest.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / "r1" / f)) << f;
  }
  auto m = json::parse(read_text(dir / "r1" / "manifest.json"));
  EXPECT_TRUE(m.contains("run_id"));
  EXPECT_EQ(m["config"]["data"]["num_nodes"], 200);
}

TEST(Cli, MissingCheckpointNamesTheProducer) {
  TempDir dir;
  const auto cfg = tiny_config(dir);
  const std::string base = " --config " + cfg.string() + " --out " + (dir / "r").string();
  ASSERT_EQ(run("generate-data" + base, dir / "err").code, 0);
  auto r = run("evaluate" + base, dir / "err");
  EXPECT_EQ(r.code, 3);
  auto rec = json::parse(r.err);
  EXPECT_EQ(rec["error"], "dependency");
  EXPECT_EQ(rec["producer"], "train-matcher");

  auto before = read_text(dir / "r" / "nodes.jsonl");
  ASSERT_EQ(run("train-matcher" + base, dir / "err").code, 0);
  EXPECT_EQ(read_text(dir / "r" / "nodes.jsonl"), before);
  ASSERT_EQ(run("annotate" + base, dir / "err").code, 0);
  std::filesystem::remove(dir / "r" / "annotations.jsonl");
  r = run("train-selector" + base, dir / "err");
  EXPECT_EQ(r.code, 3);
  rec = json::parse(r.err);
  EXPECT_EQ(rec["producer"], "annotate");
  EXPECT_NE(rec["message"].get<std::string>().find("train-selector"), std::string::npos);
}

TEST(Cli, DataStageMissingNamesGenerateData) {
  TempDir dir;
  const auto cfg = tiny_config(dir);
  auto r = run("train-matcher --config " + cfg.string() + " --out " + (dir / "empty").string(), dir / "err");
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(json::parse(r.err)["producer"], "generate-data");
}

TEST(Cli, UsageErrors) {
  TempDir dir;
  const auto cfg = tiny_config(dir);
  auto r = run("generate-data --config " + cfg.string() + " --set no.such.key=1 --out " + (dir / "r").string(),
               dir / "err");
  EXPECT_EQ(r.code, 2);
  auto rec = json::parse(r.err);
  EXPECT_EQ(rec["error"], "usage");
  EXPECT_NE(rec["message"].get<std::string>().find("no.such.key"), std::string::npos);
  EXPECT_EQ(run("frobnicate", dir / "err").code, 2);
  EXPECT_EQ(run("generate-data --config " + (dir / "missing.json").string(), dir / "err").code != 0, true);
}

TEST(Cli, AllIsReproducible) {
  TempDir dir;
  const auto cfg = tiny_config(dir);
  for (const char* d : {"a", "b"}) {
    auto r = run("all --config " + cfg.string() + " --set seed=7 --out " + (dir / d).string(), dir / "err");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  auto ha = artifact_hashes(dir / "a"), hb = artifact_hashes(dir / "b");
  EXPECT_EQ(ha, hb);
  for (const char* f : {"matcher.ckpt", "annotations.jsonl", "selector.ckpt", "metrics.json", "curves.csv",
                        "agreement.json", "agreement.svg"}) {
    EXPECT_TRUE(ha.contains(f)) << f;
  }
  auto m = json::parse(read_text(dir / "a" / "manifest.json"));
  EXPECT_EQ(m["config"]["seed"], 7);
}

TEST(Cli, CostReport) {
  TempDir dir;
  const auto cfg = tiny_config(dir);
  const std::string base = " --config " + cfg.string() + " --out " + (dir / "r").string();
  for (const char* s : {"generate-data", "train-matcher", "annotate", "train-selector", "cost"}) {
    auto r = run(s + base, dir / "err");
    ASSERT_EQ(r.code, 0) << s << ": " << r.err;
  }
  auto j = json::parse(read_text(dir / "r" / "cost.json"));
  EXPECT_EQ(j["k"], 5);
  EXPECT_EQ(j["measured_tasks"], 10);
}
