#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "steerlab/cli/app.hpp"
#include "steerlab/cli/pipeline.hpp"
#include "steerlab/error.hpp"
#include "test_util.hpp"

namespace steerlab::cli {
namespace {

using testing::TempDir;

int run_args(std::vector<std::string> args) {
  args.insert(args.begin(), "steerlab");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Tiny corpus and untrained model shared by the pipeline tests.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    GenDataCommand g;
    g.spec.train_sets = 4;
    g.spec.probe_sets = 2;
    g.spec.eval_sets = 2;
    g.spec.d_model = 16;
    g.spec.n_image_tokens = 2;
    g.out_dir = corpus();
    cmd_gen_data(g);
    InitModelCommand m;
    m.config = config();
    m.out = model();
    cmd_init_model(m);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static tinylmm::ModelConfig config() {
    tinylmm::ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.n_image_tokens = 2;
    return c;
  }
  static fs::path corpus() { return dir_->path() / "corpus"; }
  static fs::path model() { return dir_->path() / "model.bin"; }
  static fs::path path(const std::string& name) { return dir_->path() / name; }

  static GenerateCommand generate_command(const std::string& out) {
    GenerateCommand g;
    g.model = model();
    g.corpus_dir = corpus();
    g.max_new_tokens = 6;
    g.out = path(out);
    return g;
  }

  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

TEST(CliArgs, ExitCodes) {
  TempDir dir("args");
  EXPECT_EQ(run_args({"init-model", "--heads", "5", "-o", (dir.path() / "m.bin").string()}), 2);
  EXPECT_EQ(run_args({"init-model"}), 2);
  EXPECT_EQ(run_args({"no-such-command"}), 2);
  EXPECT_EQ(run_args({"--help"}), 0);
  EXPECT_EQ(run_args({"generate", "--model", (dir.path() / "missing.bin").string(), "--corpus",
                      dir.path().string(), "-o", (dir.path() / "g.jsonl").string()}),
            2);
}

TEST(CliArgs, InitModelIsDeterministicAndWritesRunRecord) {
  TempDir dir("init");
  const auto a = dir.path() / "a.bin", b = dir.path() / "b.bin";
  ASSERT_EQ(run_args({"init-model", "--d-model", "16", "--heads", "2", "-o", a.string()}), 0);
  ASSERT_EQ(run_args({"init-model", "--d-model", "16", "--heads", "2", "-o", b.string()}), 0);
  EXPECT_EQ(slurp(a), slurp(b));
  const auto run = nlohmann::json::parse(slurp(dir.path() / "a.bin.run.json"));
  EXPECT_EQ(run.at("command"), "init-model");
  EXPECT_TRUE(run.contains("generated_at"));
  EXPECT_EQ(run.at("config").at("config").at("d_model"), 16);
}

TEST(CliArgs, ConfigFileSuppliesOptions) {
  TempDir dir("conf");
  const auto out = dir.path() / "m.bin";
  std::ofstream(dir.path() / "c.toml") << "[init-model]\nd-model = 8\nheads = 2\nout = \"" << out.string() << "\"\n";
  ASSERT_EQ(run_args({"--config", (dir.path() / "c.toml").string(), "init-model"}), 0);
  EXPECT_EQ(tinylmm::load_params(out).config.d_model, 8);
}

TEST(CliArgs, CorruptModelIsFormatError) {
  TempDir dir("corrupt");
  const auto m = dir.path() / "m.bin";
  ASSERT_EQ(run_args({"init-model", "--d-model", "16", "--heads", "2", "-o", m.string()}), 0);
  std::string bytes = slurp(m);
  bytes[bytes.size() / 2] ^= 0x5a;
  std::ofstream(m, std::ios::binary) << bytes;
  ASSERT_EQ(run_args({"gen-data", "--train-sets", "2", "--probe-sets", "1", "--eval-sets", "1", "-o",
                      (dir.path() / "c").string()}),
            0);
  EXPECT_EQ(run_args({"generate", "--model", m.string(), "--corpus", (dir.path() / "c").string(), "-o",
                      (dir.path() / "g.jsonl").string()}),
            3);
}

TEST_F(CliPipeline, ModelCorpusMismatchIsConfigError) {
  TempDir dir("mismatch");
  const auto m = dir.path() / "m.bin";
  ASSERT_EQ(run_args({"init-model", "--d-model", "32", "--heads", "2", "--image-tokens", "2", "-o", m.string()}), 0);
  EXPECT_EQ(run_args({"generate", "--model", m.string(), "--corpus", corpus().string(), "-o",
                      (dir.path() / "g.jsonl").string()}),
            2);
}

TEST_F(CliPipeline, ZeroEpsilonGradientDirectionIsDegenerate) {
  EXPECT_EQ(run_args({"direction", "--method", "gradient", "--model", model().string(), "--corpus",
                      corpus().string(), "--layer", "0", "--epsilon", "0", "--max-new-tokens", "4", "-o",
                      path("zero.json").string()}),
            5);
}

TEST_F(CliPipeline, GenerateWritesFifteenRecordsPerImage) {
  const auto records = cmd_generate(generate_command("gen.jsonl"));
  // two eval sets, two person images each
  ASSERT_EQ(records.size(), 4u * 15u);
  EXPECT_EQ(evalkit::read_generations(path("gen.jsonl")).size(), records.size());
  for (const auto& r : records) {
    EXPECT_EQ(r.method, "unsteered");
    EXPECT_NE(r.group, "none");
  }
  auto with_none = generate_command("gen_none.jsonl");
  with_none.include_attribute_free = true;
  with_none.max_images = 3;
  EXPECT_EQ(cmd_generate(with_none).size(), 3u * 15u);
}

TEST_F(CliPipeline, GreedySeedsCollapse) {
  auto g = generate_command("greedy.jsonl");
  g.greedy = true;
  g.max_images = 1;
  const auto records = cmd_generate(g);
  ASSERT_EQ(records.size(), 15u);
  for (std::size_t i = 0; i < records.size(); i += 3) {
    EXPECT_EQ(records[i].text, records[i + 1].text);
    EXPECT_EQ(records[i].text, records[i + 2].text);
  }
}

TEST_F(CliPipeline, WorkersDoNotChangeOutput) {
  auto one = generate_command("w1.jsonl");
  auto three = generate_command("w3.jsonl");
  three.workers = 3;
  cmd_generate(one);
  cmd_generate(three);
  EXPECT_EQ(slurp(path("w1.jsonl")), slurp(path("w3.jsonl")));
}

TEST_F(CliPipeline, DatasetDirectionSteersGenerationAndEvaluates) {
  DirectionCommand d;
  d.model = model();
  d.corpus_dir = corpus();
  d.layer = 1;
  d.max_new_tokens = 4;
  d.max_perplexity_increase = 0;
  d.out = path("dir.json");
  const auto result = cmd_direction(d);
  EXPECT_EQ(result.scores.size(), 1u);
  EXPECT_TRUE(result.direction.unit_norm);
  EXPECT_TRUE(fs::exists(path("dir.json.candidates.json")));

  auto g = generate_command("steered.jsonl");
  g.direction = path("dir.json");
  g.max_images = 2;
  for (const auto& r : cmd_generate(g)) EXPECT_EQ(r.method, "dataset");
  auto base = generate_command("base.jsonl");
  base.max_images = 2;
  cmd_generate(base);

  EvaluateCommand e;
  e.generations = {path("base.jsonl"), path("steered.jsonl")};
  e.corpus_dir = corpus();
  e.out_dir = path("report");
  const auto report = cmd_evaluate(e);
  ASSERT_EQ(report.rows.size(), 2u);
  const std::string csv = slurp(path("report") / "report.csv");
  cmd_evaluate(e);
  EXPECT_EQ(slurp(path("report") / "report.csv"), csv);
  EXPECT_EQ(slurp(path("report") / "report.md").rfind("generated_at: ", 0), 0u);
}

TEST_F(CliPipeline, OccupationGuardIsRecordedPerCandidate) {
  DirectionCommand d;
  d.model = model();
  d.corpus_dir = corpus();
  d.layer = 0;
  d.max_new_tokens = 4;
  d.out = path("guarded.json");
  const auto result = cmd_direction(d);
  ASSERT_EQ(result.scores.size(), 1u);
  const auto side = nlohmann::json::parse(slurp(path("guarded.json.candidates.json")));
  EXPECT_TRUE(side.contains("baseline_occupation_rate"));
  EXPECT_TRUE(side.at("candidates").at(0).contains("occupation_change"));
  // an untrained model never names the occupation, so there is nothing to guard
  EXPECT_FALSE(result.scores[0].occupation_change.has_value());
}

TEST(CliLossbench, AllChecksPass) {
  TempDir dir("bench");
  LossbenchCommand b;
  b.trials = 2;
  b.out = dir.path() / "bench.csv";
  const auto r = cmd_lossbench(b);
  EXPECT_TRUE(r.all_pass);
  EXPECT_EQ(r.checks.size(), 4u * 3u * 3u * 2u);  // losses x V x N x trials
  EXPECT_TRUE(fs::exists(dir.path() / "bench.csv.saturation.csv"));
}

}  // namespace
}  // namespace steerlab::cli
