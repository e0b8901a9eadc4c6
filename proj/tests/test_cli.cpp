#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sdd/cli.hpp"
#include "sdd/testing/oracle.hpp"

namespace sdd {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Tiny nets and data so every command finishes in well under a second.
const std::vector<std::string> kTiny = {
    "--set", "data.train_size=96",      "--set", "data.test_size=48",    "--set", "train.epochs=2",
    "--set", "train.lr_decay_epochs=",  "--set", "train.batch_size=16",  "--set", "train.log_timing=false",
    "--set", "teacher.blocks=8:3:4,8:3:2", "--set", "student.blocks=4:5:8"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

class CliRuns : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "sdd_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const auto r = run(with_tiny({"train-teacher", "--out", (dir_ / "teacher").string()}));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static fs::path teacher() { return dir_ / "teacher" / "model.ckpt"; }
  static fs::path dir_;
};
fs::path CliRuns::dir_;

TEST(Cli, MissingConfigFileNamesPath) {
  const auto r = run({"train-teacher", "--config", "/nonexistent/run.cfg", "--out", "x"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("/nonexistent/run.cfg"), std::string::npos) << r.err;
}

TEST(Cli, UnknownKeyAndBadValueNameTheKey) {
  auto r = run({"eval", "--checkpoint", "c", "--set", "sdd.gamma=1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("sdd.gamma"), std::string::npos) << r.err;
  r = run({"eval", "--checkpoint", "c", "--set", "train.batch_size=-3"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.batch_size"), std::string::npos) << r.err;
  r = run({"eval", "--checkpoint", "c", "--set", "sdd.scales=2,1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("sdd.scales"), std::string::npos) << r.err;
  r = run({"eval", "--checkpoint", "c", "--set", "noequals"});
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, UnknownFlagOrCommandRejected) {
  EXPECT_EQ(run({"eval", "--checkpoint", "c", "--frobnicate"}).code, 1);
  EXPECT_EQ(run({"evaluate"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"distill", "--out", "x"}).code, 1);  // --teacher is required
}

TEST(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("export-logits"), std::string::npos);
}

TEST(Cli, RuntimeFailureExitsTwo) {
  const auto r = run(with_tiny({"eval", "--checkpoint", "/nonexistent/model.ckpt"}));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/model.ckpt"), std::string::npos);
}

TEST(Config, PrecedenceFlagsOverFileOverDefaults) {
  const auto path = fs::temp_directory_path() / "sdd_precedence.cfg";
  {
    std::ofstream f(path);
    f << "# comment line\n"
      << "sdd.beta = 4.0   # trailing comment\n"
      << "sdd.temperature = 2\n"
      << "\n"
      << "sdd.scales = 1, 2\n";
  }
  AppConfig cfg;
  apply_config_file(cfg, path);
  apply_override(cfg, "sdd.beta=2.5");
  EXPECT_EQ(cfg.sdd.beta, 2.5);
  EXPECT_EQ(cfg.sdd.temperature, 2.0);
  EXPECT_EQ(cfg.sdd.scales, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(cfg.sdd.alpha, DistillConfig{}.alpha);
  fs::remove(path);
}

TEST(Config, MalformedLineNamesLocation) {
  AppConfig cfg;
  try {
    apply_config_text(cfg, "sdd.beta = 1\njust words\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
  }
}

TEST(Config, JsonEchoRoundTripsEveryKey) {
  AppConfig cfg;
  for (const auto& kv : {"sdd.beta=3", "sdd.scales=1,2", "train.lr_decay_epochs=5,9", "sdd.base_loss=nkd",
                         "sdd.groups=complementary", "sdd.label_mode=ground_truth", "teacher.blocks=8:3:2:1,4:1:1:0",
                         "synth.seed=77", "train.log_timing=false", "data.source=idx"}) {
    apply_override(cfg, kv);
  }
  const auto j = config_to_json(cfg);
  EXPECT_EQ(j.size(), config_keys_list().size());
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
}

TEST(Config, BlockListParsing) {
  AppConfig cfg;
  apply_override(cfg, "student.blocks=16:5:4,32:3:2:0");
  ASSERT_EQ(cfg.student_blocks.size(), 2u);
  EXPECT_EQ(cfg.student_blocks[0], conv_block(16, 5, 4));
  EXPECT_EQ(cfg.student_blocks[1].padding, 0u);
  EXPECT_THROW(apply_override(cfg, "student.blocks=16:5"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "student.blocks=0:5:4"), ConfigError);
}

TEST_F(CliRuns, TeacherOutputsAndNoTempFiles) {
  for (const char* f : {"model.ckpt", "metrics.csv", "summary.json"}) EXPECT_TRUE(fs::exists(dir_ / "teacher" / f));
  for (const auto& e : fs::directory_iterator(dir_ / "teacher")) EXPECT_NE(e.path().extension(), ".tmp");
  const auto summary = nlohmann::json::parse(slurp(dir_ / "teacher" / "summary.json"));
  EXPECT_EQ(summary["command"], "train-teacher");
  EXPECT_EQ(summary["epochs"].size(), 2u);
}

TEST_F(CliRuns, DistillOverrideIsEchoed) {
  const auto out = dir_ / "student";
  const auto r = run(with_tiny({"distill", "--teacher", teacher().string(), "--out", out.string(), "--set",
                                "sdd.beta=2.0", "--set", "sdd.beta=3.25"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = nlohmann::json::parse(slurp(out / "summary.json"));
  EXPECT_EQ(summary["config"]["sdd.beta"], 3.25);
  EXPECT_EQ(nlohmann::json::parse(r.out), summary);
  EXPECT_TRUE(fs::exists(out / "steps.csv"));
  // 96 samples / batch 16 = 6 steps per epoch, plus the header.
  std::stringstream steps(slurp(out / "steps.csv"));
  std::size_t lines = 0;
  for (std::string l; std::getline(steps, l);) ++lines;
  EXPECT_EQ(lines, 1u + 12u);
}

TEST_F(CliRuns, SummaryAloneReproducesTheRun) {
  const auto first = dir_ / "repro_a";
  ASSERT_EQ(run(with_tiny({"distill", "--teacher", teacher().string(), "--out", first.string()})).code, 0);
  const auto summary = nlohmann::json::parse(slurp(first / "summary.json"));
  const auto cfg_path = dir_ / "from_summary.cfg";
  {
    std::ofstream f(cfg_path);
    for (const auto& [k, v] : summary["config"].items()) {
      std::string s;
      if (v.is_string()) {
        s = v.get<std::string>();
      } else if (v.is_array()) {
        for (const auto& x : v) s += (s.empty() ? "" : ",") + x.dump();
      } else {
        s = v.dump();
      }
      f << k << " = " << s << "\n";
    }
  }
  const auto second = dir_ / "repro_b";
  const auto r = run({"distill", "--config", cfg_path.string(), "--teacher", teacher().string(), "--out",
                      second.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(first / "metrics.csv"), slurp(second / "metrics.csv"));
  EXPECT_EQ(slurp(first / "model.ckpt"), slurp(second / "model.ckpt"));
}

TEST_F(CliRuns, EvalMatchesLibrary) {
  const auto r = run(with_tiny({"eval", "--checkpoint", teacher().string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  AppConfig cfg;
  for (std::size_t i = 0; i + 1 < kTiny.size(); i += 2) apply_override(cfg, kTiny[i + 1]);
  const auto data = cli::load_data(cfg);
  const auto expect = evaluate(load_checkpoint<float>(teacher()), data.test);
  EXPECT_EQ(j["correct"], expect.correct);
  EXPECT_EQ(j["total"], 48u);
  EXPECT_EQ(j["confusion"], expect.confusion);
  EXPECT_EQ(run(with_tiny({"eval", "--checkpoint", teacher().string(), "--split", "val"})).code, 1);
}

TEST_F(CliRuns, ExportRowsGlobalPredictionsAndLabels) {
  const auto csv = dir_ / "export.csv";
  const auto r = run(with_tiny({"export-logits", "--checkpoint", teacher().string(), "--output", csv.string(),
                                "--set", "sdd.scales=1,2,4"}));
  ASSERT_EQ(r.code, 0) << r.err;

  AppConfig cfg;
  for (std::size_t i = 0; i + 1 < kTiny.size(); i += 2) apply_override(cfg, kTiny[i + 1]);
  const auto data = cli::load_data(cfg);
  const auto eval = evaluate(load_checkpoint<float>(teacher()), data.test);
  const std::size_t K = data.test.num_classes;

  std::stringstream ss(slurp(csv));
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line.rfind("sample_id,m,n,label,argmax,logit_0", 0), 0u);
  std::size_t rows = 0, globals = 0;
  oracle::Vec global;
  while (std::getline(ss, line)) {
    ++rows;
    std::stringstream ls(line);
    std::vector<std::string> f;
    for (std::string c; std::getline(ls, c, ',');) f.push_back(c);
    ASSERT_EQ(f.size(), 5 + K);
    oracle::Vec logits;
    for (std::size_t k = 0; k < K; ++k) logits.push_back(std::stod(f[5 + k]));
    const auto sample = std::stoul(f[0]);
    const auto am = std::stoul(f[4]);
    EXPECT_EQ(am, oracle::argmax(logits));
    if (f[3] == "global") {
      EXPECT_EQ(am, eval.predictions[sample]);
      global = logits;
      ++globals;
    } else {
      // Offline recomputation of the consistency label from the exported values.
      const bool consistent = oracle::argmax(logits) == oracle::argmax(global);
      EXPECT_EQ(f[3], consistent ? "consistent" : "complementary") << line;
      if (f[1] == "1") {
        EXPECT_EQ(f[3], "consistent");
      }
    }
  }
  EXPECT_EQ(globals, 48u);
  EXPECT_EQ(rows, 48u * (1 + 1 + 4 + 16));
}

TEST_F(CliRuns, BenchSelfComparisonIsNearOne) {
  const auto r = run(with_tiny({"bench", "--self", "--set", "bench.batches=60", "--teacher", teacher().string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["base"]["batches"], 60u);
  EXPECT_EQ(j["sdd"]["batches"], 60u);
  EXPECT_GT(j["median_ratio"].get<double>(), 0.6);
  EXPECT_LT(j["median_ratio"].get<double>(), 1.6);
  EXPECT_LE(j["base"]["median_ms"].get<double>(), j["base"]["p95_ms"].get<double>());
}

TEST(Cli, VerifyPassesOnCleanTree) {
  const auto r = run({"verify", "--scratch", (fs::temp_directory_path() / "sdd_verify").string()});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("10/10 checks passed"), std::string::npos) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Bench, PercentileNearestRank) {
  EXPECT_EQ(percentile({5, 1, 3}, 0.5), 3.0);
  EXPECT_EQ(percentile({1, 2, 3, 4}, 0.5), 2.0);
  std::vector<double> v(100);
  for (std::size_t i = 0; i < 100; ++i) v[i] = static_cast<double>(100 - i);
  EXPECT_EQ(percentile(v, 0.95), 95.0);
  EXPECT_EQ(percentile({7}, 0.0), 7.0);
  EXPECT_THROW(percentile({}, 0.5), RangeError);
}

}  // namespace
}  // namespace sdd
