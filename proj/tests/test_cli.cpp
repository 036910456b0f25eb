#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "commands.hpp"

namespace fs = std::filesystem;
namespace cli = fimode::cli;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::vector<std::string> kSmallGen{"--l", "12", "--dt", "0.1", "--workers", "1"};
const std::vector<std::string> kTinyModel{"--embed-width", "8",  "--encoder-layers", "1", "--combiner-layers",
                                          "1",             "--heads", "2",           "--ff-width",        "16"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

class CliTest : public ::testing::Test {
  protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("fimode_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

    fs::path gen(const std::string& name, int systems, std::vector<std::string> extra = {}) {
        auto args = cat({"gen", "--systems", std::to_string(systems), "--seed", "3", "--out-dir", path(name)},
                        kSmallGen);
        const auto r = run(cat(args, extra));
        EXPECT_EQ(r.code, 0) << r.err;
        return dir_ / name / "dataset.jsonl";
    }

    fs::path dir_;
};

} // namespace

TEST_F(CliTest, GenZeroSystemsWritesEmptyDataset) {
    const auto ds = gen("g", 0);
    EXPECT_TRUE(fs::exists(ds));
    EXPECT_EQ(fs::file_size(ds), 0u);
    EXPECT_TRUE(fs::exists(dir_ / "g" / "config.json"));
}

TEST_F(CliTest, GenWritesConfigWithResolvedSeed) {
    gen("g", 2);
    const auto cfg = nlohmann::json::parse(slurp(dir_ / "g" / "config.json"));
    EXPECT_EQ(cfg.at("generator").at("seed"), 3);
    EXPECT_EQ(cfg.at("generator").at("observations_per_series"), 12);
}

TEST_F(CliTest, NoSubcommandIsUsageError) {
    EXPECT_EQ(run({}).code, cli::kExitUsage);
    EXPECT_EQ(run({"bogus"}).code, cli::kExitUsage);
    EXPECT_EQ(run({"gen"}).code, cli::kExitUsage); // --out-dir required
}

TEST_F(CliTest, HelpExitsZero) { EXPECT_EQ(run({"--help"}).code, cli::kExitOk); }

TEST_F(CliTest, UnknownConfigKeyNamesTheKey) {
    std::ofstream(path("bad.json")) << R"({"generator": {"noise_levle": 0.1}})";
    const auto r = run({"gen", "--config", path("bad.json"), "--out-dir", path("g")});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("generator.noise_levle"), std::string::npos) << r.err;
}

TEST_F(CliTest, ConfigFileValuesApply) {
    std::ofstream(path("cfg.json")) << R"({"generator": {"seed": 9, "observations_per_series": 8, "horizon": 0.7}})";
    ASSERT_EQ(run({"gen", "--config", path("cfg.json"), "--systems", "1", "--out-dir", path("g")}).code, 0);
    const auto line = slurp(dir_ / "g" / "dataset.jsonl");
    const auto rec = nlohmann::json::parse(line);
    EXPECT_EQ(rec.at("context")[0].at("times").size(), 8u);
    EXPECT_EQ(rec.at("config").at("seed"), 9);
}

TEST_F(CliTest, SeedFromEnvironmentWhenFlagAbsent) {
    ::setenv("FIM_ODE_SEED", "3", 1);
    const auto r = run(cat({"gen", "--systems", "2", "--out-dir", path("env")}, kSmallGen));
    ::unsetenv("FIM_ODE_SEED");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto flagged = gen("flag", 2);
    EXPECT_EQ(slurp(dir_ / "env" / "dataset.jsonl"), slurp(flagged));

    ::setenv("FIM_ODE_SEED", "4", 1);
    ASSERT_EQ(run(cat({"gen", "--systems", "2", "--out-dir", path("other")}, kSmallGen)).code, 0);
    ::unsetenv("FIM_ODE_SEED");
    EXPECT_NE(slurp(dir_ / "other" / "dataset.jsonl"), slurp(flagged));
}

TEST_F(CliTest, GenAndEvalAreByteIdentical) {
    const auto a = gen("a", 3);
    const auto b = gen("b", 3);
    EXPECT_EQ(slurp(a), slurp(b));
    for (const char* out : {"ea", "eb"}) {
        ASSERT_EQ(run({"eval", "--dataset", a.string(), "--estimator", "polyfit", "--workers", "1", "--out-dir",
                       path(out)})
                      .code,
                  0);
    }
    EXPECT_EQ(slurp(dir_ / "ea" / "report.json"), slurp(dir_ / "eb" / "report.json"));
}

TEST_F(CliTest, EvalOracleScoresOne) {
    const auto ds = gen("g", 4);
    const auto r = run({"eval", "--dataset", ds.string(), "--estimator", "oracle", "--out-dir", path("e")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rep = nlohmann::json::parse(slurp(dir_ / "e" / "report.json"));
    EXPECT_DOUBLE_EQ(rep.at("aggregate").at("r2_accuracy_reconstruction").get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(rep.at("aggregate").at("r2_accuracy_generalization").get<double>(), 1.0);
    EXPECT_NE(r.out.find("oracle"), std::string::npos);
}

TEST_F(CliTest, DefaultProtocolShape) {
    ASSERT_EQ(run({"gen", "--systems", "2", "--k", "9", "--l", "200", "--dt", "0.05", "--out-dir", path("g")}).code, 0);
    const std::string lines = slurp(dir_ / "g" / "dataset.jsonl");
    const auto rec = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
    ASSERT_EQ(rec.at("context").size(), 9u);
    const auto& times = rec.at("context")[0].at("times");
    EXPECT_EQ(times.size(), 200u);
    EXPECT_NEAR(times.back().get<double>(), 9.95, 1e-12);
}

TEST_F(CliTest, EvalPolyfitOnNoiseFreeData) {
    ASSERT_EQ(run({"gen", "--systems", "20", "--l", "200", "--dt", "0.05", "--noise-level", "0", "--seed", "8",
                   "--out-dir", path("g")})
                  .code,
              0);
    const auto r = run({"eval", "--dataset", path("g/dataset.jsonl"), "--estimator", "polyfit", "--out-dir", path("e")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rep = nlohmann::json::parse(slurp(dir_ / "e" / "report.json"));
    EXPECT_GT(rep.at("aggregate").at("r2_accuracy_reconstruction").get<double>(), 0.9);
}

TEST_F(CliTest, EvalContextTrajectoriesLimitsScores) {
    const auto ds = gen("g", 2);
    ASSERT_EQ(run({"eval", "--dataset", ds.string(), "--estimator", "oracle", "--context-trajectories", "1",
                   "--out-dir", path("e")})
                  .code,
              0);
    const auto rep = nlohmann::json::parse(slurp(dir_ / "e" / "report.json"));
    EXPECT_EQ(rep.at("aggregate").at("reconstruction_count"), 2);
    EXPECT_EQ(rep.at("options").at("context_trajectories"), 1);
}

TEST_F(CliTest, FimEvalWithoutCheckpointIsUsageError) {
    const auto ds = gen("g", 1);
    EXPECT_EQ(run({"eval", "--dataset", ds.string(), "--out-dir", path("e")}).code, cli::kExitUsage);
    const auto r = run({"eval", "--dataset", ds.string(), "--checkpoint", path("missing.bin"), "--out-dir", path("e")});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("not found"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingDatasetIsUsageError) {
    EXPECT_EQ(run({"eval", "--dataset", path("nope.jsonl"), "--estimator", "oracle", "--out-dir", path("e")}).code,
              cli::kExitUsage);
}

TEST_F(CliTest, TrainResumeMatchesUninterruptedRun) {
    const auto ds = gen("g", 4);
    const auto train_args = cat(cat({"train", "--dataset", ds.string(), "--seed", "5", "--steps", "4",
                                     "--batch-systems", "2", "--queries-per-system", "8", "--warmup-steps", "2",
                                     "--checkpoint-every", "2", "--workers", "1"},
                                    kTinyModel),
                                {});
    ASSERT_EQ(run(cat(train_args, {"--out-dir", path("full")})).code, 0);
    ASSERT_TRUE(fs::exists(dir_ / "full" / "checkpoint_2.bin"));
    const auto r = run(cat(train_args, {"--resume", (dir_ / "full" / "checkpoint_2.bin").string(), "--out-dir",
                                        path("resumed")}));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(dir_ / "full" / "final.bin"), slurp(dir_ / "resumed" / "final.bin"));
    EXPECT_NE(r.out.find("initial loss"), std::string::npos);

    std::ifstream csv(dir_ / "full" / "loss.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "step,loss,grad_norm,lr");
}

TEST_F(CliTest, ResumeFromMissingCheckpointIsUsageError) {
    const auto r = run({"train", "--systems", "2", "--resume", path("nope.bin"), "--out-dir", path("t")});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("not found"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainDatasetAndSystemsAreExclusive) {
    const auto ds = gen("g", 1);
    EXPECT_EQ(run({"train", "--dataset", ds.string(), "--systems", "3", "--out-dir", path("t")}).code,
              cli::kExitUsage);
}

TEST_F(CliTest, InferPrintsFieldAtQueries) {
    const auto ds = gen("g", 2, {"--k", "2", "--h", "1"});
    ASSERT_EQ(run(cat(cat({"train", "--dataset", ds.string(), "--steps", "1", "--batch-systems", "1",
                           "--queries-per-system", "4", "--warmup-steps", "1", "--out-dir", path("t")},
                          kTinyModel),
                      {}))
                  .code,
              0);
    const auto ckpt = (dir_ / "t" / "final.bin").string();
    auto r = run({"infer", "--checkpoint", ckpt, "--dataset", ds.string(), "--record", "0", "--out-dir", path("i")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir_ / "i" / "infer.csv"));
    std::istringstream lines(r.out);
    std::string line;
    int rows = 0;
    while (std::getline(lines, line)) {
        ++rows;
    }
    EXPECT_EQ(rows, 3); // header plus one row per context series

    r = run({"infer", "--checkpoint", ckpt, "--dataset", ds.string(), "--record", "7"});
    EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(CliTest, PlotEmitsOneFilePairPerContextCount) {
    const auto ds = gen("g", 6, {"--max-terms-per-component", "2"});
    const auto records = slurp(ds);
    // Pick a record with D >= 2.
    std::istringstream lines(records);
    std::string line;
    int id = -1;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.at("dim").get<int>() >= 2) {
            id = j.at("id").get<int>();
            break;
        }
    }
    ASSERT_GE(id, 0);
    const auto r = run({"plot", "--dataset", ds.string(), "--record", std::to_string(id), "--estimator", "oracle",
                        "--num-context", "1,5,9", "--grid-n", "5", "--out-dir", path("p")});
    ASSERT_EQ(r.code, 0) << r.err;
    for (int k : {1, 5, 9}) {
        EXPECT_TRUE(fs::exists(dir_ / "p" / ("quiver_k" + std::to_string(k) + ".csv")));
        EXPECT_TRUE(fs::exists(dir_ / "p" / ("quiver_k" + std::to_string(k) + ".svg")));
    }
}

TEST_F(CliTest, PlotUnknownRecordIsUsageError) {
    const auto ds = gen("g", 2);
    EXPECT_EQ(run({"plot", "--dataset", ds.string(), "--record", "99", "--estimator", "oracle", "--out-dir", path("p")})
                  .code,
              cli::kExitUsage);
}

TEST_F(CliTest, PlotOneDimensionalRecordIsUsageError) {
    const auto ds = gen("g", 12);
    std::istringstream lines(slurp(ds));
    std::string line;
    int id = -1;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.at("dim").get<int>() == 1) {
            id = j.at("id").get<int>();
            break;
        }
    }
    ASSERT_GE(id, 0);
    const auto r = run({"plot", "--dataset", ds.string(), "--record", std::to_string(id), "--estimator", "oracle",
                        "--out-dir", path("p")});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("quiver requires D≥2"), std::string::npos) << r.err;
}
