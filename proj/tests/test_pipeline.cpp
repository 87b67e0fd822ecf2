#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "minidiff/pipeline.hpp"

using namespace minidiff;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run_cli(const std::string& args) {
    const std::string cmd = std::string(MINIDIFF_CLI) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    Result r;
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string smoke() { return std::string("--config ") + MINIDIFF_SMOKE_CONFIG; }

std::string status_of(const std::string& output, const std::string& stage) {
    std::istringstream in(output);
    for (std::string line; std::getline(in, line);)
        if (line.rfind(stage + ": ", 0) == 0) return line.substr(stage.size() + 2, line.find(' ', stage.size() + 2) - stage.size() - 2);
    return "";
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
    ~TempDir() { fs::remove_all(path); }
};

const std::vector<std::string> kStages = {"pretrain", "adapt-token", "adapt-lora", "tune", "generate", "fid", "classify"};

}  // namespace

TEST(Cli, FullPipelineThenSkipOnRerun) {
    TempDir dir("minidiff_test_cli_pipeline");
    const Result first = run_cli("pipeline " + smoke() + " --workdir " + dir.path.string());
    ASSERT_EQ(first.code, 0) << first.output;
    for (const std::string& s : kStages) EXPECT_EQ(status_of(first.output, s), "ran") << s;
    for (const char* f : {"checkpoints/base.ckpt", "checkpoints/token_pit.ckpt", "checkpoints/lora_pit.ckpt",
                          "checkpoints/classifier.ckpt", "manifests/dataset.jsonl", "manifests/generated.jsonl",
                          "manifests/classify.jsonl", "reports/tuned.json", "reports/scores.csv", "reports/fid.csv",
                          "reports/classify.csv", "logs/run.log"})
        EXPECT_TRUE(fs::exists(dir.path / f)) << f;
    EXPECT_FALSE(fs::exists(dir.path / ".lock"));

    const Result second = run_cli("pipeline " + smoke() + " --workdir " + dir.path.string());
    ASSERT_EQ(second.code, 0) << second.output;
    for (const std::string& s : kStages) EXPECT_EQ(status_of(second.output, s), "skipped") << s;

    // one JSON record per stage execution, skipped ones included
    std::ifstream log(dir.path / "logs/run.log");
    int records = 0;
    for (std::string line; std::getline(log, line); ++records) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("stage") && j.contains("status") && j.contains("config_hash") && j.contains("seed"));
    }
    EXPECT_EQ(records, 2 * static_cast<int>(kStages.size()));

    // a generation setting re-runs generation and everything downstream of it only
    const Result changed = run_cli("pipeline " + smoke() + " --workdir " + dir.path.string() + " --set gen.n=5");
    ASSERT_EQ(changed.code, 0) << changed.output;
    EXPECT_EQ(status_of(changed.output, "pretrain"), "skipped");
    EXPECT_EQ(status_of(changed.output, "adapt-lora"), "skipped");
    EXPECT_EQ(status_of(changed.output, "generate"), "ran");
    EXPECT_EQ(status_of(changed.output, "fid"), "ran");

    const Result forced = run_cli("fid " + smoke() + " --workdir " + dir.path.string() + " --set gen.n=5 --force");
    ASSERT_EQ(forced.code, 0) << forced.output;
    EXPECT_EQ(status_of(forced.output, "fid"), "ran");
}

TEST(Cli, MissingDependencyExitsWithThree) {
    TempDir dir("minidiff_test_cli_dependency");
    const Result r = run_cli("adapt-token " + smoke() + " --workdir " + dir.path.string());
    EXPECT_EQ(r.code, 3) << r.output;
    EXPECT_NE(r.output.find("pretrain"), std::string::npos) << r.output;
}

TEST(Cli, InvalidConfigurationExitsWithTwo) {
    TempDir dir("minidiff_test_cli_config");
    const Result r = run_cli("pretrain " + smoke() + " --workdir " + dir.path.string() +
                             " --set schedule.T=abc --set gen.mode=ancestral");
    EXPECT_EQ(r.code, 2) << r.output;
    const Result unknown = run_cli("pretrain --workdir " + dir.path.string() + " --set no.such.key=1");
    EXPECT_EQ(unknown.code, 2) << unknown.output;
    EXPECT_NE(unknown.output.find("no.such.key"), std::string::npos);
    const Result classes = run_cli("pretrain " + smoke() + " --workdir " + dir.path.string() + " --set data.classes=zebra");
    EXPECT_EQ(classes.code, 2) << classes.output;
}

TEST(Cli, ConcurrentRunIsRefused) {
    TempDir dir("minidiff_test_cli_lock");
    fs::create_directories(dir.path);
    std::ofstream(dir.path / ".lock") << "12345\n";
    const Result r = run_cli("pretrain " + smoke() + " --workdir " + dir.path.string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find("lock"), std::string::npos) << r.output;
    EXPECT_TRUE(fs::exists(dir.path / ".lock"));
}

TEST(Cli, ConfigSubcommandListsTheSchema) {
    const Result r = run_cli("config");
    EXPECT_EQ(r.code, 0);
    for (const ConfigKey& k : config_schema()) EXPECT_NE(r.output.find(k.key), std::string::npos) << k.key;
}

TEST(PipelineApi, StageSeedsAreDistinctAndStable) {
    Config cfg;
    cfg.load(MINIDIFF_SMOKE_CONFIG);
    TempDir dir("minidiff_test_pipeline_seeds");
    Pipeline a(cfg, dir.path), b(cfg, dir.path);
    EXPECT_EQ(a.stage_seed(Stage::pretrain, "model"), b.stage_seed(Stage::pretrain, "model"));
    EXPECT_NE(a.stage_seed(Stage::pretrain, "model"), a.stage_seed(Stage::generate, "model"));
    EXPECT_NE(a.stage_seed(Stage::generate, "pit"), a.stage_seed(Stage::generate, "scratch"));
    Pipeline c(cfg, dir.path, 99);
    EXPECT_NE(a.stage_seed(Stage::pretrain, "model"), c.stage_seed(Stage::pretrain, "model"));
    EXPECT_EQ(parse_stage("pretrain-base"), Stage::pretrain);
    EXPECT_THROW(parse_stage("deploy"), Error);
}
