#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("tsvlab_test_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path path(const std::string& name) const { return dir_ / name; }

    CliResult run(const std::string& args, const std::string& env = "") const {
        const auto out = dir_ / "stdout.txt";
        const auto err = dir_ / "stderr.txt";
        const std::string cmd = "cd '" + dir_.string() + "' && env -u TSVLAB_SEED " + env + " '" + TSVLAB_CLI + "' " +
                                args + " > '" + out.string() + "' 2> '" + err.string() + "'";
        const int status = std::system(cmd.c_str());
        CliResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    void make_data(int count = 256) const {
        ASSERT_EQ(run("synth --count " + std::to_string(count) + " --seed 7 --out d.jsonl").code, 0);
    }

    fs::path dir_;
};

constexpr const char* kQuick = " --n-initial-epochs 2 --n-augmented-epochs 2 --k-select 32 ";

}  // namespace

TEST_F(Cli, SynthWritesRequestedRecordsDeterministically) {
    auto r = run("synth --count 512 --pi 0.25 --seed 7 --out a.jsonl");
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream in(path("a.jsonl"));
    int lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    EXPECT_EQ(lines, 513);
    ASSERT_EQ(run("synth --count 512 --pi 0.25 --seed 7 --out b.jsonl").code, 0);
    EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
}

TEST_F(Cli, UsageErrorsExitTwoWithoutOutput) {
    auto r = run("synth --pi 1.5 --out x.jsonl");
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err.rfind("error: ", 0), 0u);
    EXPECT_FALSE(fs::exists(path("x.jsonl")));
    EXPECT_EQ(run("synth --prompt-len 20 --seq-len 16 --out y.jsonl").code, 2);
    EXPECT_FALSE(fs::exists(path("y.jsonl")));
    EXPECT_EQ(run("train --data missing.jsonl --out c.json").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("").code, 2);
}

TEST_F(Cli, HelpListsFlagsWithDefaults) {
    auto r = run("train --help");
    EXPECT_EQ(r.code, 0);
    for (const char* s : {"--lambda", "[5]", "--kappa", "[10]", "--ema-decay", "[0.99]", "--epsilon", "[0.05]",
                          "--sinkhorn-iters", "[3]", "--n-initial-epochs", "[20]", "--batch-size", "[128]",
                          "--learning-rate", "[0.005]", "--k-select", "--n-exemplars", "[32]", "--location",
                          "[residual]", "--w-mode", "--seed", "--config"}) {
        EXPECT_NE(r.out.find(s), std::string::npos) << s;
    }
    for (const char* cmd : {"synth", "score", "eval", "ablate", "inspect-norms"}) {
        EXPECT_EQ(run(std::string(cmd) + " --help").code, 0) << cmd;
    }
}

TEST_F(Cli, TrainWritesCheckpointLogAndAuroc) {
    make_data();
    auto r = run(std::string("train --data d.jsonl --out ck.json --seed 7 --n-exemplars 32 --k-select 128") +
                 " --n-initial-epochs 2 --n-augmented-epochs 2");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::regex_search(r.out, std::regex("AUROC=[01]\\.[0-9]{6}\n")));
    auto ck = nlohmann::json::parse(slurp(path("ck.json")));
    EXPECT_EQ(ck["config"]["n_exemplars"], 32);
    EXPECT_EQ(ck["config"]["k_select"], 128);
    EXPECT_EQ(ck["config"]["seed"], 7);
    EXPECT_TRUE(fs::exists(path("ck.json.log")));
    EXPECT_FALSE(fs::exists(path("ck.json.tmp")));
}

TEST_F(Cli, TrainIsByteReproducible) {
    make_data();
    const std::string flags = std::string(kQuick) + "--seed 3 --test-out t.jsonl";
    ASSERT_EQ(run("train --data d.jsonl --out a.json --log a.log" + flags).code, 0);
    ASSERT_EQ(run("train --data d.jsonl --out b.json --log b.log" + flags).code, 0);
    EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
    EXPECT_EQ(slurp(path("a.log")), slurp(path("b.log")));
}

TEST_F(Cli, BadLayerNamesValidRange) {
    make_data();
    auto r = run("train --data d.jsonl --out ck.json --layer 99");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("error: invalid-layer:"), std::string::npos);
    EXPECT_NE(r.err.find("[0, 3]"), std::string::npos);
    EXPECT_FALSE(fs::exists(path("ck.json")));
}

TEST_F(Cli, ScoreAndEval) {
    make_data();
    ASSERT_EQ(run(std::string("train --data d.jsonl --out ck.json --test-out t.jsonl --seed 1") + kQuick).code, 0);

    std::ifstream in(path("t.jsonl"));
    std::string header, l1, l2, l3;
    std::getline(in, header);
    std::getline(in, l1);
    std::getline(in, l2);
    std::getline(in, l3);
    std::ofstream(path("three.jsonl")) << header << "\n" << l1 << "\n" << l2 << "\n" << l3 << "\n";
    auto r = run("score --ckpt ck.json --data three.jsonl");
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream lines(r.out);
    std::vector<std::string> ids;
    for (std::string l; std::getline(lines, l);) {
        ASSERT_TRUE(std::regex_match(l, std::regex("[^\t]+\t[01]\\.[0-9]{6}"))) << l;
        ids.push_back(l.substr(0, l.find('\t')));
    }
    ASSERT_EQ(ids.size(), 3u);
    EXPECT_EQ(ids[0], nlohmann::json::parse(l1)["id"]);
    EXPECT_EQ(ids[2], nlohmann::json::parse(l3)["id"]);

    r = run("eval --ckpt ck.json --data t.jsonl --report rep.json --source a --target b");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::regex_match(r.out, std::regex("AUROC=[01]\\.[0-9]{6}\n")));
    auto rep = nlohmann::json::parse(slurp(path("rep.json")));
    EXPECT_EQ(rep["source"], "a");

    std::ofstream single(path("single.jsonl"));
    single << header << "\n";
    std::ifstream all(path("t.jsonl"));
    std::string l;
    std::getline(all, l);
    while (std::getline(all, l)) {
        if (l.find("hallucinated") == std::string::npos) single << l << "\n";
    }
    single.close();
    r = run("eval --ckpt ck.json --data single.jsonl");
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(r.err.rfind("error: single-class:", 0), 0u);

    std::ofstream(path("broken.json")) << "{\"format\":";
    r = run("eval --ckpt broken.json --data t.jsonl");
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error: corrupt:", 0), 0u);
}

TEST_F(Cli, ConfigFileAndSeedPrecedence) {
    make_data();
    std::ofstream(path("cfg.json")) << R"({"lambda": 0.5, "n_initial_epochs": 1, "--n-augmented-epochs": 1, "seed": 4})";
    ASSERT_EQ(run("train --config cfg.json --data d.jsonl --out a.json --n-initial-epochs 2").code, 0);
    auto a = nlohmann::json::parse(slurp(path("a.json")));
    EXPECT_EQ(a["config"]["lambda"], 0.5);
    EXPECT_EQ(a["config"]["n_initial_epochs"], 2);
    EXPECT_EQ(a["config"]["n_augmented_epochs"], 1);
    EXPECT_EQ(a["config"]["seed"], 4);

    ASSERT_EQ(run(std::string("train --data d.jsonl --out b.json") + kQuick, "TSVLAB_SEED=9").code, 0);
    EXPECT_EQ(nlohmann::json::parse(slurp(path("b.json")))["config"]["seed"], 9);
    ASSERT_EQ(run(std::string("train --data d.jsonl --out c.json --seed 2") + kQuick, "TSVLAB_SEED=9").code, 0);
    EXPECT_EQ(nlohmann::json::parse(slurp(path("c.json")))["config"]["seed"], 2);
    ASSERT_EQ(run("train --config cfg.json --data d.jsonl --out e.json", "TSVLAB_SEED=9").code, 0);
    EXPECT_EQ(nlohmann::json::parse(slurp(path("e.json")))["config"]["seed"], 4);

    std::ofstream(path("bad.json")) << R"({"no-such-flag": 1})";
    EXPECT_EQ(run("train --config bad.json --data d.jsonl --out f.json").code, 2);
    std::ofstream(path("notjson.json")) << "lambda = 3";
    EXPECT_EQ(run("train --config notjson.json --data d.jsonl --out f.json").code, 2);
    EXPECT_FALSE(fs::exists(path("f.json")));
}

TEST_F(Cli, AblateTablesAreCompleteAndJobIndependent) {
    auto r = run(std::string("ablate --sweep strength --values 0.1,5 --count 200 --seed 7 --out t1.tsv") + kQuick);
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream rows(r.out);
    std::string line;
    std::getline(rows, line);
    EXPECT_EQ(line, "value\tauroc\tpl_acc");
    std::vector<std::string> values;
    while (std::getline(rows, line)) {
        EXPECT_TRUE(std::regex_match(line, std::regex("[^\t]+\t[01]\\.[0-9]{6}\t([01]\\.[0-9]{6}|nan)"))) << line;
        values.push_back(line.substr(0, line.find('\t')));
    }
    EXPECT_EQ(values, (std::vector<std::string>{"0.1", "5"}));
    EXPECT_EQ(slurp(path("t1.tsv")), r.out);

    auto p = run(std::string("ablate --sweep strength --values 0.1,5 --count 200 --seed 7 --jobs 2") + kQuick);
    ASSERT_EQ(p.code, 0) << p.err;
    EXPECT_EQ(p.out, r.out);

    auto k = run(std::string("ablate --sweep k --values 16,32,64 --count 200 --seed 7") + kQuick);
    ASSERT_EQ(k.code, 0) << k.err;
    EXPECT_EQ(std::count(k.out.begin(), k.out.end(), '\n'), 4);

    EXPECT_EQ(run("ablate --sweep strength --values abc --count 100").code, 2);
    EXPECT_EQ(run("ablate --sweep colour --values 1").code, 2);
    EXPECT_NE(run(std::string("ablate --sweep layer --values 0,9 --count 100") + kQuick).code, 0);
}

TEST_F(Cli, InspectNorms) {
    make_data(64);
    auto r = run("inspect-norms --data d.jsonl --seed 1");
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["count"], 64);
    EXPECT_NEAR(j["mean"].get<double>(), 4.0, 1e-3);
}
