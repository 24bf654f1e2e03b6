// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace {

namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
  protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("cpns_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path write(const std::string& name, const std::string& text) const {
        const fs::path p = dir_ / name;
        std::ofstream(p) << text;
        return p;
    }

    std::string read(const std::string& name) const {
        std::ifstream in(dir_ / name);
        return std::string(std::istreambuf_iterator<char>(in), {});
    }

    int run(const std::string& args) const {
        const std::string cmd = std::string(CPNSLAB_CLI_PATH) + " " + args + " > " + (dir_ / "stdout").string() +
                                " 2> " + (dir_ / "stderr").string();
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    fs::path minimal_config() const {
        return write("ok.json", R"({
          "run_id": "cli",
          "seeds": [1],
          "data": {"kind": "scm",
                   "scm": {"num_tasks": 2, "classes_per_task": 3, "d_c": 2, "d_s": 4, "input_dim": 24,
                           "train_per_class": 10, "test_per_class": 10}},
          "model": {"hidden": [8], "feature_dim": 6},
          "train": {"stage1_epochs": 1, "stage2_epochs": 1, "batch_size": 16, "buffer_capacity": 20,
                    "report_samples": 8},
          "metrics": {"eval_samples": 10, "masking_ks": [0, 1]}
        })");
    }

    fs::path dir_;
};

TEST_F(CliTest, SuccessfulRunExitsZero) {
    const fs::path cfg = minimal_config();
    EXPECT_EQ(run("run " + cfg.string() + " --out " + (dir_ / "out").string()), 0);
    EXPECT_TRUE(fs::exists(dir_ / "out" / "cli" / "summary.csv"));
    const fs::path ckpt = dir_ / "out" / "cli" / "seed-1" / "checkpoint_task_1.cpns";
    EXPECT_EQ(run("eval " + ckpt.string() + " " + (dir_ / "missing.tab").string()), 2);
    // Wrong dimensionality for the checkpoint.
    const fs::path narrow = write("narrow.tab", "cpns-tab v1 dims=2 classes=2\n0 0.5 1\n");
    EXPECT_EQ(run("eval " + ckpt.string() + " " + narrow.string()), 2);
    // Non-numeric value on line 3.
    const fs::path bad = write("bad.tab", "cpns-tab v1 dims=2 classes=2\n0 0.5 1\n1 abc 2\n");
    EXPECT_EQ(run("eval " + ckpt.string() + " " + bad.string()), 2);
    EXPECT_NE(read("stderr").find("line 3"), std::string::npos);
}

TEST_F(CliTest, InvalidConfigExitsTwo) {
    const fs::path cfg = write("bad.json", R"({"run_id": "x", "unknown_key": 1})");
    EXPECT_EQ(run("run " + cfg.string()), 2);
    const fs::path neg = write("neg.json", R"({"train": {"epsilon": -1}})");
    EXPECT_EQ(run("run " + neg.string()), 2);
}

TEST_F(CliTest, UnknownSweepParameterExitsTwo) {
    const fs::path cfg = minimal_config();
    EXPECT_EQ(run("sweep " + cfg.string() + " --param momentum --values 0.1,0.2"), 2);
}

TEST_F(CliTest, MalformedJsonExitsTwo) {
    const fs::path cfg = write("broken.json", "{\"run_id\": ");
    EXPECT_EQ(run("run " + cfg.string()), 2);
}

TEST_F(CliTest, GarbageCheckpointExitsTwo) {
    const fs::path ckpt = write("garbage.cpns", "not a checkpoint");
    const fs::path table = write("t.tab", "cpns-tab v1 dims=1 classes=2\n0 1\n");
    EXPECT_EQ(run("eval " + ckpt.string() + " " + table.string()), 2);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("run"), 2);
    EXPECT_EQ(run("--help"), 0);
}

} // namespace
