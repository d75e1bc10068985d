#include <cstdio>
#include <cstdlib>
#include <fstream>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "semdiff/eval.hpp"
#include "test_util.hpp"

using semdiff::testing::read_file;
using semdiff::testing::TempDir;

namespace {

struct Run {
    int status;
    std::string output;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(SEMDIFF_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    std::string out;
    char buf[512];
    while (pipe && std::fgets(buf, sizeof buf, pipe)) out += buf;
    const int raw = pipe ? ::pclose(pipe) : -1;
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, out};
}

std::string q(const std::filesystem::path& p) {
    return "'" + p.string() + "'";
}

}  // namespace

TEST(Cli, UsageAndExitCodes) {
    EXPECT_EQ(cli("--help").status, 0);
    const auto unknown = cli("train --bogus");
    EXPECT_EQ(unknown.status, 1);
    EXPECT_EQ(cli("frobnicate").status, 1);
    TempDir dir;
    EXPECT_EQ(cli("train --out " + q(dir / "r") + " --preset toy --manifest " + q(dir / "none.jsonl")).status, 2);
    {
        std::ofstream os(dir / "bad.toml");
        os << "[model]\nwidth = 2\n";
    }
    const auto bad = cli("train --config " + q(dir / "bad.toml") + " --out " + q(dir / "r"));
    EXPECT_EQ(bad.status, 1);
    EXPECT_NE(bad.output.find("width"), std::string::npos) << bad.output;
}

TEST(Cli, EndToEndPipeline) {
    TempDir dir;
    ASSERT_EQ(cli("toy-gen --out " + q(dir / "data") + " --subjects 4 --slices 2").status, 0);
    ASSERT_TRUE(std::filesystem::exists(dir / "data/manifest.jsonl"));
    {
        std::ofstream os(dir / "tiny.toml");
        os << "preset = \"toy\"\n"
              "[schedule]\nsteps = 10\n"
              "[model]\nbase_width = 4\nchannel_multipliers = [1]\nattention_resolutions = []\n"
              "[train]\ncheckpoint_every = 1\nmetrics_every = 1\n";
    }
    const auto train = cli("train --config " + q(dir / "tiny.toml") + " --manifest " + q(dir / "data/manifest.jsonl") +
                           " --out " + q(dir / "run") + " --iterations 2 --variant edge_guided --seed 3");
    ASSERT_EQ(train.status, 0) << train.output;
    EXPECT_TRUE(std::filesystem::exists(dir / "run/ckpt_2.bin"));
    const auto snapshot = read_file(dir / "run/resolved_config.toml");
    EXPECT_NE(snapshot.find("edge_guided"), std::string::npos);
    EXPECT_NE(snapshot.find("[command]"), std::string::npos);

    const auto resumed = cli("train --config " + q(dir / "tiny.toml") + " --manifest " +
                             q(dir / "data/manifest.jsonl") + " --out " + q(dir / "run") +
                             " --iterations 3 --variant edge_guided --seed 3 --resume " + q(dir / "run"));
    ASSERT_EQ(resumed.status, 0) << resumed.output;
    EXPECT_TRUE(std::filesystem::exists(dir / "run/ckpt_3.bin"));
    const auto clash = cli("train --config " + q(dir / "tiny.toml") + " --manifest " + q(dir / "data/manifest.jsonl") +
                           " --out " + q(dir / "run") + " --iterations 4 --variant concat --resume " + q(dir / "run"));
    EXPECT_EQ(clash.status, 1) << clash.output;

    const auto sample = cli("sample --ckpt " + q(dir / "run") + " --manifest " + q(dir / "data/manifest.jsonl") +
                            " --out " + q(dir / "s") + " --n 2 --seed 1");
    ASSERT_EQ(sample.status, 0) << sample.output;
    EXPECT_TRUE(std::filesystem::exists(dir / "s/index.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "s/synth/toy003_0001_r1.png"));

    const auto eval = cli("eval --real " + q(dir / "s/real") + " --synth " + q(dir / "s/synth") + " --masks " +
                          q(dir / "s/masks") + " --label Tiny --out " + q(dir / "s/report.json"));
    ASSERT_EQ(eval.status, 0) << eval.output;
    const auto report = semdiff::read_report(dir / "s/report.json");
    EXPECT_EQ(report.label, "Tiny");
    EXPECT_EQ(report.n_images, 4);
    EXPECT_TRUE(std::filesystem::exists(dir / "s/report.txt"));

    const auto table = cli("report --in " + q(dir / "s/report.json") + " " + q(dir / "s/report.json") + " --out " +
                           q(dir / "table.txt"));
    ASSERT_EQ(table.status, 0) << table.output;
    EXPECT_NE(read_file(dir / "table.txt").find("Tiny"), std::string::npos);
}
