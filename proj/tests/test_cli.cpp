#include "test_util.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const std::string kCli = REGIONTOK_CLI;

int run(const std::string& args, const std::string& log) {
    const std::string cmd = kCli + " " + args + " > " + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Small enough to train a few steps in well under a second per step.
std::string write_tiny_config(const std::string& dir) {
    const std::string path = dir + "/config.json";
    std::ofstream(path) << R"({
  "seed": 5,
  "batch_size": 2,
  "image_size": [16, 16],
  "model": {"downsample": 4, "base_width": 8, "res_blocks": 1, "codebook_size": 16, "embed_dim": 4},
  "discriminator": {"base_width": 8, "layers": 2},
  "perceptual": {"image": {"layers": 2}, "text": {"layers": 2}, "face": {"layers": 2}},
  "schedule": [{"kind": "pretrain", "steps": 2}, {"kind": "text_face", "steps": 2}]
})";
    return path;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = regiontok::testing::temp_dir(std::string("cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        log = dir + "/log.txt";
    }
    std::string dir, log;
};

} // namespace

TEST_F(Cli, BadFlagsExitWithOne) {
    EXPECT_EQ(run("", log), 1);
    EXPECT_EQ(run("frobnicate", log), 1);
    EXPECT_EQ(run("gen-data -n 3", log), 1);
    EXPECT_EQ(run("gen-data --kind logos -n 3 -o " + dir + "/d", log), 1);
    EXPECT_EQ(run("--help", log), 0);
}

TEST_F(Cli, GenDataIsDeterministic) {
    ASSERT_EQ(run("gen-data --kind mixed -n 6 --height 16 --width 16 --seed 3 -o " + dir + "/a", log), 0);
    EXPECT_NE(slurp(log).find("wrote 6 images"), std::string::npos) << slurp(log);
    ASSERT_EQ(run("gen-data --kind mixed -n 6 --height 16 --width 16 --seed 3 -o " + dir + "/b", log), 0);
    EXPECT_EQ(slurp(dir + "/a/manifest.jsonl"), slurp(dir + "/b/manifest.jsonl"));
    for (const auto& e : fs::directory_iterator(dir + "/a/images"))
        EXPECT_EQ(slurp(e.path().string()), slurp((fs::path(dir) / "b/images" / e.path().filename()).string()));
}

TEST_F(Cli, InvalidConfigExitsWithOneAndNamesTheField) {
    const std::string cfg = write_tiny_config(dir);
    ASSERT_EQ(run("gen-data -n 4 --height 16 --width 16 -o " + dir + "/d", log), 0);
    EXPECT_EQ(run("train -c " + cfg + " --manifest " + dir + "/d/manifest.jsonl -o " + dir + "/r --set model.downsample=3",
                  log),
              1);
    EXPECT_NE(slurp(log).find("model.downsample"), std::string::npos) << slurp(log);
    EXPECT_EQ(run("train -c " + dir + "/missing.json -o " + dir + "/r", log), 2);
}

TEST_F(Cli, TrainEncodeDecodeRoundTrip) {
    const std::string cfg = write_tiny_config(dir);
    ASSERT_EQ(run("gen-data -n 4 --height 16 --width 16 --seed 1 -o " + dir + "/d", log), 0);
    const std::string manifest = dir + "/d/manifest.jsonl";
    const std::string train = "train -c " + cfg + " --manifest " + manifest + " -o " + dir + "/r1";
    ASSERT_EQ(run(train, log), 0) << slurp(log);
    for (const auto* f : {"initial.ckpt", "stage0_pretrain.ckpt", "stage1_text_face.ckpt", "latest.ckpt", "config.json"})
        EXPECT_TRUE(fs::exists(dir + "/r1/" + f)) << f;
    const std::string first = slurp(dir + "/r1/latest.ckpt"), first_log = slurp(dir + "/r1/train_log.csv");
    fs::copy_file(dir + "/r1/stage0_pretrain.ckpt", dir + "/pretrain.ckpt");

    // Checkpoints record the output directory, so reruns write to the same place.
    ASSERT_EQ(run(train, log), 0) << slurp(log);
    EXPECT_EQ(slurp(dir + "/r1/latest.ckpt"), first);
    EXPECT_EQ(slurp(dir + "/r1/train_log.csv"), first_log);

    // Resuming from the stage boundary reaches the same final state.
    ASSERT_EQ(run(train + " --resume " + dir + "/pretrain.ckpt", log), 0) << slurp(log);
    EXPECT_EQ(slurp(dir + "/r1/latest.ckpt"), first);

    const std::string ckpt = dir + "/r1/latest.ckpt";
    const std::string img = dir + "/d/images/000000.png";
    ASSERT_TRUE(fs::exists(img));
    ASSERT_EQ(run("encode --checkpoint " + ckpt + " -i " + img + " -o " + dir + "/t.json", log), 0) << slurp(log);
    const auto tokens = nlohmann::json::parse(slurp(dir + "/t.json"));
    EXPECT_EQ(tokens["format"], "regiontok-tokens/1");
    EXPECT_EQ(tokens["tokens"].size(), 4u);
    EXPECT_EQ(tokens["tokens"][0].size(), 4u);
    ASSERT_EQ(run("decode --checkpoint " + ckpt + " -t " + dir + "/t.json -o " + dir + "/a.png", log), 0) << slurp(log);
    ASSERT_EQ(run("decode --checkpoint " + ckpt + " -t " + dir + "/t.json -o " + dir + "/b.png", log), 0);
    EXPECT_EQ(slurp(dir + "/a.png"), slurp(dir + "/b.png"));

    auto bad = tokens;
    bad["tokens"][1][2] = 99;
    std::ofstream(dir + "/bad.json") << bad.dump();
    EXPECT_EQ(run("decode --checkpoint " + ckpt + " -t " + dir + "/bad.json -o " + dir + "/c.png", log), 1);
    EXPECT_NE(slurp(log).find("(1, 2)"), std::string::npos) << slurp(log);

    ASSERT_EQ(run("eval --checkpoint " + ckpt + " --manifest " + manifest + " -o " + dir + "/ev", log), 0) << slurp(log);
    EXPECT_TRUE(fs::exists(dir + "/ev/report.json"));
    EXPECT_TRUE(fs::exists(dir + "/ev/instances.csv"));
    EXPECT_NE(slurp(log).find("PSNR"), std::string::npos);
}

TEST_F(Cli, CorruptCheckpointExitsWithTwo) {
    const std::string cfg = write_tiny_config(dir);
    ASSERT_EQ(run("gen-data -n 4 --height 16 --width 16 -o " + dir + "/d", log), 0);
    ASSERT_EQ(run("train -c " + cfg + " --manifest " + dir + "/d/manifest.jsonl -o " + dir + "/r --max-steps 1", log), 0)
        << slurp(log);
    std::string bytes = slurp(dir + "/r/latest.ckpt");
    bytes[bytes.size() / 2] ^= 0x40;
    std::ofstream(dir + "/bad.ckpt", std::ios::binary) << bytes;
    EXPECT_EQ(run("encode --checkpoint " + dir + "/bad.ckpt -i " + dir + "/d/images/000000.png", log), 2);
    EXPECT_NE(slurp(log).find("checksum"), std::string::npos) << slurp(log);
}

TEST_F(Cli, ArTrainingAndSampling) {
    const std::string cfg = write_tiny_config(dir);
    ASSERT_EQ(run("gen-data -n 6 --height 16 --width 16 -o " + dir + "/d", log), 0);
    const std::string manifest = dir + "/d/manifest.jsonl";
    ASSERT_EQ(run("train -c " + cfg + " --manifest " + manifest + " -o " + dir + "/r --max-steps 1", log), 0);
    const std::string tok = dir + "/r/latest.ckpt";
    ASSERT_EQ(run("train-ar --tokenizer " + tok + " --manifest " + manifest + " -o " + dir +
                      "/ar.bin --stage1-steps 2 --stage2-steps 2 --batch 2 --width 16 --layers 1 --heads 2",
                  log),
              0)
        << slurp(log);
    ASSERT_EQ(run("sample --tokenizer " + tok + " --ar " + dir + "/ar.bin --prompt 0 -n 2 --seed 4 -o " + dir + "/s1", log), 0)
        << slurp(log);
    ASSERT_EQ(run("sample --tokenizer " + tok + " --ar " + dir + "/ar.bin --prompt 0 -n 2 --seed 4 -o " + dir + "/s2", log), 0);
    EXPECT_EQ(slurp(dir + "/s1/sample_000.png"), slurp(dir + "/s2/sample_000.png"));
    EXPECT_EQ(slurp(dir + "/s1/sample_001.json"), slurp(dir + "/s2/sample_001.json"));
    EXPECT_EQ(run("sample --tokenizer " + tok + " --ar " + dir + "/ar.bin --prompt 7 -o " + dir + "/s3", log), 1);
    EXPECT_EQ(run("sample --tokenizer " + tok + " --ar " + dir + "/ar.bin --cfg-scale 0.5 -o " + dir + "/s3", log), 1);
}
