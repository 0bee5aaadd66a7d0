#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "counsel/dialogue.hpp"

namespace fs = std::filesystem;
using namespace counsel;

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

std::size_t count_lines(const std::string& s) {
    std::size_t n = 0;
    for (char c : s) n += c == '\n';
    return n;
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("counsel_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path at(const std::string& name) const { return dir_ / name; }

    CliResult run(const std::string& args, const std::string& input = "") const {
        const auto in = at("stdin.txt"), out = at("stdout.txt"), err = at("stderr.txt");
        std::ofstream(in, std::ios::binary) << input;
        const std::string cmd = std::string("\"") + COUNSEL_CLI + "\" " + args + " < \"" + in.string() + "\" > \"" +
                                out.string() + "\" 2> \"" + err.string() + "\"";
        const int status = std::system(cmd.c_str());
        CliResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    // A model small enough to train in well under a second.
    void write_tiny_config() const {
        std::ofstream(at("tiny.cfg")) << "n_encoder_layers = 1\nn_decoder_layers = 1\nd_model = 16\nn_heads = 2\n"
                                         "d_ff = 32\ndropout = 0\nbatch_size = 4\n";
    }

    fs::path dir_;
};

TEST_F(CliTest, GenDataWritesRequestedCountDeterministically) {
    for (const char* kind : {"dialogue", "nli", "toxicity", "paraphrase"}) {
        const std::string k = kind;
        const auto a = at(k + "_a.tsv"), b = at(k + "_b.tsv"), c = at(k + "_c.tsv");
        ASSERT_EQ(run("gen-data --kind " + k + " --n 100 --seed 3 --out " + a.string()).code, 0) << k;
        ASSERT_EQ(run("gen-data --kind " + k + " --n 100 --seed 3 --out " + b.string()).code, 0) << k;
        ASSERT_EQ(run("gen-data --kind " + k + " --n 100 --seed 4 --out " + c.string()).code, 0) << k;
        EXPECT_EQ(count_lines(slurp(a)), 100u) << k;
        EXPECT_EQ(slurp(a), slurp(b)) << k;
        EXPECT_NE(slurp(a), slurp(c)) << k;
    }
    // The dialogue corpus is directly readable as training data.
    EXPECT_EQ(read_corpus(at("dialogue_a.tsv")).size(), 100u);
}

TEST_F(CliTest, GenDataEchoesSettings) {
    const CliResult r = run("gen-data --kind nli --n 5 --seed 11 --out " + at("x.tsv").string());
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.err.find("# counsel gen-data"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("seed = 11"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainIsReproducibleAndLoadable) {
    write_tiny_config();
    ASSERT_EQ(run("gen-data --kind dialogue --n 40 --seed 2 --out " + at("d.tsv").string()).code, 0);
    const std::string base = "train --corpus " + at("d.tsv").string() + " --config " + at("tiny.cfg").string() +
                             " --epochs 3 --seed 9 --out ";
    const CliResult r1 = run(base + at("a.ckpt").string());
    ASSERT_EQ(r1.code, 0) << r1.err;
    ASSERT_EQ(run(base + at("b.ckpt").string()).code, 0);

    const std::string loss = slurp(at("a.ckpt.loss.tsv"));
    EXPECT_EQ(count_lines(loss), 3u) << loss;
    EXPECT_EQ(loss, slurp(at("b.ckpt.loss.tsv")));
    EXPECT_EQ(slurp(at("a.ckpt")), slurp(at("b.ckpt")));

    const auto m = DialogueModel::load(at("a.ckpt").string(), at("a.ckpt.vocab").string());
    EXPECT_EQ(m.model.config().d_model, 16u);
    EXPECT_EQ(m.vocab.id(kSeparatorToken), 4);
    EXPECT_FALSE(m.generate(encode("i feel tired", m.vocab)).empty());
}

TEST_F(CliTest, ZeroEpochsSavesTheInitialization) {
    write_tiny_config();
    ASSERT_EQ(run("gen-data --kind dialogue --n 20 --seed 2 --out " + at("d.tsv").string()).code, 0);
    const std::string base = "train --corpus " + at("d.tsv").string() + " --config " + at("tiny.cfg").string() + " --seed 5 ";
    ASSERT_EQ(run(base + "--epochs 0 --out " + at("z.ckpt").string()).code, 0);
    ASSERT_EQ(run(base + "--epochs 1 --out " + at("o.ckpt").string()).code, 0);

    const auto vocab = Vocabulary::load(at("z.ckpt.vocab").string());
    auto cfg = load_checkpoint(at("z.ckpt").string()).config();
    const Seq2SeqModel fresh = init_model(cfg, 5);
    EXPECT_EQ(load_checkpoint(at("z.ckpt").string()).params().list().front()->values(),
              fresh.params().list().front()->values());
    EXPECT_NE(slurp(at("z.ckpt")), slurp(at("o.ckpt")));
    EXPECT_EQ(vocab.size(), cfg.vocab_size);
}

TEST_F(CliTest, MalformedCorpusNamesTheLine) {
    std::ofstream(at("bad.tsv")) << "hello\tthere\nsecond\tline\nno tab here\n";
    const CliResult r = run("train --corpus " + at("bad.tsv").string() + " --out " + at("m.ckpt").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(at("m.ckpt")));
}

TEST_F(CliTest, UnknownConfigKeyIsRejected) {
    ASSERT_EQ(run("gen-data --kind dialogue --n 10 --out " + at("d.tsv").string()).code, 0);
    std::ofstream(at("bad.cfg")) << "d_modle = 16\n";
    const CliResult r = run("train --corpus " + at("d.tsv").string() + " --config " + at("bad.cfg").string() +
                      " --out " + at("m.ckpt").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("d_modle"), std::string::npos) << r.err;
}

TEST_F(CliTest, UnknownFlagsAndSubcommandsFail) {
    EXPECT_NE(run("gen-data --kind nli --n 3 --out x --bogus 1").code, 0);
    EXPECT_NE(run("gen-data --kind haiku --n 3 --out x").code, 0);
    EXPECT_NE(run("frobnicate").code, 0);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, EvalSuitesReportThroughExitCode) {
    const CliResult ok = run("eval --suite beam-oracle --seed 1");
    EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
    EXPECT_NE(ok.out.find("PASS"), std::string::npos) << ok.out;

    const CliResult missing = run("eval --suite nli");
    EXPECT_NE(missing.code, 0);
    EXPECT_NE(missing.err.find("--checkpoint"), std::string::npos) << missing.err;
}

TEST_F(CliTest, ChatReadsPipedInput) {
    write_tiny_config();
    ASSERT_EQ(run("gen-data --kind dialogue --n 30 --seed 2 --out " + at("d.tsv").string()).code, 0);
    ASSERT_EQ(run("train --corpus " + at("d.tsv").string() + " --config " + at("tiny.cfg").string() +
                  " --epochs 2 --out " + at("m.ckpt").string())
                  .code,
              0);
    const CliResult r = run("chat --checkpoint " + at("m.ckpt").string() + " --store " + at("sessions").string(),
                      "i feel tired\n\n   \ni am worried about my exams\n/quit\nnever read\n");
    ASSERT_EQ(r.code, 0) << r.err;
    std::size_t replies = 0;
    for (std::size_t p = r.out.find("bot> "); p != std::string::npos; p = r.out.find("bot> ", p + 1)) ++replies;
    EXPECT_EQ(replies, 2u) << r.out;

    std::size_t logs = 0;
    for (const auto& e : fs::directory_iterator(at("sessions"))) {
        const auto name = e.path().filename().string();
        if (name.ends_with(".jsonl") && !name.ends_with(".traces.jsonl")) {
            ++logs;
            // created, then two user and two system turns
            EXPECT_EQ(count_lines(slurp(e.path())), 5u);
        }
    }
    EXPECT_EQ(logs, 1u);
}

TEST_F(CliTest, ChatDebugPrintsVerdicts) {
    write_tiny_config();
    ASSERT_EQ(run("gen-data --kind dialogue --n 30 --seed 2 --out " + at("d.tsv").string()).code, 0);
    ASSERT_EQ(run("train --corpus " + at("d.tsv").string() + " --config " + at("tiny.cfg").string() +
                  " --epochs 1 --out " + at("m.ckpt").string())
                  .code,
              0);
    const CliResult r = run("chat --debug --checkpoint " + at("m.ckpt").string() + " --store " + at("s").string(),
                      "hello\n");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("exclusions"), std::string::npos) << r.out;
}

}  // namespace
