#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"

using namespace hmgp;
using namespace hmgp::testing;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

CliRun cli(std::vector<std::string> args) {
    args.insert(args.begin(), "hmgp");
    std::vector<const char *> argv;
    for (const auto &a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        const auto *info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("hmgp_cli_" + std::string(info->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string &name) const { return (dir_ / name).string(); }

    std::string write(const std::string &name, const std::string &text) const {
        std::ofstream(dir_ / name) << text;
        return path(name);
    }

    std::string dataset(Index n = 60, Index n_test = 20) const {
        SyntheticOptions o;
        o.n = n;
        o.q = 2;
        o.d1 = 6;
        o.d2 = 5;
        o.n_test = n_test;
        o.num_classes = 4;
        save_bundle(generate_synthetic(o), dir_ / "data");
        return path("data");
    }

    std::string config(const std::string &variant, double mu = 0.1) const {
        nlohmann::json j = {{"variant", variant}, {"q", 2},        {"epochs", 1},    {"inner_iters", 5},
                            {"M", 30},          {"infer_iters", 10}, {"lambda", 1.0}};
        if (variant.rfind("hm", 0) == 0) {
            j["harmonization"] = "trace";
            j["mu"] = mu;
        }
        return write(variant + ".json", j.dump());
    }

    fs::path dir_;
};

}  // namespace

TEST(Cli, NoArgumentsIsUsageError) { EXPECT_EQ(cli({}).code, ExitUsage); }

TEST(Cli, HelpListsConfigKeys) {
    for (const char *sub : {"synth", "train", "embed", "retrieve-eval", "gradcheck", "sweep", "diagnose"}) {
        const auto r = cli({sub, "--help"});
        EXPECT_EQ(r.code, ExitOk) << sub;
        EXPECT_NE(r.out.find("Config keys"), std::string::npos) << sub;
        EXPECT_NE(r.out.find("harmonization"), std::string::npos) << sub;
        EXPECT_NE(r.out.find("--seed"), std::string::npos) << sub;
    }
}

TEST(Cli, UnknownOptionIsUsageError) {
    const auto r = cli({"gradcheck", "--bogus"});
    EXPECT_EQ(r.code, ExitUsage);
    EXPECT_NE(r.err.find("--variant"), std::string::npos);
}

TEST_F(CliTest, TrainWithoutConfigIsUsageError) {
    const auto r = cli({"train", "--data", dataset(), "--out", path("m.hmgp")});
    EXPECT_EQ(r.code, ExitUsage);
    EXPECT_NE(r.err.find("--config"), std::string::npos);
}

TEST_F(CliTest, InvalidConfigIsUsageError) {
    const auto cfg = write("bad.json", R"({"variant": "hm-SimGP", "harmonization": "trace", "mu": -1})");
    EXPECT_EQ(cli({"train", "--config", cfg, "--data", dataset(), "--out", path("m.hmgp")}).code, ExitUsage);
}

TEST_F(CliTest, SemanticVariantWithoutLabelsIsDataError) {
    SyntheticOptions o;
    o.n = 30;
    o.q = 2;
    o.d1 = 4;
    o.d2 = 4;
    auto b = generate_synthetic(o);
    b.labels.reset();
    save_bundle(b, dir_ / "nolabels");
    const auto r = cli({"train", "--config", config("hm-RSimGP"), "--data", path("nolabels"), "--out", path("m.hmgp")});
    EXPECT_EQ(r.code, ExitData);
    EXPECT_FALSE(fs::exists(path("m.hmgp")));
}

TEST_F(CliTest, MissingDatasetIsDataError) {
    EXPECT_EQ(cli({"train", "--config", config("hm-SimGP"), "--data", path("nowhere"), "--out", path("m")}).code,
              ExitData);
}

TEST_F(CliTest, TrainEmbedEvaluate) {
    const auto data = dataset();
    const auto model = path("m.hmgp");
    ASSERT_EQ(cli({"train", "--config", config("hm-SimGP"), "--data", data, "--out", model}).code, ExitOk);
    EXPECT_TRUE(fs::exists(model));
    const std::string trace = read_file(model + ".trace.csv");
    EXPECT_EQ(trace.rfind("iteration,", 0), 0u);

    const auto bundle = load_bundle(data);
    write_matrix(select_rows(bundle.modalities[0], bundle.split.test), path("ya.mtxb"));
    write_matrix(select_rows(bundle.modalities[1], bundle.split.test), path("yb.mtxb"));
    write_labels(select_labels(*bundle.labels, bundle.split.test), path("labels.txt"));
    ASSERT_EQ(cli({"embed", "--model", model, "--data", path("ya.mtxb"), "--modality", "1", "--out", path("za.mtxb")}).code,
              ExitOk);
    ASSERT_EQ(cli({"embed", "--model", model, "--data", path("yb.mtxb"), "--modality", "2", "--out", path("zb.mtxb")}).code,
              ExitOk);
    EXPECT_EQ(read_matrix(path("za.mtxb")).rows(), 20);

    const auto r = cli({"retrieve-eval", "--latents-a", path("za.mtxb"), "--latents-b", path("zb.mtxb"), "--labels",
                        path("labels.txt"), "--out", path("metrics")});
    ASSERT_EQ(r.code, ExitOk) << r.err;
    for (const char *f : {"metrics.json", "pr_i2t.csv", "pr_t2i.csv", "pr_raw_i2t.csv", "pr_raw_t2i.csv", "ap_i2t.csv",
                          "ap_t2i.csv"}) {
        EXPECT_TRUE(fs::exists(dir_ / "metrics" / f)) << f;
    }
    const auto j = nlohmann::json::parse(read_file(dir_ / "metrics" / "metrics.json"));
    EXPECT_NEAR(j["Average"].get<double>(), 0.5 * (j["I2T"].get<double>() + j["T2I"].get<double>()), 1e-15);
}

TEST_F(CliTest, EmbedRejectsWrongDimensionAndAcceptsEmpty) {
    const auto model = path("m.hmgp");
    ASSERT_EQ(cli({"train", "--config", config("hmGPLVM"), "--data", dataset(), "--out", model}).code, ExitOk);
    write_matrix(Matrix::Zero(3, 2), path("bad.mtxb"));
    EXPECT_EQ(cli({"embed", "--model", model, "--data", path("bad.mtxb"), "--modality", "1", "--out", path("z")}).code,
              ExitData);
    EXPECT_EQ(cli({"embed", "--model", model, "--data", path("bad.mtxb"), "--modality", "3", "--out", path("z")}).code,
              ExitData);
    write_matrix(Matrix::Zero(0, 6), path("empty.mtxb"));
    EXPECT_EQ(
        cli({"embed", "--model", model, "--data", path("empty.mtxb"), "--modality", "1", "--out", path("z.mtxb")}).code,
        ExitOk);
    const Matrix z = read_matrix(path("z.mtxb"));
    EXPECT_EQ(z.rows(), 0);
    EXPECT_EQ(z.cols(), 2);
}

TEST_F(CliTest, RetrieveEvalSymmetricInputs) {
    const Matrix z = randn(30, 3, 1);
    LabelSet labels;
    for (int i = 0; i < 30; ++i) labels.push_back({i % 3});
    write_matrix(z, path("z.csv"));
    write_labels(labels, path("l.txt"));
    ASSERT_EQ(cli({"retrieve-eval", "--latents-a", path("z.csv"), "--latents-b", path("z.csv"), "--labels", path("l.txt"),
                   "--out", path("o")})
                  .code,
              ExitOk);
    const auto j = nlohmann::json::parse(read_file(dir_ / "o" / "metrics.json"));
    EXPECT_DOUBLE_EQ(j["I2T"].get<double>(), j["T2I"].get<double>());
}

TEST_F(CliTest, RetrieveEvalLabelMismatchIsDataError) {
    write_matrix(randn(5, 2, 1), path("z.csv"));
    write_labels({{0}, {1}}, path("l.txt"));
    EXPECT_EQ(cli({"retrieve-eval", "--latents-a", path("z.csv"), "--latents-b", path("z.csv"), "--labels", path("l.txt"),
                   "--out", path("o")})
                  .code,
              ExitData);
}

TEST(Cli, GradcheckPassesEveryVariant) {
    for (const char *v : {"mGPLVM", "hmGPLVM", "m-SimGP", "hm-SimGP", "m-RSimGP", "hm-RSimGP"}) {
        const auto r = cli({"gradcheck", "--variant", v, "--seed", "3"});
        EXPECT_EQ(r.code, ExitOk) << v << ": " << r.out << r.err;
    }
    for (const char *k : {"fnorm", "l21"}) {
        EXPECT_EQ(cli({"gradcheck", "--variant", "hmGPLVM", "--harmonization", k}).code, ExitOk) << k;
    }
}

TEST(Cli, GradcheckDetectsInjectedFault) {
    const auto r = cli({"gradcheck", "--variant", "hm-SimGP", "--fault-scale", "1.01"});
    EXPECT_EQ(r.code, ExitNumerical);
    EXPECT_NE(r.err.find("gradient check failed"), std::string::npos);
}

TEST(Cli, GradcheckBadVariantIsUsageError) {
    EXPECT_EQ(cli({"gradcheck", "--variant", "nope"}).code, ExitUsage);
}

TEST_F(CliTest, SweepMatchesSingleRun) {
    const auto data = dataset();
    const auto cfg = config("hm-SimGP");
    ASSERT_EQ(cli({"sweep", "--config", cfg, "--data", data, "--grid-mu", "0,0.5", "--grid-lambda", "1,2", "--out",
                   path("s.csv")})
                  .code,
              ExitOk);
    const std::string text = read_file(path("s.csv"));
    EXPECT_EQ(text.rfind("mu,lambda,map_i2t,map_t2i,map_avg\n", 0), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);

    // The (0.5, 1) grid point is the same run as a direct call.
    ModelConfig c = load_config(cfg);
    c.harmonization->weights = {0.5};
    const auto direct = train_and_evaluate(load_bundle(data), c);
    std::istringstream rows(text);
    std::string line;
    bool found = false;
    while (std::getline(rows, line)) {
        if (line.rfind("0.5,1,", 0) != 0) continue;
        found = true;
        const double avg = std::stod(line.substr(line.rfind(',') + 1));
        EXPECT_DOUBLE_EQ(avg, direct.metrics.average());
    }
    EXPECT_TRUE(found);
}

TEST_F(CliTest, SweepBadGridIsUsageError) {
    EXPECT_EQ(cli({"sweep", "--config", config("hm-SimGP"), "--data", dataset(), "--grid-mu", "0,abc", "--out",
                   path("s.csv")})
                  .code,
              ExitUsage);
}

TEST_F(CliTest, DiagnoseWritesReports) {
    const auto data = dataset();
    ASSERT_EQ(cli({"train", "--config", config("hmGPLVM", 1.0), "--data", data, "--out", path("a.hmgp")}).code, ExitOk);
    ASSERT_EQ(cli({"train", "--config", config("hmGPLVM", 0.0), "--data", data, "--out", path("b.hmgp")}).code, ExitOk);
    ASSERT_EQ(cli({"diagnose", "--model", path("a.hmgp"), "--baseline", path("b.hmgp"), "--out", path("d")}).code,
              ExitOk);
    for (const char *f : {"divergence.json", "absdiff1.mtxb", "absdiff2.mtxb", "paired.csv"}) {
        EXPECT_TRUE(fs::exists(dir_ / "d" / f)) << f;
    }
    const auto j = nlohmann::json::parse(read_file(dir_ / "d" / "divergence.json"));
    EXPECT_GE(j["total_riemannian"].get<double>(), 0.0);
}

TEST_F(CliTest, SeedOverrideIsDeterministic) {
    const auto data = dataset();
    const auto cfg = config("hm-SimGP");
    ASSERT_EQ(cli({"train", "--config", cfg, "--data", data, "--out", path("a"), "--seed", "7"}).code, ExitOk);
    ASSERT_EQ(cli({"train", "--config", cfg, "--data", data, "--out", path("b"), "--seed", "7"}).code, ExitOk);
    ASSERT_EQ(cli({"train", "--config", cfg, "--data", data, "--out", path("c"), "--seed", "8"}).code, ExitOk);
    EXPECT_EQ(read_file(path("a")), read_file(path("b")));
    EXPECT_NE(read_file(path("a")), read_file(path("c")));
}

TEST_F(CliTest, SynthIsDeterministic) {
    ASSERT_EQ(cli({"synth", "--out", path("s1"), "--n", "40", "--seed", "5"}).code, ExitOk);
    ASSERT_EQ(cli({"synth", "--out", path("s2"), "--n", "40", "--seed", "5"}).code, ExitOk);
    EXPECT_EQ(read_file(dir_ / "s1" / "Y1.mtxb"), read_file(dir_ / "s2" / "Y1.mtxb"));
    EXPECT_EQ(load_bundle(path("s1")).rows(), 40);
}
