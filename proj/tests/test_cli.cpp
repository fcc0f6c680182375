#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <regex>
#include <sstream>

#include "crowdnet/cli.hpp"
#include "support.hpp"

using namespace crowdnet;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out, err;
};

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

RunResult run(const std::string& args, const TempDir& scratch) {
    static int counter = 0;
    const std::string tag = std::to_string(counter++);
    const std::string out = scratch / ("stdout" + tag), err = scratch / ("stderr" + tag);
    const std::string cmd = quote(CROWDNET_CLI_PATH) + " " + args + " >" + quote(out) + " 2>" + quote(err);
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

std::vector<std::string> files_in(const std::string& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

void write_tiny_config(const std::string& path, std::uint64_t seed = 3) {
    std::ofstream os(path);
    os << "variant = msfanet\nwidth_multiplier = 1/16\nuse_can = true\nuse_aspp = true\nuse_skip = true\n"
          "learning_rate = 1e-3\nbatch_size = 2\ncrop_h = 32\ncrop_w = 32\nepochs = 2\nloss_alpha = 0.1\n"
          "lookahead_k = 2\nlookahead_alpha = 0.5\nsigma = 3\nseed = "
       << seed << "\n";
}

std::string table_value(const std::string& out, const std::string& label) {
    std::istringstream is(out);
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind(label, 0) == 0) return line.substr(label.size());
    }
    return "";
}

// Everything after the echoed invocation line.
std::string body(const std::string& out) { return out.substr(out.find('\n') + 1); }

}  // namespace

TEST(CliSynth, EmptyCorpusHasOnlyManifest) {
    TempDir tmp("cli");
    const auto r = run("synth --out " + quote(tmp / "d") + " --scenes 0", tmp);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(files_in(tmp / "d"), std::vector<std::string>{"manifest.csv"});
    EXPECT_EQ(slurp(tmp / "d/manifest.csv"), "image,annotations,heads,style\n");
}

TEST(CliSynth, SameSeedGivesBitIdenticalCorpus) {
    TempDir tmp("cli");
    for (const char* d : {"a", "b"}) {
        ASSERT_EQ(run("synth --out " + quote(tmp / d) + " --scenes 3 --size 48x64 --seed 11", tmp).code, 0);
    }
    ASSERT_EQ(run("synth --out " + quote(tmp / "c") + " --scenes 3 --size 48x64 --seed 12", tmp).code, 0);
    const auto names = files_in(tmp / "a");
    ASSERT_EQ(names.size(), 7u);
    EXPECT_EQ(names, files_in(tmp / "b"));
    bool any_differs = false;
    for (const auto& n : names) {
        EXPECT_EQ(slurp(tmp / ("a/" + n)), slurp(tmp / ("b/" + n))) << n;
        if (n != "manifest.csv" && slurp(tmp / ("a/" + n)) != slurp(tmp / ("c/" + n))) any_differs = true;
    }
    EXPECT_TRUE(any_differs);
    const Image img = read_ppm(tmp / "a/img_0000.ppm");
    EXPECT_EQ(img.h, 48u);
    EXPECT_EQ(img.w, 64u);
}

TEST(CliSynth, FixedHeadRangeGivesThatManyRows) {
    TempDir tmp("cli");
    ASSERT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes 4 --heads-min 5 --heads-max 5 --seed 2", tmp).code,
              0);
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string csv = tmp / ("d/" + cli::scene_stem(i) + ".csv");
        EXPECT_EQ(read_annotations(csv).size(), 5u);
    }
}

TEST(CliSynth, ManifestListsEveryScene) {
    TempDir tmp("cli");
    ASSERT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes 3 --heads-min 2 --heads-max 9", tmp).code, 0);
    std::istringstream is(slurp(tmp / "d/manifest.csv"));
    std::string line;
    std::getline(is, line);
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        const std::string stem = cli::scene_stem(rows);
        EXPECT_EQ(line.rfind(stem + ".ppm," + stem + ".csv,", 0), 0u) << line;
        const std::size_t heads = std::stoul(line.substr(line.find(".csv,") + 5));
        EXPECT_EQ(read_annotations(tmp / ("d/" + stem + ".csv")).size(), heads);
        ++rows;
    }
    EXPECT_EQ(rows, 3u);
}

TEST(CliSynth, InvertedHeadRangeIsUsageError) {
    TempDir tmp("cli");
    const auto r = run("synth --out " + quote(tmp / "d") + " --heads-min 6 --heads-max 5", tmp);
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("heads-max"), std::string::npos);
}

TEST(CliGengt, DensityMassMatchesAnnotationRows) {
    TempDir tmp("cli");
    ASSERT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes 4 --size 64x96 --seed 5", tmp).code, 0);
    const auto r = run("gengt --data " + quote(tmp / "d") + " --sigma 4 --out " + quote(tmp / "gt"), tmp);
    ASSERT_EQ(r.code, 0) << r.err;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string stem = cli::scene_stem(i);
        const Grid d = read_dmap(tmp / ("gt/" + stem + ".dmap"));
        EXPECT_EQ(d.h, 32u);
        EXPECT_EQ(d.w, 48u);
        const double rows = static_cast<double>(read_annotations(tmp / ("d/" + stem + ".csv")).size());
        EXPECT_NEAR(d.sum(), rows, 1e-4) << stem;
        const Grid att = read_pgm(tmp / ("gt/" + stem + "_attention.pgm"));
        EXPECT_EQ(att.h, 32u);
        EXPECT_EQ(att.w, 48u);
        for (float v : att.v) EXPECT_TRUE(v == 0.0f || v == 1.0f);
        EXPECT_TRUE(fs::exists(tmp / ("gt/" + stem + "_density.pgm")));
    }
}

TEST(CliGengt, RerunIsByteIdentical) {
    TempDir tmp("cli");
    ASSERT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes 3 --size 64x64 --seed 8", tmp).code, 0);
    ASSERT_EQ(run("gengt --data " + quote(tmp / "d") + " --sigma 5 --out " + quote(tmp / "g1"), tmp).code, 0);
    ASSERT_EQ(run("gengt --data " + quote(tmp / "d") + " --sigma 5 --out " + quote(tmp / "g2"), tmp).code, 0);
    const auto names = files_in(tmp / "g1");
    ASSERT_EQ(names.size(), 9u);
    EXPECT_EQ(names, files_in(tmp / "g2"));
    for (const auto& n : names) EXPECT_EQ(slurp(tmp / ("g1/" + n)), slurp(tmp / ("g2/" + n))) << n;
    const std::string before = slurp(tmp / "g1/img_0001.dmap");
    ASSERT_EQ(run("gengt --data " + quote(tmp / "d") + " --sigma 5 --out " + quote(tmp / "g1"), tmp).code, 0);
    EXPECT_EQ(slurp(tmp / "g1/img_0001.dmap"), before);
}

TEST(CliGengt, SigmaTenMatchesTrancosPreset) {
    TempDir tmp("cli");
    ASSERT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes 2 --size 64x64 --seed 4", tmp).code, 0);
    ASSERT_EQ(run("gengt --data " + quote(tmp / "d") + " --sigma 10 --out " + quote(tmp / "a"), tmp).code, 0);
    ASSERT_EQ(run("gengt --data " + quote(tmp / "d") + " --preset trancos --out " + quote(tmp / "b"), tmp).code, 0);
    for (const auto& n : files_in(tmp / "a")) EXPECT_EQ(slurp(tmp / ("a/" + n)), slurp(tmp / ("b/" + n))) << n;
    const auto both = run("gengt --data " + quote(tmp / "d") + " --sigma 10 --preset trancos --out " +
                              quote(tmp / "c"),
                          tmp);
    EXPECT_EQ(both.code, 1);
    EXPECT_EQ(run("gengt --data " + quote(tmp / "d") + " --preset nope --out " + quote(tmp / "c"), tmp).code, 1);
}

TEST(CliGengt, OrphanFilesAreListed) {
    TempDir tmp("cli");
    ASSERT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes 2 --size 32x32", tmp).code, 0);
    fs::remove(tmp / "d/img_0001.ppm");
    fs::copy_file(tmp / "d/img_0000.ppm", tmp / "d/extra.ppm");
    const auto r = run("gengt --data " + quote(tmp / "d") + " --out " + quote(tmp / "gt"), tmp);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("img_0001.csv"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("extra.ppm"), std::string::npos) << r.err;
}

TEST(CliGengt, MissingDataDirIsDataError) {
    TempDir tmp("cli");
    EXPECT_EQ(run("gengt --data " + quote(tmp / "nope") + " --out " + quote(tmp / "gt"), tmp).code, 2);
}

TEST(CliGengt, NonPositiveSigmaIsUsageError) {
    TempDir tmp("cli");
    ASSERT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes 1 --size 32x32", tmp).code, 0);
    EXPECT_EQ(run("gengt --data " + quote(tmp / "d") + " --sigma 0 --out " + quote(tmp / "gt"), tmp).code, 1);
}

TEST(CliParse, UnknownFlagsAndMissingRequiredAreUsageErrors) {
    TempDir tmp("cli");
    EXPECT_EQ(run("synth --out " + quote(tmp / "d") + " --bogus 1", tmp).code, 1);
    EXPECT_EQ(run("synth", tmp).code, 1);
    EXPECT_EQ(run("", tmp).code, 1);
    EXPECT_EQ(run("frobnicate", tmp).code, 1);
    EXPECT_EQ(run("synth --out " + quote(tmp / "d") + " --size 12by4", tmp).code, 1);
    EXPECT_EQ(run("synth --out " + quote(tmp / "d") + " --scenes -3", tmp).code, 1);
    EXPECT_EQ(run("bench --variant resnet --runs 0", tmp).code, 1);
    EXPECT_EQ(run("bench --width 1.5 --runs 0", tmp).code, 1);
    EXPECT_FALSE(fs::exists(tmp / "d"));
}

TEST(CliParse, HelpExitsZero) {
    TempDir tmp("cli");
    const auto r = run("--help", tmp);
    EXPECT_EQ(r.code, 0);
    for (const char* sub : {"synth", "gengt", "train", "infer", "eval", "bench"}) {
        EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
    }
}

TEST(CliParse, EveryCommandEchoesResolvedOptionsFirst) {
    TempDir tmp("cli");
    const auto s = run("synth --out " + quote(tmp / "d") + " --scenes 1 --size 32x48", tmp);
    EXPECT_EQ(first_line(s.out),
              "synth out=" + (tmp / "d") + " scenes=1 heads=[5,20] size=32x48 seed=0");
    const auto g = run("gengt --data " + quote(tmp / "d") + " --preset we --out " + quote(tmp / "gt"), tmp);
    EXPECT_EQ(first_line(g.out).rfind("gengt data=" + (tmp / "d") + " sigma=4 out=" + (tmp / "gt") + " threads=", 0),
              0u)
        << g.out;
    const auto b = run("bench --variant msegnet --width 1/4 --size 32x32 --runs 0", tmp);
    EXPECT_EQ(first_line(b.out), "bench variant=msegnet width=0.25 size=32x32 runs=0 warmup=5");
}

TEST(CliBench, ReportsLibraryParamAndMacCounts) {
    TempDir tmp("cli");
    for (const Variant v : {Variant::msfanet, Variant::msegnet}) {
        const auto r = run("bench --variant " + to_string(v) + " --width 0.125 --size 64x96 --runs 2", tmp);
        ASSERT_EQ(r.code, 0) << r.err;
        ModelConfig mc;
        mc.variant = v;
        mc.width_multiplier = 0.125;
        Model<float> m(mc);
        const std::string params = table_value(r.out, "params ");
        const std::string macs = table_value(r.out, "macs ");
        EXPECT_EQ(params.substr(0, params.find(' ')), std::to_string(m.count_params()));
        EXPECT_EQ(macs.substr(0, macs.find(' ')), std::to_string(m.count_macs(64, 96)));
        EXPECT_GT(std::stod(table_value(r.out, "latency_ms ")), 0.0);
    }
}

TEST(CliBench, CountsAreDeterministic) {
    cli::BenchOptions o;
    o.width = 0.25;
    o.size = {48, 48};
    o.runs = 0;
    const auto a = cli::run_bench(o), b = cli::run_bench(o);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.macs, b.macs);
    EXPECT_EQ(a.mean_seconds, 0.0);
}

class CliPipeline : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        tmp_ = new TempDir("pipeline");
        ASSERT_EQ(run("synth --out " + quote(*tmp_ / "data") + " --scenes 3 --size 64x64 --seed 21", *tmp_).code, 0);
        write_tiny_config(*tmp_ / "tiny.cfg");
        train_a_ = new RunResult(run("train --config " + quote(*tmp_ / "tiny.cfg") + " --data " +
                                         quote(*tmp_ / "data") + " --out " + quote(*tmp_ / "ckpt/a.msfw"),
                                     *tmp_));
        train_b_ = new RunResult(run("train --config " + quote(*tmp_ / "tiny.cfg") + " --data " +
                                         quote(*tmp_ / "data") + " --out " + quote(*tmp_ / "ckpt/b.msfw"),
                                     *tmp_));
    }
    static void TearDownTestSuite() {
        delete train_a_;
        delete train_b_;
        delete tmp_;
    }
    static std::string path(const std::string& rel) { return *tmp_ / rel; }
    static RunResult cli(const std::string& args) { return run(args, *tmp_); }

    static TempDir* tmp_;
    static RunResult* train_a_;
    static RunResult* train_b_;
};

TempDir* CliPipeline::tmp_ = nullptr;
RunResult* CliPipeline::train_a_ = nullptr;
RunResult* CliPipeline::train_b_ = nullptr;

TEST_F(CliPipeline, TrainWritesCheckpointSidecars) {
    ASSERT_EQ(train_a_->code, 0) << train_a_->err;
    for (const char* ext : {"", ".cfg", ".log.csv", ".opt"}) {
        EXPECT_TRUE(fs::exists(path(std::string("ckpt/a.msfw") + ext))) << ext;
    }
    EXPECT_EQ(load_train_config(path("ckpt/a.msfw.cfg")).model.width_multiplier, 0.0625);
    // 3 scenes, batch 2, 2 epochs: 4 steps plus the header.
    const std::string log = slurp(path("ckpt/a.msfw.log.csv"));
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);
}

TEST_F(CliPipeline, TrainEchoesResolvedConfig) {
    ASSERT_EQ(train_a_->code, 0);
    const std::string& out = train_a_->out;
    EXPECT_EQ(first_line(out).rfind("train config=", 0), 0u);
    const std::string cfg = format_train_config(load_train_config(path("tiny.cfg")));
    const auto pos = out.find(cfg);
    ASSERT_NE(pos, std::string::npos) << out;
    EXPECT_LT(pos, out.find("parameters "));
    EXPECT_LT(out.find("parameters "), out.find("epoch 1 "));
}

TEST_F(CliPipeline, SameSeedGivesIdenticalCheckpoints) {
    ASSERT_EQ(train_a_->code, 0);
    ASSERT_EQ(train_b_->code, 0);
    for (const char* ext : {"", ".cfg", ".log.csv", ".opt"}) {
        EXPECT_EQ(slurp(path(std::string("ckpt/a.msfw") + ext)), slurp(path(std::string("ckpt/b.msfw") + ext)))
            << ext;
    }
}

TEST_F(CliPipeline, DifferentSeedChangesCheckpoint) {
    write_tiny_config(path("tiny9.cfg"), 9);
    const auto r = cli("train --config " + quote(path("tiny9.cfg")) + " --data " + quote(path("data")) + " --out " +
                       quote(path("ckpt/c.msfw")));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(slurp(path("ckpt/a.msfw")), slurp(path("ckpt/c.msfw")));
}

TEST_F(CliPipeline, CheckpointLoadsAndMatchesStoredWeights) {
    Model<float> m = cli::load_checkpoint(path("ckpt/a.msfw"));
    EXPECT_FALSE(m.training());
    const ParamStore<float> w = load_weights(path("ckpt/a.msfw"));
    EXPECT_EQ(m.params().names(), w.names());
    for (const auto& n : w.names()) EXPECT_EQ(m.params().at(n).values(), w.at(n).values()) << n;
}

TEST_F(CliPipeline, EvalPrintsReportMatchingLibrary) {
    const auto r = cli("eval --model " + quote(path("ckpt/a.msfw")) + " --data " + quote(path("data")) +
                       " --sigma 3");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(first_line(r.out).rfind("eval model=" + path("ckpt/a.msfw") + " model2=- data=" + path("data") +
                                          " sigma=3 roi=- game=3 threads=",
                                      0),
              0u);
    Model<float> m = cli::load_checkpoint(path("ckpt/a.msfw"));
    const auto rep = evaluate_dataset<float>({&m}, cli::load_dataset(path("data")), 3.0, 3, std::nullopt, 1);
    EXPECT_EQ(body(r.out), report_csv(rep) + report_table(rep));
    EXPECT_NE(r.out.find("img_0002,"), std::string::npos);
}

TEST_F(CliPipeline, GameZeroOutputEqualsMaeColumn) {
    const auto r = cli("eval --model " + quote(path("ckpt/a.msfw")) + " --data " + quote(path("data")) +
                       " --sigma 3 --game 0");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(table_value(r.out, "GAME(0) "), table_value(r.out, "MAE     "));
    EXPECT_EQ(table_value(r.out, "GAME(1) "), "");
    EXPECT_NE(r.out.find("MEAN,"), std::string::npos);
}

TEST_F(CliPipeline, IdenticalEnsembleEqualsSingleModel) {
    const std::string common = " --data " + quote(path("data")) + " --sigma 3";
    const auto single = cli("eval --model " + quote(path("ckpt/a.msfw")) + common);
    const auto pair = cli("eval --model " + quote(path("ckpt/a.msfw")) + " --model2 " + quote(path("ckpt/b.msfw")) +
                          common);
    ASSERT_EQ(single.code, 0);
    ASSERT_EQ(pair.code, 0) << pair.err;
    EXPECT_NE(first_line(pair.out).find("model2=" + path("ckpt/b.msfw")), std::string::npos);
    EXPECT_EQ(body(single.out), body(pair.out));
}

TEST_F(CliPipeline, EvalRoiMaskAndMismatch) {
    Grid full(64, 64, 1.0f);
    write_pgm(path("roi_full.pgm"), full);
    const std::string common = " --model " + quote(path("ckpt/a.msfw")) + " --data " + quote(path("data")) +
                               " --sigma 3";
    const auto plain = cli("eval" + common);
    const auto masked = cli("eval" + common + " --roi " + quote(path("roi_full.pgm")));
    ASSERT_EQ(masked.code, 0) << masked.err;
    EXPECT_EQ(body(plain.out), body(masked.out));

    Grid empty(64, 64, 0.0f);
    write_pgm(path("roi_empty.pgm"), empty);
    const auto none = cli("eval" + common + " --roi " + quote(path("roi_empty.pgm")));
    ASSERT_EQ(none.code, 0);
    EXPECT_EQ(table_value(none.out, "MAE     "), "0.0000");

    write_pgm(path("roi_small.pgm"), Grid(32, 64, 1.0f));
    const auto bad = cli("eval" + common + " --roi " + quote(path("roi_small.pgm")));
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.err.find("ROI is 32x64"), std::string::npos) << bad.err;
}

TEST_F(CliPipeline, EvalRejectsBadGameLevel) {
    EXPECT_EQ(cli("eval --model " + quote(path("ckpt/a.msfw")) + " --data " + quote(path("data")) + " --game 4").code,
              1);
}

TEST_F(CliPipeline, InferWritesHalfSizeMapAndCount) {
    const auto r = cli("infer --model " + quote(path("ckpt/a.msfw")) + " --image " + quote(path("data/img_0000.ppm")) +
                       " --out " + quote(path("pred.dmap")) + " --viz " + quote(path("pred.pgm")) + " --count");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.err, "");
    const Grid d = read_dmap(path("pred.dmap"));
    EXPECT_EQ(d.h, 32u);
    EXPECT_EQ(d.w, 32u);
    const Grid viz = read_pgm(path("pred.pgm"));
    EXPECT_EQ(viz.h, 32u);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", count_from_density(DensityMap{d}));
    EXPECT_EQ(table_value(r.out, "count "), buf);

    Model<float> m = cli::load_checkpoint(path("ckpt/a.msfw"));
    const auto p = predict(m, read_ppm(path("data/img_0000.ppm")));
    EXPECT_EQ(p.density.grid.v, d.v);
}

TEST_F(CliPipeline, InferPadsIndivisibleImagesAndReportsOnStderr) {
    std::mt19937_64 rng(4);
    const SceneAnnotation s = synth_scene(rng, 6, 40, 56, SceneStyle::uniform);
    write_ppm(path("odd.ppm"), s.image);
    const auto r = cli("infer --model " + quote(path("ckpt/a.msfw")) + " --image " + quote(path("odd.ppm")) +
                       " --out " + quote(path("odd.dmap")));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("padded 40x56 to 48x64"), std::string::npos) << r.err;
    const Grid d = read_dmap(path("odd.dmap"));
    EXPECT_EQ(d.h, 20u);
    EXPECT_EQ(d.w, 28u);
    EXPECT_EQ(table_value(r.out, "count "), "");
}

TEST_F(CliPipeline, BadCheckpointMagicIsDataError) {
    std::string bytes = slurp(path("ckpt/a.msfw"));
    bytes[0] = 'X';
    fs::create_directories(path("bad"));
    std::ofstream(path("bad/x.msfw"), std::ios::binary) << bytes;
    fs::copy_file(path("ckpt/a.msfw.cfg"), path("bad/x.msfw.cfg"), fs::copy_options::overwrite_existing);
    const auto r = cli("infer --model " + quote(path("bad/x.msfw")) + " --image " + quote(path("data/img_0000.ppm")) +
                       " --out " + quote(path("bad/o.dmap")));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("magic"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(path("bad/o.dmap")));
    EXPECT_EQ(cli("eval --model " + quote(path("bad/x.msfw")) + " --data " + quote(path("data"))).code, 2);
    EXPECT_EQ(cli("eval --model " + quote(path("bad/missing.msfw")) + " --data " + quote(path("data"))).code, 2);
}

TEST_F(CliPipeline, NonFiniteWeightsAbortWithNumericCode) {
    ParamStore<float> w = load_weights(path("ckpt/a.msfw"));
    w.at("density.head.bias").values()[0] = std::numeric_limits<float>::quiet_NaN();
    fs::create_directories(path("nan"));
    save_weights(w, path("nan/x.msfw"));
    fs::copy_file(path("ckpt/a.msfw.cfg"), path("nan/x.msfw.cfg"), fs::copy_options::overwrite_existing);
    const auto r = cli("infer --model " + quote(path("nan/x.msfw")) + " --image " + quote(path("data/img_0000.ppm")) +
                       " --out " + quote(path("nan/o.dmap")));
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("numeric error"), std::string::npos) << r.err;
}

TEST_F(CliPipeline, TrainRejectsBadConfigAndData) {
    std::ofstream(path("broken.cfg")) << "learning_rate = fast\n";
    EXPECT_EQ(cli("train --config " + quote(path("broken.cfg")) + " --data " + quote(path("data")) + " --out " +
                  quote(path("x/ckpt")))
                  .code,
              1);
    EXPECT_EQ(cli("train --config " + quote(path("missing.cfg")) + " --data " + quote(path("data")) + " --out " +
                  quote(path("x/ckpt")))
                  .code,
              2);
    EXPECT_EQ(cli("train --config " + quote(path("tiny.cfg")) + " --data " + quote(path("nowhere")) + " --out " +
                  quote(path("x/ckpt")))
                  .code,
              2);
    EXPECT_FALSE(fs::exists(path("x/ckpt")));
}

TEST(CliFunctions, InProcessCommandsMatchTheExecutable) {
    TempDir tmp("cli");
    cli::SynthOptions so;
    so.out = tmp / "lib";
    so.scenes = 2;
    so.size = {32, 48};
    so.seed = 6;
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_synth(so, log), cli::kOk);
    ASSERT_EQ(run("synth --out " + quote(tmp / "exe") + " --scenes 2 --size 32x48 --seed 6", tmp).code, 0);
    for (const auto& n : files_in(tmp / "lib")) EXPECT_EQ(slurp(tmp / ("lib/" + n)), slurp(tmp / ("exe/" + n))) << n;
    const auto scenes = cli::load_dataset(tmp / "lib");
    ASSERT_EQ(scenes.size(), 2u);
    EXPECT_EQ(scenes[0].name, "img_0000");
    EXPECT_EQ(scenes[1].image.w, 48u);
}

TEST(CliFunctions, SizeParsing) {
    const auto s = cli::parse_size("240x320");
    EXPECT_EQ(s.h, 240u);
    EXPECT_EQ(s.w, 320u);
    EXPECT_EQ(cli::parse_size("8X16").w, 16u);
    EXPECT_THROW(cli::parse_size("240"), UsageError);
    EXPECT_THROW(cli::parse_size("0x5"), UsageError);
    EXPECT_THROW(cli::parse_size("ax5"), UsageError);
    EXPECT_EQ(cli::scene_stem(7), "img_0007");
}
