#include <gtest/gtest.h>

#include <sys/wait.h>

#include "test_util.hpp"

using namespace hopflow;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run hopflow_cli(const std::string& args)
{
    const std::string cmd = std::string(HOPFLOW_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string src(const std::string& rel) { return std::string(HOPFLOW_SOURCE_DIR) + "/" + rel; }

const std::string kToy = src("data/toy_homophily");
const std::string kToyConfig = src("configs/toy_homophily.json");

std::string quick_overrides() { return " --override max_epochs=8 --override patience=8 --override data.num_splits=2"; }

} // namespace

TEST(Cli, UsageErrorsExitTwo)
{
    EXPECT_EQ(hopflow_cli("").code, 2);
    EXPECT_EQ(hopflow_cli("frobnicate").code, 2);
    EXPECT_EQ(hopflow_cli("train --data /nonexistent/dir --out /tmp/x").code, 2);
    TempDir dir;
    auto r = hopflow_cli("train --data " + kToy + " --override model.depth=3 --out " + (dir / "o").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("model.depth"), std::string::npos) << r.output;
    EXPECT_FALSE(fs::exists(dir / "o"));
    EXPECT_FALSE(fs::exists(dir / "o.partial"));
    EXPECT_EQ(hopflow_cli("gen-toy --kind spiral --out " + (dir / "g").string()).code, 2);
    EXPECT_EQ(hopflow_cli("--help").code, 0);
}

TEST(Cli, DataErrorsExitThree)
{
    TempDir dir;
    fs::copy(kToy, dir / "ds", fs::copy_options::recursive);
    auto bytes = testutil::read_file(dir / "ds/features.bin");
    testutil::write_file(dir / "ds/features.bin", bytes.substr(0, bytes.size() - 3));
    auto r = hopflow_cli("stats --data " + (dir / "ds").string());
    EXPECT_EQ(r.code, 3) << r.output;
    testutil::write_file(dir / "ds/features.bin", bytes);
    testutil::write_file(dir / "ds/edges.tsv", "0\t1\n0\t999\n");
    r = hopflow_cli("precompute --data " + (dir / "ds").string() + " --hops 1 --out " + (dir / "c.hgh").string());
    EXPECT_EQ(r.code, 3) << r.output;
    EXPECT_NE(r.output.find(":2"), std::string::npos) << r.output;
}

TEST(Cli, NumericFailureExitsFour)
{
    TempDir dir;
    auto ds = toy::make_homophily(0);
    for (auto& v : ds.features.data) v = std::numeric_limits<float>::max();
    save_dataset(ds, dir / "big");
    auto r = hopflow_cli("train --data " + (dir / "big").string() + " --config " + kToyConfig + quick_overrides() + " --out " +
                         (dir / "o").string());
    EXPECT_EQ(r.code, 4) << r.output;
    EXPECT_NE(r.output.find("epoch 1"), std::string::npos) << r.output;
    EXPECT_FALSE(fs::exists(dir / "o"));
}

TEST(Cli, PrecomputeZeroHopsIsFeaturePayload)
{
    TempDir dir;
    auto r = hopflow_cli("precompute --data " + kToy + " --hops 0 --out " + (dir / "l0.hgh").string());
    ASSERT_EQ(r.code, 0) << r.output;
    auto cache = testutil::read_file(dir / "l0.hgh");
    auto feats = testutil::read_file(kToy + "/features.bin");
    const std::size_t payload = feats.size() - 20;
    ASSERT_EQ(cache.size(), kHopHeaderBytes + payload + kChecksumBytes);
    EXPECT_EQ(cache.substr(kHopHeaderBytes, payload), feats.substr(20));
}

TEST(Cli, PrecomputeIsByteIdenticalOnRerun)
{
    TempDir dir;
    for (const char* name : {"a.hgh", "b.hgh"})
        ASSERT_EQ(hopflow_cli("precompute --data " + kToy + " --hops 3 --norm row --out " + (dir / name).string()).code, 0);
    EXPECT_EQ(testutil::read_file(dir / "a.hgh"), testutil::read_file(dir / "b.hgh"));
    auto h = load_hops(dir / "a.hgh");
    EXPECT_EQ(h.num_hops, 4u);
    auto ds = load_dataset(kToy);
    EXPECT_EQ(h.data, precompute_hops(normalize(ds.graph, NormMode::row, true), ds.features, 3).data);
    ASSERT_EQ(hopflow_cli("precompute --data " + kToy + " --hops 3 --norm row --no-self-loops --out " + (dir / "c.hgh").string()).code, 0);
    EXPECT_EQ(load_hops(dir / "c.hgh").data, precompute_hops(normalize(ds.graph, NormMode::row, false), ds.features, 3).data);
}

TEST(Cli, TrainEvalExportRoundTrip)
{
    TempDir dir;
    const std::string base = "--data " + kToy + " --config " + kToyConfig + quick_overrides();
    auto r = hopflow_cli("train " + base + " --out " + (dir / "run").string());
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"report.json", "profile.json", "checkpoint_0.hgm", "checkpoint_1.hgm"}) EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
    EXPECT_FALSE(fs::exists(dir / "run.partial"));
    auto report = nlohmann::json::parse(testutil::read_file(dir / "run/report.json"));
    EXPECT_EQ(report["split_accuracies"].size(), 2u);
    EXPECT_EQ(report["config"]["max_epochs"], 8);
    EXPECT_TRUE(report.contains("mean") && report.contains("std") && report.contains("name"));

    r = hopflow_cli("eval " + base + " --checkpoint " + (dir / "run/checkpoint_1.hgm").string() + " --split 1 --out " +
                    (dir / "eval.json").string());
    ASSERT_EQ(r.code, 0) << r.output;
    auto ev = nlohmann::json::parse(testutil::read_file(dir / "eval.json"));
    EXPECT_DOUBLE_EQ(ev["test"]["accuracy"].get<double>(), report["split_accuracies"][1].get<double>());
    EXPECT_DOUBLE_EQ(ev["test"]["mean_ce"].get<double>(), report["runs"][1]["test_ce"].get<double>());

    for (const char* layer : {"Z", "HK"}) {
        const auto out = dir / (std::string(layer) + ".bin");
        r = hopflow_cli("export-embeddings --data " + kToy + " --checkpoint " + (dir / "run/checkpoint_0.hgm").string() + " --layer " + layer +
                        " --out " + out.string());
        ASSERT_EQ(r.code, 0) << r.output;
        auto emb = load_features(out);
        EXPECT_EQ(emb.rows, 50u);
        EXPECT_EQ(emb.cols, std::string(layer) == "Z" ? 16u : 3u * 16u);
        const auto again = dir / (std::string(layer) + "_again.bin");
        hopflow_cli("export-embeddings --data " + kToy + " --checkpoint " + (dir / "run/checkpoint_0.hgm").string() + " --layer " + layer +
                    " --out " + again.string());
        EXPECT_EQ(testutil::read_file(out), testutil::read_file(again));
    }
}

TEST(Cli, TrainFromCacheMatchesTrainFromData)
{
    TempDir dir;
    ASSERT_EQ(hopflow_cli("precompute --data " + kToy + " --hops 4 --out " + (dir / "c.hgh").string()).code, 0);
    const std::string base = "train --data " + kToy + " --config " + kToyConfig + quick_overrides();
    ASSERT_EQ(hopflow_cli(base + " --out " + (dir / "a").string()).code, 0);
    ASSERT_EQ(hopflow_cli(base + " --cache " + (dir / "c.hgh").string() + " --out " + (dir / "b").string()).code, 0);
    EXPECT_EQ(testutil::read_file(dir / "a/report.json"), testutil::read_file(dir / "b/report.json"));
    EXPECT_EQ(testutil::read_file(dir / "a/checkpoint_0.hgm"), testutil::read_file(dir / "b/checkpoint_0.hgm"));

    auto r = hopflow_cli(base + " --cache " + (dir / "c.hgh").string() + " --override model.hops=6 --out " + (dir / "c").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("dimension mismatch"), std::string::npos) << r.output;
}

TEST(Cli, SsLAndAblationOverrides)
{
    TempDir dir;
    const std::string base = "--data " + kToy + " --config " + kToyConfig + quick_overrides();
    auto r = hopflow_cli("train " + base + " --override loss.ssl_kind=barlow --out " + (dir / "ssl").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(nlohmann::json::parse(testutil::read_file(dir / "ssl/report.json"))["config"]["loss"]["ssl_kind"], "barlow");
    r = hopflow_cli("train " + base + " --override model.interaction_kind=none --out " + (dir / "none").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(load_checkpoint(dir / "none/checkpoint_0.hgm").config().interaction, InteractionKind::none);
}

TEST(Cli, AblateSweepBench)
{
    TempDir dir;
    const std::string base = "--data " + kToy + " --config " + kToyConfig + quick_overrides();
    auto r = hopflow_cli("ablate " + base + " --suite fusion --out " + (dir / "abl").string());
    ASSERT_EQ(r.code, 0) << r.output;
    auto table = nlohmann::json::parse(testutil::read_file(dir / "abl/table.json"));
    ASSERT_EQ(table["rows"].size(), 3u);
    EXPECT_EQ(table["rows"][2]["variant"], "attention");
    EXPECT_NE(testutil::read_file(dir / "abl/table.txt").find("delta"), std::string::npos);

    r = hopflow_cli("sweep-hops " + base + " --max-hops 4 --layers-list 1,2,4 --out " + (dir / "sw").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(nlohmann::json::parse(testutil::read_file(dir / "sw/table.json"))["rows"].size(), 3u);
    EXPECT_EQ(hopflow_cli("sweep-hops " + base + " --max-hops 2 --layers-list 1,3").code, 2);

    r = hopflow_cli("bench " + base + " --batch 32 --steps 4 --warmup 1 --out " + (dir / "bench.json").string());
    ASSERT_EQ(r.code, 0) << r.output;
    auto bench = nlohmann::json::parse(testutil::read_file(dir / "bench.json"));
    EXPECT_GT(bench["steps_per_sec"].get<double>(), 0.0);
    EXPECT_GT(bench["peak_heap_bytes"].get<std::int64_t>(), 0);
}

TEST(Cli, GenToyMatchesCommittedData)
{
    TempDir dir;
    for (const char* kind : {"parity", "homophily", "heterophily"}) {
        const auto out = dir / kind;
        ASSERT_EQ(hopflow_cli(std::string("gen-toy --kind ") + kind + " --seed 0 --out " + out.string()).code, 0);
        for (const char* f : {"edges.tsv", "features.bin", "labels.tsv"})
            EXPECT_EQ(testutil::read_file(out / f), testutil::read_file(src(std::string("data/toy_") + kind + "/" + f))) << kind << "/" << f;
    }
}
