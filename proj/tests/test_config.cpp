#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hopflow;

namespace {

std::string source_path(const std::string& rel) { return std::string(HOPFLOW_SOURCE_DIR) + "/" + rel; }

} // namespace

TEST(Config, DefaultsRoundTrip)
{
    TrainConfig d;
    nlohmann::json j = d;
    auto back = config_from_json(j);
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(config_from_json(nlohmann::json::object()).model.hops, 6u);
    EXPECT_DOUBLE_EQ(d.loss.lambda, 5e-4);
    EXPECT_DOUBLE_EQ(d.loss.alpha, 0.1);
    EXPECT_EQ(d.batch_size, 3000u);
    EXPECT_EQ(d.max_epochs, 500u);
    EXPECT_EQ(d.patience, 100u);
    EXPECT_EQ(d.model.hidden, 128u);
    EXPECT_EQ(d.model.layers, 2u);
}

TEST(Config, PartialPatchKeepsOtherDefaults)
{
    auto cfg = config_from_json(nlohmann::json::parse(R"({"lr": 0.01, "model": {"hops": 3}})"));
    EXPECT_DOUBLE_EQ(cfg.lr, 0.01);
    EXPECT_EQ(cfg.model.hops, 3u);
    EXPECT_EQ(cfg.model.hidden, 128u);
    EXPECT_DOUBLE_EQ(cfg.weight_decay, 5e-4);
}

TEST(Config, UnknownKeysRejected)
{
    try {
        config_from_json(nlohmann::json::parse(R"({"model": {"hop": 3}})"));
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("model.hop"), std::string::npos) << e.what();
    }
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"learning_rate": 1})")), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"lr": "fast"})")), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"model": {"interaction_kind": "gat"}})")), ConfigError);
}

TEST(Config, Overrides)
{
    TrainConfig cfg;
    cfg = apply_overrides(cfg, {"lr=0.001", "model.interaction_kind=sage", "loss.ssl_kind=barlow", "model.use_order_embedding=false",
                                "data.norm=row"});
    EXPECT_DOUBLE_EQ(cfg.lr, 0.001);
    EXPECT_EQ(cfg.model.interaction, InteractionKind::sage);
    EXPECT_EQ(cfg.loss.ssl_kind, SslKind::barlow);
    EXPECT_FALSE(cfg.model.order_embedding);
    EXPECT_EQ(cfg.data.norm, NormMode::row);
    EXPECT_THROW(apply_override(cfg, "model.depth=3"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "model=3"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "lr"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "=1"), ConfigError);
}

TEST(Config, FileLoadingAllowsComments)
{
    testutil::TempDir dir;
    testutil::write_file(dir / "c.json", "// note\n{\n  \"seed\": 4, /* inline */ \"model\": {\"heads\": 2}\n}\n");
    auto cfg = load_config(dir / "c.json");
    EXPECT_EQ(cfg.seed, 4u);
    EXPECT_EQ(cfg.model.heads, 2u);
    testutil::write_file(dir / "bad.json", "{\"seed\": ");
    EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
    EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Config, CommittedConfigsLoadAndValidate)
{
    std::size_t n = 0;
    for (const auto& entry : std::filesystem::directory_iterator(source_path("configs"))) {
        if (entry.path().extension() != ".json") continue;
        SCOPED_TRACE(entry.path().string());
        auto cfg = load_config(entry.path());
        EXPECT_NO_THROW(cfg.validate());
        ++n;
    }
    EXPECT_GE(n, 6u);
    auto def = load_config(source_path("configs/default.json"));
    EXPECT_EQ(nlohmann::json(def), nlohmann::json(TrainConfig{}));
    auto ssl = load_config(source_path("configs/cora_ssl.json"));
    EXPECT_EQ(ssl.loss.ssl_kind, SslKind::barlow);
}
