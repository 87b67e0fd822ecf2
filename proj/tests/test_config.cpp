#include <gtest/gtest.h>

#include "minidiff/config.hpp"

using namespace minidiff;

namespace {

std::string config_message(const std::string& text) {
    Config c;
    try {
        c.parse(text);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config_error);
        return e.what();
    }
    ADD_FAILURE() << "parse accepted: " << text;
    return {};
}

}  // namespace

TEST(Config, DefaultsMatchTheSchema) {
    const Config c;
    for (const ConfigKey& k : config_schema()) EXPECT_EQ(c.str(k.key), k.default_value) << k.key;
    EXPECT_EQ(c.integer("schedule.T"), 1000);
    EXPECT_EQ(c.str("schedule.kind"), "linear-beta");
    EXPECT_EQ(c.real("gen.omega_cfg"), 5.0);
    EXPECT_EQ(c.real("gen.strength"), 0.5);
    EXPECT_EQ(c.integer("adapt.rank"), 1);
    EXPECT_EQ(c.real("adapt.lr.token"), 5e-4);
    EXPECT_EQ(c.real("adapt.lr.lora"), 1e-4);
    EXPECT_EQ(c.integer("classify.batch"), 32);
    EXPECT_EQ(c.integer("classify.patience"), 5);
    EXPECT_TRUE(c.boolean("adapt.token"));
    EXPECT_FALSE(c.boolean("adapt.full"));
}

TEST(Config, ParsesCommentsAndWhitespace) {
    Config c;
    c.parse("# header\n  run.seed = 17  # trailing\n\nschedule.kind=cosine\n");
    EXPECT_EQ(c.seed("run.seed"), 17u);
    EXPECT_EQ(c.str("schedule.kind"), "cosine");
}

TEST(Config, GridAndLists) {
    const Config c;
    const auto [omegas, strengths] = c.grid("tune.grid");
    EXPECT_EQ(omegas, (std::vector<double>{3, 4, 5, 6, 7}));
    EXPECT_EQ(strengths, (std::vector<double>{0.3, 0.4, 0.5, 0.6, 0.7}));
    EXPECT_EQ(c.list("data.synth.classes"), (std::vector<std::string>{"scratch", "pit", "patch", "scale"}));
    EXPECT_TRUE(c.list("data.classes").empty());
}

TEST(Config, ReportsEveryOffendingKeyAtOnce) {
    const std::string msg = config_message("bogus.key = 1\nschedule.T = -5\ngen.omega_cfg = abc\nfid.extractor = inception\n");
    for (const char* key : {"bogus.key", "schedule.T", "gen.omega_cfg", "fid.extractor"})
        EXPECT_NE(msg.find(key), std::string::npos) << key << " missing from: " << msg;
}

TEST(Config, RejectsMalformedLinesAndBadValues) {
    EXPECT_NE(config_message("no equals sign here").find("expected key = value"), std::string::npos);
    EXPECT_NE(config_message("data.alpha = 0").find("data.alpha"), std::string::npos);
    EXPECT_NE(config_message("data.alpha = 1.5").find("data.alpha"), std::string::npos);
    EXPECT_NE(config_message("gen.mode = ancestral").find("gen.mode"), std::string::npos);
    EXPECT_NE(config_message("adapt.lora = maybe").find("adapt.lora"), std::string::npos);
    EXPECT_NE(config_message("tune.grid = 3,4").find("tune.grid"), std::string::npos);
}

TEST(Config, SetValidatesAndKeepsThePreviousValueOnError) {
    Config c;
    c.set("gen.n", "12");
    EXPECT_EQ(c.integer("gen.n"), 12);
    EXPECT_THROW(c.set("gen.n", "twelve"), Error);
    EXPECT_EQ(c.integer("gen.n"), 12);
    EXPECT_THROW(c.set("gen.nn", "1"), Error);
}

TEST(Config, HashTracksValues) {
    Config a, b;
    EXPECT_EQ(a.hash(), b.hash());
    b.set("run.seed", "1");
    EXPECT_NE(a.hash(), b.hash());
    b.set("run.seed", "0");
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_NE(a.dump().find("schedule.T = 1000\n"), std::string::npos);
}

TEST(Config, LoadMissingFileIsAConfigError) {
    Config c;
    try {
        c.load("/nonexistent/minidiff.conf");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config_error);
    }
}
