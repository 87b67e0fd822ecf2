#include <gtest/gtest.h>

#include "minidiff/adaptation.hpp"
#include "minidiff/sampling.hpp"
#include "support.hpp"

using namespace minidiff;
using minidiff::testing::tiny_config;

namespace {

/// Latents of a made-up class: a fixed spatial pattern plus small noise.
std::vector<LatentCode> class_latents(int n, std::uint64_t seed) {
    Rng rng(seed);
    const Matrix pattern = Rng(1234).normal_matrix(64, 2);
    std::vector<LatentCode> out;
    for (int i = 0; i < n; ++i) out.push_back(pattern + 0.1 * rng.normal_matrix(64, 2));
    return out;
}

const NoiseSchedule& sched() {
    static const NoiseSchedule s = make_schedule(20, ScheduleKind::linear_beta);
    return s;
}

}  // namespace

TEST(TokenAdaptation, ZeroIterationsIsANoOp) {
    DiffusionModel model(tiny_config(), 3);
    const std::uint64_t before = hash_parameters(model);
    const PromptEmbedding init = model.tokenize("a photo of <unknown>");
    AdaptationConfig cfg;
    cfg.iterations = 0;
    const PromptEmbedding out = train_token_embedding(class_latents(4, 1), init, model, sched(), cfg);
    EXPECT_EQ(out.tokens, init.tokens);
    EXPECT_EQ(hash_parameters(model), before);
}

TEST(TokenAdaptation, OnlyThePlaceholderSliceMoves) {
    DiffusionModel model(tiny_config(), 3);
    const std::uint64_t before = hash_parameters(model);
    const PromptEmbedding init = model.tokenize("a photo of <unknown>");
    AdaptationConfig cfg;
    cfg.iterations = 20;
    cfg.lr = 1e-2;
    const PromptEmbedding out = train_token_embedding(class_latents(4, 1), init, model, sched(), cfg);
    EXPECT_EQ(hash_parameters(model), before);
    for (Index r = 0; r < init.length(); ++r) {
        const bool trainable = r == 3;
        EXPECT_EQ((out.tokens.row(r) - init.tokens.row(r)).norm() > 0.0, trainable) << "row " << r;
    }
}

TEST(TokenAdaptation, ProbeLossDecreases) {
    DiffusionModel model(tiny_config(), 3);
    AdaptationConfig cfg;
    cfg.iterations = 150;
    cfg.lr = 2e-2;
    cfg.seed = 5;
    AdaptationReport rep;
    train_token_embedding(class_latents(8, 2), "a photo of <unknown>", model, sched(), cfg, &rep);
    EXPECT_LT(rep.probe_after, rep.probe_before);
    EXPECT_EQ(rep.losses.size(), 150u);
}

TEST(TokenAdaptation, DeterministicUnderSeed) {
    DiffusionModel model(tiny_config(), 3);
    AdaptationConfig cfg;
    cfg.iterations = 15;
    cfg.seed = 9;
    const auto lat = class_latents(4, 3);
    const PromptEmbedding a = train_token_embedding(lat, "a photo of <unknown>", model, sched(), cfg);
    const PromptEmbedding b = train_token_embedding(lat, "a photo of <unknown>", model, sched(), cfg);
    EXPECT_EQ(a.tokens, b.tokens);
}

TEST(Lora, FreshAdapterIsNeutral) {
    DiffusionModel model(tiny_config(), 3);
    const LatentCode z = Rng(2).normal_matrix(64, 2);
    const Matrix c = model.encode_text(model.tokenize("a photo of pit"));
    const Matrix before = model.predict_noise(z, 9, &c);
    LoraAdapter adapter = attach_lora(model, model.attention_layers(), 1, 4);
    const Matrix c2 = model.encode_text(model.tokenize("a photo of pit"));
    EXPECT_EQ(model.predict_noise(z, 9, &c2), before);
    EXPECT_TRUE(adapter.attached_to(model));
}

TEST(Lora, TargetsAttentionLayersOnly) {
    DiffusionModel model(tiny_config(), 3);
    const auto targets = model.attention_layers();
    ASSERT_FALSE(targets.empty());
    bool has_denoiser = false;
    for (const std::string& n : targets) {
        EXPECT_NE(n.find(".attn."), std::string::npos);
        has_denoiser |= n.rfind("denoiser.mid.attn.", 0) == 0;
    }
    EXPECT_TRUE(has_denoiser);
}

TEST(Lora, TrainableCountIsSumOfDPlusKTimesR) {
    for (int r : {1, 2}) {
        DiffusionModel model(tiny_config(), 3);
        Index expected = 0;
        for (const std::string& n : model.attention_layers()) {
            Dense* d = model.find_dense(n);
            expected += (d->in_features() + d->out_features()) * r;
        }
        LoraAdapter adapter = attach_lora(model, model.attention_layers(), r);
        EXPECT_EQ(adapter.trainable_count(), expected);
    }
    // a 64x64 layer at rank 1 contributes 128 parameters
    ModelConfig c = tiny_config();
    c.text.dim = 64;
    DiffusionModel model(c, 3);
    LoraAdapter adapter = attach_lora(model, {"text.block0.attn.q"}, 1);
    EXPECT_EQ(adapter.trainable_count(), 128);
}

TEST(Lora, RejectsUnknownLayersAndBadRanks) {
    DiffusionModel model(tiny_config(), 3);
    try {
        attach_lora(model, {"denoiser.nope"}, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::unknown_layer);
    }
    EXPECT_THROW(attach_lora(model, model.attention_layers(), 0), Error);
    EXPECT_THROW(attach_lora(model, model.attention_layers(), 100000), Error);
    // nothing got attached by the failed calls
    LoraAdapter ok = attach_lora(model, model.attention_layers(), 1);
    EXPECT_TRUE(ok.attached_to(model));
}

TEST(Lora, MergeUnmergeRoundTrip) {
    DiffusionModel model(tiny_config(), 3);
    const std::string name = model.attention_layers().front();
    const Matrix w0 = model.find_dense(name)->weight.value;
    LoraAdapter adapter = attach_lora(model, model.attention_layers(), 1, 4);
    Rng rng(6);
    for (auto& [n, w] : adapter.weights()) w->B.value = rng.normal_matrix(w->B.value.rows(), 1);
    const LatentCode z = Rng(2).normal_matrix(64, 2);
    const PromptEmbedding p = model.tokenize("a photo of pit");
    const Matrix routed = model.predict_noise(z, 9, &static_cast<const Matrix&>(model.encode_text(p)));
    merge_lora(adapter, model);
    EXPECT_TRUE(adapter.merged());
    const auto& w = *adapter.weights().at(name);
    EXPECT_LT((model.find_dense(name)->weight.value - (w0 + w.B.value * w.A.value)).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix merged = model.predict_noise(z, 9, &static_cast<const Matrix&>(model.encode_text(p)));
    EXPECT_LT((merged - routed).cwiseAbs().maxCoeff(), 1e-9);
    try {
        merge_lora(adapter, model);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_state);
    }
    unmerge_lora(adapter, model);
    EXPECT_LT((model.find_dense(name)->weight.value - w0).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Lora, TrainingTouchesOnlyAdapterFactors) {
    DiffusionModel model(tiny_config(), 3);
    const std::uint64_t base = hash_parameters(model);
    const PromptEmbedding prompt = model.tokenize("a photo of <unknown>");
    LoraAdapter adapter = attach_lora(model, model.attention_layers(), 1, 4);
    AdaptationConfig cfg = AdaptationConfig::lora_defaults();
    cfg.iterations = 80;
    cfg.lr = 1e-2;
    const AdaptationReport rep = train_lora(class_latents(8, 2), prompt, model, adapter, sched(), cfg);
    EXPECT_EQ(hash_parameters(model), base);
    double moved = 0.0;
    for (const auto& [n, w] : adapter.weights()) moved += w->B.value.norm();
    EXPECT_GT(moved, 0.0);
    EXPECT_LT(rep.probe_after, rep.probe_before);
}

TEST(FullAdaptation, MovesNetworkWeights) {
    DiffusionModel model(tiny_config(), 3);
    const std::uint64_t base = hash_parameters(model, [](const std::string& n) { return n.rfind("denoiser.", 0) == 0; });
    AdaptationConfig cfg;
    cfg.iterations = 5;
    cfg.stage = AdaptationStage::full;
    train_full(class_latents(4, 2), model.tokenize("a photo of <unknown>"), model, sched(), cfg);
    EXPECT_NE(hash_parameters(model, [](const std::string& n) { return n.rfind("denoiser.", 0) == 0; }), base);
}

TEST(FullAdaptation, LossTraceTrendsDown) {
    DiffusionModel model(tiny_config(), 3);
    AdaptationConfig cfg;
    cfg.iterations = 200;
    cfg.lr = 2e-3;
    cfg.stage = AdaptationStage::full;
    const AdaptationReport rep = train_full(class_latents(8, 2), model.tokenize("a photo of <unknown>"), model, sched(), cfg);
    EXPECT_LT(rep.ema_end(), rep.ema_start());
    EXPECT_LT(rep.probe_after, rep.probe_before);
}
