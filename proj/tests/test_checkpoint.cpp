#include <fstream>

#include <gtest/gtest.h>

#include "minidiff/checkpoint.hpp"
#include "support.hpp"

using namespace minidiff;
using minidiff::testing::tiny_config;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ErrorKind load_error(const fs::path& p) {
    try {
        load_checkpoint(p);
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "load succeeded";
    return ErrorKind::invalid_argument;
}

}  // namespace

TEST(Checkpoint, ModelRoundTripPreservesEveryParameter) {
    TempDir dir("minidiff_test_ckpt_model");
    DiffusionModel model(tiny_config(), 9);
    const NoiseSchedule sched = make_schedule(20, ScheduleKind::cosine);
    save_checkpoint(model_checkpoint(model, sched, "base", "abc", 42), dir.path / "base.ckpt");
    const Checkpoint ckpt = load_checkpoint(dir.path / "base.ckpt");
    EXPECT_EQ(ckpt.stage(), "base");
    EXPECT_EQ(ckpt.meta["config_hash"], "abc");
    EXPECT_EQ(ckpt.meta["seed"], 42);
    const DiffusionModel back = model_from_checkpoint(ckpt);
    EXPECT_EQ(hash_parameters(back), hash_parameters(model));
    const NoiseSchedule s2 = schedule_from_checkpoint(ckpt);
    EXPECT_EQ(s2.T, 20);
    EXPECT_EQ(s2.alphas, sched.alphas);
    EXPECT_EQ(s2.sigmas, sched.sigmas);
    const LatentCode z = Rng(1).normal_matrix(64, 2);
    EXPECT_EQ(back.predict_noise(z, 4), model.predict_noise(z, 4));
    // saving the same state twice produces identical bytes
    save_checkpoint(model_checkpoint(back, s2, "base", "abc", 42), dir.path / "again.ckpt");
    EXPECT_EQ(slurp(dir.path / "base.ckpt"), slurp(dir.path / "again.ckpt"));
}

TEST(Checkpoint, PromptAndAdapterRoundTrip) {
    TempDir dir("minidiff_test_ckpt_adapters");
    DiffusionModel model(tiny_config(), 9);
    const NoiseSchedule sched = make_schedule(20, ScheduleKind::linear_beta);
    PromptEmbedding prompt = model.tokenize("a photo of <unknown>");
    prompt.set_slice(Rng(3).normal_matrix(1, 8));
    LoraAdapter adapter = attach_lora(model, model.attention_layers(), 1, 2);
    for (auto& [n, w] : adapter.weights()) w->B.value.setConstant(0.25);
    Checkpoint ckpt = model_checkpoint(model, sched, "lora-adapted", "h", 1);
    add_prompt(ckpt, prompt);
    add_lora(ckpt, adapter);
    save_checkpoint(ckpt, dir.path / "lora.ckpt");

    const Checkpoint back = load_checkpoint(dir.path / "lora.ckpt");
    EXPECT_EQ(back.stage(), "lora-adapted");
    const PromptEmbedding p2 = prompt_from_checkpoint(back);
    EXPECT_EQ(p2.tokens, prompt.tokens);
    EXPECT_EQ(p2.words, prompt.words);
    EXPECT_EQ(p2.trainable_positions, prompt.trainable_positions);
    DiffusionModel fresh = model_from_checkpoint(back);
    LoraAdapter a2 = lora_from_checkpoint(back);
    EXPECT_EQ(a2.rank(), 1);
    EXPECT_EQ(a2.trainable_count(), adapter.trainable_count());
    bind_lora(a2, fresh);
    const LatentCode z = Rng(1).normal_matrix(64, 2);
    const Matrix c1 = model.encode_text(prompt), c2 = fresh.encode_text(p2);
    EXPECT_EQ(fresh.predict_noise(z, 4, &c2), model.predict_noise(z, 4, &c1));

    const Checkpoint plain = model_checkpoint(model, sched, "base", "h", 1);
    EXPECT_THROW(prompt_from_checkpoint(plain), Error);
    EXPECT_THROW(lora_from_checkpoint(plain), Error);
}

TEST(Checkpoint, ClassifierRoundTrip) {
    TempDir dir("minidiff_test_ckpt_clf");
    ClassifierConfig c;
    c.image_size = 16;
    c.width = 4;
    c.blocks = 2;
    Rng rng(5);
    const Classifier model(c, rng);
    save_checkpoint(classifier_checkpoint(model, "classifier"), dir.path / "clf.ckpt");
    const Classifier back = classifier_from_checkpoint(load_checkpoint(dir.path / "clf.ckpt"));
    const Image x = Image::Constant(16, 16, 0.3);
    EXPECT_EQ(back.logits(x), model.logits(x));
    EXPECT_EQ(back.config().width, 4);
}

TEST(Checkpoint, MissingFileIsAnIoError) {
    EXPECT_EQ(load_error("/nonexistent/minidiff.ckpt"), ErrorKind::io_error);
}

TEST(Checkpoint, VersionMismatchIsIncompatible) {
    TempDir dir("minidiff_test_ckpt_version");
    Checkpoint ckpt;
    ckpt.meta["stage"] = "base";
    ckpt.arrays["x"] = Matrix::Ones(2, 2);
    save_checkpoint(ckpt, dir.path / "a.ckpt");
    auto bytes = slurp(dir.path / "a.ckpt");
    const std::uint32_t future = kCheckpointVersion + 1;
    std::memcpy(bytes.data() + sizeof(kCheckpointMagic), &future, sizeof(future));
    spit(dir.path / "a.ckpt", bytes);
    EXPECT_EQ(load_error(dir.path / "a.ckpt"), ErrorKind::incompatible_checkpoint);
}

TEST(Checkpoint, CorruptionAndTruncationAreDetected) {
    TempDir dir("minidiff_test_ckpt_corrupt");
    Checkpoint ckpt;
    ckpt.meta["stage"] = "base";
    ckpt.arrays["x"] = Matrix::Ones(3, 3);
    save_checkpoint(ckpt, dir.path / "a.ckpt");
    const auto good = slurp(dir.path / "a.ckpt");

    auto flipped = good;
    flipped[flipped.size() / 2] ^= 0x01;
    spit(dir.path / "b.ckpt", flipped);
    EXPECT_EQ(load_error(dir.path / "b.ckpt"), ErrorKind::io_error);

    spit(dir.path / "c.ckpt", std::vector<char>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() - 9)));
    EXPECT_EQ(load_error(dir.path / "c.ckpt"), ErrorKind::io_error);

    spit(dir.path / "d.ckpt", {'n', 'o', 'p', 'e', 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    EXPECT_EQ(load_error(dir.path / "d.ckpt"), ErrorKind::io_error);
    EXPECT_THROW(load_checkpoint(dir.path / "a.ckpt").array("missing"), Error);
}

TEST(Checkpoint, ShapeMismatchIsIncompatible) {
    DiffusionModel model(tiny_config(), 9);
    Checkpoint ckpt = model_checkpoint(model, make_schedule(20, ScheduleKind::linear_beta), "base", "h", 1);
    ckpt.arrays.at("param.denoiser.conv_out.weight") = Matrix::Zero(1, 1);
    try {
        model_from_checkpoint(ckpt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::incompatible_checkpoint);
    }
}
