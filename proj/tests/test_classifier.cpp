#include <cmath>

#include <gtest/gtest.h>

#include "minidiff/classifier.hpp"
#include "minidiff/data.hpp"

using namespace minidiff;

namespace {

Image ramp(int side) {
    Image img(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) img(y, x) = (y * side + x) / static_cast<double>(side * side);
    return img;
}

ClassifierConfig small_config(int classes = 4) {
    ClassifierConfig c;
    c.image_size = 16;
    c.width = 4;
    c.blocks = 2;
    c.num_classes = classes;
    return c;
}

}  // namespace

TEST(Augment, IdentityDrawAndDoubleFlip) {
    const Image x = ramp(16);
    EXPECT_EQ(augment(x, AugmentDraw{}), x);
    const Image h = augment(x, {0.0, true, false});
    EXPECT_NE(h, x);
    EXPECT_EQ(augment(h, {0.0, true, false}), x);
    const Image v = augment(x, {0.0, false, true});
    EXPECT_EQ(augment(v, {0.0, false, true}), x);
    EXPECT_EQ(h(0, 0), x(0, 15));
    EXPECT_EQ(v(0, 0), x(15, 0));
}

TEST(Augment, RotationStaysInRangeAndBoundedAngle) {
    Rng rng(3);
    const Image x = ramp(16);
    for (int i = 0; i < 50; ++i) {
        const AugmentDraw d = draw_augment(rng);
        EXPECT_LE(std::abs(d.angle_deg), 10.0);
        const Image y = augment(x, d);
        EXPECT_GE(y.minCoeff(), x.minCoeff() - 1e-12);
        EXPECT_LE(y.maxCoeff(), x.maxCoeff() + 1e-12);
    }
    // a constant image is a fixed point of every draw
    const Image c = Image::Constant(16, 16, 0.4);
    EXPECT_LT((augment(c, {7.0, true, true}) - c).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    Tape t;
    EXPECT_NEAR(ops::cross_entropy(t.constant(Matrix::Zero(1, 4)), 2).scalar(), std::log(4.0), 1e-12);
    Matrix confident = Matrix::Constant(1, 4, -50.0);
    confident(0, 1) = 50.0;
    EXPECT_NEAR(ops::cross_entropy(t.constant(confident), 1).scalar(), 0.0, 1e-12);
}

TEST(Classifier, ZeroHeadGivesLogKLoss) {
    Rng rng(1);
    Classifier model(small_config(), rng);
    Classifier::visit(model, "clf", [](const std::string& n, Parameter& p) {
        if (n.rfind("clf.head.", 0) == 0) p.value.setZero();
    });
    LabeledImages data;
    for (int i = 0; i < 4; ++i) {
        data.images.push_back(ramp(16));
        data.labels.push_back(i);
    }
    const std::vector<std::size_t> batch = {0, 1, 2, 3};
    EXPECT_NEAR(classifier_batch_loss(model, data, batch, false, rng), std::log(4.0), 1e-12);
}

TEST(Classifier, ShapesAndConfigErrors) {
    Rng rng(1);
    ClassifierConfig c = small_config();
    c.channels = 3;
    Classifier model(c, rng);
    EXPECT_EQ(model.to_input(ramp(16)).cols(), 3);
    EXPECT_EQ(model.features(ramp(16)).cols(), c.feature_dim());
    EXPECT_EQ(model.logits(ramp(16)).cols(), 4);
    EXPECT_THROW(model.to_input(ramp(8)), Error);
    c.channels = 2;
    EXPECT_THROW(Classifier(c, rng), Error);
    c = small_config(1);
    EXPECT_THROW(Classifier(c, rng), Error);
}

TEST(Evaluate, ConfusionIdentities) {
    Rng rng(2);
    Classifier model(small_config(3), rng);
    LabeledImages data;
    Rng img_rng(5);
    for (int i = 0; i < 30; ++i) {
        data.images.push_back((img_rng.normal_matrix(16, 16).array() * 0.2 + 0.5).matrix());
        data.labels.push_back(i % 3);
    }
    const Evaluation ev = evaluate(model, data);
    EXPECT_EQ(ev.confusion.sum(), 30);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(ev.confusion.row(k).sum(), 10);
    int correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += model.predict(data.images[i]) == data.labels[i];
    EXPECT_DOUBLE_EQ(ev.accuracy, correct / 30.0);
    EXPECT_THROW(evaluate(model, LabeledImages{}), Error);
}

TEST(Train, RejectsSingleClassAndEmptySplits) {
    LabeledImages one;
    one.images = {ramp(16), ramp(16)};
    one.labels = {0, 0};
    TrainRun run;
    run.model = small_config(2);
    try {
        train_classifier(one, one, one, run);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_dataset);
    }
    LabeledImages two = one;
    two.labels = {0, 1};
    EXPECT_THROW(train_classifier(two, LabeledImages{}, two, run), Error);
}

TEST(Train, LearnsTheSyntheticCorpus) {
    const fs::path root = fs::temp_directory_path() / "minidiff_test_clf_corpus";
    fs::remove_all(root);
    const DatasetManifest m = synth_corpus(root, {});
    TrainRun run;
    run.epochs = 12;
    run.lr = 1e-2;
    run.patience = 12;
    run.seed = 4;
    const TrainResult a = train_classifier(m, run);
    EXPECT_GT(a.test.accuracy, 0.8);
    EXPECT_GE(a.best_epoch, 1);
    EXPECT_LE(static_cast<std::size_t>(a.best_epoch), a.history.size());
    double best = 0.0;
    for (const EpochRecord& r : a.history) best = std::max(best, r.val_acc);
    EXPECT_EQ(a.best_val_acc, best);
    const TrainResult b = train_classifier(m, run);
    EXPECT_EQ(b.test.confusion, a.test.confusion);
    EXPECT_EQ(b.history.back().train_loss, a.history.back().train_loss);
    fs::remove_all(root);
}

TEST(Train, EarlyStoppingHonoursPatience) {
    const fs::path root = fs::temp_directory_path() / "minidiff_test_clf_patience";
    fs::remove_all(root);
    SynthOptions opt;
    opt.per_class = 10;
    opt.image_size = 16;
    const DatasetManifest m = synth_corpus(root, opt);
    TrainRun run;
    run.epochs = 50;
    run.lr = 0.0;
    run.patience = 3;
    run.model = small_config();
    const TrainResult r = train_classifier(m, run);
    // a frozen model never improves after epoch 1
    EXPECT_EQ(r.best_epoch, 1);
    EXPECT_EQ(r.history.size(), 4u);
    fs::remove_all(root);
}
