#pragma once

// Downstream defect recognition: a small CNN trained with cross-entropy under
// rotation/flip augmentation, best-validation checkpoint selection, and a
// single final pass over the test split.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/data.hpp"
#include "minidiff/error.hpp"
#include "minidiff/image.hpp"
#include "minidiff/nets/layers.hpp"
#include "minidiff/optim.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

struct AugmentDraw {
    double angle_deg = 0.0;
    bool hflip = false;
    bool vflip = false;
};

inline AugmentDraw draw_augment(Rng& rng, double max_angle_deg = 10.0) {
    AugmentDraw d;
    d.angle_deg = rng.uniform(-max_angle_deg, max_angle_deg);
    d.hflip = rng.bernoulli(0.5);
    d.vflip = rng.bernoulli(0.5);
    return d;
}

/// Rotation about the image centre (edge-replicated border), then flips.
inline Image augment(const Image& img, const AugmentDraw& d) {
    Image out = img;
    if (d.angle_deg != 0.0) {
        const double a = d.angle_deg * std::numbers::pi / 180.0;
        const double ca = std::cos(a), sa = std::sin(a);
        const double cy = 0.5 * static_cast<double>(img.rows() - 1), cx = 0.5 * static_cast<double>(img.cols() - 1);
        for (Index y = 0; y < img.rows(); ++y) {
            for (Index x = 0; x < img.cols(); ++x) {
                const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                out(y, x) = sample_bilinear(img, cy + ca * dy - sa * dx, cx + sa * dy + ca * dx);
            }
        }
    }
    if (d.hflip) out = out.rowwise().reverse().eval();
    if (d.vflip) out = out.colwise().reverse().eval();
    return out;
}

inline Image augment(const Image& img, Rng& rng) { return augment(img, draw_augment(rng)); }

struct ClassifierConfig {
    int image_size = 32;
    /// 3 replicates the grayscale image across channels; 1 feeds it directly.
    int channels = 1;
    int width = 8;
    /// Conv blocks (conv + silu + 2x2 max-pool); channel count doubles per block.
    int blocks = 3;
    int num_classes = 4;

    int feature_dim() const { return width << (blocks - 1); }
};

/// conv-silu-pool blocks, global average pooling, linear head.
class Classifier {
public:
    Classifier() = default;
    Classifier(const ClassifierConfig& cfg, Rng& rng) : cfg_(cfg) {
        require(cfg.channels == 1 || cfg.channels == 3, ErrorKind::invalid_argument, "classifier input needs 1 or 3 channels");
        require(cfg.num_classes >= 2, ErrorKind::invalid_argument, "classifier needs at least two classes");
        require(cfg.blocks >= 1 && (cfg.image_size >> cfg.blocks) >= 1 && cfg.image_size % (1 << cfg.blocks) == 0,
                ErrorKind::invalid_argument, "image size must be divisible by 2^blocks");
        int size = cfg.image_size, cin = cfg.channels, cout = cfg.width;
        for (int b = 0; b < cfg.blocks; ++b) {
            convs_.emplace_back(size, size, cin, cout, 1, rng);
            cin = cout;
            cout *= 2;
            size /= 2;
        }
        head_ = Dense(cin, cfg.num_classes, rng);
    }

    const ClassifierConfig& config() const { return cfg_; }

    Matrix to_input(const Image& img) const {
        require(img.rows() == cfg_.image_size && img.cols() == cfg_.image_size, ErrorKind::invalid_argument,
                "classifier input has the wrong resolution");
        Matrix fm = to_feature_map(img);
        return cfg_.channels == 1 ? fm : fm.replicate(1, cfg_.channels).eval();
    }

    /// Penultimate (pooled) features, 1 x feature_dim.
    Var features(Tape& t, Var x) const {
        int size = cfg_.image_size;
        Var h = x;
        for (const Conv2d& c : convs_) {
            h = ops::max_pool2(ops::silu(c.forward(t, h)), size, size);
            size /= 2;
        }
        return ops::mean_rows(h);
    }

    Var logits(Tape& t, Var x) const { return head_.forward(t, features(t, x)); }

    Matrix features(const Image& img) const {
        Tape t;
        return features(t, t.constant(to_input(img))).value();
    }

    Matrix logits(const Image& img) const {
        Tape t;
        return logits(t, t.constant(to_input(img))).value();
    }

    int predict(const Image& img) const {
        Index best = 0;
        logits(img).row(0).maxCoeff(&best);
        return static_cast<int>(best);
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < self.convs_.size(); ++i) Conv2d::visit(self.convs_[i], prefix + ".conv" + std::to_string(i), f);
        Dense::visit(self.head_, prefix + ".head", f);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        visit(*this, "clf", [&](const std::string&, Parameter& p) { out.push_back(&p); });
        return out;
    }

private:
    ClassifierConfig cfg_;
    std::vector<Conv2d> convs_;
    Dense head_;
};

struct LabeledImages {
    std::vector<Image> images;
    std::vector<int> labels;
    std::size_t size() const { return images.size(); }
};

inline LabeledImages load_split(const DatasetManifest& m, Split split, const fs::path& base = {}) {
    LabeledImages out;
    for (const ManifestEntry& e : m.entries) {
        if (e.split != split) continue;
        out.images.push_back(load_image(e, m.image_size, base));
        out.labels.push_back(m.class_index(e.label));
    }
    return out;
}

struct Evaluation {
    double accuracy = 0.0;
    /// confusion(true, predicted)
    Eigen::MatrixXi confusion;
};

inline Evaluation evaluate(const Classifier& model, const LabeledImages& data) {
    require(data.size() > 0, ErrorKind::invalid_argument, "evaluation split is empty");
    const int k = model.config().num_classes;
    Evaluation ev;
    ev.confusion = Eigen::MatrixXi::Zero(k, k);
    for (std::size_t i = 0; i < data.size(); ++i) ev.confusion(data.labels[i], model.predict(data.images[i])) += 1;
    ev.accuracy = static_cast<double>(ev.confusion.trace()) / static_cast<double>(ev.confusion.sum());
    return ev;
}

struct TrainRun {
    int epochs = 20;
    int batch_size = 32;
    double lr = 1e-4;
    int patience = 5;
    bool augment = true;
    std::uint64_t seed = 0;
    ClassifierConfig model;
    std::string run_id = "run";
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainResult {
    Classifier model;
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val_acc = 0.0;
    Evaluation test;
};

/// Mean cross-entropy over one minibatch; accumulates parameter gradients.
inline double classifier_batch_loss(const Classifier& model, const LabeledImages& data, std::span<const std::size_t> batch,
                                    bool use_augment, Rng& rng) {
    Tape t;
    Var total;
    for (std::size_t i : batch) {
        const Image img = use_augment ? augment(data.images[i], rng) : data.images[i];
        Var li = ops::cross_entropy(model.logits(t, t.constant(model.to_input(img))), data.labels[i]);
        total = total.valid() ? total + li : li;
    }
    Var loss = ops::scale(total, 1.0 / static_cast<double>(batch.size()));
    t.backward(loss);
    return loss.scalar();
}

/// Trains on `train`, keeps the parameters of the best validation epoch, then
/// evaluates `test` exactly once.
inline TrainResult train_classifier(const LabeledImages& train, const LabeledImages& val, const LabeledImages& test,
                                    const TrainRun& run) {
    require(train.size() > 0 && val.size() > 0 && test.size() > 0, ErrorKind::invalid_dataset,
            "classifier training needs nonempty train, val and test splits");
    const int distinct = static_cast<int>(std::set<int>(train.labels.begin(), train.labels.end()).size());
    require(distinct >= 2, ErrorKind::invalid_dataset, "train split holds a single class");
    Rng rng(run.seed);
    Rng init_rng = rng.split(1), order_rng = rng.split(2), aug_rng = rng.split(3);
    TrainResult result;
    Classifier model(run.model, init_rng);
    Classifier::visit(model, "clf", [](const std::string&, Parameter& p) { p.trainable = true; });
    Adam adam(model.parameters(), {.lr = run.lr});
    Classifier best = model;
    result.best_val_acc = -1.0;
    int since_best = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= run.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng.engine());
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(run.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(run.batch_size));
            loss_sum += classifier_batch_loss(model, train, std::span(order).subspan(start, end - start), run.augment, aug_rng);
            adam.step();
            ++batches;
        }
        const double val_acc = evaluate(model, val).accuracy;
        result.history.push_back({epoch, loss_sum / batches, val_acc});
        if (val_acc > result.best_val_acc) {
            result.best_val_acc = val_acc;
            result.best_epoch = epoch;
            best = model;
            since_best = 0;
        } else if (++since_best >= run.patience) {
            break;
        }
    }
    result.model = std::move(best);
    Classifier::visit(result.model, "clf", [](const std::string&, Parameter& p) {
        p.trainable = false;
        p.zero_grad();
    });
    result.test = evaluate(result.model, test);
    return result;
}

inline TrainResult train_classifier(const DatasetManifest& m, const TrainRun& run, const fs::path& base = {}) {
    TrainRun r = run;
    r.model.num_classes = static_cast<int>(m.classes.size());
    r.model.image_size = m.image_size;
    return train_classifier(load_split(m, Split::train, base), load_split(m, Split::val, base),
                            load_split(m, Split::test, base), r);
}

inline void write_history_csv(const std::vector<EpochRecord>& history, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    require(out.good(), ErrorKind::io_error, "cannot write " + path.string());
    out << "epoch,train_loss,val_acc\n";
    for (const EpochRecord& r : history) out << r.epoch << ',' << r.train_loss << ',' << r.val_acc << '\n';
}

}  // namespace minidiff
