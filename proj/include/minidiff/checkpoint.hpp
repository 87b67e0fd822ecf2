#pragma once

// Binary archive of named double arrays plus a JSON metadata record.
//
// Layout (little-endian host order):
//   "MINIDIFF" | u32 version | u64 meta_len | meta (JSON text)
//   u64 count | count x { u32 name_len | name | i64 rows | i64 cols | rows*cols f64 (column-major) }
//   u64 FNV-1a of every preceding byte

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "minidiff/adaptation.hpp"
#include "minidiff/classifier.hpp"
#include "minidiff/error.hpp"
#include "minidiff/nets/model.hpp"
#include "minidiff/random.hpp"
#include "minidiff/schedule.hpp"

namespace minidiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'N', 'I', 'D', 'I', 'F', 'F'};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Matrix> arrays;

    const Matrix& array(const std::string& name) const {
        auto it = arrays.find(name);
        require(it != arrays.end(), ErrorKind::incompatible_checkpoint, "checkpoint lacks array '" + name + "'");
        return it->second;
    }
    std::string stage() const { return meta.value("stage", std::string()); }
};

namespace detail {

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <class T>
    void pod(const T& v) {
        raw(&v, sizeof(T));
    }
    const std::vector<char>& bytes() const { return buf_; }

private:
    std::vector<char> buf_;
};

class ByteReader {
public:
    ByteReader(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}
    void raw(void* p, std::size_t n) {
        require(n <= end_ - pos_, ErrorKind::io_error, "checkpoint is truncated");
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    template <class T>
    T pod() {
        T v;
        raw(&v, sizeof(T));
        return v;
    }
    std::size_t remaining() const { return end_ - pos_; }

private:
    const std::vector<char>& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.pod(kCheckpointVersion);
    const std::string meta = ckpt.meta.dump();
    w.pod(static_cast<std::uint64_t>(meta.size()));
    w.raw(meta.data(), meta.size());
    w.pod(static_cast<std::uint64_t>(ckpt.arrays.size()));
    for (const auto& [name, m] : ckpt.arrays) {
        w.pod(static_cast<std::uint32_t>(name.size()));
        w.raw(name.data(), name.size());
        w.pod(static_cast<std::int64_t>(m.rows()));
        w.pod(static_cast<std::int64_t>(m.cols()));
        w.raw(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    const std::uint64_t sum = fnv1a(w.bytes().data(), w.bytes().size());
    w.pod(sum);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    // write-then-rename so a crashed run never leaves a half-written archive behind
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::io_error, "cannot write checkpoint " + path.string());
        out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
        require(out.good(), ErrorKind::io_error, "failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io_error, "cannot open checkpoint " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(buf.size() >= sizeof(kCheckpointMagic) + 4 + 8, ErrorKind::io_error, "checkpoint is truncated: " + path.string());
    require(std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) == 0, ErrorKind::io_error,
            "not a checkpoint file: " + path.string());
    std::uint32_t version = 0;
    std::memcpy(&version, buf.data() + sizeof(kCheckpointMagic), sizeof(version));
    require(version == kCheckpointVersion, ErrorKind::incompatible_checkpoint,
            "checkpoint schema version " + std::to_string(version) + " != supported " + std::to_string(kCheckpointVersion));
    const std::size_t body = buf.size() - sizeof(std::uint64_t);
    std::uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + body, sizeof(stored));
    require(fnv1a(buf.data(), body) == stored, ErrorKind::io_error, "checkpoint checksum mismatch: " + path.string());

    detail::ByteReader r(buf, body);
    char magic[sizeof(kCheckpointMagic)];
    r.raw(magic, sizeof(magic));
    r.pod<std::uint32_t>();
    const auto meta_len = r.pod<std::uint64_t>();
    require(meta_len <= r.remaining(), ErrorKind::io_error, "checkpoint is truncated");
    std::string meta(meta_len, '\0');
    r.raw(meta.data(), meta_len);
    Checkpoint ckpt;
    try {
        ckpt.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::io_error, std::string("checkpoint metadata is corrupt: ") + e.what());
    }
    const auto count = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = r.pod<std::uint32_t>();
        require(name_len <= r.remaining(), ErrorKind::io_error, "checkpoint is truncated");
        std::string name(name_len, '\0');
        r.raw(name.data(), name_len);
        const auto rows = r.pod<std::int64_t>();
        const auto cols = r.pod<std::int64_t>();
        require(rows >= 0 && cols >= 0 && static_cast<std::uint64_t>(rows * cols) * sizeof(double) <= r.remaining(),
                ErrorKind::io_error, "checkpoint array '" + name + "' is truncated");
        Matrix m(rows, cols);
        r.raw(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
        ckpt.arrays.emplace(std::move(name), std::move(m));
    }
    require(r.remaining() == 0, ErrorKind::io_error, "trailing bytes in checkpoint");
    return ckpt;
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"autoencoder",
             {{"image_size", c.autoencoder.image_size},
              {"factor", c.autoencoder.factor},
              {"latent_channels", c.autoencoder.latent_channels},
              {"width", c.autoencoder.width}}},
            {"text",
             {{"dim", c.text.dim}, {"blocks", c.text.blocks}, {"max_length", c.text.max_length}, {"positional", c.text.positional}}},
            {"denoiser_width", c.denoiser_width},
            {"embed_dim", c.embed_dim},
            {"time_dim", c.time_dim},
            {"timesteps", c.timesteps},
            {"placeholder_width", c.placeholder_width},
            {"vocabulary", c.vocabulary}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        const auto& ae = j.at("autoencoder");
        c.autoencoder.image_size = ae.at("image_size");
        c.autoencoder.factor = ae.at("factor");
        c.autoencoder.latent_channels = ae.at("latent_channels");
        c.autoencoder.width = ae.at("width");
        const auto& t = j.at("text");
        c.text.dim = t.at("dim");
        c.text.blocks = t.at("blocks");
        c.text.max_length = t.at("max_length");
        c.text.positional = t.at("positional");
        c.denoiser_width = j.at("denoiser_width");
        c.embed_dim = j.at("embed_dim");
        c.time_dim = j.at("time_dim");
        c.timesteps = j.at("timesteps");
        c.placeholder_width = j.at("placeholder_width");
        c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::incompatible_checkpoint, std::string("model configuration record: ") + e.what());
    }
    return c;
}

/// Every model parameter as "param.<name>", the schedule as "alphas"/"sigmas".
inline Checkpoint model_checkpoint(const DiffusionModel& model, const NoiseSchedule& sched, const std::string& stage,
                                   const std::string& config_hash, std::uint64_t seed) {
    Checkpoint ckpt;
    ckpt.meta = {{"stage", stage},
                 {"config_hash", config_hash},
                 {"seed", seed},
                 {"T", sched.T},
                 {"vocabulary", model.config().vocabulary},
                 {"model", to_json(model.config())}};
    model.for_each_param([&](const std::string& name, const Parameter& p) { ckpt.arrays["param." + name] = p.value; });
    ckpt.arrays["alphas"] = Eigen::Map<const Matrix>(sched.alphas.data(), 1, static_cast<Index>(sched.alphas.size()));
    ckpt.arrays["sigmas"] = Eigen::Map<const Matrix>(sched.sigmas.data(), 1, static_cast<Index>(sched.sigmas.size()));
    return ckpt;
}

inline NoiseSchedule schedule_from_checkpoint(const Checkpoint& ckpt) {
    const Matrix& a = ckpt.array("alphas");
    const Matrix& s = ckpt.array("sigmas");
    require(a.size() == s.size() && a.size() >= 3, ErrorKind::incompatible_checkpoint, "schedule arrays are malformed");
    NoiseSchedule sched;
    sched.T = static_cast<int>(a.size() - 1);
    sched.alphas.assign(a.data(), a.data() + a.size());
    sched.sigmas.assign(s.data(), s.data() + s.size());
    require(ckpt.meta.value("T", -1) == sched.T, ErrorKind::incompatible_checkpoint, "schedule length disagrees with T");
    return sched;
}

/// Rebuilds the model recorded in `ckpt` and restores every parameter bit-exactly.
inline DiffusionModel model_from_checkpoint(const Checkpoint& ckpt) {
    require(ckpt.meta.contains("model"), ErrorKind::incompatible_checkpoint, "checkpoint holds no model");
    DiffusionModel model(model_config_from_json(ckpt.meta.at("model")), 0);
    model.for_each_param([&](const std::string& name, Parameter& p) {
        const Matrix& v = ckpt.array("param." + name);
        require(v.rows() == p.value.rows() && v.cols() == p.value.cols(), ErrorKind::incompatible_checkpoint,
                "shape mismatch for parameter " + name);
        p.value = v;
    });
    return model;
}

inline void add_prompt(Checkpoint& ckpt, const PromptEmbedding& prompt) {
    ckpt.meta["prompt"] = {{"words", prompt.words}, {"trainable_positions", prompt.trainable_positions}};
    ckpt.arrays["prompt.tokens"] = prompt.tokens;
}

inline PromptEmbedding prompt_from_checkpoint(const Checkpoint& ckpt) {
    require(ckpt.meta.contains("prompt"), ErrorKind::incompatible_checkpoint, "checkpoint holds no prompt embedding");
    PromptEmbedding p;
    p.words = ckpt.meta["prompt"].at("words").get<std::vector<std::string>>();
    p.trainable_positions = ckpt.meta["prompt"].at("trainable_positions").get<std::vector<int>>();
    p.tokens = ckpt.array("prompt.tokens");
    return p;
}

/// Adapter arrays "lora.<layer>.A" / "lora.<layer>.B" and its rank.
inline void add_lora(Checkpoint& ckpt, const LoraAdapter& adapter) {
    ckpt.meta["lora"] = {{"rank", adapter.rank()}, {"targets", adapter.targets()}, {"merged", adapter.merged()}};
    for (const auto& [name, w] : adapter.weights()) {
        ckpt.arrays["lora." + name + ".A"] = w->A.value;
        ckpt.arrays["lora." + name + ".B"] = w->B.value;
    }
}

inline LoraAdapter lora_from_checkpoint(const Checkpoint& ckpt) {
    require(ckpt.meta.contains("lora"), ErrorKind::incompatible_checkpoint, "checkpoint holds no adapter");
    const auto& meta = ckpt.meta["lora"];
    std::map<std::string, std::pair<Matrix, Matrix>> pairs;
    for (const std::string& name : meta.at("targets").get<std::vector<std::string>>())
        pairs[name] = {ckpt.array("lora." + name + ".A"), ckpt.array("lora." + name + ".B")};
    return make_lora(pairs, meta.at("rank").get<int>());
}

/// Classifier weights as "clf.<name>" plus its architecture record.
inline Checkpoint classifier_checkpoint(const Classifier& model, const std::string& stage) {
    Checkpoint ckpt;
    const ClassifierConfig& c = model.config();
    ckpt.meta = {{"stage", stage},
                 {"classifier",
                  {{"image_size", c.image_size},
                   {"channels", c.channels},
                   {"width", c.width},
                   {"blocks", c.blocks},
                   {"num_classes", c.num_classes}}}};
    Classifier::visit(model, "clf", [&](const std::string& name, const Parameter& p) { ckpt.arrays[name] = p.value; });
    return ckpt;
}

inline Classifier classifier_from_checkpoint(const Checkpoint& ckpt) {
    require(ckpt.meta.contains("classifier"), ErrorKind::incompatible_checkpoint, "checkpoint holds no classifier");
    ClassifierConfig c;
    try {
        const auto& j = ckpt.meta.at("classifier");
        c.image_size = j.at("image_size");
        c.channels = j.at("channels");
        c.width = j.at("width");
        c.blocks = j.at("blocks");
        c.num_classes = j.at("num_classes");
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::incompatible_checkpoint, std::string("classifier record: ") + e.what());
    }
    Rng rng(0);
    Classifier model(c, rng);
    Classifier::visit(model, "clf", [&](const std::string& name, Parameter& p) {
        const Matrix& v = ckpt.array(name);
        require(v.rows() == p.value.rows() && v.cols() == p.value.cols(), ErrorKind::incompatible_checkpoint,
                "shape mismatch for parameter " + name);
        p.value = v;
    });
    return model;
}

}  // namespace minidiff
