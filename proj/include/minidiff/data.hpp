#pragma once

// Dataset manifests, class-per-directory ingestion, the alpha-fraction
// substitution / expansion protocols and the procedural defect corpus.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "minidiff/error.hpp"
#include "minidiff/image.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

namespace fs = std::filesystem;

enum class Split { train, val, test };
enum class Provenance { real, generated };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw Error(ErrorKind::invalid_dataset, "unknown split '" + s + "'");
}

inline std::string to_string(Provenance p) { return p == Provenance::generated ? "generated" : "real"; }

inline Provenance parse_provenance(const std::string& s) {
    if (s == "real") return Provenance::real;
    if (s == "generated") return Provenance::generated;
    throw Error(ErrorKind::invalid_dataset, "unknown provenance '" + s + "'");
}

struct ManifestEntry {
    std::string path;
    std::string label;
    Split split = Split::train;
    Provenance provenance = Provenance::real;
    std::optional<std::string> source_id;
    /// Free-form generation record (omega_cfg, strength, seed, ...).
    nlohmann::json extra = nlohmann::json::object();

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::vector<std::string> classes;
    int image_size = 32;
    std::vector<ManifestEntry> entries;

    int class_index(const std::string& label) const {
        auto it = std::find(classes.begin(), classes.end(), label);
        require(it != classes.end(), ErrorKind::invalid_dataset, "unknown class '" + label + "'");
        return static_cast<int>(it - classes.begin());
    }

    std::size_t count(const std::string& label, Split split, std::optional<Provenance> prov = std::nullopt) const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) {
            return e.label == label && e.split == split && (!prov || e.provenance == *prov);
        }));
    }

    std::size_t count(Split split) const {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.split == split; }));
    }

    std::vector<ManifestEntry> select(Split split, const std::string& label = "") const {
        std::vector<ManifestEntry> out;
        for (const ManifestEntry& e : entries)
            if (e.split == split && (label.empty() || e.label == label)) out.push_back(e);
        return out;
    }

    /// Generated data must never reach val/test.
    void check_invariants() const {
        for (const ManifestEntry& e : entries) {
            require(!(e.provenance == Provenance::generated && e.split != Split::train), ErrorKind::invalid_dataset,
                    "generated entry '" + e.path + "' assigned to " + to_string(e.split));
            require(std::find(classes.begin(), classes.end(), e.label) != classes.end(), ErrorKind::invalid_dataset,
                    "entry '" + e.path + "' has unknown class '" + e.label + "'");
        }
    }

    void check_paths_exist(const fs::path& base = {}) const {
        for (const ManifestEntry& e : entries) {
            require(fs::exists(base / e.path), ErrorKind::invalid_dataset, "missing image " + (base / e.path).string());
        }
    }

    bool operator==(const DatasetManifest&) const = default;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
    nlohmann::json j;
    j["path"] = e.path;
    j["label"] = e.label;
    j["split"] = to_string(e.split);
    j["provenance"] = to_string(e.provenance);
    if (e.source_id) j["source_id"] = *e.source_id;
    if (!e.extra.empty()) j["extra"] = e.extra;
    return j;
}

inline ManifestEntry entry_from_json(const nlohmann::json& j) {
    ManifestEntry e;
    e.path = j.at("path").get<std::string>();
    e.label = j.at("label").get<std::string>();
    e.split = parse_split(j.at("split").get<std::string>());
    e.provenance = parse_provenance(j.at("provenance").get<std::string>());
    if (j.contains("source_id")) e.source_id = j["source_id"].get<std::string>();
    if (j.contains("extra")) e.extra = j["extra"];
    return e;
}

/// Line-delimited records: a header line with the class list, then one line per entry.
inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io_error, "cannot write manifest " + path.string());
    nlohmann::json header;
    header["classes"] = m.classes;
    header["image_size"] = m.image_size;
    out << header.dump() << '\n';
    for (const ManifestEntry& e : m.entries) out << to_json(e).dump() << '\n';
}

inline DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io_error, "cannot read manifest " + path.string());
    DatasetManifest m;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            throw Error(ErrorKind::io_error, "corrupt manifest line in " + path.string() + ": " + ex.what());
        }
        if (header) {
            m.classes = j.at("classes").get<std::vector<std::string>>();
            m.image_size = j.at("image_size").get<int>();
            header = false;
        } else {
            m.entries.push_back(entry_from_json(j));
        }
    }
    require(!header, ErrorKind::io_error, "empty manifest " + path.string());
    return m;
}

/// Loads one manifest image as grayscale at the manifest resolution.
inline Image load_image(const ManifestEntry& e, int size, const fs::path& base = {}) {
    Image img = read_png(base / e.path);
    return resize_bilinear(img, size, size);
}

inline std::vector<Image> load_images(const std::vector<ManifestEntry>& entries, int size, const fs::path& base = {}) {
    std::vector<Image> out;
    out.reserve(entries.size());
    for (const ManifestEntry& e : entries) out.push_back(load_image(e, size, base));
    return out;
}

// ---------------------------------------------------------------- ingestion

struct SplitRatio {
    double train = 8, val = 1, test = 1;
};

/// (train, val, test) counts for n items; train and val rounded, test takes the rest.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitRatio& r) {
    const double total = r.train + r.val + r.test;
    require(r.train > 0 && r.val >= 0 && r.test >= 0 && total > 0, ErrorKind::invalid_argument, "bad split ratio");
    const auto ntrain = static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.train / total));
    const auto nval = std::min(n - std::min(n, ntrain),
                               static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.val / total)));
    const std::size_t tr = std::min(n, ntrain);
    return {tr, nval, n - tr - nval};
}

struct IngestOptions {
    int image_size = 32;
};

struct IngestResult {
    DatasetManifest manifest;
    std::vector<std::string> rejects;
};

/// Deterministic stratified split of a class-per-directory image tree.
inline IngestResult ingest(const fs::path& root, const SplitRatio& ratio, std::uint64_t seed,
                           const IngestOptions& opt = {}) {
    require(fs::is_directory(root), ErrorKind::invalid_dataset, "dataset root " + root.string() + " is not a directory");
    IngestResult result;
    result.manifest.image_size = opt.image_size;
    std::vector<fs::path> class_dirs;
    for (const auto& d : fs::directory_iterator(root))
        if (d.is_directory()) class_dirs.push_back(d.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    require(!class_dirs.empty(), ErrorKind::invalid_dataset, "no class directories under " + root.string());
    for (const fs::path& dir : class_dirs) {
        const std::string label = dir.filename().string();
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(dir))
            if (f.is_regular_file()) files.push_back(f.path());
        std::sort(files.begin(), files.end());
        std::vector<std::string> valid;
        for (const fs::path& f : files) {
            try {
                (void)read_png(f);
                valid.push_back(f.string());
            } catch (const Error&) {
                result.rejects.push_back(f.string());
            }
        }
        require(!valid.empty(), ErrorKind::invalid_dataset, "class directory '" + label + "' has no decodable images");
        Rng rng(derive_seed(seed, fnv1a(label)));
        std::shuffle(valid.begin(), valid.end(), rng.engine());
        const auto counts = split_counts(valid.size(), ratio);
        result.manifest.classes.push_back(label);
        for (std::size_t i = 0; i < valid.size(); ++i) {
            ManifestEntry e;
            e.path = valid[i];
            e.label = label;
            e.split = i < counts[0] ? Split::train : (i < counts[0] + counts[1] ? Split::val : Split::test);
            result.manifest.entries.push_back(std::move(e));
        }
    }
    result.manifest.check_invariants();
    return result;
}

/// Rewrites entry paths (absolute or relative to the working directory) that
/// lie under `base` as base-relative generic paths, so manifests do not depend
/// on where a run directory lives.
inline DatasetManifest relativize(DatasetManifest m, const fs::path& base) {
    const fs::path abs_base = fs::weakly_canonical(fs::absolute(base));
    for (ManifestEntry& e : m.entries) {
        const fs::path p = fs::weakly_canonical(fs::absolute(fs::path(e.path)));
        const fs::path rel = p.lexically_relative(abs_base);
        e.path = (!rel.empty() && *rel.begin() != "..") ? rel.generic_string() : p.generic_string();
    }
    return m;
}

inline void write_rejects(const std::vector<std::string>& rejects, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    for (const std::string& r : rejects) out << r << '\n';
}

/// Raw industrial imagery: Otsu-binarize to find the object ROI, cut it into
/// square tiles along its long side and resize each tile.
inline std::vector<Image> preprocess_raw(const Image& raw, int size) {
    const double thr = otsu_threshold(raw);
    Index y0 = raw.rows(), y1 = -1, x0 = raw.cols(), x1 = -1;
    for (Index y = 0; y < raw.rows(); ++y)
        for (Index x = 0; x < raw.cols(); ++x)
            if (raw(y, x) > thr) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    if (y1 < 0) {
        y0 = 0, y1 = raw.rows() - 1, x0 = 0, x1 = raw.cols() - 1;
    }
    const Index h = y1 - y0 + 1, w = x1 - x0 + 1, side = std::min(h, w);
    std::vector<Image> tiles;
    const Index n = std::max<Index>(1, std::max(h, w) / side);
    for (Index i = 0; i < n; ++i) {
        const Index oy = h > w ? y0 + i * side : y0;
        const Index ox = h > w ? x0 : x0 + i * side;
        tiles.push_back(resize_bilinear(raw.block(oy, ox, side, side), size, size));
    }
    return tiles;
}

/// Applies preprocess_raw to every image of a class-per-directory tree.
inline std::size_t preprocess_directory(const fs::path& raw_root, const fs::path& out_root, int size) {
    std::size_t written = 0;
    for (const auto& d : fs::directory_iterator(raw_root)) {
        if (!d.is_directory()) continue;
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(d.path()))
            if (f.is_regular_file()) files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const fs::path& f : files) {
            Image raw;
            try {
                raw = read_png(f);
            } catch (const Error&) {
                continue;
            }
            const auto tiles = preprocess_raw(raw, size);
            for (std::size_t i = 0; i < tiles.size(); ++i) {
                write_png(out_root / d.path().filename() / (f.stem().string() + "_" + std::to_string(i) + ".png"), tiles[i]);
                ++written;
            }
        }
    }
    return written;
}

// ------------------------------------------------------ subset / substitute

inline std::size_t alpha_count(double alpha, std::size_t n) {
    // guard against 0.4 * 240 = 96.00000000000001
    return static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n) - 1e-9));
}

/// Keeps ceil(alpha * n) real training entries per class; val/test untouched.
inline DatasetManifest subset_train(const DatasetManifest& m, double alpha, std::uint64_t seed = 0) {
    require(alpha > 0.0 && alpha <= 1.0, ErrorKind::invalid_argument, "alpha must lie in (0, 1]");
    if (alpha == 1.0) return m;
    std::set<std::size_t> drop;
    for (const std::string& label : m.classes) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < m.entries.size(); ++i) {
            const ManifestEntry& e = m.entries[i];
            if (e.label == label && e.split == Split::train && e.provenance == Provenance::real) idx.push_back(i);
        }
        const std::size_t keep = alpha_count(alpha, idx.size());
        Rng rng(derive_seed(seed, fnv1a(label)));
        std::shuffle(idx.begin(), idx.end(), rng.engine());
        for (std::size_t j = keep; j < idx.size(); ++j) drop.insert(idx[j]);
    }
    DatasetManifest out = m;
    out.entries.clear();
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        if (!drop.count(i)) out.entries.push_back(m.entries[i]);
    return out;
}

inline ManifestEntry as_generated(ManifestEntry e) {
    e.split = Split::train;
    e.provenance = Provenance::generated;
    return e;
}

/// Pool entries of one class in pool order.
inline std::vector<ManifestEntry> pool_for(const std::vector<ManifestEntry>& pool, const std::string& label) {
    std::vector<ManifestEntry> out;
    for (const ManifestEntry& e : pool)
        if (e.label == label) out.push_back(e);
    return out;
}

/// Replaces (1 - alpha) of each class's real training entries with generated
/// ones, restoring the original per-class training count.
inline DatasetManifest substitute(const DatasetManifest& m, double alpha, const std::vector<ManifestEntry>& pool,
                                  std::uint64_t seed = 0) {
    DatasetManifest out = subset_train(m, alpha, seed);
    for (const std::string& label : m.classes) {
        const std::size_t original = m.count(label, Split::train, Provenance::real);
        const std::size_t kept = out.count(label, Split::train, Provenance::real);
        const std::size_t need = original - kept;
        const auto candidates = pool_for(pool, label);
        require(candidates.size() >= need, ErrorKind::insufficient_generated,
                "class '" + label + "' needs " + std::to_string(need) + " generated images, pool has " +
                    std::to_string(candidates.size()));
        for (std::size_t i = 0; i < need; ++i) out.entries.push_back(as_generated(candidates[i]));
    }
    out.check_invariants();
    return out;
}

/// Appends n generated training entries per class.
inline DatasetManifest expand(const DatasetManifest& m, const std::vector<ManifestEntry>& pool, std::size_t n) {
    DatasetManifest out = m;
    for (const std::string& label : m.classes) {
        const auto candidates = pool_for(pool, label);
        require(candidates.size() >= n, ErrorKind::insufficient_generated,
                "class '" + label + "' needs " + std::to_string(n) + " generated images, pool has " +
                    std::to_string(candidates.size()));
        for (std::size_t i = 0; i < n; ++i) out.entries.push_back(as_generated(candidates[i]));
    }
    out.check_invariants();
    return out;
}

// ------------------------------------------------------- synthetic corpus

enum class TextureKind { scratch, pit, patch, scale };

inline TextureKind parse_texture(const std::string& s) {
    if (s == "scratch") return TextureKind::scratch;
    if (s == "pit") return TextureKind::pit;
    if (s == "patch") return TextureKind::patch;
    if (s == "scale") return TextureKind::scale;
    throw Error(ErrorKind::invalid_argument, "unknown texture kind '" + s + "'");
}

inline std::string to_string(TextureKind k) {
    switch (k) {
        case TextureKind::scratch: return "scratch";
        case TextureKind::pit: return "pit";
        case TextureKind::patch: return "patch";
        case TextureKind::scale: return "scale";
    }
    return "scratch";
}

/// One procedural defect image: textured gray steel background plus the
/// class-specific defect pattern.
inline Image synth_image(TextureKind kind, int size, Rng& rng) {
    const double s = size;
    Image img(size, size);
    // disjoint background bands keep the classes apart even in pooled pixels
    static constexpr double kBand[] = {0.30, 0.62, 0.41, 0.51};
    const double lo = kBand[static_cast<int>(kind)];
    const double base = rng.uniform(lo, lo + 0.08);
    const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0), ph = rng.uniform(0.0, 6.28);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            img(y, x) = base + 0.04 * std::sin(2.0 * std::numbers::pi * (fx * x + fy * y) / s + ph) + 0.025 * rng.normal();

    switch (kind) {
        case TextureKind::scratch: {
            const int lines = static_cast<int>(rng.uniform_int(1, 3));
            for (int l = 0; l < lines; ++l) {
                const double cx = rng.uniform(0.2 * s, 0.8 * s), cy = rng.uniform(0.2 * s, 0.8 * s);
                const double ang = rng.uniform(0.0, std::numbers::pi), len = rng.uniform(0.5 * s, 1.0 * s);
                const double width = rng.uniform(0.7, 1.3), amp = rng.uniform(0.3, 0.45);
                const double dx = std::cos(ang), dy = std::sin(ang);
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const double px = x - cx, py = y - cy;
                        const double along = std::clamp(px * dx + py * dy, -len / 2, len / 2);
                        const double d = std::hypot(px - along * dx, py - along * dy);
                        img(y, x) += amp * std::max(0.0, 1.0 - d / width);
                    }
            }
            break;
        }
        case TextureKind::pit: {
            const int pits = static_cast<int>(rng.uniform_int(3, 6));
            for (int k = 0; k < pits; ++k) {
                const double cx = rng.uniform(0.1 * s, 0.9 * s), cy = rng.uniform(0.1 * s, 0.9 * s);
                const double r = rng.uniform(1.0, 2.5), depth = rng.uniform(0.3, 0.45);
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                        img(y, x) -= depth * std::exp(-d2 / (2.0 * r * r));
                    }
            }
            break;
        }
        case TextureKind::patch: {
            const int patches = static_cast<int>(rng.uniform_int(1, 2));
            for (int k = 0; k < patches; ++k) {
                const double w = rng.uniform(0.25 * s, 0.5 * s), h = rng.uniform(0.25 * s, 0.5 * s);
                const double x0 = rng.uniform(0.0, s - w), y0 = rng.uniform(0.0, s - h);
                const double amp = rng.uniform(0.2, 0.35);
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        auto edge = [](double v) { return 1.0 / (1.0 + std::exp(-2.0 * v)); };
                        const double inside = edge(x - x0) * edge(x0 + w - x) * edge(y - y0) * edge(y0 + h - y);
                        img(y, x) += amp * inside;
                    }
            }
            break;
        }
        case TextureKind::scale: {
            const int bands = static_cast<int>(rng.uniform_int(2, 3));
            for (int k = 0; k < bands; ++k) {
                const double ang = rng.uniform(-0.35, 0.35), off = rng.uniform(0.1 * s, 0.9 * s);
                const double half = rng.uniform(1.5, 3.0), amp = rng.uniform(0.12, 0.18);
                // speckle grains are 2x2 pixels
                Matrix grain(size / 2 + 1, size / 2 + 1);
                for (Index i = 0; i < grain.size(); ++i) grain.data()[i] = rng.normal();
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const double d = std::abs((y - off) * std::cos(ang) - (x - s / 2) * std::sin(ang));
                        if (d < half) img(y, x) += amp * grain(y / 2, x / 2);
                    }
            }
            break;
        }
    }
    return img.cwiseMax(0.0).cwiseMin(1.0);
}

struct SynthOptions {
    std::vector<std::string> classes = {"scratch", "pit", "patch", "scale"};
    int per_class = 64;
    int image_size = 32;
    std::uint64_t seed = 7;
    SplitRatio ratio{};
};

/// Writes <root>/<class>/<class>_NNNN.png for every class and returns the
/// split manifest of the written corpus.
inline DatasetManifest synth_corpus(const fs::path& root, const SynthOptions& opt) {
    require(opt.per_class >= 1 && opt.image_size >= 8, ErrorKind::invalid_argument, "bad synthetic corpus options");
    for (std::size_t c = 0; c < opt.classes.size(); ++c) {
        const TextureKind kind = parse_texture(opt.classes[c]);
        Rng rng(derive_seed(opt.seed, fnv1a(opt.classes[c])));
        for (int i = 0; i < opt.per_class; ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "%s_%04d.png", opt.classes[c].c_str(), i);
            write_png(root / opt.classes[c] / name, synth_image(kind, opt.image_size, rng));
        }
    }
    return ingest(root, opt.ratio, opt.seed, {opt.image_size}).manifest;
}

}  // namespace minidiff
