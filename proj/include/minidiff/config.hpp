#pragma once

// Flat `key = value` run configuration with namespaced keys and documented
// defaults. Unknown keys and malformed values are rejected as config errors.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "minidiff/error.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

struct ConfigKey {
    std::string key;
    std::string default_value;
    std::string doc;
};

// Defaults are the reference training settings where one exists.
inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"run.seed", "0", "root seed; every stage derives its own seed from it"},
        {"data.root", "", "class-per-directory image tree; empty synthesizes the procedural corpus"},
        {"data.classes", "", "comma-separated classes to adapt/generate/tune; empty selects all"},
        {"data.image_size", "32", "square working resolution"},
        {"data.split", "8:1:1", "train:val:test ratio"},
        {"data.synth.classes", "scratch,pit,patch,scale", "synthetic texture classes"},
        {"data.synth.per_class", "64", "synthetic images per class"},
        {"data.alpha", "1.0", "fraction of real training images kept per class"},
        {"data.substitute", "false", "fill the removed (1 - alpha) share with generated images"},
        {"model.ae.factor", "2", "auto-encoder down-sampling factor; 1 selects pixel space"},
        {"model.ae.latent_channels", "2", "latent channels"},
        {"model.ae.width", "12", "auto-encoder conv width"},
        {"model.text.dim", "32", "token / text embedding width"},
        {"model.text.blocks", "1", "text encoder transformer blocks"},
        {"model.denoiser.width", "16", "denoiser channels at full latent resolution"},
        {"model.denoiser.embed_dim", "64", "joint timestep/text embedding width"},
        {"model.placeholder_width", "1", "token positions owned by the placeholder word"},
        {"schedule.T", "1000", "diffusion steps"},
        {"schedule.kind", "linear-beta", "linear-beta | cosine"},
        {"ae.epochs", "25", "auto-encoder training epochs"},
        {"ae.lr", "2e-3", "auto-encoder learning rate"},
        {"pretrain.iterations", "4000", "base diffusion training iterations"},
        {"pretrain.batch", "8", "base diffusion batch size"},
        {"pretrain.lr", "1e-3", "base diffusion learning rate"},
        {"pretrain.null_prob", "0.1", "share of unconditional batches"},
        {"pretrain.holdout", "", "comma-separated classes excluded from base training"},
        {"adapt.prompt", "a photo of <unknown>", "adaptation prompt; must contain the placeholder"},
        {"adapt.token", "true", "run token-embedding adaptation"},
        {"adapt.lora", "true", "run low-rank adaptation"},
        {"adapt.full", "false", "fine-tune every text-encoder and denoiser weight instead of low-rank deltas"},
        {"adapt.iterations.token", "1000", "token stage iterations"},
        {"adapt.iterations.lora", "1000", "low-rank stage iterations"},
        {"adapt.batch", "4", "adaptation batch size"},
        {"adapt.lr.token", "5e-4", "token stage learning rate"},
        {"adapt.lr.lora", "1e-4", "low-rank stage learning rate"},
        {"adapt.rank", "1", "low-rank adapter rank r"},
        {"adapt.null_prob", "0.1", "share of unconditional batches during adaptation"},
        {"gen.omega_cfg", "5", "guidance scale when no tuned value exists"},
        {"gen.strength", "0.5", "denoising strength when no tuned value exists"},
        {"gen.mode", "stochastic-paper", "stochastic-paper | deterministic"},
        {"gen.image_oriented", "true", "start from noised real images instead of pure noise"},
        {"gen.steps", "0", "reverse steps; 0 walks every integer timestep"},
        {"gen.n", "1000", "generated images per class"},
        {"gen.use_tuned", "true", "use the tuned per-class setting when available"},
        {"tune.grid", "3,4,5,6,7 x 0.3,0.4,0.5,0.6,0.7", "guidance scales x strengths"},
        {"tune.n", "64", "generated images per grid cell"},
        {"tune.mode", "grid", "grid | coordinate-descent"},
        {"fid.extractor", "trained-probe-net", "trained-probe-net | downsampled-pixels"},
        {"fid.n", "64", "generated images scored per class"},
        {"probe.epochs", "40", "probe classifier epochs"},
        {"probe.lr", "1e-2", "probe classifier learning rate"},
        {"classify.epochs", "20", "classifier epochs"},
        {"classify.batch", "32", "classifier batch size"},
        {"classify.lr", "1e-4", "classifier learning rate"},
        {"classify.patience", "5", "early-stop patience on validation accuracy"},
        {"classify.channels", "3", "classifier input channels (1 or 3)"},
        {"classify.width", "8", "classifier base conv width"},
        {"classify.augment", "true", "rotation/flip augmentation"},
        {"expand.n", "0", "generated images appended per class"},
    };
    return schema;
}

/// Resolved configuration: every schema key maps to a value string.
class Config {
public:
    Config() {
        for (const ConfigKey& k : config_schema()) values_[k.key] = k.default_value;
    }

    static bool known(const std::string& key) {
        const auto& s = config_schema();
        return std::any_of(s.begin(), s.end(), [&](const ConfigKey& k) { return k.key == key; });
    }

    /// Applies `key = value` lines; `#` starts a comment. All offending keys are reported together.
    void parse(const std::string& text, const std::string& origin = "<config>") {
        std::istringstream in(text);
        std::string line;
        std::vector<std::string> bad;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                bad.push_back(origin + ":" + std::to_string(lineno) + ": expected key = value");
                continue;
            }
            const std::string key = trim(t.substr(0, eq));
            if (!known(key)) {
                bad.push_back(key + " (unknown key)");
                continue;
            }
            values_[key] = trim(t.substr(eq + 1));
        }
        collect_invalid(bad);
        if (!bad.empty()) throw Error(ErrorKind::config_error, "invalid configuration: " + join(bad));
    }

    void load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorKind::config_error, "cannot read config file " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        parse(ss.str(), path.string());
    }

    void set(const std::string& key, const std::string& value) {
        if (!known(key)) throw Error(ErrorKind::config_error, "invalid configuration: " + key + " (unknown key)");
        std::string previous = std::exchange(values_[key], value);
        try {
            validate();
        } catch (const Error&) {
            values_[key] = std::move(previous);
            throw;
        }
    }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        require(it != values_.end(), ErrorKind::config_error, "unknown configuration key " + key);
        return it->second;
    }

    long integer(const std::string& key) const {
        const std::string& v = str(key);
        long out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size())
            throw Error(ErrorKind::config_error, key + " expects an integer, got '" + v + "'");
        return out;
    }

    std::uint64_t seed(const std::string& key) const {
        const std::string& v = str(key);
        std::uint64_t out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size())
            throw Error(ErrorKind::config_error, key + " expects an unsigned integer");
        return out;
    }

    double real(const std::string& key) const {
        const std::string& v = str(key);
        try {
            std::size_t used = 0;
            const double d = std::stod(v, &used);
            if (used == v.size()) return d;
        } catch (const std::exception&) {
        }
        throw Error(ErrorKind::config_error, key + " expects a number, got '" + v + "'");
    }

    bool boolean(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "off" || v == "0" || v == "no") return false;
        throw Error(ErrorKind::config_error, key + " expects a boolean, got '" + v + "'");
    }

    std::vector<std::string> list(const std::string& key) const {
        std::vector<std::string> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    std::vector<double> reals(const std::string& text, const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                out.push_back(std::stod(trim(item)));
            } catch (const std::exception&) {
                throw Error(ErrorKind::config_error, key + " has a non-numeric entry '" + item + "'");
            }
        }
        return out;
    }

    /// "w1,w2,... x s1,s2,..." -> (omegas, strengths).
    std::pair<std::vector<double>, std::vector<double>> grid(const std::string& key) const {
        const std::string& v = str(key);
        const auto x = v.find('x');
        if (x == std::string::npos)
            throw Error(ErrorKind::config_error, key + " expects 'omegas x strengths'");
        return {reals(v.substr(0, x), key), reals(v.substr(x + 1), key)};
    }

    /// Canonical `key = value` listing of every resolved key, sorted.
    std::string dump() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    /// Hex digest of dump(); identifies a resolved configuration.
    std::string hash() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(dump())));
        return buf;
    }

private:
    void validate() const {
        std::vector<std::string> bad;
        collect_invalid(bad);
        if (!bad.empty()) throw Error(ErrorKind::config_error, "invalid configuration: " + join(bad));
    }

    /// Type-checks every key so a bad value fails before any stage runs.
    void collect_invalid(std::vector<std::string>& bad) const {
        auto check = [&](auto&& fn) {
            try {
                fn();
            } catch (const Error& e) {
                const std::string what = e.what();
                bad.push_back(what.substr(what.find(": ") + 2));
            }
        };
        for (const char* k : {"data.image_size", "data.synth.per_class", "model.ae.factor", "model.ae.latent_channels",
                              "model.ae.width", "model.text.dim", "model.text.blocks", "model.denoiser.width",
                              "model.denoiser.embed_dim", "model.placeholder_width", "schedule.T", "ae.epochs",
                              "pretrain.iterations", "pretrain.batch", "adapt.iterations.token", "adapt.iterations.lora",
                              "adapt.batch", "adapt.rank", "gen.steps", "gen.n", "tune.n", "fid.n", "probe.epochs",
                              "classify.epochs", "classify.batch", "classify.patience", "classify.channels",
                              "classify.width", "expand.n"})
            check([&] {
                if (integer(k) < 0)
                    throw Error(ErrorKind::config_error, std::string(k) + " must be nonnegative");
            });
        for (const char* k : {"data.alpha", "ae.lr", "pretrain.lr", "pretrain.null_prob", "adapt.lr.token", "adapt.lr.lora",
                              "adapt.null_prob", "gen.omega_cfg", "gen.strength", "probe.lr", "classify.lr"})
            check([&] { (void)real(k); });
        for (const char* k : {"data.substitute", "adapt.token", "adapt.lora", "adapt.full", "gen.image_oriented",
                              "gen.use_tuned", "classify.augment"})
            check([&] { (void)boolean(k); });
        check([&] { (void)seed("run.seed"); });
        check([&] { (void)grid("tune.grid"); });
        const std::map<std::string, std::vector<std::string>> choices = {
            {"schedule.kind", {"linear-beta", "cosine"}},
            {"gen.mode", {"stochastic-paper", "deterministic"}},
            {"tune.mode", {"grid", "coordinate-descent"}},
            {"fid.extractor", {"trained-probe-net", "downsampled-pixels"}},
        };
        for (const auto& [key, allowed] : choices)
            if (std::find(allowed.begin(), allowed.end(), str(key)) == allowed.end())
                bad.push_back(key + " must be one of " + join(allowed, " | ") + ", got '" + str(key) + "'");
        if (const double a = real_or("data.alpha", 1.0); a <= 0.0 || a > 1.0) bad.push_back("data.alpha must lie in (0, 1]");
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    double real_or(const std::string& key, double fallback) const {
        try {
            return real(key);
        } catch (const Error&) {
            return fallback;
        }
    }

    static std::string join(const std::vector<std::string>& parts, const std::string& sep = "; ") {
        std::string out;
        for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
        return out;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace minidiff
