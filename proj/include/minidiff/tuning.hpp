#pragma once

// Per-class selection of guidance scale and strength by FID over a grid.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "minidiff/error.hpp"
#include "minidiff/metrics.hpp"
#include "minidiff/sampling.hpp"

namespace minidiff {

struct GridCell {
    double omega_cfg = 0.0;
    double strength = 0.0;
    bool operator==(const GridCell&) const = default;
};

struct ScoredCell {
    GridCell cell;
    double fid = 0.0;
    std::size_t n = 0;
    std::uint64_t seed = 0;
};

/// Cartesian product, strength-major.
inline std::vector<GridCell> make_grid(std::span<const double> omegas, std::span<const double> strengths) {
    std::vector<GridCell> grid;
    for (double s : strengths)
        for (double w : omegas) grid.push_back({w, s});
    return grid;
}

/// Index of the minimal score; ties go to the smaller strength, then the smaller omega.
inline std::size_t select_best(std::span<const ScoredCell> table) {
    require(!table.empty(), ErrorKind::invalid_argument, "cannot select from an empty score table");
    std::size_t best = 0;
    for (std::size_t i = 1; i < table.size(); ++i) {
        const ScoredCell& a = table[i];
        const ScoredCell& b = table[best];
        if (a.fid != b.fid) {
            if (a.fid < b.fid) best = i;
        } else if (a.cell.strength != b.cell.strength) {
            if (a.cell.strength < b.cell.strength) best = i;
        } else if (a.cell.omega_cfg < b.cell.omega_cfg) {
            best = i;
        }
    }
    return best;
}

/// Scores one cell; must be a pure function of (cell, seed).
using CellScorer = std::function<double(const GridCell&, std::uint64_t seed)>;

struct TuningResult {
    GridCell best;
    double best_fid = 0.0;
    std::vector<ScoredCell> table;
};

enum class SearchMode { grid, coordinate_descent };

inline SearchMode parse_search_mode(const std::string& s) {
    if (s == "grid") return SearchMode::grid;
    if (s == "coordinate-descent" || s == "coordinate") return SearchMode::coordinate_descent;
    throw Error(ErrorKind::invalid_argument, "unknown search mode '" + s + "'");
}

/// Exhaustive evaluation of every cell with a shared seed per cell.
inline TuningResult grid_search(std::span<const GridCell> grid, const CellScorer& score, std::size_t n_per_cell,
                                std::uint64_t seed) {
    require(!grid.empty(), ErrorKind::invalid_argument, "tuning grid is empty");
    TuningResult r;
    for (const GridCell& c : grid) r.table.push_back({c, score(c, seed), n_per_cell, seed});
    const std::size_t b = select_best(r.table);
    r.best = r.table[b].cell;
    r.best_fid = r.table[b].fid;
    return r;
}

/// Alternates 1-D sweeps over strength and omega on the grid's axes from the
/// middle cell until the selection stops moving. Each cell is scored at most once.
inline TuningResult coordinate_descent(std::span<const double> omegas, std::span<const double> strengths,
                                       const CellScorer& score, std::size_t n_per_cell, std::uint64_t seed,
                                       int max_rounds = 4) {
    require(!omegas.empty() && !strengths.empty(), ErrorKind::invalid_argument, "tuning grid is empty");
    TuningResult r;
    auto eval = [&](const GridCell& c) {
        for (const ScoredCell& s : r.table)
            if (s.cell == c) return s.fid;
        const double f = score(c, seed);
        r.table.push_back({c, f, n_per_cell, seed});
        return f;
    };
    GridCell cur{omegas[omegas.size() / 2], strengths[strengths.size() / 2]};
    eval(cur);
    for (int round = 0; round < max_rounds; ++round) {
        const GridCell before = cur;
        for (double s : strengths) eval({cur.omega_cfg, s});
        r.best = r.table[select_best(r.table)].cell;
        cur = r.best;
        for (double w : omegas) eval({w, cur.strength});
        cur = r.table[select_best(r.table)].cell;
        if (cur == before) break;
    }
    const std::size_t b = select_best(r.table);
    r.best = r.table[b].cell;
    r.best_fid = r.table[b].fid;
    return r;
}

/// Image-oriented generation of n images per cell scored by FID against `real`.
inline CellScorer fid_scorer(const DiffusionModel& model, const PromptEmbedding& prompt,
                             std::span<const SourceImage> sources, std::span<const Image> real,
                             const NoiseSchedule& sched, const FeatureModel& extractor, std::size_t n,
                             GenerationConfig base = {}) {
    require(!sources.empty() && !real.empty(), ErrorKind::invalid_argument, "tuning needs real images");
    const GaussianStats real_stats = gaussian_stats(extract_features(real, extractor));
    return [&model, prompt, sources, real_stats, &sched, extractor, n, base](const GridCell& c, std::uint64_t seed) {
        GenerationConfig cfg = base;
        cfg.omega_cfg = c.omega_cfg;
        cfg.strength = c.strength;
        cfg.seed = seed;
        std::vector<Image> images;
        generate_dataset(model, prompt, sources, "tune", sched, cfg, n, {}, {}, &images);
        return fid(real_stats, gaussian_stats(extract_features(images, extractor)));
    };
}

inline void write_score_table(const std::string& label, std::span<const ScoredCell> table,
                              const std::filesystem::path& path, bool append = false) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const bool header = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    require(out.good(), ErrorKind::io_error, "cannot write " + path.string());
    if (header) out << "class,omega_cfg,strength,fid,n,seed\n";
    out.precision(10);
    for (const ScoredCell& s : table)
        out << label << ',' << s.cell.omega_cfg << ',' << s.cell.strength << ',' << s.fid << ',' << s.n << ',' << s.seed
            << '\n';
}

/// Class label -> tuned generation setting.
class TunedRegistry {
public:
    /// Returns true when an existing entry was superseded.
    bool record_best(const std::string& label, const GridCell& best) {
        auto [it, inserted] = entries_.insert_or_assign(label, best);
        (void)it;
        return !inserted;
    }

    std::size_t size() const { return entries_.size(); }
    bool contains(const std::string& label) const { return entries_.count(label) != 0; }
    const GridCell& at(const std::string& label) const {
        auto it = entries_.find(label);
        require(it != entries_.end(), ErrorKind::invalid_argument, "no tuned setting for class '" + label + "'");
        return it->second;
    }
    const std::map<std::string, GridCell>& entries() const { return entries_; }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [label, c] : entries_) j[label] = {{"omega_cfg", c.omega_cfg}, {"strength", c.strength}};
        return j;
    }

    static TunedRegistry from_json(const nlohmann::json& j) {
        TunedRegistry r;
        for (auto it = j.begin(); it != j.end(); ++it)
            r.entries_[it.key()] = {it.value().at("omega_cfg").get<double>(), it.value().at("strength").get<double>()};
        return r;
    }

private:
    std::map<std::string, GridCell> entries_;
};

}  // namespace minidiff
