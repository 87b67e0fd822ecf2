#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "minidiff/autograd.hpp"
#include "minidiff/error.hpp"
#include "minidiff/nets/layers.hpp"
#include "minidiff/random.hpp"

namespace minidiff {

inline constexpr const char* kPlaceholderToken = "<unknown>";

inline std::vector<std::string> default_vocabulary() {
    return {"a",       "an",       "the",     "photo",  "picture", "image",  "of",      "with",
            "on",      "steel",    "surface", "metal",  "defect",  "defects", "scratch", "scratches",
            "pit",     "pits",     "pitted",  "patch",  "patches", "scale",  "rolled",  "crazing",
            "inclusion", "bright", "dark",    "line",   "spot",    "texture", "gray",   kPlaceholderToken};
}

/// Token-embedding sequence v = [v', v_d]: `tokens` is L x C and
/// `trainable_positions` marks the rows forming v_d.
struct PromptEmbedding {
    std::vector<std::string> words;
    Matrix tokens;
    std::vector<int> trainable_positions;

    Index length() const { return tokens.rows(); }
    Index dim() const { return tokens.cols(); }

    Matrix slice() const {
        Matrix s(static_cast<Index>(trainable_positions.size()), tokens.cols());
        for (std::size_t i = 0; i < trainable_positions.size(); ++i) s.row(static_cast<Index>(i)) = tokens.row(trainable_positions[i]);
        return s;
    }

    void set_slice(const Matrix& s) {
        require(s.rows() == static_cast<Index>(trainable_positions.size()) && s.cols() == tokens.cols(),
                ErrorKind::invalid_argument, "slice shape does not match the trainable positions");
        for (std::size_t i = 0; i < trainable_positions.size(); ++i) tokens.row(trainable_positions[i]) = s.row(static_cast<Index>(i));
    }
};

/// Word -> embedding-row lookup (the tokenizer half of the text encoder). The
/// placeholder word owns `placeholder_width` consecutive rows.
class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(std::vector<std::string> words, Index dim, int placeholder_width, Rng& rng)
        : words_(std::move(words)), placeholder_width_(placeholder_width) {
        require(placeholder_width >= 1, ErrorKind::invalid_argument, "placeholder width must be >= 1");
        int row = 0;
        for (const std::string& w : words_) {
            first_row_[w] = row;
            row += (w == kPlaceholderToken) ? placeholder_width : 1;
        }
        table_ = Parameter(rng.normal_matrix(row, dim) * 0.5);
    }

    const std::vector<std::string>& words() const { return words_; }
    int placeholder_width() const { return placeholder_width_; }
    Parameter& table() { return table_; }
    const Parameter& table() const { return table_; }
    Index dim() const { return table_.value.cols(); }
    bool contains(const std::string& w) const { return first_row_.count(w) != 0; }

    static std::vector<std::string> split(const std::string& prompt) {
        std::vector<std::string> out;
        std::istringstream in(prompt);
        std::string w;
        while (in >> w) {
            if (w != kPlaceholderToken)
                std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
            out.push_back(w);
        }
        return out;
    }

    /// Lookup embeddings; positions of the placeholder (and of `mark_word`, if
    /// given) form the trainable slice.
    PromptEmbedding tokenize(const std::string& prompt, const std::string& mark_word = "") const {
        PromptEmbedding pe;
        pe.words = split(prompt);
        require(!pe.words.empty(), ErrorKind::invalid_argument, "empty prompt");
        std::vector<int> rows;
        for (const std::string& w : pe.words) {
            auto it = first_row_.find(w);
            if (it == first_row_.end()) throw Error(ErrorKind::unknown_token, "word '" + w + "' is not in the vocabulary");
            const bool placeholder = (w == kPlaceholderToken);
            const int width = placeholder ? placeholder_width_ : 1;
            for (int j = 0; j < width; ++j) {
                if (placeholder || (!mark_word.empty() && w == mark_word))
                    pe.trainable_positions.push_back(static_cast<int>(rows.size()));
                rows.push_back(it->second + j);
            }
        }
        pe.tokens.resize(static_cast<Index>(rows.size()), dim());
        for (std::size_t i = 0; i < rows.size(); ++i) pe.tokens.row(static_cast<Index>(i)) = table_.value.row(rows[i]);
        return pe;
    }

    /// Token rows as a tape node, gradients flowing into the table when trainable.
    Var embed(Tape& t, const std::string& prompt) const {
        std::vector<std::string> ws = split(prompt);
        auto idx = std::make_shared<std::vector<int>>();
        std::vector<int> rows;
        for (const std::string& w : ws) {
            auto it = first_row_.find(w);
            if (it == first_row_.end()) throw Error(ErrorKind::unknown_token, "word '" + w + "' is not in the vocabulary");
            const int width = (w == kPlaceholderToken) ? placeholder_width_ : 1;
            for (int j = 0; j < width; ++j) rows.push_back(it->second + j);
        }
        const Index L = static_cast<Index>(rows.size()), C = dim(), V = table_.value.rows();
        idx->resize(static_cast<std::size_t>(L * C));
        for (Index c = 0; c < C; ++c)
            for (Index r = 0; r < L; ++r) (*idx)[static_cast<std::size_t>(c * L + r)] = static_cast<int>(c * V + rows[static_cast<std::size_t>(r)]);
        return ops::gather(t.param(table_), L, C, idx);
    }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> first_row_;
    int placeholder_width_ = 1;
    Parameter table_;
};

struct TextEncoderConfig {
    Index dim = 32;
    int blocks = 1;
    int max_length = 16;
    bool positional = true;
};

/// Small self-attention transformer mapping token embeddings (L x C) to a
/// pooled text embedding (1 x C).
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(const TextEncoderConfig& cfg, Rng& rng) : cfg_(cfg), ln_f_(cfg.dim), proj_(cfg.dim, cfg.dim, rng) {
        positions_ = Parameter(rng.normal_matrix(cfg.max_length, cfg.dim) * 0.1);
        for (int i = 0; i < cfg.blocks; ++i) blocks_.emplace_back(cfg.dim, 2 * cfg.dim, rng);
    }

    const TextEncoderConfig& config() const { return cfg_; }
    void set_positional(bool on) { cfg_.positional = on; }

    Var forward(Tape& t, Var tokens) const {
        require(tokens.cols() == cfg_.dim, ErrorKind::invalid_argument, "token embedding width mismatch");
        require(tokens.rows() >= 1 && tokens.rows() <= cfg_.max_length, ErrorKind::invalid_argument,
                "prompt length outside [1, max_length]");
        Var h = tokens;
        if (cfg_.positional) {
            auto idx = std::make_shared<std::vector<int>>();
            const Index L = tokens.rows(), C = cfg_.dim, M = cfg_.max_length;
            idx->resize(static_cast<std::size_t>(L * C));
            for (Index c = 0; c < C; ++c)
                for (Index r = 0; r < L; ++r) (*idx)[static_cast<std::size_t>(c * L + r)] = static_cast<int>(c * M + r);
            h = h + ops::gather(t.param(positions_), L, C, idx);
        }
        for (const TransformerBlock& b : blocks_) h = b.forward(t, h);
        return proj_.forward(t, ops::mean_rows(ln_f_.forward(t, h)));
    }

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".positions", self.positions_);
        for (std::size_t i = 0; i < self.blocks_.size(); ++i)
            TransformerBlock::visit(self.blocks_[i], prefix + ".block" + std::to_string(i), f);
        LayerNorm::visit(self.ln_f_, prefix + ".ln_f", f);
        Dense::visit(self.proj_, prefix + ".proj", f);
    }

    template <class Self, class F>
    static void visit_dense(Self& self, const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < self.blocks_.size(); ++i)
            TransformerBlock::visit_dense(self.blocks_[i], prefix + ".block" + std::to_string(i), f);
        f(prefix + ".proj", self.proj_);
    }

private:
    TextEncoderConfig cfg_;
    Parameter positions_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm ln_f_;
    Dense proj_;
};

}  // namespace minidiff
