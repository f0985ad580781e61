#pragma once

// Unified conditioning: the four condition sources are embedded, budgeted,
// projected into the model width, and concatenated into one sequence C that
// every cross-attention layer reads. Condition dropout zeroes whole segments
// with independent Bernoulli masks; the reference segment is never dropped.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "omniflow/hashing.hpp"
#include "omniflow/ops.hpp"
#include "omniflow/prompt_reasoner.hpp"
#include "omniflow/tensor.hpp"

namespace omniflow {

struct TextEmbedding {
    Tensor tokens;  // [L x d_txt], one row per whitespace word
};

/// Deterministic per-word hash embedding standing in for the text encoder.
inline TextEmbedding encode_text_stub(const std::string& text, std::size_t d_txt) {
    if (d_txt == 0) throw std::invalid_argument("encode_text_stub: d_txt must be positive");
    const std::vector<std::string> words = split_words(text);
    TextEmbedding e;
    e.tokens = Tensor({words.size(), d_txt});
    for (std::size_t i = 0; i < words.size(); ++i) fill_hash_row(e.tokens, i, fnv1a64(words[i]));
    return e;
}

enum class SelectStrategy { keep_first, keep_last, uniform_visual };

inline std::string to_string(SelectStrategy s) {
    switch (s) {
        case SelectStrategy::keep_first: return "keep_first";
        case SelectStrategy::keep_last: return "keep_last";
        case SelectStrategy::uniform_visual: return "uniform_visual";
    }
    throw std::invalid_argument("to_string: unknown selection strategy");
}

inline SelectStrategy parse_strategy(const std::string& s) {
    if (s == "keep_first") return SelectStrategy::keep_first;
    if (s == "keep_last") return SelectStrategy::keep_last;
    if (s == "uniform_visual") return SelectStrategy::uniform_visual;
    throw std::invalid_argument("parse_strategy: unknown selection strategy '" + s + "'");
}

/// Token-budget reduction for the interaction features. keep_first/keep_last
/// take a contiguous prefix/suffix. uniform_visual keeps every text token and
/// fills the rest of the budget with evenly spread visual rows (index
/// floor(i*visual/remaining), the even-stride choice that always fills the
/// budget and reduces to stride ceil(visual/remaining) when it divides).
inline Tensor select_tokens(const Tensor& h, std::size_t budget, SelectStrategy strategy,
                            std::size_t text_count) {
    if (h.rank() != 2) throw std::invalid_argument("select_tokens: rank-2 input required");
    const std::size_t L = h.rows();
    if (text_count > L) throw std::invalid_argument("select_tokens: text_count exceeds length");
    if (budget >= L) return h;

    if (strategy == SelectStrategy::keep_first) return slice_rows(h, 0, budget);
    if (strategy == SelectStrategy::keep_last) return slice_rows(h, L - budget, budget);

    // uniform_visual
    if (budget < text_count)
        throw std::invalid_argument("select_tokens: budget below text_count, text must survive");
    const std::size_t remaining = budget - text_count;
    const std::size_t visual = L - text_count;
    Tensor out({budget, h.cols()});
    for (std::size_t i = 0; i < text_count; ++i)
        for (std::size_t c = 0; c < h.cols(); ++c) out.at(i, c) = h.at(i, c);
    for (std::size_t i = 0; i < remaining; ++i) {
        const std::size_t src = text_count + (i * visual) / remaining;
        for (std::size_t c = 0; c < h.cols(); ++c) out.at(text_count + i, c) = h.at(src, c);
    }
    return out;
}

/// Linear projector into the model width; bias-free so a zeroed segment stays
/// zero after projection.
inline Tensor project_mllm(const Tensor& h, const Tensor& w) {
    if (h.rank() != 2 || w.rank() != 2 || h.cols() != w.rows())
        throw std::invalid_argument("project_mllm: shape mismatch");
    return matmul(h, w);
}

/// Reference tokens from a latent grid [F x h x w x c]: each latent cell is
/// one token of width c, mapped to the model width by a trainable matrix.
inline Tensor flatten_latent_cells(const Tensor& latents) {
    if (latents.rank() != 4)
        throw std::invalid_argument("flatten_latent_cells: expected rank-4 latent grid");
    const std::size_t cells = latents.shape[0] * latents.shape[1] * latents.shape[2];
    const std::size_t c = latents.shape[3];
    Tensor out({cells, c});
    out.data = latents.data;  // row-major layout already groups each cell's channels
    return out;
}

inline Tensor encode_reference(const Tensor& latents, const Tensor& w_ref) {
    Tensor cells = flatten_latent_cells(latents);
    if (cells.cols() != w_ref.rows())
        throw std::invalid_argument("encode_reference: channel count does not match projector");
    return matmul(cells, w_ref);
}

struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
};

struct ConditionBundle {
    Tensor c_mllm;
    Tensor c_tgt;
    Tensor c_edit;
    Tensor c_ref;
    std::vector<Segment> segment_map;  // fixed order: mllm, tgt, edit, ref

    std::size_t total_length() const {
        return segment_map.empty() ? 0
                                   : segment_map.back().offset + segment_map.back().length;
    }
    std::size_t width() const { return c_mllm.cols(); }

    Tensor concatenated() const {
        return concat_rows(std::vector<Tensor>{c_mllm, c_tgt, c_edit, c_ref}, width());
    }

    const Tensor& segment(const std::string& name) const {
        if (name == "mllm") return c_mllm;
        if (name == "tgt") return c_tgt;
        if (name == "edit") return c_edit;
        if (name == "ref") return c_ref;
        throw std::invalid_argument("ConditionBundle: unknown segment '" + name + "'");
    }
};

inline ConditionBundle build_condition_sequence(Tensor c_mllm, Tensor c_tgt, Tensor c_edit,
                                                Tensor c_ref) {
    const Tensor* parts[4] = {&c_mllm, &c_tgt, &c_edit, &c_ref};
    const std::size_t d = c_mllm.cols();
    for (const Tensor* p : parts) {
        if (p->rank() != 2) throw std::invalid_argument("build_condition_sequence: rank-2 segments required");
        if (p->cols() != d) throw std::invalid_argument("build_condition_sequence: segment width mismatch");
    }
    ConditionBundle b;
    b.c_mllm = std::move(c_mllm);
    b.c_tgt = std::move(c_tgt);
    b.c_edit = std::move(c_edit);
    b.c_ref = std::move(c_ref);
    const char* names[4] = {"mllm", "tgt", "edit", "ref"};
    const Tensor* segs[4] = {&b.c_mllm, &b.c_tgt, &b.c_edit, &b.c_ref};
    std::size_t offset = 0;
    for (int i = 0; i < 4; ++i) {
        b.segment_map.push_back({names[i], offset, segs[i]->rows()});
        offset += segs[i]->rows();
    }
    return b;
}

enum class DropoutMode { zero, remove };

struct DropoutConfig {
    double p_mllm = 0.0;
    double p_tgt = 0.0;
    double p_edit = 0.0;
    // No p_ref on purpose: the reference segment is a persistent anchor.
    DropoutMode mode = DropoutMode::zero;

    void validate() const {
        for (double p : {p_mllm, p_tgt, p_edit})
            if (!(p >= 0.0 && p <= 1.0))
                throw std::invalid_argument("DropoutConfig: probabilities must lie in [0,1]");
    }
};

struct DropoutMasks {
    int m_mllm = 1;
    int m_tgt = 1;
    int m_edit = 1;
};

/// Draws the three keep/drop masks. Always consumes exactly three uniforms so
/// the RNG stream stays aligned across runs with different probabilities.
inline DropoutMasks draw_dropout_masks(const DropoutConfig& cfg, Rng& rng) {
    cfg.validate();
    DropoutMasks m;
    m.m_mllm = rng.uniform() < cfg.p_mllm ? 0 : 1;
    m.m_tgt = rng.uniform() < cfg.p_tgt ? 0 : 1;
    m.m_edit = rng.uniform() < cfg.p_edit ? 0 : 1;
    return m;
}

inline ConditionBundle apply_dropout_masks(const ConditionBundle& bundle, const DropoutMasks& m,
                                           DropoutMode mode = DropoutMode::zero) {
    auto transform = [&](const Tensor& seg, int keep) {
        if (keep) return seg;
        if (mode == DropoutMode::remove) return Tensor({0, seg.cols()});
        Tensor zeroed(seg.shape);  // zero-filled, length preserved
        return zeroed;
    };
    return build_condition_sequence(transform(bundle.c_mllm, m.m_mllm),
                                    transform(bundle.c_tgt, m.m_tgt),
                                    transform(bundle.c_edit, m.m_edit), bundle.c_ref);
}

inline std::pair<ConditionBundle, DropoutMasks> apply_condition_dropout(
    const ConditionBundle& bundle, const DropoutConfig& cfg, Rng& rng) {
    const DropoutMasks m = draw_dropout_masks(cfg, rng);
    return {apply_dropout_masks(bundle, m, cfg.mode), m};
}

}  // namespace omniflow
