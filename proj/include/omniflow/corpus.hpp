#pragma once

// Synthetic corpus generation: deterministic clean samples over a small tag
// vocabulary, edit instructions covering all six categories, a 200-sample
// fixture with planted defects whose per-stage removal counts are documented
// constants, and the conditional-mean task used to evaluate conditional
// learning end to end.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "omniflow/conditioning.hpp"
#include "omniflow/data_pipeline.hpp"
#include "omniflow/flow.hpp"
#include "omniflow/prompt_reasoner.hpp"

namespace omniflow {

inline const std::vector<std::string>& corpus_nouns() {
    static const std::vector<std::string> v = {
        "dog",   "cat",   "tree",  "car",    "river", "cloud", "house", "bird",
        "boat",  "lamp",  "horse", "robot",  "flower", "train", "bridge", "field",
        "tower", "kite",  "fox",   "moon",   "chair", "drum",  "stone",  "bee"};
    return v;
}

inline const std::vector<std::string>& corpus_additions() {
    static const std::vector<std::string> v = {"ball", "hat", "flag", "ribbon", "lantern", "scarf"};
    return v;
}

inline const std::vector<std::string>& corpus_attributes() {
    static const std::vector<std::string> v = {"red", "blue", "golden", "silver"};
    return v;
}

inline const std::vector<std::string>& corpus_styles() {
    static const std::vector<std::string> v = {"sepia", "noir", "pastel", "vivid"};
    return v;
}

/// Deterministic 2-3 tag draw for sample `index`; offsets are chosen so the
/// tags are always pairwise distinct.
inline std::vector<std::string> corpus_tags_for(std::size_t index) {
    const auto& nouns = corpus_nouns();
    std::vector<std::string> tags{nouns[(3 * index) % nouns.size()],
                                  nouns[(3 * index + 7) % nouns.size()]};
    if (index % 2 == 1) tags.push_back(nouns[(3 * index + 13) % nouns.size()]);
    return tags;
}

/// One instruction of the requested category phrased in the rule-table
/// grammar, parameterized on the source tags and a salt for variety.
inline EditInstruction make_edit_instruction(EditCategory category,
                                             const std::vector<std::string>& tags,
                                             std::size_t salt) {
    const auto& add = corpus_additions();
    const auto& attr = corpus_attributes();
    const auto& style = corpus_styles();
    switch (category) {
        case EditCategory::local_add:
            return {"add a " + add[salt % add.size()], category};
        case EditCategory::local_remove:
            return {"remove the " + tags.front(), category};
        case EditCategory::local_replace:
            return {"replace " + tags.front() + " with " + add[salt % add.size()], category};
        case EditCategory::change_attribute:
            return {"turn the " + tags.front() + " " + attr[salt % attr.size()], category};
        case EditCategory::global_edit:
            return {"apply " + style[salt % style.size()], category};
        case EditCategory::complex_edit:
            return {"add a " + add[salt % add.size()] + " and remove the " + tags.front(),
                    category};
        case EditCategory::generation:
            break;
    }
    throw std::invalid_argument("make_edit_instruction: generation is not an edit category");
}

namespace detail {

inline std::string caption_for_tags(const std::vector<std::string>& tags) {
    std::string text = "a video of";
    for (const auto& t : tags) text += ' ' + t;
    return text;
}

}  // namespace detail

/// Deterministic defect-free sample. Index ranges fix the task mix:
/// [0,40) t2i, [40,90) t2v, [90,125) image_edit, [125,165) video_edit.
inline UnifiedSample make_clean_sample(std::size_t index) {
    UnifiedSample s;
    s.id = "clean-" + std::to_string(index);
    std::vector<std::string> tags = corpus_tags_for(index);
    const std::uint64_t variant = index + 1;

    if (index < 40) {
        s.task = TaskType::t2i;
        const std::size_t side = index % 2 == 0 ? 16 : 32;
        s.target = {1, side, side, tags, false, false, 0.0, variant};
        s.caption = TargetCaption{detail::caption_for_tags(tags)};
    } else if (index < 90) {
        s.task = TaskType::t2v;
        static constexpr std::array<std::array<std::size_t, 3>, 3> shapes = {
            {{8, 16, 16}, {16, 16, 16}, {8, 32, 32}}};
        const auto& sh = shapes[(index - 40) % 3];
        s.target = {sh[0], sh[1], sh[2], tags, false, false, 1.0, variant};
        s.caption = TargetCaption{detail::caption_for_tags(tags)};
    } else {
        const bool image = index < 125;
        s.task = image ? TaskType::image_edit : TaskType::video_edit;
        const std::size_t frames = image ? 1 : (index % 2 == 0 ? 8 : 16);
        PayloadSpec source{frames, 16, 16, tags, false, false, image ? 0.0 : 1.0, variant};

        static constexpr std::array<EditCategory, 6> cats = {
            EditCategory::local_add,    EditCategory::local_remove,
            EditCategory::local_replace, EditCategory::change_attribute,
            EditCategory::global_edit,   EditCategory::complex_edit};
        EditInstruction instr = make_edit_instruction(cats[index % 6], tags, index);

        s.source = source;
        s.instruction = instr;
        s.target = source;
        s.target.tags = rewrite_tags(tags, instr);
        s.caption = reason_target_caption(s.source_descriptor(), instr);
    }
    s.validate();
    return s;
}

/// Ground truth for the 200-sample planted-defect fixture: how many samples
/// each stage removes, broken down by reason.
struct PlantedTruth {
    static constexpr std::size_t total = 200;
    static constexpr std::size_t clean = 165;

    // stage 1
    static constexpr std::size_t undecodable = 3;
    static constexpr std::size_t insufficient_frames = 3;
    static constexpr std::size_t resolution = 2;
    static constexpr std::size_t duration = 1;
    static constexpr std::size_t duplicates = 3;
    static constexpr std::size_t stage1_kept = 188;

    // stage 2
    static constexpr std::size_t near_static = 5;
    static constexpr std::size_t overlay = 4;
    static constexpr std::size_t stage2_kept = 179;

    // stage 3
    static constexpr std::size_t caption_mismatch = 4;
    static constexpr std::size_t contradiction = 4;
    static constexpr std::size_t stage3_kept = 171;

    // stage 4
    static constexpr std::size_t no_edit = 3;
    static constexpr std::size_t not_localized = 3;
    static constexpr std::size_t stage4_kept = 165;
};

/// 165 clean samples followed by 35 planted defects, each built to pass every
/// stage before the one that must remove it. Fully deterministic.
inline std::vector<UnifiedSample> make_planted_fixture() {
    std::vector<UnifiedSample> out;
    out.reserve(PlantedTruth::total);
    for (std::size_t i = 0; i < PlantedTruth::clean; ++i) out.push_back(make_clean_sample(i));

    std::size_t variant = 1000;  // clear of the clean samples' salts
    auto video = [&](const std::string& id, std::size_t frames, std::size_t side,
                     std::vector<std::string> tags, double motion) {
        UnifiedSample s;
        s.id = id;
        s.task = TaskType::t2v;
        s.target = {frames, side, side, tags, false, false, motion, variant++};
        s.caption = TargetCaption{detail::caption_for_tags(tags)};
        return s;
    };

    // Stage 1: undecodable payloads.
    for (std::size_t i = 0; i < PlantedTruth::undecodable; ++i) {
        UnifiedSample s = video("bad-undecodable-" + std::to_string(i), 8, 16,
                                corpus_tags_for(i), 1.0);
        s.target.corrupt = true;
        out.push_back(s);
    }
    // Stage 1: frame counts below the video minimum (including zero).
    for (std::size_t frames : {std::size_t(0), std::size_t(2), std::size_t(3)})
        out.push_back(video("bad-frames-" + std::to_string(frames), frames, 16,
                            corpus_tags_for(frames + 3), 1.0));
    // Stage 1: resolution out of range (too small, too large).
    {
        UnifiedSample s;
        s.id = "bad-res-small";
        s.task = TaskType::t2i;
        s.target = {1, 2, 16, corpus_tags_for(6), false, false, 0.0, variant++};
        s.caption = TargetCaption{detail::caption_for_tags(s.target.tags)};
        out.push_back(s);
        out.push_back(video("bad-res-large", 8, 128, corpus_tags_for(7), 1.0));
    }
    // Stage 1: duration over the cap.
    out.push_back(video("bad-duration-0", 80, 16, corpus_tags_for(8), 1.0));
    // Stage 1: byte-identical duplicates of three clean t2v samples.
    for (std::size_t i = 0; i < PlantedTruth::duplicates; ++i) {
        UnifiedSample s = out[40 + i];  // clean t2v originals come first
        s.id = "bad-duplicate-" + std::to_string(i);
        out.push_back(s);
    }

    // Stage 2: near-static videos (no drift, no overlay).
    for (std::size_t i = 0; i < PlantedTruth::near_static; ++i)
        out.push_back(video("bad-static-" + std::to_string(i), 8, 16, corpus_tags_for(9 + i), 0.0));
    // Stage 2: overlay-flagged payloads.
    for (std::size_t i = 0; i < PlantedTruth::overlay; ++i) {
        UnifiedSample s = video("bad-overlay-" + std::to_string(i), 8, 16,
                                corpus_tags_for(14 + i), 1.0);
        s.target.overlay = true;
        out.push_back(s);
    }

    // Stage 3: captions naming content that is not in the payload.
    for (std::size_t i = 0; i < PlantedTruth::caption_mismatch; ++i) {
        UnifiedSample s = video("bad-caption-" + std::to_string(i), 8, 16,
                                corpus_tags_for(18 + i), 1.0);
        s.caption->text += " unicorn";
        out.push_back(s);
    }
    // Stage 3: edit whose caption contradicts the instruction (the removed
    // object is still named).
    for (std::size_t i = 0; i < PlantedTruth::contradiction; ++i) {
        UnifiedSample s;
        s.id = "bad-contradiction-" + std::to_string(i);
        s.task = TaskType::video_edit;
        std::vector<std::string> tags = corpus_tags_for(22 + i);
        s.source = PayloadSpec{8, 16, 16, tags, false, false, 1.0, variant++};
        s.instruction = make_edit_instruction(EditCategory::local_remove, tags, i);
        s.target = *s.source;
        s.target.tags = rewrite_tags(tags, *s.instruction);
        s.caption = TargetCaption{detail::caption_for_tags(tags)};  // still lists the object
        out.push_back(s);
    }

    // Stage 4: edits whose target renders identically to the source.
    for (std::size_t i = 0; i < PlantedTruth::no_edit; ++i) {
        UnifiedSample s;
        s.id = "bad-noedit-" + std::to_string(i);
        s.task = TaskType::video_edit;
        std::vector<std::string> tags = corpus_tags_for(26 + i);
        s.source = PayloadSpec{8, 16, 16, tags, false, false, 1.0, variant++};
        s.instruction = make_edit_instruction(EditCategory::local_add, tags, i);
        s.target = *s.source;  // instruction never applied to the pixels
        s.caption = reason_target_caption(s.source_descriptor(), *s.instruction);
        out.push_back(s);
    }
    // Stage 4: local edits that change half the frame (source overlay flips off).
    for (std::size_t i = 0; i < PlantedTruth::not_localized; ++i) {
        UnifiedSample s;
        s.id = "bad-nonlocal-" + std::to_string(i);
        s.task = TaskType::video_edit;
        std::vector<std::string> tags = corpus_tags_for(29 + i);
        s.source = PayloadSpec{8, 16, 16, tags, true, false, 1.0, variant++};
        s.instruction = make_edit_instruction(EditCategory::local_remove, tags, i);
        s.target = *s.source;
        s.target.overlay = false;
        s.target.tags = rewrite_tags(tags, *s.instruction);
        s.caption = reason_target_caption(s.source_descriptor(), *s.instruction);
        out.push_back(s);
    }

    for (const UnifiedSample& s : out) s.validate();
    if (out.size() != PlantedTruth::total)
        throw std::logic_error("make_planted_fixture: sample count drifted");
    return out;
}

/// Conditional-mean task: each condition word w maps linearly to a scalar
/// target level rho(w) = 0.5 + 0.4 * (first embedding component), and the
/// training latent for w is a constant grid at that level. A model that reads
/// the condition can hit rho(w) even for held-out words.
struct MeanTaskSpec {
    DiTHyper hyper;
    std::array<std::size_t, 3> grid = {1, 2, 2};
    std::vector<std::string> train_words;
    std::vector<std::string> eval_words;
};

inline double mean_task_target(const std::string& word, std::size_t d_txt) {
    return 0.5 + 0.4 * encode_text_stub(word, d_txt).tokens.at(0, 0);
}

inline MeanTaskSpec make_mean_task_spec() {
    MeanTaskSpec spec;
    spec.hyper.n_blocks = 2;
    spec.hyper.d_dit = 32;
    spec.hyper.n_heads = 4;
    spec.hyper.d_latent = 4;
    spec.hyper.max_latent_tokens = 8;
    for (std::size_t i = 0; i < 50; ++i) {
        std::string word = "cond" + std::string(i < 10 ? "0" : "") + std::to_string(i);
        (i < 30 ? spec.train_words : spec.eval_words).push_back(std::move(word));
    }
    return spec;
}

inline ConditionFeatures mean_task_features(const MeanTaskSpec& spec, const std::string& word) {
    ConditionFeatures f;
    f.mllm_tokens = Tensor({0, spec.hyper.d_mllm});
    f.tgt_tokens = encode_text_stub(word, spec.hyper.d_txt).tokens;
    f.edit_tokens = Tensor({0, spec.hyper.d_txt});
    f.ref_latents = Tensor({0, 1, 1, spec.hyper.ref_channels});
    return f;
}

inline TrainItem make_mean_task_item(const MeanTaskSpec& spec, const std::string& word) {
    TrainItem item;
    item.z.grid_shape = spec.grid;
    item.z.tokens = Tensor::full({spec.grid[0] * spec.grid[1] * spec.grid[2],
                                  spec.hyper.d_latent},
                                 mean_task_target(word, spec.hyper.d_txt));
    item.z.validate();
    item.cond = mean_task_features(spec, word);
    return item;
}

}  // namespace omniflow
