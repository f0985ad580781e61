#pragma once

// Editing prompt reasoner: a deterministic stand-in for the multimodal
// instruction model. Given a source descriptor and an edit instruction it
// rewrites the scene tags according to a small rule table and renders a
// self-contained target caption, and it emits hash-derived interaction
// features in place of real hidden states. The interface is what matters;
// a learned backend could replace the mock without touching callers.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "omniflow/hashing.hpp"
#include "omniflow/tensor.hpp"

namespace omniflow {

enum class Modality { none, image, video };

enum class EditCategory {
    local_add,
    local_remove,
    local_replace,
    global_edit,
    change_attribute,
    complex_edit,
    generation,
};

inline std::string to_string(Modality m) {
    switch (m) {
        case Modality::none: return "none";
        case Modality::image: return "image";
        case Modality::video: return "video";
    }
    throw std::invalid_argument("to_string: unknown modality");
}

inline Modality parse_modality(const std::string& s) {
    if (s == "none") return Modality::none;
    if (s == "image") return Modality::image;
    if (s == "video") return Modality::video;
    throw std::invalid_argument("parse_modality: unknown modality '" + s + "'");
}

inline std::string to_string(EditCategory c) {
    switch (c) {
        case EditCategory::local_add: return "local_add";
        case EditCategory::local_remove: return "local_remove";
        case EditCategory::local_replace: return "local_replace";
        case EditCategory::global_edit: return "global_edit";
        case EditCategory::change_attribute: return "change_attribute";
        case EditCategory::complex_edit: return "complex_edit";
        case EditCategory::generation: return "generation";
    }
    throw std::invalid_argument("to_string: unknown edit category");
}

inline EditCategory parse_category(const std::string& s) {
    if (s == "local_add") return EditCategory::local_add;
    if (s == "local_remove") return EditCategory::local_remove;
    if (s == "local_replace") return EditCategory::local_replace;
    if (s == "global_edit") return EditCategory::global_edit;
    if (s == "change_attribute") return EditCategory::change_attribute;
    if (s == "complex_edit") return EditCategory::complex_edit;
    if (s == "generation") return EditCategory::generation;
    throw std::invalid_argument("parse_category: unknown edit category '" + s + "'");
}

struct SourceDescriptor {
    std::string id;
    Modality modality = Modality::none;
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::string> content_tags;

    void validate() const {
        if (modality == Modality::none && frames != 0)
            throw std::invalid_argument("SourceDescriptor: frames must be 0 without a source");
        if (modality == Modality::image && frames != 1)
            throw std::invalid_argument("SourceDescriptor: image sources have exactly 1 frame");
        if (modality == Modality::video && frames < 1)
            throw std::invalid_argument("SourceDescriptor: video sources need at least 1 frame");
    }
};

struct EditInstruction {
    std::string text;
    EditCategory category = EditCategory::generation;
};

struct TargetCaption {
    std::string text;
};

struct InteractionFeatures {
    Tensor tokens;  // [L x d_mllm], L = text + visual token count
    std::size_t text_token_count = 0;
    std::size_t visual_token_count = 0;
};

/// Rewrite-rule table: maps instruction verbs to primitive tag actions and
/// restricts which actions each edit category may perform. Shipped as a JSON
/// fixture so the category/action pairing is data, not code.
struct RuleTable {
    std::map<std::string, std::string> verb_actions;
    std::map<std::string, std::vector<std::string>> category_actions;
    std::set<std::string> stopwords;
    std::string substitute_connector = "with";

    bool operator==(const RuleTable&) const = default;

    static RuleTable builtin() {
        RuleTable t;
        t.verb_actions = {
            {"add", "append"},       {"remove", "delete"}, {"delete", "delete"},
            {"replace", "substitute"}, {"turn", "attribute"}, {"apply", "global_tag"},
        };
        t.category_actions = {
            {"local_add", {"append"}},
            {"local_remove", {"delete"}},
            {"local_replace", {"substitute"}},
            {"change_attribute", {"attribute"}},
            {"global_edit", {"global_tag"}},
            {"complex_edit", {"append", "delete", "substitute", "attribute", "global_tag"}},
            {"generation", {}},
        };
        t.stopwords = {"a", "an", "the", "it", "its", "this", "that", "to"};
        t.substitute_connector = "with";
        return t;
    }

    static RuleTable from_json(const nlohmann::json& j) {
        RuleTable t;
        for (auto& [verb, action] : j.at("verbs").items())
            t.verb_actions[verb] = action.get<std::string>();
        for (auto& [cat, actions] : j.at("categories").items()) {
            parse_category(cat);  // reject unknown category keys up front
            t.category_actions[cat] = actions.get<std::vector<std::string>>();
        }
        for (auto& w : j.at("stopwords")) t.stopwords.insert(w.get<std::string>());
        t.substitute_connector = j.at("substitute_connector").get<std::string>();
        return t;
    }

    static RuleTable from_json_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("RuleTable: cannot open " + path);
        nlohmann::json j;
        in >> j;
        return from_json(j);
    }
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) words.push_back(w);
    return words;
}

namespace detail {

inline std::string join(const std::vector<std::string>& parts, std::size_t lo, std::size_t hi) {
    std::string out;
    for (std::size_t i = lo; i < hi; ++i) {
        if (!out.empty()) out += ' ';
        out += parts[i];
    }
    return out;
}

// One imperative clause ("remove the dog") applied to the tag list in place.
inline void apply_clause(std::vector<std::string>& tags, const std::vector<std::string>& clause,
                         const std::string& category_name, const RuleTable& rules) {
    std::vector<std::string> words;
    for (const auto& w : clause)
        if (!rules.stopwords.count(w)) words.push_back(w);
    if (words.empty()) throw std::invalid_argument("edit clause has no content words");

    auto verb_it = rules.verb_actions.find(words[0]);
    if (verb_it == rules.verb_actions.end())
        throw std::invalid_argument("unknown edit verb '" + words[0] + "'");
    const std::string& action = verb_it->second;

    const auto& allowed = rules.category_actions.at(category_name);
    if (std::find(allowed.begin(), allowed.end(), action) == allowed.end())
        throw std::invalid_argument("action '" + action + "' not permitted for category " +
                                    category_name);

    if (action == "append") {
        if (words.size() < 2) throw std::invalid_argument("append clause missing object");
        tags.push_back(join(words, 1, words.size()));
    } else if (action == "delete") {
        if (words.size() < 2) throw std::invalid_argument("delete clause missing object");
        const std::string obj = join(words, 1, words.size());
        tags.erase(std::remove(tags.begin(), tags.end(), obj), tags.end());
    } else if (action == "substitute") {
        auto conn = std::find(words.begin() + 1, words.end(), rules.substitute_connector);
        if (conn == words.end() || conn == words.begin() + 1 || conn + 1 == words.end())
            throw std::invalid_argument("substitute clause needs '<old> " +
                                        rules.substitute_connector + " <new>'");
        const std::string obj = join(words, 1, static_cast<std::size_t>(conn - words.begin()));
        const std::string repl =
            join(words, static_cast<std::size_t>(conn - words.begin()) + 1, words.size());
        for (auto& t : tags)
            if (t == obj) t = repl;
    } else if (action == "attribute") {
        // "turn <object> <attribute>": attribute is prefixed onto the tag.
        if (words.size() < 3) throw std::invalid_argument("attribute clause needs object and attribute");
        const std::string& obj = words[1];
        const std::string attr = join(words, 2, words.size());
        for (auto& t : tags)
            if (t == obj) t = attr + ' ' + obj;
    } else if (action == "global_tag") {
        // "apply <style>": the whole scene gains one style tag.
        if (words.size() < 2) throw std::invalid_argument("global clause missing style");
        tags.push_back(join(words, 1, words.size()));
    } else {
        throw std::invalid_argument("rule table maps verb to unknown action '" + action + "'");
    }
}

}  // namespace detail

/// Category-driven tag rewrite. complex_edit instructions may chain clauses
/// with the literal word "and"; every other category is a single clause.
inline std::vector<std::string> rewrite_tags(const std::vector<std::string>& tags,
                                             const EditInstruction& edit,
                                             const RuleTable& rules = RuleTable::builtin()) {
    const std::string category_name = to_string(edit.category);
    std::vector<std::string> out = tags;
    std::vector<std::vector<std::string>> clauses;
    std::vector<std::string> cur;
    const bool split_on_and = edit.category == EditCategory::complex_edit;
    for (const auto& w : split_words(edit.text)) {
        if (split_on_and && w == "and") {
            clauses.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(w);
        }
    }
    clauses.push_back(cur);
    for (const auto& clause : clauses) detail::apply_clause(out, clause, category_name, rules);
    return out;
}

inline TargetCaption reason_target_caption(const SourceDescriptor& src, const EditInstruction& edit,
                                           const RuleTable& rules = RuleTable::builtin()) {
    if (edit.text.empty()) throw std::invalid_argument("reason_target_caption: empty instruction");
    if (edit.category == EditCategory::generation) return TargetCaption{edit.text};

    std::vector<std::string> tags = rewrite_tags(src.content_tags, edit, rules);
    std::string text = "a video of";
    for (const auto& t : tags) text += ' ' + t;
    if (tags.empty()) text = "a video";
    return TargetCaption{text};
}

/// Hash-embedding stand-in for the frozen model's final hidden states: one
/// token per instruction word plus four tokens per source frame.
inline InteractionFeatures interaction_features(const SourceDescriptor& src,
                                                const EditInstruction& edit, std::size_t d_mllm) {
    if (d_mllm == 0) throw std::invalid_argument("interaction_features: d_mllm must be positive");
    if (edit.text.empty()) throw std::invalid_argument("interaction_features: empty instruction");

    const std::vector<std::string> words = split_words(edit.text);
    const std::size_t n_text = words.size();
    const std::size_t n_vis = src.frames * 4;

    InteractionFeatures f;
    f.text_token_count = n_text;
    f.visual_token_count = n_vis;
    f.tokens = Tensor({n_text + n_vis, d_mllm});
    for (std::size_t i = 0; i < n_text; ++i) fill_hash_row(f.tokens, i, fnv1a64(words[i]));
    const std::uint64_t id_key = fnv1a64(src.id);
    for (std::size_t v = 0; v < n_vis; ++v)
        fill_hash_row(f.tokens, n_text + v, id_key ^ splitmix64(v + 1));
    return f;
}

}  // namespace omniflow
