#pragma once

// Unified training-sample schema and the corpus machinery around it: a
// JSON-lines manifest parser, a deterministic procedural payload renderer
// (tag blobs on a grid, so cleaning predicates have real signal without any
// media decoding), the four cleaning stages as auditable predicate passes,
// resolution-by-frames bucketing, and weighted dataset mixing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "omniflow/hashing.hpp"
#include "omniflow/prompt_reasoner.hpp"
#include "omniflow/tensor.hpp"

namespace omniflow {

enum class TaskType { t2i, t2v, image_edit, video_edit };

inline std::string to_string(TaskType t) {
    switch (t) {
        case TaskType::t2i: return "t2i";
        case TaskType::t2v: return "t2v";
        case TaskType::image_edit: return "image_edit";
        case TaskType::video_edit: return "video_edit";
    }
    throw std::invalid_argument("to_string: unknown task type");
}

inline TaskType parse_task(const std::string& s) {
    if (s == "t2i") return TaskType::t2i;
    if (s == "t2v") return TaskType::t2v;
    if (s == "image_edit") return TaskType::image_edit;
    if (s == "video_edit") return TaskType::video_edit;
    throw std::invalid_argument("parse_task: unknown task type '" + s + "'");
}

inline bool is_edit_task(TaskType t) {
    return t == TaskType::image_edit || t == TaskType::video_edit;
}

/// Everything needed to render a payload deterministically. Two specs that
/// compare equal render byte-identical grids; `variant` is a salt so
/// same-tagged samples stay distinct unless duplication is intended.
struct PayloadSpec {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::string> tags;
    bool overlay = false;
    bool corrupt = false;
    double motion = 1.0;  // per-frame blob drift in cells; 0 renders a static clip
    std::uint64_t variant = 0;

    bool operator==(const PayloadSpec&) const = default;

    nlohmann::json to_json() const {
        return {{"frames", frames},   {"height", height},   {"width", width},
                {"tags", tags},       {"overlay", overlay}, {"corrupt", corrupt},
                {"motion", motion},   {"variant", variant}};
    }

    static PayloadSpec from_json(const nlohmann::json& j) {
        PayloadSpec p;
        p.frames = j.at("frames").get<std::size_t>();
        p.height = j.at("height").get<std::size_t>();
        p.width = j.at("width").get<std::size_t>();
        p.tags = j.value("tags", std::vector<std::string>{});
        p.overlay = j.value("overlay", false);
        p.corrupt = j.value("corrupt", false);
        p.motion = j.value("motion", 1.0);
        p.variant = j.value("variant", std::uint64_t{0});
        return p;
    }
};

struct PayloadDecodeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Render a payload as a [frames, height, width] grid: one 2x2 blob per tag
/// at a hashed position, drifting `motion` cells per frame, plus an optional
/// checkerboard overlay. Corrupt specs fail to decode.
inline Tensor render_payload(const PayloadSpec& spec) {
    if (spec.corrupt) throw PayloadDecodeError("undecodable payload");
    Tensor grid({spec.frames, spec.height, spec.width});
    if (spec.frames == 0 || spec.height == 0 || spec.width == 0) return grid;

    const std::size_t drift = static_cast<std::size_t>(spec.motion < 0 ? -spec.motion : spec.motion);
    auto cell = [&](std::size_t f, std::size_t r, std::size_t c) -> double& {
        return grid.data[(f * spec.height + r) * spec.width + c];
    };
    for (const std::string& tag : spec.tags) {
        const std::uint64_t base = fnv1a64(tag) ^ (spec.variant ? splitmix64(spec.variant) : 0);
        const double amp = 1.0 + 0.5 * hash_unit(splitmix64(base));
        const std::size_t r0 = splitmix64(base ^ 1) % spec.height;
        const std::size_t c0 = splitmix64(base ^ 2) % spec.width;
        for (std::size_t f = 0; f < spec.frames; ++f) {
            const std::size_t r = (r0 + f * drift) % spec.height;
            const std::size_t c = (c0 + f * drift) % spec.width;
            for (std::size_t dr = 0; dr < 2; ++dr)
                for (std::size_t dc = 0; dc < 2; ++dc)
                    cell(f, (r + dr) % spec.height, (c + dc) % spec.width) += amp;
        }
    }
    if (spec.overlay)
        for (std::size_t f = 0; f < spec.frames; ++f)
            for (std::size_t r = 0; r < spec.height; ++r)
                for (std::size_t c = 0; c < spec.width; ++c)
                    if ((f + r + c) % 2 == 0) cell(f, r, c) += 0.4;
    return grid;
}

/// Exact content hash of a rendered payload (shape and cell bits).
inline std::uint64_t payload_hash(const Tensor& grid) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    for (std::size_t dim : grid.shape) mix(dim);
    for (double d : grid.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        mix(bits);
    }
    return h;
}

/// One training instance in the unified format: a task indicator, an optional
/// source payload, an optional edit instruction, an optional target caption,
/// and the target payload.
struct UnifiedSample {
    std::string id;
    TaskType task = TaskType::t2v;
    std::optional<PayloadSpec> source;
    std::optional<EditInstruction> instruction;
    std::optional<TargetCaption> caption;
    PayloadSpec target;
    std::size_t line_no = 0;  // manifest position, kept for audit output

    bool operator==(const UnifiedSample& o) const {
        auto instr_eq = [&] {
            if (instruction.has_value() != o.instruction.has_value()) return false;
            if (!instruction) return true;
            return instruction->text == o.instruction->text &&
                   instruction->category == o.instruction->category;
        };
        auto caption_eq = [&] {
            if (caption.has_value() != o.caption.has_value()) return false;
            return !caption || caption->text == o.caption->text;
        };
        return id == o.id && task == o.task && source == o.source && instr_eq() &&
               caption_eq() && target == o.target;
    }

    void validate() const {
        if (id.empty()) throw std::invalid_argument("sample: missing id");
        if (is_edit_task(task)) {
            if (!source)
                throw std::invalid_argument("sample " + id + ": edit task without source");
            if (!instruction)
                throw std::invalid_argument("sample " + id + ": edit task without instruction");
            if (instruction->category == EditCategory::generation)
                throw std::invalid_argument("sample " + id +
                                            ": edit task with generation category");
            if (task == TaskType::image_edit && source->frames != 1)
                throw std::invalid_argument("sample " + id +
                                            ": image_edit source must have exactly 1 frame");
        } else {
            if (source)
                throw std::invalid_argument("sample " + id + ": source present for " +
                                            to_string(task));
            if (instruction)
                throw std::invalid_argument("sample " + id + ": instruction present for " +
                                            to_string(task));
        }
    }

    /// The modality view of the source, as the reasoner expects it.
    SourceDescriptor source_descriptor() const {
        SourceDescriptor d;
        if (!source) return d;
        d.id = id + "/src";
        d.modality = task == TaskType::image_edit ? Modality::image : Modality::video;
        d.frames = source->frames;
        d.height = source->height;
        d.width = source->width;
        d.content_tags = source->tags;
        return d;
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"id", id}, {"task", to_string(task)}, {"target", target.to_json()}};
        if (caption) j["caption"] = caption->text;
        if (instruction)
            j["instruction"] = {{"text", instruction->text},
                                {"category", to_string(instruction->category)}};
        if (source) j["source"] = source->to_json();
        return j;
    }

    static UnifiedSample from_json(const nlohmann::json& j) {
        UnifiedSample s;
        s.id = j.at("id").get<std::string>();
        s.task = parse_task(j.at("task").get<std::string>());
        s.target = PayloadSpec::from_json(j.at("target"));
        if (j.contains("caption")) s.caption = TargetCaption{j.at("caption").get<std::string>()};
        if (j.contains("instruction"))
            s.instruction = EditInstruction{
                j.at("instruction").at("text").get<std::string>(),
                parse_category(j.at("instruction").at("category").get<std::string>())};
        if (j.contains("source")) s.source = PayloadSpec::from_json(j.at("source"));
        s.validate();
        return s;
    }
};

struct ManifestError {
    std::size_t line_no = 0;
    std::string message;
};

struct ParseResult {
    std::vector<UnifiedSample> samples;
    std::vector<ManifestError> errors;  // lenient mode only; strict mode throws
};

/// Parse a JSON-lines manifest. Blank lines are skipped. In lenient mode a
/// malformed line is recorded with its line number and parsing continues; in
/// strict mode the first bad line aborts with that line number.
inline ParseResult parse_manifest_stream(std::istream& in, bool strict = false) {
    ParseResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            UnifiedSample s = UnifiedSample::from_json(nlohmann::json::parse(line));
            s.line_no = line_no;
            result.samples.push_back(std::move(s));
        } catch (const std::exception& e) {
            if (strict)
                throw std::runtime_error("manifest line " + std::to_string(line_no) + ": " +
                                         e.what());
            result.errors.push_back({line_no, e.what()});
        }
    }
    return result;
}

inline ParseResult parse_manifest(const std::string& path, bool strict = false) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("parse_manifest: cannot open " + path);
    return parse_manifest_stream(in, strict);
}

inline std::string serialize_manifest(const std::vector<UnifiedSample>& samples) {
    std::string out;
    for (const UnifiedSample& s : samples) out += s.to_json().dump() + "\n";
    return out;
}

/// Thresholds for the cleaning stages. The validity ranges are data policy,
/// not code, so they all live here.
struct CleanConfig {
    std::size_t min_frames_video = 4;
    std::size_t min_side = 4;
    std::size_t max_side = 64;
    std::size_t max_frames = 64;
    double static_threshold = 0.001;  // mean inter-frame abs diff below this is near-static
    double locality_threshold = 0.3;  // max fraction of changed cells for local_* edits
};

struct RemovalRecord {
    std::string id;
    std::string reason;
};

struct StageReport {
    std::string name;
    std::size_t kept = 0;
    std::size_t removed = 0;
    std::map<std::string, std::size_t> reasons;
};

struct StageResult {
    std::vector<UnifiedSample> kept;
    std::vector<RemovalRecord> removals;
    StageReport report;
};

namespace detail {

inline StageResult run_stage(std::string name, const std::vector<UnifiedSample>& samples,
                             const std::function<std::optional<std::string>(
                                 const UnifiedSample&)>& reject_reason) {
    StageResult r;
    r.report.name = std::move(name);
    for (const UnifiedSample& s : samples) {
        std::optional<std::string> reason = reject_reason(s);
        if (reason) {
            r.removals.push_back({s.id, *reason});
            ++r.report.removed;
            ++r.report.reasons[*reason];
        } else {
            r.kept.push_back(s);
            ++r.report.kept;
        }
    }
    return r;
}

inline double mean_interframe_diff(const Tensor& grid) {
    const std::size_t frames = grid.shape[0];
    const std::size_t per_frame = grid.shape[1] * grid.shape[2];
    if (frames < 2 || per_frame == 0) return 0.0;
    double total = 0.0;
    for (std::size_t f = 1; f < frames; ++f)
        for (std::size_t i = 0; i < per_frame; ++i)
            total += std::abs(grid.data[f * per_frame + i] - grid.data[(f - 1) * per_frame + i]);
    return total / double((frames - 1) * per_frame);
}

inline double changed_cell_fraction(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return 1.0;  // shape change touches everything
    if (a.data.empty()) return 0.0;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (std::abs(a.data[i] - b.data[i]) > 1e-12) ++changed;
    return double(changed) / double(a.data.size());
}

}  // namespace detail

/// Stage 1: decode failures, frame minima, resolution/duration ranges, and
/// exact-hash duplicate removal (first occurrence wins).
inline StageResult stage1_integrity(const std::vector<UnifiedSample>& samples,
                                    const CleanConfig& cfg) {
    std::set<std::uint64_t> seen;
    return detail::run_stage(
        "integrity", samples, [&](const UnifiedSample& s) -> std::optional<std::string> {
            Tensor target;
            try {
                target = render_payload(s.target);
                if (s.source) render_payload(*s.source);
            } catch (const PayloadDecodeError&) {
                return "undecodable";
            }
            const bool video = s.task == TaskType::t2v || s.task == TaskType::video_edit;
            if (s.target.frames == 0 || (video && s.target.frames < cfg.min_frames_video))
                return "insufficient frames";
            if (s.target.height < cfg.min_side || s.target.height > cfg.max_side ||
                s.target.width < cfg.min_side || s.target.width > cfg.max_side)
                return "resolution out of range";
            if (s.target.frames > cfg.max_frames) return "duration out of range";
            if (!seen.insert(payload_hash(target)).second) return "duplicate payload";
            return std::nullopt;
        });
}

/// Stage 2: near-static videos (mean inter-frame difference strictly below
/// the threshold) and payloads carrying the synthetic overlay flag.
inline StageResult stage2_quality(const std::vector<UnifiedSample>& samples,
                                  const CleanConfig& cfg) {
    return detail::run_stage(
        "quality", samples, [&](const UnifiedSample& s) -> std::optional<std::string> {
            if (s.target.frames > 1 &&
                detail::mean_interframe_diff(render_payload(s.target)) < cfg.static_threshold)
                return "near static";
            if (s.target.overlay) return "overlay";
            return std::nullopt;
        });
}

/// Stage 3: text-visual consistency. Captioned non-edit samples must have
/// every caption word (beyond the fixed scaffold) among the target tags; edit
/// samples must carry the caption the rule table derives from their source
/// tags and instruction. Uncaptioned samples pass unexamined.
inline StageResult stage3_consistency(const std::vector<UnifiedSample>& samples,
                                      const RuleTable& rules = RuleTable::builtin()) {
    static const std::set<std::string> scaffold = {"a", "video", "of"};
    return detail::run_stage(
        "consistency", samples, [&](const UnifiedSample& s) -> std::optional<std::string> {
            if (!s.caption) return std::nullopt;
            if (s.instruction) {
                TargetCaption expected =
                    reason_target_caption(s.source_descriptor(), *s.instruction, rules);
                if (s.caption->text != expected.text)
                    return "instruction/caption contradiction";
                return std::nullopt;
            }
            for (const std::string& w : split_words(s.caption->text)) {
                if (scaffold.count(w)) continue;
                if (std::find(s.target.tags.begin(), s.target.tags.end(), w) ==
                    s.target.tags.end())
                    return "caption/content mismatch";
            }
            return std::nullopt;
        });
}

/// Stage 4: editing-specific verification. Any edit whose source and target
/// render identically is dropped; local_* edits must change at most
/// locality_threshold of the cells. Global and attribute edits are exempt
/// from the locality bound, and non-edit tasks pass through.
inline StageResult stage4_edit_verify(const std::vector<UnifiedSample>& samples,
                                      const CleanConfig& cfg) {
    return detail::run_stage(
        "edit_verify", samples, [&](const UnifiedSample& s) -> std::optional<std::string> {
            if (!is_edit_task(s.task)) return std::nullopt;
            const double frac =
                detail::changed_cell_fraction(render_payload(*s.source), render_payload(s.target));
            if (frac == 0.0) return "no visible edit";
            const EditCategory c = s.instruction->category;
            const bool local = c == EditCategory::local_add || c == EditCategory::local_remove ||
                               c == EditCategory::local_replace;
            if (local && frac > cfg.locality_threshold) return "edit not localized";
            return std::nullopt;
        });
}

/// Audit report over the fixed stage order 1→2→3→4. Counts telescope: each
/// stage's kept+removed equals the previous stage's kept.
struct CleanReport {
    std::size_t input = 0;
    std::size_t output = 0;
    std::vector<StageReport> stages;
    std::vector<RemovalRecord> removals;

    void validate() const {
        std::size_t prev = input;
        for (const StageReport& s : stages) {
            if (s.kept + s.removed != prev)
                throw std::logic_error("CleanReport: counts do not telescope at stage " + s.name);
            std::size_t reason_total = 0;
            for (const auto& [_, n] : s.reasons) reason_total += n;
            if (reason_total != s.removed)
                throw std::logic_error("CleanReport: reason histogram mismatch at stage " +
                                       s.name);
            prev = s.kept;
        }
        if (!stages.empty() && stages.back().kept != output)
            throw std::logic_error("CleanReport: output does not match final stage");
    }

    nlohmann::json to_json() const {
        nlohmann::json js = nlohmann::json::array();
        for (const StageReport& s : stages) {
            nlohmann::json reasons(nlohmann::json::value_t::object);
            for (const auto& [reason, n] : s.reasons) reasons[reason] = n;
            js.push_back(
                {{"name", s.name}, {"kept", s.kept}, {"removed", s.removed}, {"reasons", reasons}});
        }
        nlohmann::json jremovals = nlohmann::json::array();
        for (const RemovalRecord& r : removals)
            jremovals.push_back({{"id", r.id}, {"reason", r.reason}});
        return {{"input", input}, {"output", output}, {"stages", js}, {"removals", jremovals}};
    }
};

struct CleanResult {
    std::vector<UnifiedSample> kept;
    CleanReport report;
};

inline CleanResult run_clean_pipeline(const std::vector<UnifiedSample>& samples,
                                      const CleanConfig& cfg,
                                      const RuleTable& rules = RuleTable::builtin()) {
    CleanResult out;
    out.report.input = samples.size();
    StageResult s1 = stage1_integrity(samples, cfg);
    StageResult s2 = stage2_quality(s1.kept, cfg);
    StageResult s3 = stage3_consistency(s2.kept, rules);
    StageResult s4 = stage4_edit_verify(s3.kept, cfg);
    for (StageResult* s : {&s1, &s2, &s3, &s4}) {
        out.report.stages.push_back(s->report);
        out.report.removals.insert(out.report.removals.end(), s->removals.begin(),
                                   s->removals.end());
    }
    out.kept = std::move(s4.kept);
    out.report.output = out.kept.size();
    out.report.validate();
    return out;
}

/// Shape key for bucketing; images carry frames=1.
struct BucketKey {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t frames = 0;

    bool operator==(const BucketKey&) const = default;
    bool operator<(const BucketKey& o) const {
        return std::tie(height, width, frames) < std::tie(o.height, o.width, o.frames);
    }
    std::string str() const {
        return std::to_string(height) + "x" + std::to_string(width) + "x" +
               std::to_string(frames);
    }
};

inline BucketKey bucket_key(const UnifiedSample& s) {
    return {s.target.height, s.target.width, s.target.frames};
}

/// Exact partition by target shape; buckets are shared across task types.
inline std::map<BucketKey, std::vector<UnifiedSample>> bucket_samples(
    const std::vector<UnifiedSample>& samples) {
    std::map<BucketKey, std::vector<UnifiedSample>> buckets;
    for (const UnifiedSample& s : samples) buckets[bucket_key(s)].push_back(s);
    return buckets;
}

struct MixBatch {
    TaskType task = TaskType::t2v;
    BucketKey key;
    std::vector<UnifiedSample> items;
};

/// Weighted task mixing: draw a task by weight, a bucket uniformly among that
/// task's nonempty buckets, then a full batch (with replacement) from that
/// single bucket, so every batch is shape-homogeneous.
class BatchMixer {
public:
    BatchMixer(const std::map<BucketKey, std::vector<UnifiedSample>>& buckets,
               const std::map<TaskType, double>& task_weights, std::size_t batch_size)
        : batch_size_(batch_size) {
        if (batch_size == 0) throw std::invalid_argument("BatchMixer: batch_size must be positive");
        double total = 0.0;
        for (const auto& [task, w] : task_weights) {
            if (w < 0.0) throw std::invalid_argument("BatchMixer: negative task weight");
            total += w;
        }
        if (total <= 0.0) throw std::invalid_argument("BatchMixer: weights must not all be zero");

        std::size_t n_samples = 0;
        for (const auto& [key, list] : buckets) {
            n_samples += list.size();
            std::map<TaskType, std::vector<UnifiedSample>> by_task;
            for (const UnifiedSample& s : list) by_task[s.task].push_back(s);
            for (auto& [task, subset] : by_task)
                pools_[task].push_back({key, std::move(subset)});
        }
        if (n_samples == 0) throw std::runtime_error("BatchMixer: all buckets are empty");

        for (const auto& [task, w] : task_weights) {
            if (w == 0.0) continue;
            if (!pools_.count(task))
                throw std::runtime_error("BatchMixer: no samples for weighted task " +
                                         to_string(task));
            tasks_.push_back(task);
            cumulative_.push_back((cumulative_.empty() ? 0.0 : cumulative_.back()) + w / total);
        }
        // Guard against floating-point shortfall on the last boundary.
        cumulative_.back() = 1.0;
    }

    MixBatch next(Rng& rng) {
        const double ut = rng.uniform();
        std::size_t ti = 0;
        while (ti + 1 < tasks_.size() && ut >= cumulative_[ti]) ++ti;
        const auto& task_pools = pools_.at(tasks_[ti]);
        const std::size_t bi =
            std::min<std::size_t>(std::size_t(rng.uniform() * double(task_pools.size())),
                                  task_pools.size() - 1);
        const auto& [key, pool] = task_pools[bi];
        MixBatch batch;
        batch.task = tasks_[ti];
        batch.key = key;
        for (std::size_t i = 0; i < batch_size_; ++i) {
            const std::size_t si = std::min<std::size_t>(
                std::size_t(rng.uniform() * double(pool.size())), pool.size() - 1);
            batch.items.push_back(pool[si]);
        }
        return batch;
    }

private:
    std::size_t batch_size_;
    std::map<TaskType, std::vector<std::pair<BucketKey, std::vector<UnifiedSample>>>> pools_;
    std::vector<TaskType> tasks_;
    std::vector<double> cumulative_;
};

}  // namespace omniflow
