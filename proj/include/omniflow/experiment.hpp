#pragma once

// Experiment runner: the subcommand bodies behind the CLI, exposed as library
// functions so tests can drive them directly. CSV artifacts carry only
// deterministic columns; wall-clock timings go to a sidecar file so metric
// files are byte-identical across runs with the same config and seed.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "omniflow/checkpoint.hpp"
#include "omniflow/config.hpp"
#include "omniflow/corpus.hpp"
#include "omniflow/data_pipeline.hpp"
#include "omniflow/flow.hpp"
#include "omniflow/gradcheck.hpp"
#include "omniflow/seq_parallel.hpp"

namespace omniflow {

/// Shortest stable decimal form that round-trips a double; used for every
/// numeric CSV cell so artifact bytes do not depend on locale or stream state.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string content_hash_hex(const std::string& bytes) {
    std::string framed = "blob " + std::to_string(bytes.size());
    framed.push_back('\0');
    framed += bytes;
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(framed)));
    return buf;
}

inline std::string manifest_content_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("manifest: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return content_hash_hex(ss.str());
}

/// Provenance hash recorded in every artifact. Built-in datasets have no
/// manifest file; their name is hashed instead so the field is never empty.
inline std::string dataset_hash(const ExperimentConfig& cfg) {
    if (cfg.dataset == "manifest") return manifest_content_hash(cfg.manifest);
    return content_hash_hex(cfg.dataset);
}

inline void write_provenance(std::ostream& out, const ExperimentConfig& cfg,
                             const std::string& hash) {
    out << "# config " << cfg.to_json().dump() << "\n";
    out << "# manifest_hash " << hash << "\n";
}

// ---------------------------------------------------------------------------
// Payload -> latent encoding
// ---------------------------------------------------------------------------

/// Fixed average-pooling stand-in for a latent encoder: at most four latent
/// frames (contiguous chunks) by a 2x2 spatial split, every channel carrying
/// its block's pixel mean. Averaging preserves analytic content means and
/// keeps any cleaned payload within the positional table.
inline LatentGrid latentize_payload(const Tensor& pixels, std::size_t d_latent) {
    if (pixels.rank() != 3)
        throw std::invalid_argument("latentize_payload: rank-3 frame grid required");
    const std::size_t frames = pixels.shape[0];
    const std::size_t height = pixels.shape[1];
    const std::size_t width = pixels.shape[2];
    if (frames == 0 || height < 2 || width < 2)
        throw std::invalid_argument("latentize_payload: payload too small to pool");
    const std::size_t lf = std::min<std::size_t>(frames, 4);

    LatentGrid z;
    z.grid_shape = {lf, 2, 2};
    z.tokens = Tensor({lf * 4, d_latent});
    for (std::size_t fb = 0; fb < lf; ++fb) {
        const std::size_t f0 = fb * frames / lf;
        const std::size_t f1 = (fb + 1) * frames / lf;
        for (std::size_t qr = 0; qr < 2; ++qr) {
            const std::size_t r0 = qr * height / 2;
            const std::size_t r1 = (qr + 1) * height / 2;
            for (std::size_t qc = 0; qc < 2; ++qc) {
                const std::size_t c0 = qc * width / 2;
                const std::size_t c1 = (qc + 1) * width / 2;
                double acc = 0.0;
                for (std::size_t f = f0; f < f1; ++f)
                    for (std::size_t r = r0; r < r1; ++r)
                        for (std::size_t c = c0; c < c1; ++c)
                            acc += pixels.data[(f * height + r) * width + c];
                const double mean = acc / static_cast<double>((f1 - f0) * (r1 - r0) * (c1 - c0));
                const std::size_t row = (fb * 2 + qr) * 2 + qc;
                for (std::size_t ch = 0; ch < d_latent; ++ch) z.tokens.at(row, ch) = mean;
            }
        }
    }
    return z;
}

/// Same pooling, reshaped to the rank-4 [F x h x w x c] layout the reference
/// encoder consumes. Token rows are already (frame, row, col)-major, so the
/// reshape is a relabel of the same buffer.
inline Tensor latentize_reference(const Tensor& pixels, std::size_t ref_channels) {
    LatentGrid z = latentize_payload(pixels, ref_channels);
    return Tensor({z.grid_shape[0], 2, 2, ref_channels}, z.tokens.data);
}

/// Condition features for one manifest sample: MLLM interaction tokens (edit
/// tasks, budgeted), caption and instruction text stubs, and the pooled
/// source payload as the reference anchor. Absent sources yield empty
/// segments, never placeholders.
inline ConditionFeatures features_for_sample(const UnifiedSample& s,
                                             const ExperimentConfig& cfg) {
    const DiTHyper& h = cfg.hyper;
    ConditionFeatures f;
    f.mllm_tokens = Tensor({0, h.d_mllm});
    f.tgt_tokens = Tensor({0, h.d_txt});
    f.edit_tokens = Tensor({0, h.d_txt});
    f.ref_latents = Tensor({0, 1, 1, h.ref_channels});
    if (s.instruction) {
        const InteractionFeatures inter =
            interaction_features(s.source_descriptor(), *s.instruction, h.d_mllm);
        f.mllm_tokens =
            select_tokens(inter.tokens, cfg.select_budget, cfg.select_strategy,
                          inter.text_token_count);
        f.edit_tokens = encode_text_stub(s.instruction->text, h.d_txt).tokens;
    }
    if (s.caption) f.tgt_tokens = encode_text_stub(s.caption->text, h.d_txt).tokens;
    if (s.source) f.ref_latents = latentize_reference(render_payload(*s.source), h.ref_channels);
    return f;
}

inline TrainItem make_train_item(const UnifiedSample& s, const ExperimentConfig& cfg) {
    TrainItem item;
    item.z = latentize_payload(render_payload(s.target), cfg.hyper.d_latent);
    if (item.z.tokens.rows() > cfg.hyper.max_latent_tokens)
        throw std::invalid_argument("make_train_item: latent for " + s.id +
                                    " exceeds max_latent_tokens");
    item.cond = features_for_sample(s, cfg);
    return item;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainResult {
    ExpertRouter router;
    std::vector<StepStats> steps;
    std::vector<double> wall_ms;
};

/// The training loop shared by cmd_train and the ablation arms. Throws
/// runtime_error on exhausted data or divergence; the manifest pipeline runs
/// cleaning -> bucketing -> mixing before the first step.
inline TrainResult run_training(const ExperimentConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    TrainResult out{ExpertRouter::init(cfg.hyper, cfg.u_threshold, rng), {}, {}};
    AdamConfig adam;
    adam.lr = cfg.lr;
    OptimState opt_low(out.router.low_noise, adam);
    OptimState opt_high(out.router.high_noise, adam);

    MeanTaskSpec spec;
    std::optional<BatchMixer> mixer;
    std::function<std::vector<TrainItem>(Rng&)> next_batch;
    if (cfg.dataset == "mean-task") {
        spec = make_mean_task_spec();
        spec.hyper = cfg.hyper;
        next_batch = [&spec, &cfg](Rng& r) {
            const std::size_t n = spec.train_words.size();
            std::vector<TrainItem> items;
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                const std::size_t i =
                    std::min<std::size_t>(std::size_t(r.uniform() * double(n)), n - 1);
                items.push_back(make_mean_task_item(spec, spec.train_words[i]));
            }
            return items;
        };
    } else {
        const ParseResult parsed = parse_manifest(cfg.manifest, false);
        const CleanResult cleaned = run_clean_pipeline(parsed.samples, cfg.clean);
        if (cleaned.kept.empty())
            throw std::runtime_error("train: no samples survive cleaning (exhausted data)");
        mixer.emplace(bucket_samples(cleaned.kept), cfg.task_weights, cfg.batch_size);
        next_batch = [&mixer, &cfg](Rng& r) {
            MixBatch mb = mixer->next(r);
            std::vector<TrainItem> items;
            for (const UnifiedSample& s : mb.items) items.push_back(make_train_item(s, cfg));
            return items;
        };
    }

    for (std::size_t step = 0; step < cfg.train_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<TrainItem> items = next_batch(rng);
        out.steps.push_back(
            train_step(items, out.router, opt_low, opt_high, cfg.dropout, rng));
        const auto t1 = std::chrono::steady_clock::now();
        out.wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return out;
}

inline std::string expert_label(const StepStats& s) {
    if (s.touched_low && s.touched_high) return "both";
    return s.touched_high ? "high" : "low";
}

/// Trains per config and writes metrics.csv, timings.csv, and checkpoint.bin
/// under out_dir. Usage problems throw invalid_argument (exit 2 at the CLI);
/// data/divergence problems return 1 with a diagnostic on `log`.
inline int cmd_train(const ExperimentConfig& cfg, const std::string& out_dir,
                     std::ostream& log) {
    cfg.validate();
    const std::string hash = dataset_hash(cfg);
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    TrainResult result{ExpertRouter{}, {}, {}};
    try {
        result = run_training(cfg);
    } catch (const std::runtime_error& e) {
        log << "train: error: " << e.what() << "\n";
        return 1;
    }

    std::ofstream metrics(out_dir + "/metrics.csv");
    if (!metrics) throw std::invalid_argument("train: cannot write to " + out_dir);
    write_provenance(metrics, cfg, hash);
    metrics << "step,loss,expert,drop_mllm,drop_tgt,drop_edit\n";
    for (std::size_t i = 0; i < result.steps.size(); ++i) {
        const StepStats& s = result.steps[i];
        std::size_t d_mllm = 0, d_tgt = 0, d_edit = 0;
        for (const DropoutMasks& m : s.masks) {
            d_mllm += m.m_mllm == 0;
            d_tgt += m.m_tgt == 0;
            d_edit += m.m_edit == 0;
        }
        metrics << i << ',' << format_double(s.loss) << ',' << expert_label(s) << ',' << d_mllm
                << ',' << d_tgt << ',' << d_edit << "\n";
    }
    metrics.close();

    std::ofstream timings(out_dir + "/timings.csv");
    write_provenance(timings, cfg, hash);
    timings << "step,wall_ms\n";
    for (std::size_t i = 0; i < result.wall_ms.size(); ++i)
        timings << i << ',' << format_double(result.wall_ms[i]) << "\n";
    timings.close();

    save_checkpoint(out_dir + "/checkpoint.bin", result.router,
                    {{"config", cfg.to_json()}, {"manifest_hash", hash}});

    log << "train: " << result.steps.size() << " steps, loss "
        << format_double(result.steps.front().loss) << " -> "
        << format_double(result.steps.back().loss) << ", artifacts in " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// Euler-samples a latent grid from a checkpoint, conditioning the target
/// caption segment on `prompt`, and writes a JSON artifact.
inline int cmd_sample(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                      const std::string& prompt, const std::string& out_path,
                      std::ostream& log) {
    cfg.validate();
    if (prompt.empty()) throw std::invalid_argument("sample: empty prompt");
    LoadedCheckpoint ck;
    try {
        ck = load_checkpoint(checkpoint_path);
    } catch (const std::runtime_error& e) {
        log << "sample: error: " << e.what() << "\n";
        return 1;
    }
    const DiTHyper& h = ck.router.low_noise.hyper;
    const std::size_t n_tokens = cfg.sample_grid[0] * cfg.sample_grid[1] * cfg.sample_grid[2];
    if (n_tokens > h.max_latent_tokens)
        throw std::invalid_argument("sample: sample_grid exceeds the checkpoint's "
                                    "max_latent_tokens");

    ConditionFeatures f;
    f.mllm_tokens = Tensor({0, h.d_mllm});
    f.tgt_tokens = encode_text_stub(prompt, h.d_txt).tokens;
    f.edit_tokens = Tensor({0, h.d_txt});
    f.ref_latents = Tensor({0, 1, 1, h.ref_channels});

    Rng rng(cfg.seed);
    SamplerConfig sampler;
    sampler.n_steps = cfg.sampler_steps;
    LatentGrid z;
    try {
        z = euler_sample(f, ck.router, cfg.sample_grid, sampler, rng);
    } catch (const std::runtime_error& e) {
        log << "sample: error: " << e.what() << "\n";
        return 1;
    }
    double mean = 0.0;
    for (double v : z.tokens.data) mean += v;
    mean /= static_cast<double>(z.tokens.size());

    nlohmann::json artifact{{"config", cfg.to_json()},
                            {"manifest_hash", dataset_hash(cfg)},
                            {"checkpoint", checkpoint_path},
                            {"prompt", prompt},
                            {"grid", cfg.sample_grid},
                            {"token_shape", z.tokens.shape},
                            {"tokens", z.tokens.data},
                            {"mean", mean}};
    std::ofstream out(out_path);
    if (!out) throw std::invalid_argument("sample: cannot write " + out_path);
    out << artifact.dump(2) << "\n";
    log << "sample: mean " << format_double(mean) << " -> " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sp-check
// ---------------------------------------------------------------------------

struct SpCheckRow {
    std::string kind;  // "self" / "cross"
    std::size_t P = 1, S = 0, H = 0, d_head = 0, L_C = 0;
    double max_abs_err = 0.0;
    std::size_t measured_elements = 0;  // per worker, all collectives of one layer
    std::size_t model_elements = 0;
    std::size_t measured_macs = 0;  // attention + projection, per worker
    std::size_t expected_macs = 0;  // serial work / P

    bool ok() const {
        return max_abs_err < 1e-9 && measured_elements == model_elements &&
               measured_macs == expected_macs;
    }
    std::string locate() const {
        return kind + " P=" + std::to_string(P) + " S=" + std::to_string(S) +
               " H=" + std::to_string(H) + " d_head=" + std::to_string(d_head);
    }
};

struct SpCheckOptions {
    std::vector<std::size_t> degrees{1, 2, 4, 8};
    std::vector<std::size_t> seq_lens{16, 32};
    std::vector<std::size_t> head_counts{4, 8};
    std::size_t d_head = 8;
    std::size_t L_C = 24;
    std::uint64_t seed = 123;
    std::function<void(WorkerFabric&)> rig;  // test hook: install payload tampering
};

/// Serial-oracle equivalence plus exact communication and compute accounting
/// over the config sweep. Configurations where P does not divide H or S are
/// outside the collective's precondition and are skipped.
inline std::vector<SpCheckRow> run_sp_check(const SpCheckOptions& opt = {}) {
    std::vector<SpCheckRow> rows;
    for (std::size_t S : opt.seq_lens) {
        for (std::size_t H : opt.head_counts) {
            for (std::size_t P : opt.degrees) {
                if (H % P != 0 || S % P != 0) continue;
                const std::size_t width = H * opt.d_head;
                Rng rng = Rng::fork(opt.seed, S * 1000003 + H * 101 + P);
                const Tensor q = rng.normal_tensor({S, width});
                const Tensor k = rng.normal_tensor({S, width});
                const Tensor v = rng.normal_tensor({S, width});
                const CommReport model = comm_volume_model(S, opt.L_C, H, opt.d_head, P);

                {
                    const Tensor serial = multihead_attention(q, k, v, H);
                    WorkerFabric fabric(P);
                    if (opt.rig) opt.rig(fabric);
                    const ShardedSeq out = sp_self_attention(fabric, shard_sequence(q, P),
                                                             shard_sequence(k, P),
                                                             shard_sequence(v, P), H);
                    fabric.assert_drained();
                    SpCheckRow row;
                    row.kind = "self";
                    row.P = P;
                    row.S = S;
                    row.H = H;
                    row.d_head = opt.d_head;
                    row.L_C = opt.L_C;
                    const Tensor merged = unshard(out);
                    for (std::size_t i = 0; i < merged.size(); ++i)
                        row.max_abs_err = std::max(
                            row.max_abs_err, std::abs(merged.data[i] - serial.data[i]));
                    row.measured_elements = fabric.bytes_sent(0) / sizeof(double);
                    row.model_elements = model.self_elements_per_worker;
                    row.measured_macs = fabric.attention_macs(0) + fabric.projection_macs(0);
                    row.expected_macs = 2 * H * S * S * opt.d_head / P;
                    rows.push_back(row);
                }

                {
                    const Tensor cond = rng.normal_tensor({opt.L_C, width});
                    const Tensor w_k = rng.normal_tensor({width, width});
                    const Tensor w_v = rng.normal_tensor({width, width});
                    const Tensor serial =
                        multihead_attention(q, matmul(cond, w_k), matmul(cond, w_v), H);
                    WorkerFabric fabric(P);
                    if (opt.rig) opt.rig(fabric);
                    const ShardedSeq out =
                        sp_cross_attention(fabric, shard_sequence(q, P), cond, w_k, w_v, H);
                    fabric.assert_drained();
                    SpCheckRow row;
                    row.kind = "cross";
                    row.P = P;
                    row.S = S;
                    row.H = H;
                    row.d_head = opt.d_head;
                    row.L_C = opt.L_C;
                    const Tensor merged = unshard(out);
                    for (std::size_t i = 0; i < merged.size(); ++i)
                        row.max_abs_err = std::max(
                            row.max_abs_err, std::abs(merged.data[i] - serial.data[i]));
                    row.measured_elements = fabric.bytes_sent(0) / sizeof(double);
                    row.model_elements = model.cross_elements_per_worker;
                    row.measured_macs = fabric.attention_macs(0) + fabric.projection_macs(0);
                    row.expected_macs =
                        (2 * H * S * opt.L_C * opt.d_head + 2 * opt.L_C * width * width) / P;
                    rows.push_back(row);
                }
            }
        }
    }
    return rows;
}

/// Writes the CommReport table as CSV (when out_path is nonempty) and lists
/// any failing configuration on `log`. Exit 0 iff every row passes.
inline int cmd_sp_check(const ExperimentConfig& cfg, const std::string& out_path,
                        std::ostream& log) {
    cfg.validate();
    SpCheckOptions opt;
    opt.seed = cfg.seed;
    const std::vector<SpCheckRow> rows = run_sp_check(opt);

    std::ostringstream csv;
    write_provenance(csv, cfg, dataset_hash(cfg));
    csv << "kind,P,S,H,d_head,L_C,max_abs_err,elements_per_worker,model_elements_per_worker,"
           "macs_per_worker,expected_macs_per_worker,status\n";
    bool all_ok = true;
    for (const SpCheckRow& r : rows) {
        csv << r.kind << ',' << r.P << ',' << r.S << ',' << r.H << ',' << r.d_head << ','
            << r.L_C << ',' << format_double(r.max_abs_err) << ',' << r.measured_elements << ','
            << r.model_elements << ',' << r.measured_macs << ',' << r.expected_macs << ','
            << (r.ok() ? "pass" : "FAIL") << "\n";
        if (!r.ok()) {
            all_ok = false;
            log << "sp-check: FAIL " << r.locate() << " max_err "
                << format_double(r.max_abs_err) << "\n";
        }
    }
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw std::invalid_argument("sp-check: cannot write " + out_path);
        out << csv.str();
    } else {
        log << csv.str();
    }
    log << "sp-check: " << rows.size() << " configurations, "
        << (all_ok ? "all pass" : "FAILURES above") << "\n";
    return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

inline int cmd_gradcheck(const ExperimentConfig& cfg, std::ostream& log,
                         const GradCheckOptions& opt = {}) {
    cfg.validate();
    const GradCheckReport report = run_gradcheck(cfg.hyper, cfg.seed, opt);
    log << "gradcheck: " << report.groups.size() << " parameter groups, worst rel err "
        << format_double(report.worst_rel) << " at "
        << (report.worst_group.empty() ? "(none)" : report.worst_group) << "\n";
    return report.pass() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// data-clean
// ---------------------------------------------------------------------------

/// Parses the manifest, runs the four-stage cleaner, and writes the audit
/// report (JSON artifact with provenance). Strict-mode parse aborts are data
/// failures (exit 1); an unopenable manifest is a usage error.
inline int cmd_data_clean(const ExperimentConfig& cfg, bool strict,
                          const std::string& report_out, std::ostream& log) {
    cfg.validate();
    if (cfg.dataset != "manifest")
        throw std::invalid_argument("data-clean: config must use dataset 'manifest'");
    const std::string hash = manifest_content_hash(cfg.manifest);

    ParseResult parsed;
    try {
        parsed = parse_manifest(cfg.manifest, strict);
    } catch (const std::runtime_error& e) {
        log << "data-clean: " << e.what() << "\n";
        return 1;
    }
    const CleanResult result = run_clean_pipeline(parsed.samples, cfg.clean);

    nlohmann::json errors = nlohmann::json::array();
    for (const ManifestError& e : parsed.errors)
        errors.push_back({{"line", e.line_no}, {"message", e.message}});
    nlohmann::json kept_ids = nlohmann::json::array();
    for (const UnifiedSample& s : result.kept) kept_ids.push_back(s.id);
    const nlohmann::json artifact{{"config", cfg.to_json()},
                                  {"manifest_hash", hash},
                                  {"parse_errors", errors},
                                  {"report", result.report.to_json()},
                                  {"kept_ids", kept_ids}};
    if (!report_out.empty()) {
        std::ofstream out(report_out);
        if (!out) throw std::invalid_argument("data-clean: cannot write " + report_out);
        out << artifact.dump(2) << "\n";
    } else {
        log << artifact.dump(2) << "\n";
    }

    log << "data-clean: input " << result.report.input;
    for (const StageReport& s : result.report.stages)
        log << " | " << s.name << " kept " << s.kept;
    log << " | parse errors " << parsed.errors.size() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablate-dropout
// ---------------------------------------------------------------------------

enum class ForcedZero { none, mllm, tgt, edit };

inline std::string to_string(ForcedZero z) {
    switch (z) {
        case ForcedZero::none: return "none";
        case ForcedZero::mllm: return "mllm";
        case ForcedZero::tgt: return "tgt";
        case ForcedZero::edit: return "edit";
    }
    throw std::logic_error("to_string(ForcedZero): bad value");
}

inline ForcedZero parse_forced_zero(const std::string& s) {
    if (s == "none") return ForcedZero::none;
    if (s == "mllm") return ForcedZero::mllm;
    if (s == "tgt") return ForcedZero::tgt;
    if (s == "edit") return ForcedZero::edit;
    if (s == "ref")
        throw std::invalid_argument(
            "ablate-dropout: segment 'ref' is a persistent anchor and cannot be force-dropped");
    throw std::invalid_argument("ablate-dropout: unknown segment '" + s + "'");
}

/// Zeroes one feature segment in place of the model's learned conditioning;
/// with bias-free adapters this equals zeroing the projected segment.
inline ConditionFeatures force_zero_segment(ConditionFeatures f, ForcedZero which) {
    switch (which) {
        case ForcedZero::none: break;
        case ForcedZero::mllm: f.mllm_tokens = Tensor(f.mllm_tokens.shape); break;
        case ForcedZero::tgt: f.tgt_tokens = Tensor(f.tgt_tokens.shape); break;
        case ForcedZero::edit: f.edit_tokens = Tensor(f.edit_tokens.shape); break;
    }
    return f;
}

struct MeanTaskEval {
    double mean_abs_err = 0.0;
    std::size_t within = 0;  // |sample mean - analytic target| <= tol
    std::size_t total = 0;
    std::vector<double> errors;
};

/// Per-word Euler sampling against the analytic target level. Each word gets
/// a forked noise stream so the word list can change without shifting draws.
inline MeanTaskEval evaluate_mean_task(const ExpertRouter& router, const MeanTaskSpec& spec,
                                       const std::vector<std::string>& words,
                                       std::size_t sampler_steps, std::uint64_t seed,
                                       ForcedZero zero = ForcedZero::none, double tol = 0.1) {
    MeanTaskEval ev;
    ev.total = words.size();
    SamplerConfig sampler;
    sampler.n_steps = sampler_steps;
    for (std::size_t i = 0; i < words.size(); ++i) {
        const ConditionFeatures f = force_zero_segment(mean_task_features(spec, words[i]), zero);
        Rng rng = Rng::fork(seed, i + 1);
        const LatentGrid z = euler_sample(f, router, spec.grid, sampler, rng);
        double mean = 0.0;
        for (double v : z.tokens.data) mean += v;
        mean /= static_cast<double>(z.tokens.size());
        const double err = std::abs(mean - mean_task_target(words[i], spec.hyper.d_txt));
        ev.errors.push_back(err);
        ev.mean_abs_err += err / static_cast<double>(words.size());
        if (err <= tol) ++ev.within;
    }
    return ev;
}

struct AblationArm {
    double p = 0.0;
    MeanTaskEval normal;
    MeanTaskEval zeroed;

    double increase() const { return zeroed.mean_abs_err - normal.mean_abs_err; }
};

/// Trains one conditional-mean model with uniform dropout probability p and
/// evaluates held-out words with and without the forced zeroing. Arms that
/// share cfg.seed are exactly paired: mask draws consume three uniforms
/// regardless of p, so u/eps/batch streams coincide across arms.
inline AblationArm run_ablation_arm(ExperimentConfig cfg, double p, ForcedZero zero_seg) {
    cfg.dataset = "mean-task";
    cfg.dropout.p_mllm = p;
    cfg.dropout.p_tgt = p;
    cfg.dropout.p_edit = p;
    cfg.validate();
    const TrainResult trained = run_training(cfg);
    MeanTaskSpec spec = make_mean_task_spec();
    spec.hyper = cfg.hyper;

    AblationArm arm;
    arm.p = p;
    arm.normal = evaluate_mean_task(trained.router, spec, spec.eval_words, cfg.sampler_steps,
                                    cfg.seed, ForcedZero::none);
    arm.zeroed = evaluate_mean_task(trained.router, spec, spec.eval_words, cfg.sampler_steps,
                                    cfg.seed, zero_seg);
    return arm;
}

/// Trains one model per grid probability and reports evaluation error with
/// and without the forced segment zeroing as CSV.
inline int cmd_ablate_dropout(const ExperimentConfig& cfg, const std::vector<double>& grid,
                              const std::string& zero_segment, const std::string& out_path,
                              std::ostream& log) {
    cfg.validate();
    const ForcedZero seg = parse_forced_zero(zero_segment);
    if (seg == ForcedZero::none)
        throw std::invalid_argument("ablate-dropout: pick a segment to force-zero "
                                    "(mllm|tgt|edit)");
    if (grid.empty()) throw std::invalid_argument("ablate-dropout: empty probability grid");
    for (double p : grid)
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument("ablate-dropout: probability outside [0,1]");

    std::ostringstream csv;
    write_provenance(csv, cfg, dataset_hash(cfg));
    csv << "p_drop,zero_segment,err_normal,err_zeroed,increase,within_normal,within_zeroed,"
           "eval_words\n";
    for (double p : grid) {
        AblationArm arm;
        try {
            arm = run_ablation_arm(cfg, p, seg);
        } catch (const std::runtime_error& e) {
            log << "ablate-dropout: error at p=" << format_double(p) << ": " << e.what() << "\n";
            return 1;
        }
        csv << format_double(p) << ',' << to_string(seg) << ','
            << format_double(arm.normal.mean_abs_err) << ','
            << format_double(arm.zeroed.mean_abs_err) << ',' << format_double(arm.increase())
            << ',' << arm.normal.within << ',' << arm.zeroed.within << ',' << arm.normal.total
            << "\n";
        log << "ablate-dropout: p=" << format_double(p) << " err "
            << format_double(arm.normal.mean_abs_err) << " -> zeroed "
            << format_double(arm.zeroed.mean_abs_err) << "\n";
    }
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw std::invalid_argument("ablate-dropout: cannot write " + out_path);
        out << csv.str();
    } else {
        log << csv.str();
    }
    return 0;
}

}  // namespace omniflow
