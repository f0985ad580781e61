#pragma once

// Experiment configuration: one JSON-backed record that every subcommand
// validates before running and serializes verbatim into its artifacts, so a
// result file is reproducible from the artifact alone.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "omniflow/conditioning.hpp"
#include "omniflow/data_pipeline.hpp"
#include "omniflow/dit.hpp"

namespace omniflow {

inline std::string to_string(DropoutMode m) {
    return m == DropoutMode::zero ? "zero" : "remove";
}

inline DropoutMode parse_dropout_mode(const std::string& s) {
    if (s == "zero") return DropoutMode::zero;
    if (s == "remove") return DropoutMode::remove;
    throw std::invalid_argument("parse_dropout_mode: unknown mode '" + s + "'");
}

inline nlohmann::json dropout_to_json(const DropoutConfig& d) {
    return {{"p_mllm", d.p_mllm}, {"p_tgt", d.p_tgt}, {"p_edit", d.p_edit},
            {"mode", to_string(d.mode)}};
}

inline DropoutConfig dropout_from_json(const nlohmann::json& j) {
    DropoutConfig d;
    d.p_mllm = j.at("p_mllm").get<double>();
    d.p_tgt = j.at("p_tgt").get<double>();
    d.p_edit = j.at("p_edit").get<double>();
    d.mode = parse_dropout_mode(j.at("mode").get<std::string>());
    return d;
}

inline nlohmann::json clean_to_json(const CleanConfig& c) {
    return {{"min_frames_video", c.min_frames_video}, {"min_side", c.min_side},
            {"max_side", c.max_side},                 {"max_frames", c.max_frames},
            {"static_threshold", c.static_threshold}, {"locality_threshold", c.locality_threshold}};
}

inline CleanConfig clean_from_json(const nlohmann::json& j) {
    CleanConfig c;
    c.min_frames_video = j.at("min_frames_video").get<std::size_t>();
    c.min_side = j.at("min_side").get<std::size_t>();
    c.max_side = j.at("max_side").get<std::size_t>();
    c.max_frames = j.at("max_frames").get<std::size_t>();
    c.static_threshold = j.at("static_threshold").get<double>();
    c.locality_threshold = j.at("locality_threshold").get<double>();
    return c;
}

/// Full run description for the experiment runner. `dataset` selects between
/// the JSONL manifest pipeline ("manifest") and the built-in synthetic
/// conditional-mean task ("mean-task"), which needs no input files.
struct ExperimentConfig {
    DiTHyper hyper;
    DropoutConfig dropout;
    SelectStrategy select_strategy = SelectStrategy::keep_first;
    std::size_t select_budget = 16;
    double u_threshold = 0.5;
    std::size_t sampler_steps = 64;
    std::uint64_t seed = 1;
    std::string dataset = "mean-task";
    std::string manifest;  // JSONL path; required when dataset == "manifest"
    std::map<TaskType, double> task_weights = {{TaskType::t2v, 1.0}};
    std::size_t batch_size = 8;
    std::size_t train_steps = 200;
    double lr = 1e-3;
    std::size_t sp_degree = 1;
    CleanConfig clean;
    std::array<std::size_t, 3> sample_grid = {1, 2, 2};  // latent grid for `sample`

    void validate() const {
        hyper.validate();
        dropout.validate();
        if (select_budget == 0)
            throw std::invalid_argument("ExperimentConfig: select_budget must be >= 1");
        if (!(u_threshold > 0.0 && u_threshold < 1.0))
            throw std::invalid_argument("ExperimentConfig: u_threshold must lie in (0,1)");
        if (sampler_steps == 0)
            throw std::invalid_argument("ExperimentConfig: sampler_steps must be >= 1");
        if (dataset != "mean-task" && dataset != "manifest")
            throw std::invalid_argument("ExperimentConfig: dataset must be 'mean-task' or "
                                        "'manifest', got '" + dataset + "'");
        if (dataset == "manifest" && manifest.empty())
            throw std::invalid_argument("ExperimentConfig: manifest path required for "
                                        "dataset 'manifest'");
        double weight_sum = 0.0;
        for (const auto& [task, w] : task_weights) {
            if (!(w >= 0.0) || !std::isfinite(w))
                throw std::invalid_argument("ExperimentConfig: negative task weight for " +
                                            to_string(task));
            weight_sum += w;
        }
        if (!(weight_sum > 0.0))
            throw std::invalid_argument("ExperimentConfig: task weights sum to zero");
        if (batch_size == 0)
            throw std::invalid_argument("ExperimentConfig: batch_size must be >= 1");
        if (train_steps == 0)
            throw std::invalid_argument("ExperimentConfig: train_steps must be >= 1");
        if (!(lr >= 0.0) || !std::isfinite(lr))
            throw std::invalid_argument("ExperimentConfig: lr must be finite and >= 0");
        if (sp_degree == 0)
            throw std::invalid_argument("ExperimentConfig: sp_degree must be >= 1");
        if (clean.min_side == 0 || clean.max_side < clean.min_side)
            throw std::invalid_argument("ExperimentConfig: bad clean resolution range");
        if (clean.min_frames_video == 0 || clean.max_frames == 0)
            throw std::invalid_argument("ExperimentConfig: bad clean frame range");
        if (!(clean.static_threshold >= 0.0))
            throw std::invalid_argument("ExperimentConfig: static_threshold must be >= 0");
        if (!(clean.locality_threshold >= 0.0 && clean.locality_threshold <= 1.0))
            throw std::invalid_argument("ExperimentConfig: locality_threshold outside [0,1]");
        for (std::size_t g : sample_grid)
            if (g == 0) throw std::invalid_argument("ExperimentConfig: sample_grid extents "
                                                    "must be positive");
    }

    nlohmann::json to_json() const {
        nlohmann::json weights(nlohmann::json::value_t::object);
        for (const auto& [task, w] : task_weights) weights[to_string(task)] = w;
        return {{"hyper", hyper.to_json()},
                {"dropout", dropout_to_json(dropout)},
                {"select_strategy", to_string(select_strategy)},
                {"select_budget", select_budget},
                {"u_threshold", u_threshold},
                {"sampler_steps", sampler_steps},
                {"seed", seed},
                {"dataset", dataset},
                {"manifest", manifest},
                {"task_weights", weights},
                {"batch_size", batch_size},
                {"train_steps", train_steps},
                {"lr", lr},
                {"sp_degree", sp_degree},
                {"clean", clean_to_json(clean)},
                {"sample_grid", sample_grid}};
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        c.hyper = DiTHyper::from_json(j.at("hyper"));
        c.dropout = dropout_from_json(j.at("dropout"));
        c.select_strategy = parse_strategy(j.at("select_strategy").get<std::string>());
        c.select_budget = j.at("select_budget").get<std::size_t>();
        c.u_threshold = j.at("u_threshold").get<double>();
        c.sampler_steps = j.at("sampler_steps").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.dataset = j.at("dataset").get<std::string>();
        c.manifest = j.at("manifest").get<std::string>();
        c.task_weights.clear();
        for (const auto& [key, val] : j.at("task_weights").items())
            c.task_weights[parse_task(key)] = val.get<double>();
        c.batch_size = j.at("batch_size").get<std::size_t>();
        c.train_steps = j.at("train_steps").get<std::size_t>();
        c.lr = j.at("lr").get<double>();
        c.sp_degree = j.at("sp_degree").get<std::size_t>();
        c.clean = clean_from_json(j.at("clean"));
        const auto grid = j.at("sample_grid").get<std::vector<std::size_t>>();
        if (grid.size() != 3)
            throw std::invalid_argument("ExperimentConfig: sample_grid needs 3 extents");
        c.sample_grid = {grid[0], grid[1], grid[2]};
        c.validate();
        return c;
    }

    static ExperimentConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::invalid_argument("config: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("config: " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

/// Applies the OMNIFLOW_SEED environment override, if set. The value must be
/// a full decimal u64; anything else is a usage error.
inline ExperimentConfig apply_env_seed(ExperimentConfig cfg) {
    const char* env = std::getenv("OMNIFLOW_SEED");
    if (!env) return cfg;
    const std::string text(env);
    std::size_t used = 0;
    std::uint64_t value = 0;
    try {
        value = std::stoull(text, &used, 10);
    } catch (const std::exception&) {
        throw std::invalid_argument("OMNIFLOW_SEED: not a decimal integer: '" + text + "'");
    }
    if (used != text.size() || text.empty())
        throw std::invalid_argument("OMNIFLOW_SEED: not a decimal integer: '" + text + "'");
    cfg.seed = value;
    return cfg;
}

}  // namespace omniflow
