// Command-line front end for the experiment runner. Subcommands map onto the
// cmd_* library functions; this file only parses flags, loads the config, and
// translates exceptions into the exit-code contract:
//   0 = all checks pass, 1 = check failure, 2 = usage/config error.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "omniflow/config.hpp"
#include "omniflow/corpus.hpp"
#include "omniflow/experiment.hpp"

namespace {

omniflow::ExperimentConfig load_config(const std::string& path) {
    using omniflow::ExperimentConfig;
    ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : ExperimentConfig::from_file(path);
    cfg = omniflow::apply_env_seed(cfg);
    cfg.validate();
    return cfg;
}

int write_fixture_manifest(const std::string& out_path) {
    const std::string text = omniflow::serialize_manifest(omniflow::make_planted_fixture());
    std::ofstream out(out_path);
    if (!out) throw std::invalid_argument("gen-data: cannot write " + out_path);
    out << text;
    std::cout << "gen-data: wrote " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"omniflow: toy unified-conditioning video model experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "run", out_path, checkpoint_path, manifest_path;
    std::string prompt, report_out, zero_segment = "tgt";
    std::vector<double> drop_grid{0.0, 0.3};
    double locality_threshold = -1.0;  // negative = keep the config value
    bool strict = false;

    CLI::App* train = app.add_subcommand("train", "train a model and write metrics/checkpoint");
    train->add_option("--config", config_path, "experiment config JSON");
    train->add_option("--out", out_dir, "output directory");

    CLI::App* sample = app.add_subcommand("sample", "Euler-sample a latent from a checkpoint");
    sample->add_option("--config", config_path, "experiment config JSON");
    sample->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    sample->add_option("--prompt", prompt, "target caption text")->required();
    sample->add_option("--out", out_path, "artifact JSON path")->required();

    CLI::App* sp = app.add_subcommand("sp-check",
                                      "sequence-parallel equivalence and volume checks");
    sp->add_option("--config", config_path, "experiment config JSON");
    sp->add_option("--out", out_path, "CSV report path");

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
    grad->add_option("--config", config_path, "experiment config JSON");

    CLI::App* clean = app.add_subcommand("data-clean", "run the cleaning pipeline on a manifest");
    clean->add_option("--config", config_path, "experiment config JSON");
    clean->add_option("--manifest", manifest_path, "JSONL manifest path")->required();
    clean->add_flag("--strict", strict, "abort on the first malformed line");
    clean->add_option("--locality-threshold", locality_threshold,
                      "changed-cell fraction limit for local edits");
    clean->add_option("--report-out", report_out, "write the JSON audit report here");

    CLI::App* ablate = app.add_subcommand("ablate-dropout",
                                          "train per dropout setting, measure forced-zero error");
    ablate->add_option("--config", config_path, "experiment config JSON");
    ablate->add_option("--out", out_path, "CSV report path");
    ablate->add_option("--zero-segment", zero_segment, "segment to force-zero at evaluation");
    ablate->add_option("--grid", drop_grid, "dropout probabilities to train");

    CLI::App* gen = app.add_subcommand("gen-data", "write the synthetic fixture manifest");
    gen->add_option("--out", out_path, "manifest JSONL path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // --help exits 0; every parse problem is a usage error
    }

    try {
        if (gen->parsed()) return write_fixture_manifest(out_path);

        omniflow::ExperimentConfig cfg = load_config(config_path);
        if (train->parsed()) return omniflow::cmd_train(cfg, out_dir, std::cout);
        if (sample->parsed())
            return omniflow::cmd_sample(cfg, checkpoint_path, prompt, out_path, std::cout);
        if (sp->parsed()) return omniflow::cmd_sp_check(cfg, out_path, std::cout);
        if (grad->parsed()) return omniflow::cmd_gradcheck(cfg, std::cout);
        if (clean->parsed()) {
            cfg.dataset = "manifest";
            cfg.manifest = manifest_path;
            if (locality_threshold >= 0.0) cfg.clean.locality_threshold = locality_threshold;
            return omniflow::cmd_data_clean(cfg, strict, report_out, std::cout);
        }
        if (ablate->parsed())
            return omniflow::cmd_ablate_dropout(cfg, drop_grid, zero_segment, out_path,
                                                std::cout);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;  // unreachable with require_subcommand, kept for safety
}
