// Command-line front end for the latent backdoor toolkit: runs the full
// pipeline or any single stage against a JSON config, plus small utilities
// for generating fixture datasets and inspecting checkpoints.

#include "mml/checkpoint.hpp"
#include "mml/config.hpp"
#include "mml/idx.hpp"
#include "mml/pipeline.hpp"
#include "mml/synth.hpp"

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    int64_t seed_override = -1;
};

mml::RunConfig resolve_config(const CommonOpts& opts) {
    mml::RunConfig cfg = opts.config_path.empty() ? mml::default_run_config() : mml::load_run_config(opts.config_path);
    if (opts.seed_override >= 0) {
        cfg.seed = static_cast<uint64_t>(opts.seed_override);
        cfg.finalize();
    }
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON run configuration (defaults apply when omitted)");
    cmd->add_option("--out", opts.out_dir, "output directory for artifacts");
    cmd->add_option("--seed", opts.seed_override, "override the global seed");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mml - head-only backdoor implantation via mode-mixture latent codes"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string stage_filter;

    CLI::App* pipeline = app.add_subcommand("pipeline", "run every stage in order");
    add_common(pipeline, opts);
    pipeline->add_option("--stage", stage_filter, "run only this stage (expects earlier artifacts in --out)");

    for (const std::string& stage : mml::pipeline_stage_names()) {
        CLI::App* cmd = app.add_subcommand(stage, "run the " + stage + " stage");
        add_common(cmd, opts);
    }

    // fixture dataset generator: writes IDX files
    std::string data_dir = "data";
    size_t digit_count = 6000;
    uint64_t data_seed = 7;
    CLI::App* make_data = app.add_subcommand("make-data", "write a synthetic digit dataset as IDX files");
    make_data->add_option("--out", data_dir, "output directory");
    make_data->add_option("--count", digit_count, "number of images");
    make_data->add_option("--seed", data_seed, "generator seed");

    std::string ckpt_path;
    CLI::App* show = app.add_subcommand("show-checkpoint", "print checkpoint architecture");
    show->add_option("path", ckpt_path, "checkpoint file")->required();

    CLI::App* print_cfg = app.add_subcommand("print-config", "print the default run configuration");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pipeline->parsed()) {
            mml::RunConfig cfg = resolve_config(opts);
            if (stage_filter.empty()) {
                mml::run_pipeline(cfg, opts.out_dir);
            } else {
                mml::Workspace ws;
                mml::run_stage(stage_filter, cfg, ws, opts.out_dir);
            }
            return 0;
        }
        for (const std::string& stage : mml::pipeline_stage_names()) {
            if (app.get_subcommand(stage)->parsed()) {
                mml::RunConfig cfg = resolve_config(opts);
                mml::Workspace ws;
                mml::run_stage(stage, cfg, ws, opts.out_dir);
                return 0;
            }
        }
        if (make_data->parsed()) {
            std::filesystem::create_directories(data_dir);
            const mml::LabeledImageDataset data = mml::synth_digits(digit_count, data_seed);
            const auto dir = std::filesystem::path(data_dir);
            mml::write_idx_images((dir / "images-idx3-ubyte").string(), data.images, 28, 28);
            mml::write_idx_labels((dir / "labels-idx1-ubyte").string(), data.labels);
            std::cout << "wrote " << data.size() << " images to " << data_dir << "\n";
            return 0;
        }
        if (show->parsed()) {
            const mml::ClassifierModel model = mml::load_checkpoint(ckpt_path);
            std::cout << "layers: " << model.layers.size() << "  encoder_depth: " << model.encoder_depth
                      << "  latent_dim: " << model.latent_dim << "  classes: " << model.num_classes << "\n";
            for (size_t i = 0; i < model.layers.size(); ++i) {
                const auto& l = model.layers[i];
                std::cout << "  layer " << i << ": " << l.in_dim() << " -> " << l.out_dim()
                          << (l.activation == mml::Activation::Relu ? " relu" : " identity") << "\n";
            }
            std::cout << "parameters: " << model.parameter_count() << "\n";
            return 0;
        }
        if (print_cfg->parsed()) {
            std::cout << mml::run_config_to_json(mml::default_run_config());
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
