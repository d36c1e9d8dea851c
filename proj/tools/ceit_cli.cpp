#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ceit/analyzer.hpp"
#include "ceit/config.hpp"
#include "ceit/gradcheck.hpp"
#include "ceit/model.hpp"
#include "ceit/train.hpp"

namespace {

struct ConfigArgs {
    std::string preset;
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args, bool required) {
    auto* p = cmd->add_option("--preset", args.preset, "Built-in configuration")
                  ->check(CLI::IsMember(ceit::preset_names()));
    auto* c = cmd->add_option("--config", args.config_path, "Configuration JSON file");
    p->excludes(c);
    if (required) {
        // one of the two must be given; enforced in resolve_config
        cmd->callback([]() {});
    }
    cmd->add_option("--set", args.overrides,
                    "Dotted key=value override (e.g. model.depth=2); repeatable");
}

ceit::Config resolve_config(const ConfigArgs& args, const std::string& fallback_preset = "") {
    ceit::Config cfg;
    if (!args.config_path.empty()) {
        cfg = ceit::load_config_file(args.config_path);
    } else if (!args.preset.empty()) {
        cfg = ceit::preset(args.preset);
    } else if (!fallback_preset.empty()) {
        cfg = ceit::preset(fallback_preset);
    } else {
        throw CLI::ValidationError("one of --preset or --config is required");
    }
    for (const auto& o : args.overrides) ceit::apply_override(cfg, o);
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

void write_output(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream os(out_path);
    if (!os) throw std::runtime_error("cannot open for writing: " + out_path);
    os << text;
}

ceit::Dataset dataset_for(const ceit::Config& cfg, const std::string& data_path) {
    if (!data_path.empty()) return ceit::load_dataset(data_path);
    return ceit::synth_dataset(cfg.train.dataset.num_classes, cfg.train.dataset.samples,
                               cfg.model.image_size, cfg.model.in_channels, cfg.train.seed,
                               cfg.train.dataset.noise);
}

int run(int argc, char** argv) {
    CLI::App app{"CeiT building blocks: cost analysis, gradient checks and desk-scale training"};
    app.require_subcommand(1);

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Per-layer parameter and MAC report");
    ConfigArgs analyze_cfg;
    add_config_flags(analyze, analyze_cfg, true);
    std::int64_t resolution = 0;
    analyze->add_option("--resolution", resolution, "Input resolution (default: config image size)");
    bool as_json = false;
    analyze->add_flag("--json", as_json, "Machine-readable JSON instead of the table");
    std::string analyze_out;
    analyze->add_option("--out", analyze_out, "Write the report to a file instead of stdout");
    std::string baseline_preset;
    analyze->add_option("--baseline", baseline_preset,
                        "Also print cost ratios against this preset")
        ->check(CLI::IsMember(ceit::preset_names()));

    // train
    auto* train_cmd = app.add_subcommand("train", "Optimize on a dataset, write checkpoint + CSV");
    ConfigArgs train_args;
    add_config_flags(train_cmd, train_args, true);
    std::string data_path, ckpt_out = "checkpoint.bin", metrics_out = "metrics.csv", resume_path;
    std::int64_t train_steps_override = -1;
    std::uint64_t seed_override = 0;
    bool seed_given = false;
    train_cmd->add_option("--data", data_path, "Dataset file (default: synthesize per config)");
    train_cmd->add_option("--out", ckpt_out, "Checkpoint output path");
    train_cmd->add_option("--metrics", metrics_out, "Metrics CSV output path");
    train_cmd->add_option("--resume", resume_path, "Resume from this checkpoint");
    train_cmd->add_option("--steps", train_steps_override, "Stop after this many steps");
    train_cmd->add_option("--seed", seed_override, "Override the training seed")
        ->each([&](const std::string&) { seed_given = true; });

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on a dataset");
    std::string eval_ckpt, eval_data;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint to evaluate")->required();
    eval_cmd->add_option("--data", eval_data, "Dataset file (default: synthesize per config)");

    // gradcheck
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    ConfigArgs gc_args;
    add_config_flags(gc_cmd, gc_args, false);
    std::uint64_t gc_seed = 7;
    gc_cmd->add_option("--seed", gc_seed, "Seed for weights and probe batch");
    bool gc_lca_only = false;
    gc_cmd->add_flag("--lca-only", gc_lca_only, "Check only the class-token attention head");

    // export
    auto* export_cmd = app.add_subcommand("export", "Print the effective configuration as JSON");
    ConfigArgs export_args;
    add_config_flags(export_cmd, export_args, true);
    std::string export_out;
    export_cmd->add_option("--out", export_out, "Write to a file instead of stdout");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Run the stem / feed-forward variant grid");
    std::int64_t ablate_steps = 10;
    std::uint64_t ablate_seed = 42;
    ablate_cmd->add_option("--steps", ablate_steps, "Training steps per arm");
    ablate_cmd->add_option("--seed", ablate_seed, "Seed shared by all arms");

    // datagen
    auto* data_cmd = app.add_subcommand("datagen", "Write a synthetic dataset file");
    ConfigArgs data_args;
    add_config_flags(data_cmd, data_args, true);
    std::string data_out = "dataset.bin";
    data_cmd->add_option("--out", data_out, "Dataset output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    if (analyze->parsed()) {
        const ceit::Config cfg = resolve_config(analyze_cfg);
        const std::int64_t res = resolution > 0 ? resolution : cfg.model.image_size;
        const ceit::CostReport report = ceit::count_flops(cfg.model, res);
        std::string text = as_json ? report.to_json() : report.to_table();
        if (!baseline_preset.empty()) {
            const ceit::Config base = ceit::preset(baseline_preset);
            text += "\nvs " + baseline_preset + ":\n" +
                    ceit::compare(cfg.model, base.model, res).to_table();
        }
        write_output(text, analyze_out);
        return 0;
    }

    if (train_cmd->parsed()) {
        ceit::Config cfg = resolve_config(train_args);
        if (seed_given) cfg.train.seed = seed_override;
        std::int64_t start_step = 0;
        ceit::Model model(cfg.model, cfg.train.seed);
        ceit::AdamW opt(cfg.train.weight_decay);
        if (!resume_path.empty()) {
            const ceit::Checkpoint ckpt = ceit::load_checkpoint(resume_path);
            cfg = ckpt.config;
            model = ceit::Model(cfg.model, cfg.train.seed);
            ceit::restore_model(model, opt, ckpt);
            start_step = ckpt.step;
        }
        const ceit::Dataset ds = dataset_for(cfg, data_path);
        const std::int64_t spe = ds.size() / cfg.train.batch_size;
        std::int64_t steps = cfg.train.epochs * spe - start_step;
        if (train_steps_override >= 0) steps = train_steps_override;
        const auto history = ceit::train_steps(model, opt, ds, cfg.train, start_step, steps);
        write_output(ceit::metrics_csv(history), metrics_out);
        ceit::save_checkpoint(ceit::make_checkpoint(model, opt, cfg, start_step + steps),
                              ckpt_out);
        if (!history.empty()) {
            std::cout << "step " << history.back().step << "  loss " << history.back().loss
                      << "  accuracy " << history.back().accuracy << "\n";
        }
        std::cout << "checkpoint: " << ckpt_out << "\nmetrics: " << metrics_out << "\n";
        return 0;
    }

    if (eval_cmd->parsed()) {
        const ceit::Checkpoint ckpt = ceit::load_checkpoint(eval_ckpt);
        ceit::Model model(ckpt.config.model, ckpt.config.train.seed);
        ceit::AdamW opt(ckpt.config.train.weight_decay);
        ceit::restore_model(model, opt, ckpt);
        const ceit::Dataset ds = dataset_for(ckpt.config, eval_data);
        const ceit::EvalResult r = ceit::evaluate(model, ds, ckpt.config.train.batch_size);
        std::cout << "top-1 accuracy: " << r.accuracy << "  loss: " << r.loss << "\n";
        return 0;
    }

    if (gc_cmd->parsed()) {
        const ceit::Config cfg = resolve_config(gc_args, "ceit-toy");
        const ceit::Model probe(cfg.model, gc_seed);
        if (probe.num_param_scalars() > 100000) {
            std::cerr << "warning: " << probe.num_param_scalars()
                      << " parameters; finite differences will be slow\n";
        }
        const ceit::GradCheckReport report =
            gc_lca_only ? ceit::gradcheck_lca(cfg.model, gc_seed)
                        : ceit::gradcheck_model(cfg.model, gc_seed);
        std::cout << report.to_table();
        return report.passed ? 0 : 2;
    }

    if (export_cmd->parsed()) {
        write_output(ceit::config_to_json(resolve_config(export_args)), export_out);
        return 0;
    }

    if (ablate_cmd->parsed()) {
        std::cout << ceit::ablation_table(ceit::run_ablation_grid(ablate_steps, ablate_seed));
        return 0;
    }

    if (data_cmd->parsed()) {
        const ceit::Config cfg = resolve_config(data_args);
        ceit::save_dataset(dataset_for(cfg, ""), data_out);
        std::cout << "dataset: " << data_out << "\n";
        return 0;
    }

    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CLI::Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
