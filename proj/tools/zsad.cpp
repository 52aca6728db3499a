// zsad: zero-shot anomaly detection toolkit around a miniature dual encoder.
// Pipeline: gen-data -> pretrain -> adapt --stage 1 -> adapt --stage 2 -> eval.
#include "zsad/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "runs/out";
    std::vector<std::string> overrides;
    int seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "configuration file (INI)")->required();
    cmd->add_option("--out", args.out_dir, "run directory for outputs");
    cmd->add_option("--set", args.overrides, "override: section.key=value (repeatable)");
    cmd->add_option("--seed", args.seed, "override run.seed");
}

zsad::Config load_config(const CommonArgs& args) {
    zsad::Config cfg = zsad::Config::load(args.config_path);
    for (const auto& ov : args.overrides) cfg.apply_override(ov);
    if (args.seed >= 0) cfg.set("run.seed", std::to_string(args.seed));
    return cfg;
}

std::string config_dir(const CommonArgs& args) {
    return std::filesystem::path(args.config_path).parent_path().string();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"zero-shot anomaly detection with a two-stage adapted dual encoder"};
    app.require_subcommand(1);

    CommonArgs gen_args, pre_args, adapt_args, eval_args, infer_args, diag_args;
    int stage = 0;
    std::string checkpoint_path, image_path, class_id, split = "test";

    CLI::App* gen = app.add_subcommand("gen-data", "render the synthetic dataset and corpus");
    add_common(gen, gen_args);

    CLI::App* pre = app.add_subcommand("pretrain", "contrastive pretraining of the backbone");
    add_common(pre, pre_args);

    CLI::App* adapt = app.add_subcommand("adapt", "run one adaptation stage");
    add_common(adapt, adapt_args);
    adapt->add_option("--stage", stage, "adaptation stage (1 or 2)")->required();
    adapt->add_option("--checkpoint", checkpoint_path,
                      "input checkpoint (default: the previous stage in --out)");

    CLI::App* ev = app.add_subcommand("eval", "compute AUROC metrics for a checkpoint");
    add_common(ev, eval_args);
    ev->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    ev->add_option("--split", split, "dataset split: test, train or val");

    CLI::App* inf = app.add_subcommand("infer", "anomaly map + score for one image");
    add_common(inf, infer_args);
    inf->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    inf->add_option("--image", image_path, "input image (PPM)")->required();
    inf->add_option("--class", class_id, "class id for the text anchors")->required();

    CLI::App* diag = app.add_subcommand("export-diagnostics",
                                        "dump prompt similarity matrix and embeddings");
    add_common(diag, diag_args);
    diag->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage error
    }

    try {
        using namespace zsad::pipeline;
        if (gen->parsed()) {
            cmd_gen_data(load_config(gen_args), config_dir(gen_args), gen_args.out_dir);
        } else if (pre->parsed()) {
            cmd_pretrain(load_config(pre_args), config_dir(pre_args), pre_args.out_dir);
        } else if (adapt->parsed()) {
            cmd_adapt(load_config(adapt_args), config_dir(adapt_args), adapt_args.out_dir,
                      stage, checkpoint_path);
        } else if (ev->parsed()) {
            cmd_eval(load_config(eval_args), config_dir(eval_args), eval_args.out_dir,
                     checkpoint_path, split);
        } else if (inf->parsed()) {
            cmd_infer(load_config(infer_args), config_dir(infer_args), infer_args.out_dir,
                      checkpoint_path, image_path, class_id);
        } else if (diag->parsed()) {
            cmd_export_diagnostics(load_config(diag_args), config_dir(diag_args),
                                   diag_args.out_dir, checkpoint_path);
        }
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::string what = e.what();
        std::fprintf(stderr, "error: %s\n", what.c_str());
        // missing/invalid configuration is a usage problem, not a runtime one
        if (what.rfind("config", 0) == 0 || what.find("cannot read config") != std::string::npos)
            return 2;
        return 1;
    }
    return 0;
}
