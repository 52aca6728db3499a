#include "zsad/pipeline.hpp"

#include <json.hpp>

#include <chrono>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unistd.h>

namespace fs = std::filesystem;

namespace zsad::pipeline {

VisionEncoderSpec vision_spec_from(const Config& cfg) {
    VisionEncoderSpec v;
    v.image_size = cfg.get_int("backbone.image_size", 64);
    v.patch_size = cfg.get_int("backbone.patch_size", 8);
    v.depth = cfg.get_int("backbone.vision_depth", 8);
    v.width = cfg.get_int("backbone.vision_width", 128);
    v.heads = cfg.get_int("backbone.vision_heads", 4);
    v.embed_dim = cfg.get_int("backbone.embed_dim", 128);
    v.mlp_ratio = cfg.get_int("backbone.vision_mlp_ratio", 2);
    auto taps = cfg.get_list("backbone.tap_layers", {"2", "4", "6", "8"});
    v.tap_layers.clear();
    for (const auto& t : taps) v.tap_layers.push_back(std::stoi(t));
    v.validate();
    return v;
}

TextEncoderSpec text_spec_from(const Config& cfg) {
    TextEncoderSpec t;
    t.vocab_size = 0;  // bound to the tokenizer later
    t.context_length = cfg.get_int("backbone.context_length", 32);
    t.depth = cfg.get_int("backbone.text_depth", 4);
    t.width = cfg.get_int("backbone.text_width", 128);
    t.heads = cfg.get_int("backbone.text_heads", 4);
    t.embed_dim = cfg.get_int("backbone.embed_dim", 128);
    t.mlp_ratio = cfg.get_int("backbone.text_mlp_ratio", 2);
    return t;
}

namespace {
AdapterConfig adapter_config_common(const Config& cfg, int k_default, int depth,
                                    const char* count_key) {
    AdapterConfig a;
    a.count = std::min(cfg.get_int(count_key, k_default), depth);
    a.lambda = cfg.get_double("adapters.lambda", 0.1);
    a.act = adapter_activation_from_string(cfg.get_str("adapters.activation", "gelu"));
    a.norm = adapter_norm_from_string(cfg.get_str("adapters.norm", "l2"));
    return a;
}
}  // namespace

AdapterConfig text_adapter_config_from(const Config& cfg, int text_depth) {
    return adapter_config_common(cfg, 3, text_depth, "adapters.k_t");
}

AdapterConfig vision_adapter_config_from(const Config& cfg, int vision_depth) {
    return adapter_config_common(cfg, 6, vision_depth, "adapters.k_i");
}

DefectSpec defect_spec_from(const Config& cfg) {
    DefectSpec d;
    d.min_area_frac = cfg.get_double("data.defect_min_area", 0.01);
    d.max_area_frac = cfg.get_double("data.defect_max_area", 0.12);
    d.min_count = cfg.get_int("data.defect_min_count", 1);
    d.max_count = cfg.get_int("data.defect_max_count", 3);
    d.contrast_floor = cfg.get_double("data.defect_contrast_floor", 0.15);
    d.validate();
    return d;
}

SplitSpec split_spec_from(const Config& cfg) {
    SplitSpec s;
    s.train_classes = cfg.get_list("data.train_classes", default_train_class_ids());
    s.test_classes = cfg.get_list("data.test_classes", default_test_class_ids());
    std::string shots = cfg.get_str("data.shots", "16");
    s.shots = shots == "full" ? -1 : std::stoi(shots);
    s.full_shots = cfg.get_int("data.full_shots", 128);
    s.test_normal_per_class = cfg.get_int("data.test_normal_per_class", 16);
    s.test_anomaly_per_class = cfg.get_int("data.test_anomaly_per_class", 16);
    s.defects = defect_spec_from(cfg);
    s.validate();
    return s;
}

uint64_t run_seed_from(const Config& cfg) {
    return uint64_t(cfg.get_int("run.seed", 1));
}

PretrainConfig pretrain_config_from(const Config& cfg, uint64_t run_seed) {
    PretrainConfig p;
    p.epochs = cfg.get_int("pretrain.epochs", 30);
    p.batch_size = cfg.get_int("pretrain.batch_size", 64);
    p.lr = cfg.get_double("pretrain.lr", 3e-4);
    p.beta1 = cfg.get_double("pretrain.beta1", 0.9);
    p.beta2 = cfg.get_double("pretrain.beta2", 0.999);
    p.temperature = cfg.get_double("pretrain.temperature", 0.07);
    p.cosine_lr = cfg.get_bool("pretrain.cosine_lr", true);
    p.retrieval_pool = cfg.get_int("pretrain.retrieval_pool", 32);
    p.seed = mix_seed(run_seed, "pretrain");
    p.validate();
    return p;
}

StageConfig stage_config_from(const Config& cfg, int stage, uint64_t run_seed) {
    StageConfig s = StageConfig::defaults(stage);
    std::string sec = stage == 1 ? "stage1." : "stage2.";
    s.epochs = cfg.get_int(sec + "epochs", s.epochs);
    s.lr = cfg.get_double(sec + "lr", s.lr);
    s.batch_size = cfg.get_int(sec + "batch_size", s.batch_size);
    s.beta1 = cfg.get_double(sec + "beta1", 0.5);
    s.beta2 = cfg.get_double(sec + "beta2", 0.999);
    s.grad_clip = cfg.get_double(sec + "grad_clip", 1.0);
    s.epoch_multiplier = cfg.get_int(sec + "epoch_multiplier", 4);
    s.augment = cfg.get_bool(sec + "augment", true);
    s.weights.gamma = cfg.get_double("stage1.gamma", 0.1);
    s.weights.focal_gamma = cfg.get_double("losses.focal_gamma", 2.0);
    s.weights.focal_alpha = cfg.get_double("losses.focal_alpha", 0.25);
    s.weights.dice_smooth = cfg.get_double("losses.dice_smooth", 1.0);
    s.similarity = similarity_config_from(cfg);
    s.seed = mix_seed(run_seed, sec + "seed");
    s.validate();
    return s;
}

SimilarityConfig similarity_config_from(const Config& cfg) {
    SimilarityConfig sim;
    sim.temperature = cfg.get_double("eval.temperature", 0.07);
    sim.validate();
    return sim;
}

namespace {
std::string resolve(const std::string& path, const std::string& config_dir) {
    if (path.empty() || path[0] == '/') return path;
    if (fs::exists(path)) return path;
    fs::path joined = fs::path(config_dir) / path;
    if (fs::exists(joined)) return joined.string();
    return path;
}
}  // namespace

Inputs load_inputs(const Config& cfg, const std::string& config_dir) {
    Inputs in;
    std::string bank_path = cfg.get_str("prompts.bank", "");
    in.bank = bank_path.empty() ? PromptBank::default_bank()
                                : PromptBank::load(resolve(bank_path, config_dir));
    std::string pre_path = cfg.get_str("prompts.pretrain_bank", "");
    in.pretrain_bank = pre_path.empty() ? in.bank
                                        : PromptBank::load(resolve(pre_path, config_dir));

    std::vector<ClassSpec> builtin = default_class_specs();
    std::string reg_path = cfg.get_str("prompts.registry", "");
    if (reg_path.empty()) {
        in.specs = builtin;
    } else {
        ClassRegistry file_reg = ClassRegistry::load(resolve(reg_path, config_dir));
        for (const auto& [cid, desc] : file_reg.entries) {
            ClassSpec s = spec_of(builtin, cid);  // throws on unknown shape id
            s.description = desc;
            in.specs.push_back(std::move(s));
        }
    }
    in.registry = registry_from_specs(in.specs);
    return in;
}

Tokenizer build_vocabulary(const Inputs& inputs,
                           const std::vector<CaptionedSample>& corpus) {
    std::vector<std::string> texts;
    for (const auto& cs : corpus) texts.push_back(cs.caption);
    for (const auto& bank : {inputs.bank, inputs.pretrain_bank}) {
        for (const auto& [cid, desc] : inputs.registry.entries) {
            PromptSet ps = expand(desc, bank);
            texts.insert(texts.end(), ps.normal.begin(), ps.normal.end());
            texts.insert(texts.end(), ps.anomaly.begin(), ps.anomaly.end());
        }
    }
    return Tokenizer::build(texts);
}

RunLock::RunLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw std::runtime_error("run directory is locked (remove " + path_ +
                                 " if no other run is active)");
    ::close(fd);
}

RunLock::~RunLock() { ::unlink(path_.c_str()); }

void write_run_metadata(const std::string& out_dir, const std::string& command,
                        const Config& cfg, uint64_t seed, double wall_seconds) {
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = cfg.content_hash();
    j["seed"] = seed;
    j["wall_seconds"] = wall_seconds;
    std::ofstream f(fs::path(out_dir) / ("run_meta_" + command + ".json"));
    if (!f) throw std::runtime_error("cannot write run metadata in " + out_dir);
    f << j.dump(2) << "\n";
    cfg.save((fs::path(out_dir) / ("config_snapshot_" + command + ".ini")).string());
}

namespace {

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    }
};

std::string data_root(const Config& cfg, const std::string& out_dir) {
    std::string configured = cfg.get_str("data.root", "");
    return configured.empty() ? (fs::path(out_dir) / "data").string() : configured;
}

std::string checkpoint_dir(const std::string& out_dir) {
    std::string d = (fs::path(out_dir) / "checkpoints").string();
    fs::create_directories(d);
    return d;
}

std::string logs_dir(const std::string& out_dir) {
    std::string d = (fs::path(out_dir) / "logs").string();
    fs::create_directories(d);
    return d;
}

std::string reports_dir(const std::string& out_dir) {
    std::string d = (fs::path(out_dir) / "reports").string();
    fs::create_directories(d);
    return d;
}

std::vector<CaptionedSample> corpus_from_config(const Inputs& in, const Config& cfg,
                                                uint64_t run_seed, bool held_out) {
    int n = held_out ? cfg.get_int("data.corpus_holdout_per_class", 12)
                     : cfg.get_int("data.corpus_per_class", 80);
    double frac = cfg.get_double("data.corpus_anomaly_fraction", 0.2);
    uint64_t seed = mix_seed(run_seed, held_out ? "corpus.holdout" : "corpus.train");
    return caption_corpus(in.specs, in.pretrain_bank, n, frac, defect_spec_from(cfg), seed);
}

}  // namespace

void cmd_gen_data(const Config& cfg, const std::string& config_dir,
                  const std::string& out_dir) {
    Timer timer;
    RunLock lock(out_dir);
    Inputs in = load_inputs(cfg, config_dir);
    uint64_t seed = run_seed_from(cfg);
    SplitSpec split_spec = split_spec_from(cfg);
    Split split = make_split(in.specs, split_spec, mix_seed(seed, "split"));
    std::vector<LabeledSample> val = make_validation_slice(
        in.specs, split_spec.train_classes, cfg.get_int("data.val_per_class", 4),
        split_spec.defects, mix_seed(seed, "split"));

    std::string root = data_root(cfg, out_dir);
    save_dataset(root, "train_manifest.tsv", split.train);
    save_dataset(root, "test_manifest.tsv", split.test);
    save_dataset(root, "val_manifest.tsv", val);

    auto corpus = corpus_from_config(in, cfg, seed, false);
    auto held = corpus_from_config(in, cfg, seed, true);
    auto captions_of = [](const std::vector<CaptionedSample>& cs) {
        std::vector<std::string> out;
        for (const auto& c : cs) out.push_back(c.caption);
        return out;
    };
    auto samples_of = [](const std::vector<CaptionedSample>& cs) {
        std::vector<LabeledSample> out;
        for (const auto& c : cs) out.push_back(c.sample);
        return out;
    };
    std::vector<std::string> train_caps = captions_of(corpus);
    std::vector<std::string> held_caps = captions_of(held);
    save_dataset((fs::path(root) / "corpus").string(), "corpus_manifest.tsv",
                 samples_of(corpus), &train_caps);
    save_dataset((fs::path(root) / "corpus").string(), "corpus_holdout_manifest.tsv",
                 samples_of(held), &held_caps);

    in.bank.save((fs::path(root) / "prompt_bank.txt").string());
    in.pretrain_bank.save((fs::path(root) / "pretrain_bank.txt").string());
    in.registry.save((fs::path(root) / "class_registry.txt").string());
    write_run_metadata(out_dir, "gen-data", cfg, seed, timer.seconds());
}

namespace {

std::vector<CaptionedSample> load_corpus(const std::string& root,
                                         const std::string& manifest) {
    std::vector<std::string> captions;
    std::vector<LabeledSample> samples =
        load_dataset((fs::path(root) / "corpus").string(), manifest, &captions);
    std::vector<CaptionedSample> out;
    for (size_t i = 0; i < samples.size(); ++i)
        out.push_back({std::move(samples[i]), captions[i]});
    return out;
}

}  // namespace

void cmd_pretrain(const Config& cfg, const std::string& config_dir,
                  const std::string& out_dir) {
    Timer timer;
    RunLock lock(out_dir);
    Inputs in = load_inputs(cfg, config_dir);
    uint64_t seed = run_seed_from(cfg);
    std::string root = data_root(cfg, out_dir);
    auto corpus = load_corpus(root, "corpus_manifest.tsv");
    auto held = load_corpus(root, "corpus_holdout_manifest.tsv");

    Tokenizer tok = build_vocabulary(in, corpus);
    VisionEncoderSpec vs = vision_spec_from(cfg);
    TextEncoderSpec ts = text_spec_from(cfg);
    ts.vocab_size = tok.vocab_size();
    DualEncoder model(vs, ts, tok, mix_seed(seed, "init"));

    PretrainConfig pc = pretrain_config_from(cfg, seed);
    PretrainReport report = pretrain(model, corpus, held, in.registry, in.bank, pc,
                                     (fs::path(logs_dir(out_dir)) / "pretrain.jsonl").string());
    checkpoint::save_model((fs::path(checkpoint_dir(out_dir)) / "pretrain.ckpt").string(),
                           model, Stage::pretrain);
    write_pretrain_report(report,
                          (fs::path(reports_dir(out_dir)) / "pretrain_report.json").string());
    write_run_metadata(out_dir, "pretrain", cfg, seed, timer.seconds());
}

void cmd_adapt(const Config& cfg, const std::string& config_dir,
               const std::string& out_dir, int stage, const std::string& checkpoint_path) {
    Timer timer;
    RunLock lock(out_dir);
    Inputs in = load_inputs(cfg, config_dir);
    uint64_t seed = run_seed_from(cfg);
    std::string root = data_root(cfg, out_dir);
    auto train = load_dataset(root, "train_manifest.tsv");

    std::string ckpt = checkpoint_path;
    if (ckpt.empty()) {
        ckpt = (fs::path(checkpoint_dir(out_dir)) /
                (stage == 1 ? "pretrain.ckpt" : "stage1.ckpt"))
                   .string();
    }
    if (!fs::exists(ckpt))
        throw std::runtime_error(
            stage == 1 ? "stage 1 requires a pretrain checkpoint: " + ckpt
                       : "stage-1 anchors required: missing stage-1 checkpoint " + ckpt);
    auto model = checkpoint::load_model(ckpt);

    if (cfg.get_bool("training.one_stage", false)) {
        if (!model->text_adapted())
            model->attach_text_adapters(text_adapter_config_from(cfg, model->text_spec().depth),
                                        mix_seed(seed, "adapter.text"));
        if (!model->vision_adapted())
            model->attach_vision_adapters(
                vision_adapter_config_from(cfg, model->vision_spec().depth),
                mix_seed(seed, "adapter.vision"));
        if (!model->has_granularity_projectors())
            model->create_granularity_projectors(mix_seed(seed, "projectors"));
        StageConfig sc = stage_config_from(cfg, stage, seed);
        joint_train(*model, train, in.bank, in.registry, sc,
                    (fs::path(logs_dir(out_dir)) / "joint.jsonl").string());
        checkpoint::save_model((fs::path(checkpoint_dir(out_dir)) / "joint.ckpt").string(),
                               *model, Stage::stage2);
        write_run_metadata(out_dir, "adapt-joint", cfg, seed, timer.seconds());
        return;
    }

    if (stage == 1) {
        if (model->has_anchors() || model->text_adapted())
            throw std::runtime_error("stage 1 expects a pretrain checkpoint");
        model->attach_text_adapters(text_adapter_config_from(cfg, model->text_spec().depth),
                                    mix_seed(seed, "adapter.text"));
        StageConfig sc = stage_config_from(cfg, 1, seed);
        StageReport report =
            stage1_train(*model, train, in.bank, in.registry, sc,
                         (fs::path(logs_dir(out_dir)) / "stage1.jsonl").string());
        checkpoint::save_model((fs::path(checkpoint_dir(out_dir)) / "stage1.ckpt").string(),
                               *model, Stage::stage1);
        checkpoint::save_adapter_export(
            (fs::path(checkpoint_dir(out_dir)) / "stage1_adapters.ckpt").string(), *model,
            Stage::stage1);
        nlohmann::json j;
        j["steps"] = report.steps;
        j["final_loss"] = report.final_loss;
        j["frozen_ok"] = report.frozen_ok;
        j["frozen_digest"] = report.frozen_digest_after;
        for (const auto& [cid, v] : report.entanglement_before)
            j["entanglement_before"][cid] = v;
        for (const auto& [cid, v] : report.entanglement_after)
            j["entanglement_after"][cid] = v;
        std::ofstream f(fs::path(reports_dir(out_dir)) / "stage1_report.json");
        f << j.dump(2) << "\n";
    } else if (stage == 2) {
        if (!model->has_anchors())
            throw std::runtime_error(
                "stage-1 anchors required: checkpoint " + ckpt + " has none");
        auto val = load_dataset(root, "val_manifest.tsv");
        if (!model->vision_adapted())
            model->attach_vision_adapters(
                vision_adapter_config_from(cfg, model->vision_spec().depth),
                mix_seed(seed, "adapter.vision"));
        if (!model->has_granularity_projectors())
            model->create_granularity_projectors(mix_seed(seed, "projectors"));
        StageConfig sc = stage_config_from(cfg, 2, seed);
        StageReport report =
            stage2_train(*model, train, sc,
                         (fs::path(logs_dir(out_dir)) / "stage2.jsonl").string(), &val);
        checkpoint::save_model((fs::path(checkpoint_dir(out_dir)) / "stage2.ckpt").string(),
                               *model, Stage::stage2);
        checkpoint::save_adapter_export(
            (fs::path(checkpoint_dir(out_dir)) / "stage2_adapters.ckpt").string(), *model,
            Stage::stage2);
        nlohmann::json j;
        j["steps"] = report.steps;
        j["final_loss"] = report.final_loss;
        j["frozen_ok"] = report.frozen_ok;
        j["frozen_digest"] = report.frozen_digest_after;
        if (report.val_pixel_auroc_start)
            j["val_pixel_auroc_start"] = *report.val_pixel_auroc_start;
        if (report.val_pixel_auroc_end)
            j["val_pixel_auroc_end"] = *report.val_pixel_auroc_end;
        std::ofstream f(fs::path(reports_dir(out_dir)) / "stage2_report.json");
        f << j.dump(2) << "\n";
    } else {
        throw std::runtime_error("--stage must be 1 or 2");
    }
    write_run_metadata(out_dir, "adapt-stage" + std::to_string(stage), cfg, seed,
                       timer.seconds());
}

void cmd_eval(const Config& cfg, const std::string& config_dir, const std::string& out_dir,
              const std::string& checkpoint_path, const std::string& split) {
    Timer timer;
    RunLock lock(out_dir);
    Inputs in = load_inputs(cfg, config_dir);
    uint64_t seed = run_seed_from(cfg);
    std::string root = data_root(cfg, out_dir);

    std::string manifest;
    if (split == "test")
        manifest = "test_manifest.tsv";
    else if (split == "train")
        manifest = "train_manifest.tsv";
    else if (split == "val")
        manifest = "val_manifest.tsv";
    else
        throw std::runtime_error("--split must be one of test/train/val");
    auto dataset = load_dataset(root, manifest);

    Stage stage;
    auto model = checkpoint::load_model(checkpoint_path, &stage);
    SimilarityConfig sim = similarity_config_from(cfg);
    PatchFeatureMode mode = model->has_granularity_projectors()
                                ? PatchFeatureMode::multi_granularity
                                : PatchFeatureMode::native;

    // anchors: stored ones when available, recomputed otherwise (zero-shot)
    std::map<std::string, TextAnchors> anchors;
    std::set<std::string> classes;
    for (const auto& s : dataset) classes.insert(s.class_id);
    for (const auto& c : classes) {
        if (model->store().contains("anchors." + c + ".n")) {
            auto [t_n, t_a] = model->anchors_of(c);
            anchors[c] = TextAnchors{t_n, t_a, c};
        } else {
            anchors[c] = compute_anchors(c, in.registry, in.bank, *model);
        }
    }
    InferFn fn = [&](const LabeledSample& s) {
        return infer(*model, s.image, anchors.at(s.class_id), sim, mode);
    };
    MetricsRecord metrics = evaluate(fn, dataset);
    std::string rd = reports_dir(out_dir);
    write_metrics_report(metrics, (fs::path(rd) / ("eval_" + split + ".txt")).string(),
                         (fs::path(rd) / ("eval_" + split + ".json")).string(),
                         "evaluation on " + split + " split (" + to_string(stage) + ")");
    write_run_metadata(out_dir, "eval-" + split, cfg, seed, timer.seconds());
}

void cmd_infer(const Config& cfg, const std::string& config_dir, const std::string& out_dir,
               const std::string& checkpoint_path, const std::string& image_path,
               const std::string& class_id) {
    Timer timer;
    RunLock lock(out_dir);
    Inputs in = load_inputs(cfg, config_dir);
    auto model = checkpoint::load_model(checkpoint_path);
    SimilarityConfig sim = similarity_config_from(cfg);
    PatchFeatureMode mode = model->has_granularity_projectors()
                                ? PatchFeatureMode::multi_granularity
                                : PatchFeatureMode::native;
    Image img = read_ppm(image_path);

    TextAnchors anchors;
    if (model->store().contains("anchors." + class_id + ".n")) {
        auto [t_n, t_a] = model->anchors_of(class_id);
        anchors = TextAnchors{t_n, t_a, class_id};
    } else {
        anchors = compute_anchors(class_id, in.registry, in.bank, *model);
    }
    AnomalyPrediction pred = infer(*model, img, anchors, sim, mode);

    fs::path base = fs::path(out_dir) / fs::path(image_path).stem();
    write_pgm_gray(base.string() + "_anomaly_map.pgm", pred.anomaly_map());
    nlohmann::json j;
    j["anomaly_score"] = pred.anomaly_score();
    j["p_cls"] = {pred.p_cls(0), pred.p_cls(1)};
    j["class"] = class_id;
    std::ofstream f(base.string() + "_score.json");
    f << j.dump(2) << "\n";
    std::printf("anomaly_score %.6f (class %s)\n", pred.anomaly_score(), class_id.c_str());
    write_run_metadata(out_dir, "infer", cfg, run_seed_from(cfg), timer.seconds());
}

void cmd_export_diagnostics(const Config& cfg, const std::string& config_dir,
                            const std::string& out_dir,
                            const std::string& checkpoint_path) {
    Timer timer;
    RunLock lock(out_dir);
    Inputs in = load_inputs(cfg, config_dir);
    auto model = checkpoint::load_model(checkpoint_path);
    export_diagnostics(*model, in.registry.ids(), in.registry, in.bank,
                       (fs::path(out_dir) / "diagnostics").string());
    write_run_metadata(out_dir, "export-diagnostics", cfg, run_seed_from(cfg),
                       timer.seconds());
}

}  // namespace zsad::pipeline
