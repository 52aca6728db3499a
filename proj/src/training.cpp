#include "zsad/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace zsad {

StageConfig StageConfig::defaults(int stage) {
    StageConfig cfg;
    cfg.stage = stage;
    if (stage == 1) {
        cfg.epochs = 5;
        cfg.lr = 1e-5;
        cfg.batch_size = 16;
    } else if (stage == 2) {
        cfg.epochs = 20;
        cfg.lr = 5e-4;
        cfg.batch_size = 2;
    } else {
        throw std::invalid_argument("stage must be 1 or 2");
    }
    return cfg;
}

void StageConfig::validate() const {
    if (stage != 1 && stage != 2) throw std::invalid_argument("stage must be 1 or 2");
    if (epochs < 1 || batch_size < 1 || epoch_multiplier < 1)
        throw std::invalid_argument("bad stage config");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    weights.validate();
    similarity.validate();
}

namespace {

struct StepLogger {
    std::ofstream file;
    explicit StepLogger(const std::string& path) {
        if (!path.empty()) {
            file.open(path);
            if (!file) throw std::runtime_error("cannot write training log: " + path);
        }
    }
    void log(int step, const LossBreakdown& b) {
        if (!file.is_open()) return;
        nlohmann::json j{{"step", step},          {"bce", b.bce},
                         {"dice", b.dice},        {"focal", b.focal},
                         {"disentangle", b.disentangle}, {"total", b.total}};
        file << j.dump() << "\n";
    }
};

std::map<std::string, double> measure_entanglement(DualEncoder& model,
                                                   const ClassRegistry& registry,
                                                   const PromptBank& bank) {
    std::map<std::string, double> out;
    for (const auto& [cid, desc] : registry.entries) {
        TextAnchors a = compute_anchors(cid, registry, bank, model);
        out[cid] = std::abs(a.t_n.dot(a.t_a));
    }
    return out;
}

struct FrozenVisuals {
    Mat v_image;      // 1 x d
    Mat patch_feats;  // N x d (backbone-projected, unit rows)
};

FrozenVisuals frozen_visual_features(DualEncoder& model, const Image& img) {
    ag::Graph g(false);
    auto out = model.encode_image(g, img);
    return {out.v_image.value(), out.patch_projected.value()};
}

LabeledSample maybe_augment(const LabeledSample& s, const StageConfig& cfg, int step,
                            size_t index_in_batch) {
    if (!cfg.augment) return s;
    return augment(s, mix_seed(cfg.seed, uint64_t(step), uint64_t(index_in_batch)));
}

void check_finite(double loss, int step) {
    if (!std::isfinite(loss))
        throw std::runtime_error("training aborted: non-finite loss at step " +
                                 std::to_string(step));
}

std::optional<double> val_pixel_auroc(DualEncoder& model,
                                      const std::vector<LabeledSample>* val_slice,
                                      const SimilarityConfig& sim) {
    if (val_slice == nullptr || val_slice->empty()) return std::nullopt;
    InferFn fn = [&](const LabeledSample& s) {
        auto [t_n, t_a] = model.anchors_of(s.class_id);
        TextAnchors anchors{t_n, t_a, s.class_id};
        return infer(model, s.image, anchors, sim, PatchFeatureMode::multi_granularity);
    };
    return evaluate(fn, *val_slice).pixel_auroc;
}

}  // namespace

StageReport stage1_train(DualEncoder& model, const std::vector<LabeledSample>& train_set,
                         const PromptBank& bank, const ClassRegistry& registry,
                         const StageConfig& cfg, const std::string& log_path) {
    cfg.validate();
    if (cfg.stage != 1) throw std::invalid_argument("stage1_train got a stage-2 config");
    if (!model.text_adapted())
        throw std::logic_error("stage 1 requires text adapters attached");
    if (train_set.empty()) throw std::invalid_argument("empty training set");
    for (const auto& s : train_set)
        if (!registry.contains(s.class_id))
            throw std::invalid_argument("training sample class not in registry: " +
                                        s.class_id);

    model.apply_partition(Stage::stage1);
    ParameterPartition part = model.partition_parameters(Stage::stage1);
    StageReport report;
    report.stage = 1;
    report.frozen_digest_before = digest_params(model.store(), part.frozen);
    report.entanglement_before = measure_entanglement(model, registry, bank);

    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.beta1 = cfg.beta1;
    ac.beta2 = cfg.beta2;
    ac.clip_norm = cfg.grad_clip;
    Adam opt(model.store(), ac);
    StepLogger logger(log_path);

    int up_h = model.vision_spec().image_size;
    ag::BilinearUpsampler up(model.vision_spec().grid(), up_h, up_h);

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    int total_epochs = cfg.epochs * cfg.epoch_multiplier;
    int step = 0;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, "stage1.epoch", uint64_t(epoch)));
        shuffle_rng.shuffle(order);
        for (size_t bstart = 0; bstart < order.size(); bstart += size_t(cfg.batch_size)) {
            size_t bend = std::min(order.size(), bstart + size_t(cfg.batch_size));
            std::vector<LabeledSample> batch;
            for (size_t i = bstart; i < bend; ++i)
                batch.push_back(maybe_augment(train_set[order[i]], cfg, step, i - bstart));

            // one tape per step: anchor subgraphs (trainable text) feed every
            // sample's loss; visual features enter as frozen constants
            ag::Graph g(true);
            std::set<std::string> classes;
            for (const auto& s : batch) classes.insert(s.class_id);
            std::map<std::string, AnchorRefs> anchors;
            for (const auto& cid : classes)
                anchors[cid] =
                    compute_anchor_refs(g, model, registry.description(cid), bank);

            double inv_b = 1.0 / double(batch.size());
            ag::Ref total;
            LossBreakdown mean{};
            for (const auto& s : batch) {
                FrozenVisuals vis = frozen_visual_features(model, s.image);
                const AnchorRefs& ar = anchors.at(s.class_id);
                ag::Ref p_cls = classify_ref(g, g.constant(vis.v_image), ar.t_n, ar.t_a,
                                             cfg.similarity);
                ag::Ref p_seg = segment_ref(g, g.constant(vis.patch_feats), ar.t_n, ar.t_a,
                                            cfg.similarity, up);
                Mat mask_flat = flatten_mask(s.mask);
                ag::Ref l_bce = bce_ref(g, p_cls, s.label);
                ag::Ref l_dice = dice_ref(g, ag::slice_cols(p_seg, 1, 1), mask_flat,
                                          cfg.weights.dice_smooth);
                ag::Ref l_focal = focal_ref(g, p_seg, mask_flat, cfg.weights);
                ag::Ref l_dis = disentangle_ref(g, ar.t_n, ar.t_a);
                ag::Ref sample_loss = ag::add(
                    ag::add(l_bce, ag::add(l_dice, l_focal)),
                    ag::scale(l_dis, cfg.weights.gamma));
                total = total ? ag::add(total, sample_loss) : sample_loss;
                mean.bce += l_bce.value()(0, 0) * inv_b;
                mean.dice += l_dice.value()(0, 0) * inv_b;
                mean.focal += l_focal.value()(0, 0) * inv_b;
                mean.disentangle += l_dis.value()(0, 0) * inv_b;
            }
            total = ag::scale(total, inv_b);
            mean.total = total.value()(0, 0);
            check_finite(mean.total, step);

            model.store().zero_grads();
            g.backward(total);
            g.collect_param_grads();
            opt.step();
            logger.log(step, mean);
            report.final_loss = mean.total;
            ++step;
        }
    }
    report.steps = step;

    // final anchors for every registered class, frozen into the model
    for (const auto& [cid, desc] : registry.entries) {
        TextAnchors a = compute_anchors(cid, registry, bank, model);
        model.store_anchors(cid, a.t_n, a.t_a);
    }
    report.entanglement_after = measure_entanglement(model, registry, bank);

    // anchors.* parameters did not exist when the partition was taken; the
    // freezing contract covers the original frozen set
    report.frozen_digest_after = digest_params(model.store(), part.frozen);
    report.frozen_ok = report.frozen_digest_before == report.frozen_digest_after;
    if (!report.frozen_ok)
        throw std::runtime_error("stage 1 freeze contract violated: frozen digest drifted");
    return report;
}

StageReport stage2_train(DualEncoder& model, const std::vector<LabeledSample>& train_set,
                         const StageConfig& cfg, const std::string& log_path,
                         const std::vector<LabeledSample>* val_slice) {
    cfg.validate();
    if (cfg.stage != 2) throw std::invalid_argument("stage2_train got a stage-1 config");
    if (!model.has_anchors())
        throw std::logic_error(
            "stage-1 anchors required: run the first adaptation stage before stage 2");
    if (!model.vision_adapted())
        throw std::logic_error("stage 2 requires vision adapters attached");
    if (!model.has_granularity_projectors())
        throw std::logic_error("stage 2 requires granularity projectors");
    if (train_set.empty()) throw std::invalid_argument("empty training set");
    for (const auto& s : train_set)
        if (!model.store().contains("anchors." + s.class_id + ".n"))
            throw std::logic_error("no stored anchors for training class " + s.class_id);

    model.apply_partition(Stage::stage2);
    ParameterPartition part = model.partition_parameters(Stage::stage2);
    StageReport report;
    report.stage = 2;
    report.frozen_digest_before = digest_params(model.store(), part.frozen);
    report.val_pixel_auroc_start = val_pixel_auroc(model, val_slice, cfg.similarity);

    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.beta1 = cfg.beta1;
    ac.beta2 = cfg.beta2;
    ac.clip_norm = cfg.grad_clip;
    Adam opt(model.store(), ac);
    StepLogger logger(log_path);

    int up_h = model.vision_spec().image_size;
    ag::BilinearUpsampler up(model.vision_spec().grid(), up_h, up_h);

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    int total_epochs = cfg.epochs * cfg.epoch_multiplier;
    int step = 0;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, "stage2.epoch", uint64_t(epoch)));
        shuffle_rng.shuffle(order);
        for (size_t bstart = 0; bstart < order.size(); bstart += size_t(cfg.batch_size)) {
            size_t bend = std::min(order.size(), bstart + size_t(cfg.batch_size));
            double inv_b = 1.0 / double(bend - bstart);

            model.store().zero_grads();
            LossBreakdown mean{};
            for (size_t i = bstart; i < bend; ++i) {
                LabeledSample s = maybe_augment(train_set[order[i]], cfg, step, i - bstart);
                auto [t_n_v, t_a_v] = model.anchors_of(s.class_id);

                // per-sample tape; anchors are constants here
                ag::Graph g(true);
                auto enc = model.encode_image(g, s.image);
                ag::Ref t_n = g.constant(t_n_v);
                ag::Ref t_a = g.constant(t_a_v);
                ag::Ref v_patch = aggregate_patches(g, model, enc.taps);
                ag::Ref p_cls = classify_ref(g, enc.v_image, t_n, t_a, cfg.similarity);
                ag::Ref p_seg = segment_ref(g, v_patch, t_n, t_a, cfg.similarity, up);
                Mat mask_flat = flatten_mask(s.mask);
                ag::Ref l_bce = bce_ref(g, p_cls, s.label);
                ag::Ref l_dice = dice_ref(g, ag::slice_cols(p_seg, 1, 1), mask_flat,
                                          cfg.weights.dice_smooth);
                ag::Ref l_focal = focal_ref(g, p_seg, mask_flat, cfg.weights);
                ag::Ref sample_loss = ag::scale(
                    ag::add(l_bce, ag::add(l_dice, l_focal)), inv_b);
                mean.bce += l_bce.value()(0, 0) * inv_b;
                mean.dice += l_dice.value()(0, 0) * inv_b;
                mean.focal += l_focal.value()(0, 0) * inv_b;
                g.backward(sample_loss);
                g.collect_param_grads();
            }
            mean.total = mean.bce + mean.dice + mean.focal;
            check_finite(mean.total, step);
            opt.step();
            logger.log(step, mean);
            report.final_loss = mean.total;
            ++step;
        }
    }
    report.steps = step;
    report.val_pixel_auroc_end = val_pixel_auroc(model, val_slice, cfg.similarity);

    report.frozen_digest_after = digest_params(model.store(), part.frozen);
    report.frozen_ok = report.frozen_digest_before == report.frozen_digest_after;
    if (!report.frozen_ok)
        throw std::runtime_error("stage 2 freeze contract violated: frozen digest drifted");
    return report;
}

StageReport joint_train(DualEncoder& model, const std::vector<LabeledSample>& train_set,
                        const PromptBank& bank, const ClassRegistry& registry,
                        const StageConfig& cfg, const std::string& log_path) {
    cfg.validate();
    if (!model.text_adapted() || !model.vision_adapted() ||
        !model.has_granularity_projectors())
        throw std::logic_error("joint training needs both adapter stacks and projectors");
    if (train_set.empty()) throw std::invalid_argument("empty training set");

    // trainable set is the union of both stage partitions
    std::set<std::string> trainable;
    for (const auto& n : model.store().names())
        if (n.rfind("adapter.", 0) == 0 || n == "text.proj" || n.rfind("head.proj.", 0) == 0)
            trainable.insert(n);
    model.store().set_trainable(trainable);
    std::set<std::string> frozen;
    for (const auto& n : model.store().names())
        if (!trainable.count(n)) frozen.insert(n);

    StageReport report;
    report.stage = 0;
    report.frozen_digest_before = digest_params(model.store(), frozen);
    report.entanglement_before = measure_entanglement(model, registry, bank);

    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.beta1 = cfg.beta1;
    ac.beta2 = cfg.beta2;
    ac.clip_norm = cfg.grad_clip;
    Adam opt(model.store(), ac);
    StepLogger logger(log_path);

    int up_h = model.vision_spec().image_size;
    ag::BilinearUpsampler up(model.vision_spec().grid(), up_h, up_h);

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    int total_epochs = cfg.epochs * cfg.epoch_multiplier;
    int step = 0;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, "joint.epoch", uint64_t(epoch)));
        shuffle_rng.shuffle(order);
        for (size_t bstart = 0; bstart < order.size(); bstart += size_t(cfg.batch_size)) {
            size_t bend = std::min(order.size(), bstart + size_t(cfg.batch_size));
            std::vector<LabeledSample> batch;
            for (size_t i = bstart; i < bend; ++i)
                batch.push_back(maybe_augment(train_set[order[i]], cfg, step, i - bstart));

            ag::Graph g(true);
            std::set<std::string> classes;
            for (const auto& s : batch) classes.insert(s.class_id);
            std::map<std::string, AnchorRefs> anchors;
            for (const auto& cid : classes)
                anchors[cid] =
                    compute_anchor_refs(g, model, registry.description(cid), bank);

            double inv_b = 1.0 / double(batch.size());
            ag::Ref total;
            LossBreakdown mean{};
            for (const auto& s : batch) {
                auto enc = model.encode_image(g, s.image);
                const AnchorRefs& ar = anchors.at(s.class_id);
                ag::Ref v_patch = aggregate_patches(g, model, enc.taps);
                ag::Ref p_cls = classify_ref(g, enc.v_image, ar.t_n, ar.t_a, cfg.similarity);
                ag::Ref p_seg = segment_ref(g, v_patch, ar.t_n, ar.t_a, cfg.similarity, up);
                Mat mask_flat = flatten_mask(s.mask);
                ag::Ref l_bce = bce_ref(g, p_cls, s.label);
                ag::Ref l_dice = dice_ref(g, ag::slice_cols(p_seg, 1, 1), mask_flat,
                                          cfg.weights.dice_smooth);
                ag::Ref l_focal = focal_ref(g, p_seg, mask_flat, cfg.weights);
                ag::Ref l_dis = disentangle_ref(g, ar.t_n, ar.t_a);
                ag::Ref sample_loss =
                    ag::add(ag::add(l_bce, ag::add(l_dice, l_focal)),
                            ag::scale(l_dis, cfg.weights.gamma));
                total = total ? ag::add(total, sample_loss) : sample_loss;
                mean.bce += l_bce.value()(0, 0) * inv_b;
                mean.dice += l_dice.value()(0, 0) * inv_b;
                mean.focal += l_focal.value()(0, 0) * inv_b;
                mean.disentangle += l_dis.value()(0, 0) * inv_b;
            }
            total = ag::scale(total, inv_b);
            mean.total = total.value()(0, 0);
            check_finite(mean.total, step);

            model.store().zero_grads();
            g.backward(total);
            g.collect_param_grads();
            opt.step();
            logger.log(step, mean);
            report.final_loss = mean.total;
            ++step;
        }
    }
    report.steps = step;
    for (const auto& [cid, desc] : registry.entries) {
        TextAnchors a = compute_anchors(cid, registry, bank, model);
        model.store_anchors(cid, a.t_n, a.t_a);
    }
    report.entanglement_after = measure_entanglement(model, registry, bank);
    report.frozen_digest_after = digest_params(model.store(), frozen);
    report.frozen_ok = report.frozen_digest_before == report.frozen_digest_after;
    if (!report.frozen_ok)
        throw std::runtime_error("joint training freeze contract violated");
    return report;
}

}  // namespace zsad
