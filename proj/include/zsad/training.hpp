#pragma once

#include "zsad/eval.hpp"
#include "zsad/head.hpp"
#include "zsad/losses.hpp"
#include "zsad/prompts.hpp"
#include "zsad/synthdata.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace zsad {

struct StageConfig {
    int stage = 1;               // 1 or 2
    int epochs = 5;              // stage-1 default; stage 2 defaults to 20
    double lr = 1e-5;            // stage-1 default; stage 2 defaults to 5e-4
    int batch_size = 16;         // stage-1 default; stage 2 defaults to 2
    double beta1 = 0.5;
    double beta2 = 0.999;
    double grad_clip = 1.0;
    int epoch_multiplier = 4;    // desk-scale factor on the paper epoch counts
    bool augment = true;
    LossWeights weights;
    SimilarityConfig similarity;
    uint64_t seed = 0;

    static StageConfig defaults(int stage);
    void validate() const;
};

struct StageReport {
    int stage = 0;
    int steps = 0;
    double final_loss = 0.0;
    std::string frozen_digest_before;
    std::string frozen_digest_after;
    bool frozen_ok = false;
    // stage 1: mean |<T_N,T_A>| per class before/after over the full registry
    std::map<std::string, double> entanglement_before;
    std::map<std::string, double> entanglement_after;
    // stage 2: pixel AUROC on the seen-class validation slice at step 0 / end
    std::optional<double> val_pixel_auroc_start;
    std::optional<double> val_pixel_auroc_end;
};

// First adaptation stage: text adapters + text projector train against frozen
// visual features; anchors are recomputed from the live text encoder every
// step so gradients flow through them; all registry classes get their final
// anchors stored into the model afterwards.
StageReport stage1_train(DualEncoder& model, const std::vector<LabeledSample>& train_set,
                         const PromptBank& bank, const ClassRegistry& registry,
                         const StageConfig& cfg, const std::string& log_path = "");

// Second stage: vision adapters + granularity projectors train against the
// stored stage-1 anchors; text tower and anchors stay bit-identical.
StageReport stage2_train(DualEncoder& model, const std::vector<LabeledSample>& train_set,
                         const StageConfig& cfg, const std::string& log_path = "",
                         const std::vector<LabeledSample>* val_slice = nullptr);

// One-stage ablation: both towers adapt jointly under the full objective.
// Off by default in every config; kept for the ablation switch.
StageReport joint_train(DualEncoder& model, const std::vector<LabeledSample>& train_set,
                        const PromptBank& bank, const ClassRegistry& registry,
                        const StageConfig& cfg, const std::string& log_path = "");

}  // namespace zsad
