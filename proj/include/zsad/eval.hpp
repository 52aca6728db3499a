#pragma once

#include "zsad/head.hpp"
#include "zsad/synthdata.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace zsad {

// Mann-Whitney AUROC with midrank tie handling, computed by sorting.
// Throws when either class is absent (AUROC undefined).
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct ClassMetrics {
    std::optional<double> image_auroc;
    std::optional<double> pixel_auroc;
    int n_images = 0;
};

struct MetricsRecord {
    std::optional<double> image_auroc;
    std::optional<double> pixel_auroc;  // pooled over every pixel in the dataset
    std::map<std::string, ClassMetrics> per_class;
};

using InferFn = std::function<AnomalyPrediction(const LabeledSample&)>;

MetricsRecord evaluate(const InferFn& infer_fn, const std::vector<LabeledSample>& dataset);

// Zero-shot protocol: anchors for each held-out class are computed fresh from
// the (possibly adapted) text encoder; no optimizer step ever sees these
// classes. Refuses overlapping train/test class sets.
MetricsRecord zero_shot_protocol(DualEncoder& model, const std::vector<LabeledSample>& test_set,
                                 const std::vector<std::string>& train_classes,
                                 const ClassRegistry& registry, const PromptBank& bank,
                                 const SimilarityConfig& cfg, PatchFeatureMode mode);

// Writes (a) the pairwise cosine matrix over every prompt embedding of the
// given classes with row labels, (b) the raw embeddings with class/state tags
// for external projection tooling.
void export_diagnostics(DualEncoder& model, const std::vector<std::string>& class_ids,
                        const ClassRegistry& registry, const PromptBank& bank,
                        const std::string& out_dir);

void write_metrics_report(const MetricsRecord& metrics, const std::string& text_path,
                          const std::string& json_path, const std::string& title);

}  // namespace zsad
