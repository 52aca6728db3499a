#pragma once

#include "zsad/backbone.hpp"
#include "zsad/prompts.hpp"

#include <optional>

namespace zsad {

struct SimilarityConfig {
    double temperature = 0.07;  // softmax logits are cosine / temperature

    void validate() const;
};

// Output of one inference pass. p_cls sums to 1; every row of p_seg
// (pixel-major, columns = [normal, anomaly]) sums to 1.
struct AnomalyPrediction {
    Eigen::Vector2d p_cls;
    Mat p_seg;  // (H*W) x 2
    int h = 0, w = 0;

    double anomaly_score() const { return p_cls(1); }
    Eigen::MatrixXd anomaly_map() const;  // H x W
    void validate() const;
};

enum class PatchFeatureMode {
    native,             // final-layer patch tokens through the backbone head
    multi_granularity,  // tap features through the trainable projectors
};

// V_patch = row-normalised sum of projected tap features.
ag::Ref aggregate_patches(ag::Graph& g, DualEncoder& model,
                          const std::vector<ag::Ref>& taps);

// Two-channel temperature softmax over cosines against (T_N, T_A).
ag::Ref classify_ref(ag::Graph& g, ag::Ref v_image, ag::Ref t_n, ag::Ref t_a,
                     const SimilarityConfig& cfg);
// Per-patch softmax, reshape to the patch grid, bilinear upsample to H x W,
// renormalise pixelwise.
ag::Ref segment_ref(ag::Graph& g, ag::Ref v_patch, ag::Ref t_n, ag::Ref t_a,
                    const SimilarityConfig& cfg, const ag::BilinearUpsampler& up);

// Plain-value entry points.
Eigen::Vector2d classify(const Eigen::RowVectorXd& v_image, const TextAnchors& anchors,
                         const SimilarityConfig& cfg);
Mat segment(const Mat& v_patch, const TextAnchors& anchors, const SimilarityConfig& cfg,
            int out_h, int out_w);

// Full inference: encode, aggregate (mode-dependent), classify + segment.
AnomalyPrediction infer(DualEncoder& model, const Image& image, const TextAnchors& anchors,
                        const SimilarityConfig& cfg, PatchFeatureMode mode);

}  // namespace zsad
