#pragma once

#include "zsad/graph.hpp"
#include "zsad/prompts.hpp"

namespace zsad {

struct LossWeights {
    double gamma = 0.1;        // disentangle weight
    double focal_gamma = 2.0;  // focusing exponent
    double focal_alpha = 0.25; // anomaly-class balance weight
    double dice_smooth = 1.0;

    void validate() const;
};

struct LossBreakdown {
    double bce = 0.0;
    double dice = 0.0;
    double focal = 0.0;
    double disentangle = 0.0;
    double total = 0.0;
};

// Graph builders; every result is a 1x1 scalar node. Probability inputs are
// clamped with eps=1e-7 inside logarithms.
ag::Ref bce_ref(ag::Graph& g, ag::Ref p_cls, int y);
ag::Ref dice_ref(ag::Graph& g, ag::Ref p_anomaly, const Mat& mask_flat, double smooth);
ag::Ref focal_ref(ag::Graph& g, ag::Ref p_seg, const Mat& mask_flat,
                  const LossWeights& w);
ag::Ref disentangle_ref(ag::Graph& g, ag::Ref t_n, ag::Ref t_a);

// Plain-value forms. Segmentation maps use the pixel-major (H*W) x 2 layout;
// masks are H x W binary matrices.
double bce_loss(const Eigen::Vector2d& p_cls, int y);
double dice_loss(const Eigen::MatrixXd& p_anomaly, const Eigen::MatrixXd& mask,
                 double smooth = 1.0);
double focal_loss(const Mat& p_seg, const Eigen::MatrixXd& mask, const LossWeights& w);
double disentangle_loss(const Eigen::RowVectorXd& t_n, const Eigen::RowVectorXd& t_a);

// total = bce + dice + focal + gamma * disentangle. The anchors pointer may
// be null (second-stage objective: anchors frozen, disentangle term absent).
LossBreakdown total_loss(const Eigen::Vector2d& p_cls, int y, const Mat& p_seg,
                         const Eigen::MatrixXd& mask, const TextAnchors* anchors,
                         const LossWeights& w);

// flattens an H x W mask into (H*W) x 1 pixel-major order
Mat flatten_mask(const Eigen::MatrixXd& mask);

}  // namespace zsad
