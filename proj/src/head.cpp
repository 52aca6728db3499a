#include "zsad/head.hpp"

#include <cmath>
#include <stdexcept>

namespace zsad {

void SimilarityConfig::validate() const {
    if (!(temperature > 0.0))
        throw std::invalid_argument("similarity temperature must be positive");
}

Eigen::MatrixXd AnomalyPrediction::anomaly_map() const {
    Eigen::MatrixXd m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m(y, x) = p_seg(Eigen::Index(y) * w + x, 1);
    return m;
}

void AnomalyPrediction::validate() const {
    if (!p_cls.allFinite() || !p_seg.allFinite())
        throw std::runtime_error("prediction contains non-finite values");
    if (std::abs(p_cls.sum() - 1.0) > 1e-5)
        throw std::runtime_error("p_cls does not sum to 1");
    for (Eigen::Index r = 0; r < p_seg.rows(); ++r)
        if (std::abs(p_seg.row(r).sum() - 1.0) > 1e-5)
            throw std::runtime_error("p_seg row does not sum to 1");
}

ag::Ref aggregate_patches(ag::Graph& g, DualEncoder& model,
                          const std::vector<ag::Ref>& taps) {
    if (taps.size() != 4)
        throw std::invalid_argument("aggregate_patches expects exactly 4 tap tensors");
    if (!model.has_granularity_projectors())
        throw std::logic_error("granularity projectors have not been created");
    ag::Ref sum;
    for (int i = 0; i < 4; ++i) {
        ag::Ref proj = g.param(model.store().at(DualEncoder::projector_name(i + 1)));
        ag::Ref v = ag::matmul_nt(taps[size_t(i)], proj);
        sum = i == 0 ? v : ag::add(sum, v);
    }
    return ag::l2normalize_rows(sum);
}

namespace {
ag::Ref cosine_softmax(ag::Graph& g, ag::Ref feats, ag::Ref t_n, ag::Ref t_a,
                       double temperature) {
    ag::Ref anchors = ag::concat_rows({t_n, t_a});      // 2 x d
    ag::Ref logits = ag::matmul_nt(feats, anchors);     // rows x 2
    return ag::softmax_rows(ag::scale(logits, 1.0 / temperature));
}
}  // namespace

ag::Ref classify_ref(ag::Graph& g, ag::Ref v_image, ag::Ref t_n, ag::Ref t_a,
                     const SimilarityConfig& cfg) {
    cfg.validate();
    if (!v_image.value().allFinite())
        throw std::invalid_argument("classify: non-finite input");
    return cosine_softmax(g, v_image, t_n, t_a, cfg.temperature);
}

ag::Ref segment_ref(ag::Graph& g, ag::Ref v_patch, ag::Ref t_n, ag::Ref t_a,
                    const SimilarityConfig& cfg, const ag::BilinearUpsampler& up) {
    cfg.validate();
    Eigen::Index n = v_patch.value().rows();
    int grid = int(std::lround(std::sqrt(double(n))));
    if (Eigen::Index(grid) * grid != n)
        throw std::invalid_argument("segment: patch count is not a perfect square");
    if (up.grid != grid)
        throw std::invalid_argument("segment: upsampler grid mismatch");
    ag::Ref p = cosine_softmax(g, v_patch, t_n, t_a, cfg.temperature);  // N x 2
    ag::Ref u = ag::upsample(p, up);                                    // HW x 2
    // bilinear mixing preserves row sums only approximately at the borders;
    // renormalise to restore the per-pixel invariant
    ag::Ref s = ag::matmul(u, u.g->constant(Mat::Ones(2, 1)));
    return ag::div_colvec(u, s);
}

Eigen::Vector2d classify(const Eigen::RowVectorXd& v_image, const TextAnchors& anchors,
                         const SimilarityConfig& cfg) {
    ag::Graph g(false);
    ag::Ref v = g.constant(v_image);
    ag::Ref p = classify_ref(g, v, g.constant(anchors.t_n), g.constant(anchors.t_a), cfg);
    return p.value().row(0).transpose();
}

Mat segment(const Mat& v_patch, const TextAnchors& anchors, const SimilarityConfig& cfg,
            int out_h, int out_w) {
    Eigen::Index n = v_patch.rows();
    int grid = int(std::lround(std::sqrt(double(n))));
    if (Eigen::Index(grid) * grid != n)
        throw std::invalid_argument("segment: patch count is not a perfect square");
    if (out_h < grid || out_w < grid)
        throw std::invalid_argument("segment: output must be at least grid size");
    ag::Graph g(false);
    ag::BilinearUpsampler up(grid, out_h, out_w);
    ag::Ref p = segment_ref(g, g.constant(v_patch), g.constant(anchors.t_n),
                            g.constant(anchors.t_a), cfg, up);
    return p.value();
}

AnomalyPrediction infer(DualEncoder& model, const Image& image, const TextAnchors& anchors,
                        const SimilarityConfig& cfg, PatchFeatureMode mode) {
    ag::Graph g(false);
    auto out = model.encode_image(g, image);
    ag::Ref t_n = g.constant(anchors.t_n);
    ag::Ref t_a = g.constant(anchors.t_a);
    ag::Ref v_patch = mode == PatchFeatureMode::multi_granularity
                          ? aggregate_patches(g, model, out.taps)
                          : out.patch_projected;
    int hw = model.vision_spec().image_size;
    ag::BilinearUpsampler up(model.vision_spec().grid(), hw, hw);
    ag::Ref p_cls = classify_ref(g, out.v_image, t_n, t_a, cfg);
    ag::Ref p_seg = segment_ref(g, v_patch, t_n, t_a, cfg, up);

    AnomalyPrediction pred;
    pred.p_cls = p_cls.value().row(0).transpose();
    pred.p_seg = p_seg.value();
    pred.h = hw;
    pred.w = hw;
    pred.validate();
    return pred;
}

}  // namespace zsad
