#include "zsad/losses.hpp"

#include <stdexcept>

namespace zsad {

namespace {
constexpr double kLogEps = 1e-7;

void check_binary(const Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            if (m(r, c) != 0.0 && m(r, c) != 1.0)
                throw std::invalid_argument("mask must be binary");
}
}  // namespace

void LossWeights::validate() const {
    if (gamma < 0 || focal_gamma < 0 || focal_alpha < 0 || dice_smooth < 0)
        throw std::invalid_argument("loss weights must be non-negative");
}

Mat flatten_mask(const Eigen::MatrixXd& mask) {
    Mat out(mask.rows() * mask.cols(), 1);
    for (Eigen::Index y = 0; y < mask.rows(); ++y)
        for (Eigen::Index x = 0; x < mask.cols(); ++x)
            out(y * mask.cols() + x, 0) = mask(y, x);
    return out;
}

ag::Ref bce_ref(ag::Graph& g, ag::Ref p_cls, int y) {
    if (p_cls.value().rows() != 1 || p_cls.value().cols() != 2)
        throw std::invalid_argument("bce: p_cls must be 1x2");
    if (y != 0 && y != 1) throw std::invalid_argument("bce: label must be 0 or 1");
    ag::Ref p = ag::slice_cols(p_cls, y, 1);
    return ag::scale(ag::log_(ag::clamp(p, kLogEps, 1.0 - kLogEps)), -1.0);
}

ag::Ref dice_ref(ag::Graph& g, ag::Ref p_anomaly, const Mat& mask_flat, double smooth) {
    if (p_anomaly.value().rows() != mask_flat.rows() || p_anomaly.value().cols() != 1)
        throw std::invalid_argument("dice: prediction/mask shape mismatch");
    check_binary(mask_flat);
    ag::Ref s = g.constant(mask_flat);
    ag::Ref inter = ag::sum_all(ag::hadamard(p_anomaly, s));
    ag::Ref num = ag::add_scalar(ag::scale(inter, 2.0), smooth);
    ag::Ref den = ag::add_scalar(ag::sum_all(p_anomaly), mask_flat.sum() + smooth);
    ag::Ref ratio = ag::hadamard(num, ag::pow_const(den, -1.0));
    return ag::add_scalar(ag::scale(ratio, -1.0), 1.0);
}

ag::Ref focal_ref(ag::Graph& g, ag::Ref p_seg, const Mat& mask_flat,
                  const LossWeights& w) {
    w.validate();
    if (p_seg.value().rows() != mask_flat.rows() || p_seg.value().cols() != 2)
        throw std::invalid_argument("focal: prediction/mask shape mismatch");
    check_binary(mask_flat);
    Mat inv = Mat::Ones(mask_flat.rows(), 1) - mask_flat;
    Mat alpha_t = w.focal_alpha * mask_flat + (1.0 - w.focal_alpha) * inv;
    ag::Ref pt = ag::add(ag::hadamard(ag::slice_cols(p_seg, 1, 1), g.constant(mask_flat)),
                         ag::hadamard(ag::slice_cols(p_seg, 0, 1), g.constant(inv)));
    ag::Ref neg_log = ag::scale(ag::log_(ag::clamp(pt, kLogEps, 1.0)), -1.0);
    ag::Ref focus = ag::pow_const(ag::add_scalar(ag::scale(pt, -1.0), 1.0), w.focal_gamma);
    return ag::mean_all(ag::hadamard(g.constant(alpha_t), ag::hadamard(focus, neg_log)));
}

ag::Ref disentangle_ref(ag::Graph& g, ag::Ref t_n, ag::Ref t_a) {
    (void)g;
    ag::Ref ip = ag::matmul_nt(t_n, t_a);
    return ag::hadamard(ip, ip);
}

double bce_loss(const Eigen::Vector2d& p_cls, int y) {
    ag::Graph g(false);
    return bce_ref(g, g.constant(p_cls.transpose()), y).value()(0, 0);
}

double dice_loss(const Eigen::MatrixXd& p_anomaly, const Eigen::MatrixXd& mask,
                 double smooth) {
    if (p_anomaly.rows() != mask.rows() || p_anomaly.cols() != mask.cols())
        throw std::invalid_argument("dice: prediction/mask shape mismatch");
    ag::Graph g(false);
    return dice_ref(g, g.constant(flatten_mask(p_anomaly)), flatten_mask(mask), smooth)
        .value()(0, 0);
}

double focal_loss(const Mat& p_seg, const Eigen::MatrixXd& mask, const LossWeights& w) {
    if (p_seg.rows() != mask.rows() * mask.cols())
        throw std::invalid_argument("focal: prediction/mask shape mismatch");
    ag::Graph g(false);
    return focal_ref(g, g.constant(p_seg), flatten_mask(mask), w).value()(0, 0);
}

double disentangle_loss(const Eigen::RowVectorXd& t_n, const Eigen::RowVectorXd& t_a) {
    double ip = t_n.dot(t_a);
    return ip * ip;
}

LossBreakdown total_loss(const Eigen::Vector2d& p_cls, int y, const Mat& p_seg,
                         const Eigen::MatrixXd& mask, const TextAnchors* anchors,
                         const LossWeights& w) {
    w.validate();
    LossBreakdown b;
    b.bce = bce_loss(p_cls, y);
    Eigen::MatrixXd p_anom(mask.rows(), mask.cols());
    for (Eigen::Index yy = 0; yy < mask.rows(); ++yy)
        for (Eigen::Index xx = 0; xx < mask.cols(); ++xx)
            p_anom(yy, xx) = p_seg(yy * mask.cols() + xx, 1);
    b.dice = dice_loss(p_anom, mask, w.dice_smooth);
    b.focal = focal_loss(p_seg, mask, w);
    b.disentangle = anchors != nullptr ? disentangle_loss(anchors->t_n, anchors->t_a) : 0.0;
    b.total = b.bce + b.dice + b.focal + (anchors != nullptr ? w.gamma * b.disentangle : 0.0);
    return b;
}

}  // namespace zsad
