#include "zsad/graph.hpp"

#include "zsad/params.hpp"

#include <cmath>
#include <stdexcept>

namespace zsad::ag {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_bwd(double x) {
    double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return phi + x * pdf;
}

}  // namespace

BilinearUpsampler::BilinearUpsampler(int grid_side, int h, int w)
    : grid(grid_side), out_h(h), out_w(w) {
    if (grid_side < 1 || h < grid_side || w < grid_side)
        throw std::invalid_argument("upsampler: output must be at least grid size");
    src.resize(size_t(h) * w);
    wgt.resize(size_t(h) * w);
    auto build_axis = [&](int out, std::vector<int>& i0, std::vector<int>& i1,
                          std::vector<double>& t) {
        double r = double(grid_side) / double(out);
        for (int o = 0; o < out; ++o) {
            double s = (o + 0.5) * r - 0.5;  // pixel-center alignment
            double fl = std::floor(s);
            int lo = int(fl), hi = lo + 1;
            double f = s - fl;
            if (lo < 0) { lo = 0; hi = 0; f = 0.0; }
            if (hi > grid_side - 1) { hi = grid_side - 1; lo = grid_side - 1; f = 0.0; }
            i0.push_back(lo);
            i1.push_back(hi);
            t.push_back(f);
        }
    };
    std::vector<int> y0, y1, x0, x1;
    std::vector<double> ty, tx;
    build_axis(h, y0, y1, ty);
    build_axis(w, x0, x1, tx);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            size_t o = size_t(y) * w + x;
            src[o] = {y0[y] * grid_side + x0[x], y0[y] * grid_side + x1[x],
                      y1[y] * grid_side + x0[x], y1[y] * grid_side + x1[x]};
            double fy = ty[y], fx = tx[x];
            wgt[o] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
        }
    }
}

Mat BilinearUpsampler::apply(const Mat& x) const {
    if (x.rows() != grid * grid)
        throw std::invalid_argument("upsampler: input rows != grid^2");
    Mat y(out_h * out_w, x.cols());
    for (Eigen::Index o = 0; o < y.rows(); ++o) {
        const auto& s = src[size_t(o)];
        const auto& w = wgt[size_t(o)];
        y.row(o) = w[0] * x.row(s[0]) + w[1] * x.row(s[1]) + w[2] * x.row(s[2]) +
                   w[3] * x.row(s[3]);
    }
    return y;
}

Mat BilinearUpsampler::apply_transposed(const Mat& g) const {
    Mat y = Mat::Zero(grid * grid, g.cols());
    for (Eigen::Index o = 0; o < g.rows(); ++o) {
        const auto& s = src[size_t(o)];
        const auto& w = wgt[size_t(o)];
        for (int k = 0; k < 4; ++k) y.row(s[k]) += w[k] * g.row(o);
    }
    return y;
}

const Mat& Ref::value() const { return g->node(i).value; }

Ref Graph::constant(Mat v) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return {this, int(nodes_.size()) - 1};
}

Ref Graph::input(Mat v) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    n.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return {this, int(nodes_.size()) - 1};
}

Ref Graph::param(Param& p) {
    Node n;
    n.op = Op::Leaf;
    n.value = p.value;
    n.requires_grad = grad_enabled_ && p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return {this, int(nodes_.size()) - 1};
}

Ref make(Graph& g, Node n) {
    if (g.grad_enabled_) {
        auto needs = [&](int i) { return i >= 0 && g.nodes_[size_t(i)].requires_grad; };
        n.requires_grad = needs(n.a) || needs(n.b);
        for (int i : n.inputs) n.requires_grad = n.requires_grad || needs(i);
    }
    g.nodes_.push_back(std::move(n));
    return {&g, int(g.nodes_.size()) - 1};
}

namespace {

void accumulate(Node& n, const Mat& g) {
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

}  // namespace

void Graph::backward(Ref scalar) {
    if (scalar.g != this) throw std::logic_error("backward: ref from another graph");
    const Node& out = node(scalar.i);
    if (out.value.rows() != 1 || out.value.cols() != 1)
        throw std::logic_error("backward: output must be scalar");
    backward_seed(scalar, Mat::Ones(1, 1));
}

void Graph::backward_seed(Ref at, const Mat& seed) {
    if (!grad_enabled_) throw std::logic_error("backward on a no-grad graph");
    Node& n = node(at.i);
    if (seed.rows() != n.value.rows() || seed.cols() != n.value.cols())
        throw std::logic_error("backward_seed: seed shape mismatch");
    if (!n.requires_grad) return;  // nothing trainable upstream
    accumulate(n, seed);
    run_backward(at.i);
}

void Graph::run_backward(int from) {
    for (int i = from; i >= 0; --i) {
        Node& n = nodes_[size_t(i)];
        if (!n.requires_grad || !n.has_grad) continue;
        const Mat& g = n.grad;
        Node* A = n.a >= 0 ? &nodes_[size_t(n.a)] : nullptr;
        Node* B = n.b >= 0 ? &nodes_[size_t(n.b)] : nullptr;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::MatMulNN:
                if (A->requires_grad) accumulate(*A, g * B->value.transpose());
                if (B->requires_grad) accumulate(*B, A->value.transpose() * g);
                break;
            case Op::MatMulNT:
                if (A->requires_grad) accumulate(*A, g * B->value);
                if (B->requires_grad) accumulate(*B, g.transpose() * A->value);
                break;
            case Op::MatMulTN:
                if (A->requires_grad) accumulate(*A, B->value * g.transpose());
                if (B->requires_grad) accumulate(*B, A->value * g);
                break;
            case Op::Add:
                if (A->requires_grad) accumulate(*A, g);
                if (B->requires_grad) accumulate(*B, g);
                break;
            case Op::Sub:
                if (A->requires_grad) accumulate(*A, g);
                if (B->requires_grad) accumulate(*B, Mat(-g));
                break;
            case Op::Hadamard:
                if (A->requires_grad) accumulate(*A, g.cwiseProduct(B->value));
                if (B->requires_grad) accumulate(*B, g.cwiseProduct(A->value));
                break;
            case Op::Scale:
                if (A->requires_grad) accumulate(*A, Mat(n.k0 * g));
                break;
            case Op::AddScalar:
                if (A->requires_grad) accumulate(*A, g);
                break;
            case Op::AddRowVec:
                if (A->requires_grad) accumulate(*A, g);
                if (B->requires_grad) accumulate(*B, Mat(g.colwise().sum()));
                break;
            case Op::MulRowVec:
                if (A->requires_grad)
                    accumulate(*A, Mat(g.array().rowwise() *
                                       B->value.row(0).array()));
                if (B->requires_grad)
                    accumulate(*B, Mat(g.cwiseProduct(A->value).colwise().sum()));
                break;
            case Op::DivColVec: {
                // y = x / s (broadcast over columns)
                if (A->requires_grad)
                    accumulate(*A, Mat(g.array().colwise() /
                                       B->value.col(0).array()));
                if (B->requires_grad) {
                    Mat gs(B->value.rows(), 1);
                    for (Eigen::Index r = 0; r < gs.rows(); ++r) {
                        double s = B->value(r, 0);
                        gs(r, 0) = -g.row(r).dot(A->value.row(r)) / (s * s);
                    }
                    accumulate(*B, gs);
                }
                break;
            }
            case Op::Gelu:
                if (A->requires_grad)
                    accumulate(*A, Mat(g.cwiseProduct(
                                       A->value.unaryExpr([](double x) { return gelu_bwd(x); }))));
                break;
            case Op::Relu:
                if (A->requires_grad)
                    accumulate(*A, Mat(g.cwiseProduct(A->value.unaryExpr(
                                       [](double x) { return x > 0.0 ? 1.0 : 0.0; }))));
                break;
            case Op::Log:
                if (A->requires_grad) accumulate(*A, Mat(g.cwiseQuotient(A->value)));
                break;
            case Op::Clamp:
                if (A->requires_grad) {
                    Mat m = A->value.unaryExpr([&n](double x) {
                        return (x >= n.k0 && x <= n.k1) ? 1.0 : 0.0;
                    });
                    accumulate(*A, Mat(g.cwiseProduct(m)));
                }
                break;
            case Op::PowConst:
                if (A->requires_grad) {
                    if (n.k0 == 0.0) break;  // constant 1
                    Mat d = A->value.unaryExpr([&n](double x) {
                        return n.k0 == 1.0 ? 1.0 : n.k0 * std::pow(x, n.k0 - 1.0);
                    });
                    accumulate(*A, Mat(g.cwiseProduct(d)));
                }
                break;
            case Op::SoftmaxRows:
                if (A->requires_grad) {
                    Mat gx(g.rows(), g.cols());
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                        double dot = g.row(r).dot(n.value.row(r));
                        gx.row(r) =
                            n.value.row(r).cwiseProduct(g.row(r).array().matrix() -
                                                        Mat::Constant(1, g.cols(), dot));
                    }
                    accumulate(*A, gx);
                }
                break;
            case Op::LayerNormRows:
                if (A->requires_grad) {
                    const Mat& x = A->value;
                    Eigen::Index c = x.cols();
                    Mat gx(x.rows(), c);
                    for (Eigen::Index r = 0; r < x.rows(); ++r) {
                        double mu = x.row(r).mean();
                        double var = (x.row(r).array() - mu).square().mean();
                        double sigma = std::sqrt(var + n.k0);
                        double gmean = g.row(r).mean();
                        double gydot = g.row(r).dot(n.value.row(r)) / double(c);
                        gx.row(r) = (g.row(r).array() - gmean -
                                     n.value.row(r).array() * gydot) /
                                    sigma;
                    }
                    accumulate(*A, gx);
                }
                break;
            case Op::L2NormalizeRows:
                if (A->requires_grad) {
                    const Mat& x = A->value;
                    Mat gx(x.rows(), x.cols());
                    for (Eigen::Index r = 0; r < x.rows(); ++r) {
                        double nn = x.row(r).norm();
                        double den = nn + n.k0;
                        gx.row(r) = g.row(r) / den;
                        if (nn > 1e-30) {
                            double xg = x.row(r).dot(g.row(r));
                            gx.row(r) -= x.row(r) * (xg / (nn * den * den));
                        }
                    }
                    accumulate(*A, gx);
                }
                break;
            case Op::SelectRows:
                if (A->requires_grad) {
                    Mat gx = Mat::Zero(A->value.rows(), A->value.cols());
                    for (size_t k = 0; k < n.idx.size(); ++k)
                        gx.row(n.idx[k]) += g.row(Eigen::Index(k));
                    accumulate(*A, gx);
                }
                break;
            case Op::SliceCols:
                if (A->requires_grad) {
                    Mat gx = Mat::Zero(A->value.rows(), A->value.cols());
                    gx.middleCols(int(n.k0), int(n.k1)) = g;
                    accumulate(*A, gx);
                }
                break;
            case Op::ConcatCols: {
                Eigen::Index c0 = 0;
                for (int ii : n.inputs) {
                    Node& in = nodes_[size_t(ii)];
                    if (in.requires_grad)
                        accumulate(in, Mat(g.middleCols(c0, in.value.cols())));
                    c0 += in.value.cols();
                }
                break;
            }
            case Op::ConcatRows: {
                Eigen::Index r0 = 0;
                for (int ii : n.inputs) {
                    Node& in = nodes_[size_t(ii)];
                    if (in.requires_grad)
                        accumulate(in, Mat(g.middleRows(r0, in.value.rows())));
                    r0 += in.value.rows();
                }
                break;
            }
            case Op::MeanRows:
                if (A->requires_grad) {
                    double f = 1.0 / double(A->value.rows());
                    Mat gx = Mat::Zero(A->value.rows(), A->value.cols());
                    gx.rowwise() += Eigen::RowVectorXd(f * g.row(0));
                    accumulate(*A, gx);
                }
                break;
            case Op::SumAll:
                if (A->requires_grad)
                    accumulate(*A, Mat(Mat::Constant(A->value.rows(), A->value.cols(),
                                                     g(0, 0))));
                break;
            case Op::MeanAll:
                if (A->requires_grad) {
                    double f = g(0, 0) / double(A->value.size());
                    accumulate(*A,
                               Mat(Mat::Constant(A->value.rows(), A->value.cols(), f)));
                }
                break;
            case Op::Linear2:
                if (A->requires_grad) accumulate(*A, Mat(n.k0 * g));
                if (B->requires_grad) accumulate(*B, Mat(n.k1 * g));
                break;
            case Op::Upsample:
                if (A->requires_grad) accumulate(*A, n.up->apply_transposed(g));
                break;
        }
        // free intermediate gradient storage as soon as it has been consumed
        if (n.op != Op::Leaf) {
            n.grad.resize(0, 0);
            n.has_grad = false;
        }
    }
}

void Graph::collect_param_grads() {
    for (auto& n : nodes_) {
        if (n.param != nullptr && n.has_grad) {
            n.param->grad += n.grad;
            n.grad.resize(0, 0);
            n.has_grad = false;
        }
    }
}

const Mat& Graph::grad_of(Ref r) const {
    const Node& n = node(r.i);
    if (!n.has_grad)
        throw std::logic_error("grad_of: node has no accumulated gradient");
    return n.grad;
}

// -- builders ------------------------------------------------------------

namespace {
Node binary(Op op, Ref a, Ref b) {
    if (a.g != b.g) throw std::logic_error("op on refs from different graphs");
    Node n;
    n.op = op;
    n.a = a.i;
    n.b = b.i;
    return n;
}
Node unary(Op op, Ref a) {
    Node n;
    n.op = op;
    n.a = a.i;
    return n;
}
void check_same_shape(const Mat& a, const Mat& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
}  // namespace

Ref matmul(Ref a, Ref b) {
    Node n = binary(Op::MatMulNN, a, b);
    if (a.value().cols() != b.value().rows())
        throw std::invalid_argument("matmul: inner dimensions differ");
    n.value.noalias() = a.value() * b.value();
    return make(*a.g, std::move(n));
}

Ref matmul_nt(Ref a, Ref b) {
    Node n = binary(Op::MatMulNT, a, b);
    if (a.value().cols() != b.value().cols())
        throw std::invalid_argument("matmul_nt: inner dimensions differ");
    n.value.noalias() = a.value() * b.value().transpose();
    return make(*a.g, std::move(n));
}

Ref matmul_tn(Ref a, Ref b) {
    Node n = binary(Op::MatMulTN, a, b);
    if (a.value().rows() != b.value().rows())
        throw std::invalid_argument("matmul_tn: inner dimensions differ");
    n.value.noalias() = a.value().transpose() * b.value();
    return make(*a.g, std::move(n));
}

Ref add(Ref a, Ref b) {
    check_same_shape(a.value(), b.value(), "add");
    Node n = binary(Op::Add, a, b);
    n.value = a.value() + b.value();
    return make(*a.g, std::move(n));
}

Ref sub(Ref a, Ref b) {
    check_same_shape(a.value(), b.value(), "sub");
    Node n = binary(Op::Sub, a, b);
    n.value = a.value() - b.value();
    return make(*a.g, std::move(n));
}

Ref hadamard(Ref a, Ref b) {
    check_same_shape(a.value(), b.value(), "hadamard");
    Node n = binary(Op::Hadamard, a, b);
    n.value = a.value().cwiseProduct(b.value());
    return make(*a.g, std::move(n));
}

Ref scale(Ref x, double k) {
    Node n = unary(Op::Scale, x);
    n.k0 = k;
    n.value = k * x.value();
    return make(*x.g, std::move(n));
}

Ref add_scalar(Ref x, double k) {
    Node n = unary(Op::AddScalar, x);
    n.k0 = k;
    n.value = x.value().array() + k;
    return make(*x.g, std::move(n));
}

Ref add_rowvec(Ref x, Ref b) {
    if (b.value().rows() != 1 || b.value().cols() != x.value().cols())
        throw std::invalid_argument("add_rowvec: bias must be 1 x cols");
    Node n = binary(Op::AddRowVec, x, b);
    n.value = x.value().rowwise() + b.value().row(0);
    return make(*x.g, std::move(n));
}

Ref mul_rowvec(Ref x, Ref b) {
    if (b.value().rows() != 1 || b.value().cols() != x.value().cols())
        throw std::invalid_argument("mul_rowvec: gain must be 1 x cols");
    Node n = binary(Op::MulRowVec, x, b);
    n.value = x.value().array().rowwise() * b.value().row(0).array();
    return make(*x.g, std::move(n));
}

Ref div_colvec(Ref x, Ref s) {
    if (s.value().cols() != 1 || s.value().rows() != x.value().rows())
        throw std::invalid_argument("div_colvec: divisor must be rows x 1");
    Node n = binary(Op::DivColVec, x, s);
    n.value = x.value().array().colwise() / s.value().col(0).array();
    return make(*x.g, std::move(n));
}

Ref gelu(Ref x) {
    Node n = unary(Op::Gelu, x);
    n.value = x.value().unaryExpr([](double v) { return gelu_fwd(v); });
    return make(*x.g, std::move(n));
}

Ref relu(Ref x) {
    Node n = unary(Op::Relu, x);
    n.value = x.value().cwiseMax(0.0);
    return make(*x.g, std::move(n));
}

Ref log_(Ref x) {
    Node n = unary(Op::Log, x);
    n.value = x.value().array().log();
    return make(*x.g, std::move(n));
}

Ref clamp(Ref x, double lo, double hi) {
    Node n = unary(Op::Clamp, x);
    n.k0 = lo;
    n.k1 = hi;
    n.value = x.value().cwiseMax(lo).cwiseMin(hi);
    return make(*x.g, std::move(n));
}

Ref pow_const(Ref x, double k) {
    Node n = unary(Op::PowConst, x);
    n.k0 = k;
    n.value = x.value().unaryExpr([k](double v) { return std::pow(v, k); });
    return make(*x.g, std::move(n));
}

Ref softmax_rows(Ref x) {
    Node n = unary(Op::SoftmaxRows, x);
    const Mat& v = x.value();
    n.value.resize(v.rows(), v.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        double m = v.row(r).maxCoeff();
        Eigen::RowVectorXd e = (v.row(r).array() - m).exp();
        n.value.row(r) = e / e.sum();
    }
    return make(*x.g, std::move(n));
}

Ref layernorm_rows(Ref x, double eps) {
    Node n = unary(Op::LayerNormRows, x);
    n.k0 = eps;
    const Mat& v = x.value();
    n.value.resize(v.rows(), v.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        double mu = v.row(r).mean();
        double var = (v.row(r).array() - mu).square().mean();
        n.value.row(r) = (v.row(r).array() - mu) / std::sqrt(var + eps);
    }
    return make(*x.g, std::move(n));
}

Ref l2normalize_rows(Ref x, double eps) {
    Node n = unary(Op::L2NormalizeRows, x);
    n.k0 = eps;
    const Mat& v = x.value();
    n.value.resize(v.rows(), v.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r)
        n.value.row(r) = v.row(r) / (v.row(r).norm() + eps);
    return make(*x.g, std::move(n));
}

Ref select_rows(Ref x, std::vector<int> rows) {
    Node n = unary(Op::SelectRows, x);
    n.idx = std::move(rows);
    n.value.resize(Eigen::Index(n.idx.size()), x.value().cols());
    for (size_t k = 0; k < n.idx.size(); ++k) {
        if (n.idx[k] < 0 || n.idx[k] >= x.value().rows())
            throw std::out_of_range("select_rows: index out of range");
        n.value.row(Eigen::Index(k)) = x.value().row(n.idx[k]);
    }
    return make(*x.g, std::move(n));
}

Ref slice_cols(Ref x, int start, int len) {
    if (start < 0 || len < 1 || start + len > x.value().cols())
        throw std::out_of_range("slice_cols: range out of bounds");
    Node n = unary(Op::SliceCols, x);
    n.k0 = start;
    n.k1 = len;
    n.value = x.value().middleCols(start, len);
    return make(*x.g, std::move(n));
}

Ref concat_cols(const std::vector<Ref>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    Node n;
    n.op = Op::ConcatCols;
    Eigen::Index rows = xs[0].value().rows(), cols = 0;
    for (const Ref& r : xs) {
        if (r.value().rows() != rows)
            throw std::invalid_argument("concat_cols: row mismatch");
        cols += r.value().cols();
        n.inputs.push_back(r.i);
    }
    n.value.resize(rows, cols);
    Eigen::Index c0 = 0;
    for (const Ref& r : xs) {
        n.value.middleCols(c0, r.value().cols()) = r.value();
        c0 += r.value().cols();
    }
    return make(*xs[0].g, std::move(n));
}

Ref concat_rows(const std::vector<Ref>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
    Node n;
    n.op = Op::ConcatRows;
    Eigen::Index cols = xs[0].value().cols(), rows = 0;
    for (const Ref& r : xs) {
        if (r.value().cols() != cols)
            throw std::invalid_argument("concat_rows: column mismatch");
        rows += r.value().rows();
        n.inputs.push_back(r.i);
    }
    n.value.resize(rows, cols);
    Eigen::Index r0 = 0;
    for (const Ref& r : xs) {
        n.value.middleRows(r0, r.value().rows()) = r.value();
        r0 += r.value().rows();
    }
    return make(*xs[0].g, std::move(n));
}

Ref mean_rows(Ref x) {
    Node n = unary(Op::MeanRows, x);
    n.value = x.value().colwise().mean();
    return make(*x.g, std::move(n));
}

Ref sum_all(Ref x) {
    Node n = unary(Op::SumAll, x);
    n.value = Mat::Constant(1, 1, x.value().sum());
    return make(*x.g, std::move(n));
}

Ref mean_all(Ref x) {
    Node n = unary(Op::MeanAll, x);
    n.value = Mat::Constant(1, 1, x.value().mean());
    return make(*x.g, std::move(n));
}

Ref linear2(Ref a, Ref b, double ka, double kb) {
    check_same_shape(a.value(), b.value(), "linear2");
    Node n = binary(Op::Linear2, a, b);
    n.k0 = ka;
    n.k1 = kb;
    n.value = ka * a.value() + kb * b.value();
    return make(*a.g, std::move(n));
}

Ref upsample(Ref x, const BilinearUpsampler& up) {
    Node n = unary(Op::Upsample, x);
    n.up = &up;
    n.value = up.apply(x.value());
    return make(*x.g, std::move(n));
}

}  // namespace zsad::ag
