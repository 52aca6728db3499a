#pragma once

#include <Eigen/Dense>

#include <array>
#include <memory>
#include <string>
#include <vector>

namespace zsad {

using Mat = Eigen::MatrixXd;

struct Param;

namespace ag {

// Reverse-mode autodiff over dense double matrices. A Graph owns a tape of
// nodes in topological (creation) order; backward() walks it in reverse.
// Scalars are 1x1 matrices. All arithmetic is IEEE double and single-threaded,
// so runs are bit-reproducible for a fixed seed and config.

enum class Op {
    Leaf,
    MatMulNN,   // A * B
    MatMulNT,   // A * B^T
    MatMulTN,   // A^T * B
    Add,
    Sub,
    Hadamard,
    Scale,          // k0 * x
    AddScalar,      // x + k0
    AddRowVec,      // x + ones*b   (b: 1 x cols)
    MulRowVec,      // x .* (ones*b)
    DivColVec,      // y_ij = x_ij / s_i   (s: rows x 1)
    Gelu,
    Relu,
    Log,
    Clamp,          // clamp(x, k0, k1); gradient passes inside the interval
    PowConst,       // x^k0 (x >= 0)
    SoftmaxRows,
    LayerNormRows,  // zero-mean unit-variance per row, eps = k0
    L2NormalizeRows,  // row / (|row| + eps), eps = k0
    SelectRows,     // rows gathered by idx (embedding lookup, token picks)
    SliceCols,      // columns [k0, k0+k1)
    ConcatCols,
    ConcatRows,
    MeanRows,       // column means -> 1 x cols
    SumAll,         // -> 1x1
    MeanAll,        // -> 1x1
    Linear2,        // k0*a + k1*b (matching shapes)
    Upsample,       // fixed bilinear operator grid -> image, per column
};

// Precomputed bilinear interpolation map from a g x g grid (rows in row-major
// order) to an H x W image, pixel centers aligned.
struct BilinearUpsampler {
    int grid = 0, out_h = 0, out_w = 0;
    // per output pixel: 4 source row indices and weights
    std::vector<std::array<int, 4>> src;
    std::vector<std::array<double, 4>> wgt;

    BilinearUpsampler() = default;
    BilinearUpsampler(int grid_side, int out_h, int out_w);
    Mat apply(const Mat& x) const;            // (g*g) x C -> (H*W) x C
    Mat apply_transposed(const Mat& g) const; // (H*W) x C -> (g*g) x C
};

struct Node {
    Op op = Op::Leaf;
    int a = -1, b = -1;
    std::vector<int> inputs;  // variadic ops (concat)
    double k0 = 0.0, k1 = 0.0;
    std::vector<int> idx;
    const BilinearUpsampler* up = nullptr;
    Param* param = nullptr;  // set for leaves bound to a trainable parameter
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
};

class Graph;

// Lightweight handle into a graph's tape.
struct Ref {
    Graph* g = nullptr;
    int i = -1;
    const Mat& value() const;
    explicit operator bool() const { return g != nullptr && i >= 0; }
};

class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    size_t size() const { return nodes_.size(); }
    Node& node(int i) { return nodes_[size_t(i)]; }
    const Node& node(int i) const { return nodes_[size_t(i)]; }

    // Constant input; never receives a gradient.
    Ref constant(Mat v);
    // Differentiable input (used to stitch subgraph results together).
    Ref input(Mat v);
    // Leaf bound to a named parameter; gradient flows into the parameter's
    // grad buffer on collect_param_grads() when it is marked trainable.
    Ref param(Param& p);

    // Runs reverse-mode accumulation from a scalar node (seed 1.0).
    void backward(Ref scalar);
    // Seeds an arbitrary node with an externally supplied gradient.
    void backward_seed(Ref at, const Mat& seed);
    // Adds accumulated leaf gradients into their bound parameters.
    void collect_param_grads();

    const Mat& grad_of(Ref r) const;

    friend Ref make(Graph& g, Node n);

private:
    void run_backward(int from);
    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

// -- op builders --------------------------------------------------------

Ref matmul(Ref a, Ref b);     // A * B
Ref matmul_nt(Ref a, Ref b);  // A * B^T
Ref matmul_tn(Ref a, Ref b);  // A^T * B
Ref add(Ref a, Ref b);
Ref sub(Ref a, Ref b);
Ref hadamard(Ref a, Ref b);
Ref scale(Ref x, double k);
Ref add_scalar(Ref x, double k);
Ref add_rowvec(Ref x, Ref b);
Ref mul_rowvec(Ref x, Ref b);
Ref div_colvec(Ref x, Ref s);
Ref gelu(Ref x);
Ref relu(Ref x);
Ref log_(Ref x);
Ref clamp(Ref x, double lo, double hi);
Ref pow_const(Ref x, double k);
Ref softmax_rows(Ref x);
Ref layernorm_rows(Ref x, double eps = 1e-5);
Ref l2normalize_rows(Ref x, double eps = 1e-8);
Ref select_rows(Ref x, std::vector<int> rows);
Ref slice_cols(Ref x, int start, int len);
Ref concat_cols(const std::vector<Ref>& xs);
Ref concat_rows(const std::vector<Ref>& xs);
Ref mean_rows(Ref x);
Ref sum_all(Ref x);
Ref mean_all(Ref x);
Ref linear2(Ref a, Ref b, double ka, double kb);
Ref upsample(Ref x, const BilinearUpsampler& up);

}  // namespace ag
}  // namespace zsad
