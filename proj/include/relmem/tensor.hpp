#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "relmem/common.hpp"

namespace relmem {

// ---------------------------------------------------------------------------
// Tensor: dense row-major 64-bit float array with shape and optional gradient.
// Tape ops work on rank-2 tensors: scalars are {1,1}, column vectors {n,1},
// row vectors (biases) {1,n}. Checkpoint IO accepts any rank.
// ---------------------------------------------------------------------------
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // same length as values iff requires_grad

    Tensor() = default;
    Tensor(int r, int c, double fill = 0.0)
        : shape{r, c}, values(static_cast<size_t>(r) * c, fill) {}

    static Tensor zeros(int r, int c) { return Tensor(r, c, 0.0); }

    static Tensor param(int r, int c, double fill = 0.0) {
        Tensor t(r, c, fill);
        t.set_requires_grad(true);
        return t;
    }

    static Tensor scalar(double x, bool needs_grad = false) {
        Tensor t(1, 1, x);
        if (needs_grad) t.set_requires_grad(true);
        return t;
    }

    static Tensor from_matrix(const Matrix& m) {
        Tensor t(m.rows, m.cols);
        t.values = m.v;
        return t;
    }

    void set_requires_grad(bool on) {
        requires_grad = on;
        grad.assign(on ? values.size() : 0, 0.0);
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    size_t size() const { return values.size(); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    double& at(int r, int c) { return values[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return values[static_cast<size_t>(r) * cols() + c]; }

    Matrix to_matrix() const {
        Matrix m(rows(), cols());
        m.v = values;
        return m;
    }
};

enum class Op {
    kLeaf,
    kMatmul,
    kAddBroadcastRow,
    kScalarMul,
    kRelu,
    kSigmoid,
    kExp,
    kLog,
    kConcatCols,
    kRowNormalizeSum1,
    kPairwiseSqdist,
    kMean,
    kSoftmaxCrossEntropy,
    kBinaryCrossEntropy,
    kMatrixRowWeightedSum,
    kAdd,
    kMul,
    kClamp,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::kLeaf: return "leaf";
        case Op::kMatmul: return "matmul";
        case Op::kAddBroadcastRow: return "add_broadcast_row";
        case Op::kScalarMul: return "scalar_mul";
        case Op::kRelu: return "relu";
        case Op::kSigmoid: return "sigmoid";
        case Op::kExp: return "exp";
        case Op::kLog: return "log";
        case Op::kConcatCols: return "concat_cols";
        case Op::kRowNormalizeSum1: return "row_normalize_sum1";
        case Op::kPairwiseSqdist: return "pairwise_sqdist";
        case Op::kMean: return "mean";
        case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
        case Op::kBinaryCrossEntropy: return "binary_cross_entropy";
        case Op::kMatrixRowWeightedSum: return "matrix_row_weighted_sum";
        case Op::kAdd: return "add";
        case Op::kMul: return "mul";
        case Op::kClamp: return "clamp";
    }
    return "?";
}

// Handle to a node on a Tape.
struct Var {
    int id = -1;
};

// Rows whose entries sum to less than this normalize to uniform weights
// instead of dividing by a vanishing denominator.
inline constexpr double kRowSumDegenerate = 1e-8;

// ---------------------------------------------------------------------------
// Tape: define-by-run computation graph, rebuilt every step. Nodes are stored
// in creation order, which is already a topological order, so backward() is a
// single reverse sweep visiting each node once. A tape and its tensors belong
// to one thread; gradients accumulate into the bound parameter Tensors.
// Node storage is a deque so references from val() survive later pushes.
// ---------------------------------------------------------------------------
class Tape {
  public:
    // Binds external parameter storage. Values are copied in now; backward()
    // adds the leaf's adjoint into `t.grad` when t.requires_grad.
    Var leaf(Tensor& t) {
        Node n;
        n.op = Op::kLeaf;
        n.out = t;  // copy of values; grad buffer handled separately
        n.bound = t.requires_grad ? &t : nullptr;
        return push(std::move(n));
    }

    // Owned input with no gradient tracking (noise draws, one-hot targets,
    // masks, stored edge probabilities).
    Var input(Tensor t) {
        t.set_requires_grad(false);
        Node n;
        n.op = Op::kLeaf;
        n.out = std::move(t);
        return push(std::move(n));
    }

    Var constant(int r, int c, double fill) { return input(Tensor(r, c, fill)); }

    const Tensor& val(Var v) const { return nodes_[check_id(v)].out; }
    size_t node_count() const { return nodes_.size(); }

    // -- op catalogue -------------------------------------------------------

    Var matmul(Var a, Var b) { return binary_product(Op::kMatmul, a, b); }

    // Same contraction as matmul, kept as its own kind: weight rows mixing
    // context representations (graph propagation) rather than a layer map.
    Var matrix_row_weighted_sum(Var w, Var v) { return binary_product(Op::kMatrixRowWeightedSum, w, v); }

    Var add_broadcast_row(Var x, Var row) {
        const Tensor& xt = val(x);
        const Tensor& rt = val(row);
        if (rt.rows() != 1 || rt.cols() != xt.cols())
            shape_error("add_broadcast_row", xt, rt);
        Node n = make(Op::kAddBroadcastRow, {x, row}, xt.rows(), xt.cols());
        for (int i = 0; i < xt.rows(); ++i)
            for (int j = 0; j < xt.cols(); ++j)
                n.out.at(i, j) = xt.at(i, j) + rt.at(0, j);
        return push(std::move(n));
    }

    // Multiply by a constant scalar.
    Var scalar_mul(Var x, double c) {
        const Tensor& xt = val(x);
        Node n = make(Op::kScalarMul, {x}, xt.rows(), xt.cols());
        n.attr = c;
        for (size_t i = 0; i < xt.size(); ++i) n.out.values[i] = c * xt.values[i];
        return push(std::move(n));
    }

    // Multiply by a {1,1} tensor; gradient flows to both factors.
    Var scalar_mul(Var x, Var s) {
        const Tensor& xt = val(x);
        const Tensor& st = val(s);
        if (st.size() != 1) shape_error("scalar_mul", xt, st);
        Node n = make(Op::kScalarMul, {x, s}, xt.rows(), xt.cols());
        double c = st.values[0];
        for (size_t i = 0; i < xt.size(); ++i) n.out.values[i] = c * xt.values[i];
        return push(std::move(n));
    }

    Var relu(Var x) {
        return elementwise(Op::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; });
    }

    Var sigmoid(Var x) {
        return elementwise(Op::kSigmoid, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    }

    Var exp(Var x) {
        return elementwise(Op::kExp, x, [](double v) { return std::exp(v); });
    }

    Var log(Var x) {
        const Tensor& xt = val(x);
        for (double v : xt.values)
            if (v <= 0.0) fail("log: nonpositive input ", v);
        return elementwise(Op::kLog, x, [](double v) { return std::log(v); });
    }

    Var concat_cols(Var a, Var b) {
        const Tensor& at = val(a);
        const Tensor& bt = val(b);
        if (at.rows() != bt.rows()) shape_error("concat_cols", at, bt);
        Node n = make(Op::kConcatCols, {a, b}, at.rows(), at.cols() + bt.cols());
        for (int i = 0; i < at.rows(); ++i) {
            for (int j = 0; j < at.cols(); ++j) n.out.at(i, j) = at.at(i, j);
            for (int j = 0; j < bt.cols(); ++j) n.out.at(i, at.cols() + j) = bt.at(i, j);
        }
        return push(std::move(n));
    }

    // Rows rescaled to sum to 1. A row with sum below kRowSumDegenerate
    // becomes uniform weights with zero gradient; negative entries are a
    // domain error (weights must be nonnegative).
    Var row_normalize_sum1(Var x) {
        const Tensor& xt = val(x);
        for (double v : xt.values)
            if (v < -1e-12) fail("row_normalize_sum1: negative entry ", v);
        Node n = make(Op::kRowNormalizeSum1, {x}, xt.rows(), xt.cols());
        n.saved.resize(xt.rows());
        for (int i = 0; i < xt.rows(); ++i) {
            double s = 0.0;
            for (int j = 0; j < xt.cols(); ++j) s += xt.at(i, j);
            n.saved[i] = s;
            if (s < kRowSumDegenerate) {
                double u = 1.0 / xt.cols();
                for (int j = 0; j < xt.cols(); ++j) n.out.at(i, j) = u;
            } else {
                for (int j = 0; j < xt.cols(); ++j) n.out.at(i, j) = xt.at(i, j) / s;
            }
        }
        return push(std::move(n));
    }

    // D[i][j] = squared euclidean distance between row i of a and row j of b.
    Var pairwise_sqdist(Var a, Var b) {
        const Tensor& at = val(a);
        const Tensor& bt = val(b);
        if (at.cols() != bt.cols()) shape_error("pairwise_sqdist", at, bt);
        Node n = make(Op::kPairwiseSqdist, {a, b}, at.rows(), bt.rows());
        for (int i = 0; i < at.rows(); ++i)
            for (int j = 0; j < bt.rows(); ++j) {
                double d = 0.0;
                for (int k = 0; k < at.cols(); ++k) {
                    double diff = at.at(i, k) - bt.at(j, k);
                    d += diff * diff;
                }
                n.out.at(i, j) = d;
            }
        return push(std::move(n));
    }

    // Mean over all entries -> {1,1}.
    Var mean(Var x) {
        const Tensor& xt = val(x);
        Node n = make(Op::kMean, {x}, 1, 1);
        n.out.values[0] = std::accumulate(xt.values.begin(), xt.values.end(), 0.0) /
                          static_cast<double>(xt.size());
        return push(std::move(n));
    }

    // Per-row cross entropy between softmax(logits) and a target distribution
    // (one-hot in all uses) -> {rows,1}. Log-sum-exp stabilized.
    Var softmax_cross_entropy(Var logits, Var target) {
        const Tensor& lt = val(logits);
        const Tensor& tt = val(target);
        if (lt.rows() != tt.rows() || lt.cols() != tt.cols())
            shape_error("softmax_cross_entropy", lt, tt);
        Node n = make(Op::kSoftmaxCrossEntropy, {logits, target}, lt.rows(), 1);
        for (int i = 0; i < lt.rows(); ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < lt.cols(); ++j) mx = std::max(mx, lt.at(i, j));
            double se = 0.0, dot = 0.0;
            for (int j = 0; j < lt.cols(); ++j) {
                se += std::exp(lt.at(i, j) - mx);
                dot += tt.at(i, j) * lt.at(i, j);
            }
            n.out.at(i, 0) = mx + std::log(se) - dot;
        }
        return push(std::move(n));
    }

    // Elementwise -(t*log(p) + (1-t)*log(1-p)). p must lie strictly inside
    // (0,1): callers clamp first (see relgraph clamping rule).
    Var binary_cross_entropy(Var target, Var p) {
        const Tensor& tt = val(target);
        const Tensor& pt = val(p);
        if (tt.rows() != pt.rows() || tt.cols() != pt.cols())
            shape_error("binary_cross_entropy", tt, pt);
        for (double v : pt.values)
            if (v <= 0.0 || v >= 1.0) fail("binary_cross_entropy: probability ", v, " outside (0,1)");
        Node n = make(Op::kBinaryCrossEntropy, {target, p}, pt.rows(), pt.cols());
        for (size_t i = 0; i < pt.size(); ++i) {
            double t = tt.values[i], q = pt.values[i];
            n.out.values[i] = -(t * std::log(q) + (1.0 - t) * std::log(1.0 - q));
        }
        return push(std::move(n));
    }

    Var add(Var a, Var b) {
        const Tensor& at = val(a);
        const Tensor& bt = val(b);
        if (at.rows() != bt.rows() || at.cols() != bt.cols()) shape_error("add", at, bt);
        Node n = make(Op::kAdd, {a, b}, at.rows(), at.cols());
        for (size_t i = 0; i < at.size(); ++i) n.out.values[i] = at.values[i] + bt.values[i];
        return push(std::move(n));
    }

    // Hadamard product; also used with constant masks (self-edge removal).
    Var mul(Var a, Var b) {
        const Tensor& at = val(a);
        const Tensor& bt = val(b);
        if (at.rows() != bt.rows() || at.cols() != bt.cols()) shape_error("mul", at, bt);
        Node n = make(Op::kMul, {a, b}, at.rows(), at.cols());
        for (size_t i = 0; i < at.size(); ++i) n.out.values[i] = at.values[i] * bt.values[i];
        return push(std::move(n));
    }

    // Clamp to [lo, hi]; gradient passes only where the input is strictly inside.
    Var clamp(Var x, double lo, double hi) {
        const Tensor& xt = val(x);
        Node n = make(Op::kClamp, {x}, xt.rows(), xt.cols());
        n.attr = lo;
        n.attr2 = hi;
        for (size_t i = 0; i < xt.size(); ++i)
            n.out.values[i] = std::min(std::max(xt.values[i], lo), hi);
        return push(std::move(n));
    }

    // -- backward -----------------------------------------------------------

    // Reverse sweep from a scalar loss. Each node is visited exactly once, in
    // reverse creation order; leaf adjoints are added into the bound Tensor's
    // grad buffer.
    void backward(Var loss) {
        int lid = check_id(loss);
        check(nodes_[lid].out.size() == 1, "backward: loss must be scalar, got ",
              nodes_[lid].out.rows(), "x", nodes_[lid].out.cols());
        for (auto& n : nodes_) n.adj.assign(n.out.size(), 0.0);
        nodes_[lid].adj[0] = 1.0;
        for (int id = lid; id >= 0; --id) {
            Node& n = nodes_[id];
            bool any = std::any_of(n.adj.begin(), n.adj.end(), [](double g) { return g != 0.0; });
            if (!any) continue;
            if (n.op == Op::kLeaf) {
                if (n.bound) {
                    for (size_t i = 0; i < n.adj.size(); ++i) n.bound->grad[i] += n.adj[i];
                }
                continue;
            }
            backward_node(n);
        }
    }

  private:
    struct Node {
        Op op = Op::kLeaf;
        std::array<int, 2> in = {-1, -1};
        Tensor out;
        std::vector<double> adj;    // adjoint of out, allocated at backward()
        std::vector<double> saved;  // op-specific forward cache
        double attr = 0.0;          // scalar_mul constant / clamp lo
        double attr2 = 0.0;         // clamp hi
        Tensor* bound = nullptr;    // external parameter behind a leaf
    };

    std::deque<Node> nodes_;

    int check_id(Var v) const {
        check(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "invalid tape handle ", v.id);
        return v.id;
    }

    [[noreturn]] static void shape_error(const char* op, const Tensor& a, const Tensor& b) {
        fail(op, ": incompatible shapes ", a.rows(), "x", a.cols(), " and ", b.rows(), "x", b.cols());
    }

    Node make(Op op, std::initializer_list<Var> ins, int r, int c) {
        Node n;
        n.op = op;
        int k = 0;
        for (Var v : ins) n.in[k++] = check_id(v);
        n.out = Tensor(r, c);
        return n;
    }

    Var push(Node n) {
        if (n.op != Op::kLeaf && !all_finite(n.out.values))
            fail(op_name(n.op), ": non-finite value in forward pass");
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    template <typename F>
    Var elementwise(Op op, Var x, F f) {
        const Tensor& xt = val(x);
        Node n = make(op, {x}, xt.rows(), xt.cols());
        for (size_t i = 0; i < xt.size(); ++i) n.out.values[i] = f(xt.values[i]);
        return push(std::move(n));
    }

    Var binary_product(Op op, Var a, Var b) {
        const Tensor& at = val(a);
        const Tensor& bt = val(b);
        if (at.cols() != bt.rows()) shape_error(op_name(op), at, bt);
        Node n = make(op, {a, b}, at.rows(), bt.cols());
        for (int i = 0; i < at.rows(); ++i)
            for (int k = 0; k < at.cols(); ++k) {
                double aik = at.at(i, k);
                if (aik == 0.0) continue;
                for (int j = 0; j < bt.cols(); ++j) n.out.at(i, j) += aik * bt.at(k, j);
            }
        return push(std::move(n));
    }

    std::vector<double>& adj_of(int id) { return nodes_[id].adj; }

    void backward_node(Node& n) {
        const Tensor& a = nodes_[n.in[0]].out;
        std::vector<double>& da = adj_of(n.in[0]);
        switch (n.op) {
            case Op::kMatmul:
            case Op::kMatrixRowWeightedSum: {
                const Tensor& b = nodes_[n.in[1]].out;
                std::vector<double>& db = adj_of(n.in[1]);
                // dA += G * B^T ; dB += A^T * G
                for (int i = 0; i < a.rows(); ++i)
                    for (int j = 0; j < b.cols(); ++j) {
                        double g = n.adj[static_cast<size_t>(i) * b.cols() + j];
                        if (g == 0.0) continue;
                        for (int k = 0; k < a.cols(); ++k) {
                            da[static_cast<size_t>(i) * a.cols() + k] += g * b.at(k, j);
                            db[static_cast<size_t>(k) * b.cols() + j] += g * a.at(i, k);
                        }
                    }
                break;
            }
            case Op::kAddBroadcastRow: {
                std::vector<double>& db = adj_of(n.in[1]);
                int c = a.cols();
                for (int i = 0; i < a.rows(); ++i)
                    for (int j = 0; j < c; ++j) {
                        double g = n.adj[static_cast<size_t>(i) * c + j];
                        da[static_cast<size_t>(i) * c + j] += g;
                        db[j] += g;
                    }
                break;
            }
            case Op::kScalarMul: {
                if (n.in[1] >= 0) {
                    double c = nodes_[n.in[1]].out.values[0];
                    std::vector<double>& ds = adj_of(n.in[1]);
                    for (size_t i = 0; i < a.size(); ++i) {
                        da[i] += c * n.adj[i];
                        ds[0] += a.values[i] * n.adj[i];
                    }
                } else {
                    for (size_t i = 0; i < a.size(); ++i) da[i] += n.attr * n.adj[i];
                }
                break;
            }
            case Op::kRelu:
                for (size_t i = 0; i < a.size(); ++i)
                    if (a.values[i] > 0.0) da[i] += n.adj[i];
                break;
            case Op::kSigmoid:
                for (size_t i = 0; i < a.size(); ++i) {
                    double y = n.out.values[i];
                    da[i] += y * (1.0 - y) * n.adj[i];
                }
                break;
            case Op::kExp:
                for (size_t i = 0; i < a.size(); ++i) da[i] += n.out.values[i] * n.adj[i];
                break;
            case Op::kLog:
                for (size_t i = 0; i < a.size(); ++i) da[i] += n.adj[i] / a.values[i];
                break;
            case Op::kConcatCols: {
                const Tensor& b = nodes_[n.in[1]].out;
                std::vector<double>& db = adj_of(n.in[1]);
                int ca = a.cols(), cb = b.cols(), c = ca + cb;
                for (int i = 0; i < a.rows(); ++i) {
                    for (int j = 0; j < ca; ++j)
                        da[static_cast<size_t>(i) * ca + j] += n.adj[static_cast<size_t>(i) * c + j];
                    for (int j = 0; j < cb; ++j)
                        db[static_cast<size_t>(i) * cb + j] +=
                            n.adj[static_cast<size_t>(i) * c + ca + j];
                }
                break;
            }
            case Op::kRowNormalizeSum1: {
                int c = a.cols();
                for (int i = 0; i < a.rows(); ++i) {
                    double s = n.saved[i];
                    if (s < kRowSumDegenerate) continue;  // uniform fallback is constant
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j)
                        dot += n.adj[static_cast<size_t>(i) * c + j] * a.at(i, j);
                    for (int j = 0; j < c; ++j)
                        da[static_cast<size_t>(i) * c + j] +=
                            n.adj[static_cast<size_t>(i) * c + j] / s - dot / (s * s);
                }
                break;
            }
            case Op::kPairwiseSqdist: {
                const Tensor& b = nodes_[n.in[1]].out;
                std::vector<double>& db = adj_of(n.in[1]);
                int d = a.cols();
                for (int i = 0; i < a.rows(); ++i)
                    for (int j = 0; j < b.rows(); ++j) {
                        double g = n.adj[static_cast<size_t>(i) * b.rows() + j];
                        if (g == 0.0) continue;
                        for (int k = 0; k < d; ++k) {
                            double diff = 2.0 * (a.at(i, k) - b.at(j, k)) * g;
                            da[static_cast<size_t>(i) * d + k] += diff;
                            db[static_cast<size_t>(j) * d + k] -= diff;
                        }
                    }
                break;
            }
            case Op::kMean: {
                double g = n.adj[0] / static_cast<double>(a.size());
                for (size_t i = 0; i < a.size(); ++i) da[i] += g;
                break;
            }
            case Op::kSoftmaxCrossEntropy: {
                const Tensor& t = nodes_[n.in[1]].out;
                std::vector<double>& dt = adj_of(n.in[1]);
                int c = a.cols();
                for (int i = 0; i < a.rows(); ++i) {
                    double g = n.adj[i];
                    if (g == 0.0) continue;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int j = 0; j < c; ++j) mx = std::max(mx, a.at(i, j));
                    double se = 0.0;
                    for (int j = 0; j < c; ++j) se += std::exp(a.at(i, j) - mx);
                    for (int j = 0; j < c; ++j) {
                        double p = std::exp(a.at(i, j) - mx) / se;
                        da[static_cast<size_t>(i) * c + j] += (p - t.at(i, j)) * g;
                        dt[static_cast<size_t>(i) * c + j] += -a.at(i, j) * g;
                    }
                }
                break;
            }
            case Op::kBinaryCrossEntropy: {
                const Tensor& p = nodes_[n.in[1]].out;
                std::vector<double>& dp = adj_of(n.in[1]);
                for (size_t i = 0; i < a.size(); ++i) {
                    double g = n.adj[i];
                    if (g == 0.0) continue;
                    double t = a.values[i], q = p.values[i];
                    da[i] += (std::log(1.0 - q) - std::log(q)) * g;
                    dp[i] += (q - t) / (q * (1.0 - q)) * g;
                }
                break;
            }
            case Op::kAdd: {
                std::vector<double>& db = adj_of(n.in[1]);
                for (size_t i = 0; i < a.size(); ++i) {
                    da[i] += n.adj[i];
                    db[i] += n.adj[i];
                }
                break;
            }
            case Op::kMul: {
                const Tensor& b = nodes_[n.in[1]].out;
                std::vector<double>& db = adj_of(n.in[1]);
                for (size_t i = 0; i < a.size(); ++i) {
                    da[i] += b.values[i] * n.adj[i];
                    db[i] += a.values[i] * n.adj[i];
                }
                break;
            }
            case Op::kClamp:
                for (size_t i = 0; i < a.size(); ++i)
                    if (a.values[i] > n.attr && a.values[i] < n.attr2) da[i] += n.adj[i];
                break;
            case Op::kLeaf:
                break;
        }
    }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking. `build` must be a deterministic
// function of the parameter values: any noise is drawn once and passed in as
// constants, so rebuilding the tape reproduces the same forward map.
// ---------------------------------------------------------------------------
using LossBuilder = std::function<Var(Tape&)>;

inline double eval_loss(const LossBuilder& build) {
    Tape tape;
    Var loss = build(tape);
    const Tensor& t = tape.val(loss);
    check(t.size() == 1, "grad_check: loss must be scalar");
    return t.values[0];
}

// Max over all parameter entries of |analytic - numeric| / max(1, |numeric|),
// with numeric = central difference at step eps.
inline double grad_check(const LossBuilder& build, const std::vector<Tensor*>& params,
                         double eps = 1e-5) {
    for (Tensor* p : params) {
        check(p->requires_grad, "grad_check: parameter without requires_grad");
        p->zero_grad();
    }
    {
        Tape tape;
        Var loss = build(tape);
        tape.backward(loss);
    }
    double worst = 0.0;
    for (Tensor* p : params) {
        for (size_t i = 0; i < p->size(); ++i) {
            double keep = p->values[i];
            p->values[i] = keep + eps;
            double fp = eval_loss(build);
            p->values[i] = keep - eps;
            double fm = eval_loss(build);
            p->values[i] = keep;
            double numeric = (fp - fm) / (2.0 * eps);
            double err = std::abs(p->grad[i] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace relmem
