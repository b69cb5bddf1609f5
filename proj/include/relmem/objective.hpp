#pragma once

#include <optional>
#include <vector>

#include "relmem/common.hpp"
#include "relmem/relgraph.hpp"
#include "relmem/tensor.hpp"

namespace relmem {

struct LossWeights {
    double lambda_C = 1.0;
    double lambda_T = 1.0;
    double lambda_G = 50.0;

    void validate() const {
        check(lambda_C >= 0.0 && lambda_T >= 0.0 && lambda_G >= 0.0,
              "loss weights must be nonnegative");
    }
};

// Mean cross-entropy between one stored edge row (constant) and the current
// probabilities, the self position excluded. Gradients flow into p_new only.
inline Var edge_bce(Tape& t, Var p_old_row, Var p_new_row, int self_index) {
    const Tensor& po = t.val(p_old_row);
    const Tensor& pn = t.val(p_new_row);
    check(po.rows() == 1 && pn.rows() == 1 && po.cols() == pn.cols(), "edge_bce: rows are ",
          po.rows(), "x", po.cols(), " and ", pn.rows(), "x", pn.cols());
    int n = po.cols();
    check(n >= 2, "edge_bce: a row needs at least one non-self edge");
    check(self_index >= 0 && self_index < n, "edge_bce: self index ", self_index, " out of range");
    Var bce = t.binary_cross_entropy(p_old_row, clamp_edges(t, p_new_row));
    Tensor mask(1, n, 1.0 / (n - 1));
    mask.at(0, self_index) = 0.0;
    // mean over n entries with the self slot zeroed, rescaled to a mean over n-1 edges
    return t.scalar_mul(t.mean(t.mul(bce, t.input(mask))), static_cast<double>(n));
}

// Graph-regularization loss: for each selected row, the mean edge
// cross-entropy against the stored probabilities, averaged over the selected
// rows. Stored values enter as constants; p_new is the current kernel matrix
// over memory (clamped internally, diagonal excluded).
inline Var graph_regularizer(Tape& t, Var p_new, const Matrix& p_old,
                             const std::vector<int>& rows) {
    const Tensor& pn = t.val(p_new);
    int n = pn.rows();
    check(pn.cols() == n, "graph_regularizer: matrix is ", n, "x", pn.cols(), ", not square");
    check(p_old.rows == n && p_old.cols == n, "graph_regularizer: stored graph is ", p_old.rows,
          "x", p_old.cols, ", current is ", n, "x", n);
    if (rows.empty() || n < 2) return t.constant(1, 1, 0.0);

    Var bce = t.binary_cross_entropy(t.input(Tensor::from_matrix(p_old)), clamp_edges(t, p_new));
    Tensor mask(n, n, 0.0);
    for (int i : rows) {
        check(i >= 0 && i < n, "graph_regularizer: row ", i, " out of range");
        for (int k = 0; k < n; ++k)
            if (k != i) mask.at(i, k) = 1.0 / (n - 1);
    }
    // mean over n^2 masked entries -> mean over rows of per-row edge means
    double rescale = static_cast<double>(n) * n / static_cast<double>(rows.size());
    return t.scalar_mul(t.mean(t.mul(bce, t.input(mask))), rescale);
}

// Total objective: lambda_C * mean(ctx_ce) + lambda_T * mean(tgt_ce)
// + lambda_G * graph_reg. Context and graph terms drop out while the memory
// is empty.
inline Var total_loss(Tape& t, const std::optional<Var>& ctx_ce, Var tgt_ce,
                      const std::optional<Var>& graph_reg, const LossWeights& w) {
    w.validate();
    check(t.val(tgt_ce).size() >= 1, "total_loss: empty target batch");
    Var loss = t.scalar_mul(t.mean(tgt_ce), w.lambda_T);
    if (ctx_ce) loss = t.add(loss, t.scalar_mul(t.mean(*ctx_ce), w.lambda_C));
    if (graph_reg) {
        check(t.val(*graph_reg).size() == 1, "total_loss: graph term must be scalar");
        loss = t.add(loss, t.scalar_mul(*graph_reg, w.lambda_G));
    }
    return loss;
}

}  // namespace relmem
