#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "relmem/common.hpp"
#include "relmem/nets.hpp"
#include "relmem/rng.hpp"
#include "relmem/tensor.hpp"

namespace relmem {

// Edge probabilities are clamped into [kEdgeEps, 1-kEdgeEps] before any
// logit or cross-entropy computation.
inline constexpr double kEdgeEps = 1e-6;

// Kernel bandwidth (learnable, init 1.0) and the two Concrete-relaxation
// temperatures: a small one for the context graph, a larger one for the
// context-target graph.
struct KernelParams {
    Tensor tau = Tensor::param(1, 1, 1.0);
    double concrete_temp_G = 1.0;
    double concrete_temp_A = 5.0;

    void validate() const {
        check(tau.size() == 1 && tau.values[0] > 0.0, "kernel: tau must be a positive scalar");
        check(concrete_temp_G > 0.0 && concrete_temp_A > 0.0,
              "kernel: temperatures must be positive");
    }
};

// ---------------------------------------------------------------------------
// Tape-level graph ops (training path, differentiable).
// ---------------------------------------------------------------------------

// Edge probabilities exp(-tau/2 * ||u_i - u_j||^2); rows index u_a, columns
// u_b. Symmetric with unit diagonal when both sides are the same embedding.
inline Var kernel_matrix(Tape& t, Var ua, Var ub, Var tau) {
    const Tensor& tt = t.val(tau);
    check(tt.size() == 1 && tt.values[0] > 0.0, "kernel_matrix: tau must be a positive scalar");
    Var d = t.pairwise_sqdist(ua, ub);
    return t.exp(t.scalar_mul(t.scalar_mul(d, tau), -0.5));
}

// Zero the diagonal by masking. Applied to the probability matrix and again
// to its relaxed sample, so sampling noise cannot reintroduce self-edges.
inline Var remove_self_edges(Tape& t, Var g) {
    const Tensor& gt = t.val(g);
    check(gt.rows() == gt.cols(), "remove_self_edges: matrix is ", gt.rows(), "x", gt.cols(),
          ", not square");
    Tensor mask(gt.rows(), gt.cols(), 1.0);
    for (int i = 0; i < gt.rows(); ++i) mask.at(i, i) = 0.0;
    return t.mul(g, t.input(mask));
}

inline Var clamp_edges(Tape& t, Var p) { return t.clamp(p, kEdgeEps, 1.0 - kEdgeEps); }

// Binary-Concrete relaxation: sigmoid((logit(p) + logit(u)) / temperature)
// with u ~ Uniform(0,1). The logistic noise enters the tape as a constant, so
// gradients flow through the probabilities only (reparameterization).
inline Var sample_relaxed(Tape& t, Var p, double temperature, Rng& rng) {
    check(temperature > 0.0, "sample_relaxed: temperature must be positive, got ", temperature);
    const Tensor& pt = t.val(p);
    Var pc = clamp_edges(t, p);
    Var one_minus = t.add(t.constant(pt.rows(), pt.cols(), 1.0), t.scalar_mul(pc, -1.0));
    Var logit_p = t.add(t.log(pc), t.scalar_mul(t.log(one_minus), -1.0));
    Tensor noise(pt.rows(), pt.cols());
    for (auto& v : noise.values) {
        double u = rng.uniform_open();
        v = std::log(u) - std::log1p(-u);
    }
    return t.sigmoid(t.scalar_mul(t.add(logit_p, t.input(noise)), 1.0 / temperature));
}

// Row-normalized mixing of context codes: Z[i] = sum_k w_ik V_C[k] with w the
// rows of Adj rescaled to sum to 1 (uniform fallback for vanishing rows).
inline Var propagate(Tape& t, Var adj, Var vc) {
    check(t.val(adj).cols() == t.val(vc).rows(), "propagate: ", t.val(adj).cols(),
          " adjacency columns vs ", t.val(vc).rows(), " context rows");
    return t.matrix_row_weighted_sum(t.row_normalize_sum1(adj), vc);
}

// ---------------------------------------------------------------------------
// Value-level graph ops (test path, consolidation, export).
// ---------------------------------------------------------------------------

inline Matrix kernel_probabilities(const Matrix& ua, const Matrix& ub, double tau) {
    check(ua.cols == ub.cols, "kernel_probabilities: ", ua.cols, " vs ", ub.cols,
          " embedding dims");
    check(tau > 0.0, "kernel_probabilities: tau must be positive, got ", tau);
    Matrix k(ua.rows, ub.rows);
    for (int i = 0; i < ua.rows; ++i)
        for (int j = 0; j < ub.rows; ++j) {
            double d = 0.0;
            for (int c = 0; c < ua.cols; ++c) {
                double diff = ua.at(i, c) - ub.at(j, c);
                d += diff * diff;
            }
            k.at(i, j) = std::exp(-0.5 * tau * d);
        }
    check(all_finite(k.v), "kernel_probabilities: non-finite entries");
    return k;
}

inline void remove_self_edges(Matrix& g) {
    check(g.rows == g.cols, "remove_self_edges: matrix is ", g.rows, "x", g.cols, ", not square");
    for (int i = 0; i < g.rows; ++i) g.at(i, i) = 0.0;
}

inline Matrix sample_hard(const Matrix& p, Rng& rng) {
    Matrix out(p.rows, p.cols);
    for (size_t i = 0; i < p.v.size(); ++i) {
        check(p.v[i] >= 0.0 && p.v[i] <= 1.0, "sample_hard: probability ", p.v[i],
              " outside [0,1]");
        out.v[i] = rng.bernoulli(p.v[i]) ? 1.0 : 0.0;
    }
    return out;
}

inline Matrix row_normalize_fallback(const Matrix& a) {
    Matrix w(a.rows, a.cols);
    for (int i = 0; i < a.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < a.cols; ++j) {
            check(a.at(i, j) >= 0.0, "row_normalize: negative weight ", a.at(i, j));
            s += a.at(i, j);
        }
        if (s < kRowSumDegenerate) {
            for (int j = 0; j < a.cols; ++j) w.at(i, j) = 1.0 / a.cols;
        } else {
            for (int j = 0; j < a.cols; ++j) w.at(i, j) = a.at(i, j) / s;
        }
    }
    return w;
}

inline Matrix propagate(const Matrix& adj, const Matrix& vc) {
    check(adj.cols == vc.rows, "propagate: ", adj.cols, " adjacency columns vs ", vc.rows,
          " context rows");
    Matrix w = row_normalize_fallback(adj);
    Matrix z(adj.rows, vc.cols);
    for (int i = 0; i < adj.rows; ++i)
        for (int k = 0; k < adj.cols; ++k) {
            double wik = w.at(i, k);
            if (wik == 0.0) continue;
            for (int j = 0; j < vc.cols; ++j) z.at(i, j) += wik * vc.at(k, j);
        }
    return z;
}

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows, logits.cols);
    for (int i = 0; i < logits.rows; ++i) {
        double mx = logits.at(i, 0);
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
        double s = 0.0;
        for (int j = 0; j < logits.cols; ++j) {
            p.at(i, j) = std::exp(logits.at(i, j) - mx);
            s += p.at(i, j);
        }
        for (int j = 0; j < logits.cols; ++j) p.at(i, j) /= s;
    }
    return p;
}

// Test-time prediction: S hard samples of the context-target graph, each
// propagated and classified; the per-sample softmax distributions are
// averaged. Context (features, labels) comes from the episodic memory.
inline Matrix predict_ensemble(EncoderStack& stack, const KernelParams& kp,
                               const Matrix& target_x, const Matrix& ctx_x,
                               const std::vector<int>& ctx_y, int S, Rng& rng) {
    check(S >= 1, "predict_ensemble: need at least one sample, got ", S);
    if (ctx_y.empty())
        fail("predict_ensemble: empty memory; fall back to a uniform prediction instead");
    check(ctx_x.rows == static_cast<int>(ctx_y.size()), "predict_ensemble: ", ctx_x.rows,
          " context rows vs ", ctx_y.size(), " labels");
    check(target_x.rows >= 1, "predict_ensemble: no targets");
    kp.validate();

    Tape t;
    Var ut = stack.encode_graph(t, t.input(Tensor::from_matrix(target_x)));
    Var uc = stack.encode_graph(t, t.input(Tensor::from_matrix(ctx_x)));
    Var vc = stack.encode_latent(t, t.input(Tensor::from_matrix(ctx_x)),
                                 t.input(one_hot(ctx_y, stack.cfg.num_classes)));
    Matrix pa = kernel_probabilities(t.val(ut).to_matrix(), t.val(uc).to_matrix(),
                                     kp.tau.values[0]);
    Matrix vcm = t.val(vc).to_matrix();

    Matrix acc(target_x.rows, stack.cfg.num_classes);
    for (int s = 0; s < S; ++s) {
        Matrix z = propagate(sample_hard(pa, rng), vcm);
        Matrix pr = softmax_rows(t.val(stack.classify(t, t.input(Tensor::from_matrix(z)))).to_matrix());
        for (size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += pr.v[i];
    }
    for (double& v : acc.v) v /= S;
    return acc;
}

// Ablation variant of predict_ensemble: the Bernoulli edges are replaced by
// their parameters, so the context-target graph is used as a dense weighted
// adjacency and a single deterministic pass replaces the sample average.
inline Matrix predict_deterministic(EncoderStack& stack, const KernelParams& kp,
                                    const Matrix& target_x, const Matrix& ctx_x,
                                    const std::vector<int>& ctx_y) {
    if (ctx_y.empty())
        fail("predict_deterministic: empty memory; fall back to a uniform prediction instead");
    check(ctx_x.rows == static_cast<int>(ctx_y.size()), "predict_deterministic: ", ctx_x.rows,
          " context rows vs ", ctx_y.size(), " labels");
    check(target_x.rows >= 1, "predict_deterministic: no targets");
    kp.validate();

    Tape t;
    Var ut = stack.encode_graph(t, t.input(Tensor::from_matrix(target_x)));
    Var uc = stack.encode_graph(t, t.input(Tensor::from_matrix(ctx_x)));
    Var vc = stack.encode_latent(t, t.input(Tensor::from_matrix(ctx_x)),
                                 t.input(one_hot(ctx_y, stack.cfg.num_classes)));
    Matrix pa = kernel_probabilities(t.val(ut).to_matrix(), t.val(uc).to_matrix(),
                                     kp.tau.values[0]);
    Matrix z = propagate(pa, t.val(vc).to_matrix());
    return softmax_rows(t.val(stack.classify(t, t.input(Tensor::from_matrix(z)))).to_matrix());
}

// Square probability matrix as CSV: one header row of slot labels, then
// |M| rows of 6-decimal probabilities.
inline void write_context_graph_csv(std::ostream& os, const Matrix& p,
                                    const std::vector<std::string>& slot_labels) {
    check(p.rows == p.cols, "context-graph csv: matrix is ", p.rows, "x", p.cols, ", not square");
    check(static_cast<int>(slot_labels.size()) == p.cols, "context-graph csv: ",
          slot_labels.size(), " labels for ", p.cols, " columns");
    for (int j = 0; j < p.cols; ++j) os << (j ? "," : "") << slot_labels[j];
    os << "\n";
    char buf[32];
    for (int i = 0; i < p.rows; ++i) {
        for (int j = 0; j < p.cols; ++j) {
            std::snprintf(buf, sizeof(buf), "%.6f", p.at(i, j));
            os << (j ? "," : "") << buf;
        }
        os << "\n";
    }
}

}  // namespace relmem
