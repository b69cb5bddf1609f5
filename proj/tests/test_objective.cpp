#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "relmem/memory.hpp"
#include "relmem/nets.hpp"
#include "relmem/objective.hpp"
#include "relmem/relgraph.hpp"

using relmem::ArchConfig;
using relmem::EncoderStack;
using relmem::EpisodicMemory;
using relmem::LossWeights;
using relmem::Matrix;
using relmem::Rng;
using relmem::Tape;
using relmem::Tensor;
using relmem::Var;

namespace {

Matrix sym_probs(Rng& rng, int n) {
    Matrix p(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) p.at(i, j) = p.at(j, i) = rng.uniform(0.1, 0.9);
    return p;
}

}  // namespace

TEST_CASE("edge cross entropy") {
    constexpr double eps = relmem::kEdgeEps;

    SECTION("confident agreement costs nearly nothing") {
        Tape t;
        Var old_row = t.constant(1, 3, 1.0 - eps);
        Var new_row = t.constant(1, 3, 1.0 - eps);
        double v = t.val(relmem::edge_bce(t, old_row, new_row, 0)).values[0];
        CHECK(v == Catch::Approx(0.0).margin(1e-4));
    }

    SECTION("maximal uncertainty on both sides costs ln 2 per edge") {
        Tape t;
        Var old_row = t.constant(1, 4, 0.5);
        Var new_row = t.constant(1, 4, 0.5);
        double v = t.val(relmem::edge_bce(t, old_row, new_row, 2)).values[0];
        CHECK(v == Catch::Approx(std::log(2.0)).epsilon(1e-9));
    }

    SECTION("a flipped edge pays the full forgetting penalty") {
        Tape t;
        Var old_row = t.constant(1, 3, 1.0 - eps);
        Var new_row = t.constant(1, 3, eps);
        double v = t.val(relmem::edge_bce(t, old_row, new_row, 1)).values[0];
        CHECK(v == Catch::Approx(std::log(1.0 / eps)).epsilon(1e-3));  // about 13.8155
    }

    SECTION("length mismatch is an error") {
        Tape t;
        CHECK_THROWS_AS(
            relmem::edge_bce(t, t.constant(1, 3, 0.5), t.constant(1, 4, 0.5), 0), relmem::Error);
    }
}

TEST_CASE("graph regularizer") {
    SECTION("matches a direct double-loop evaluation") {
        Rng rng(1);
        int n = 5;
        Matrix p_old = sym_probs(rng, n);
        Matrix p_new_m = sym_probs(rng, n);
        std::vector<int> rows = {0, 2, 3};

        Tape t;
        double got =
            t.val(relmem::graph_regularizer(t, t.input(Tensor::from_matrix(p_new_m)), p_old, rows))
                .values[0];

        double expect = 0.0;
        for (int i : rows) {
            double row_sum = 0.0;
            for (int k = 0; k < n; ++k) {
                if (k == i) continue;
                double po = p_old.at(i, k), pn = p_new_m.at(i, k);
                row_sum += -(po * std::log(pn) + (1.0 - po) * std::log(1.0 - pn));
            }
            expect += row_sum / (n - 1);
        }
        expect /= rows.size();
        CHECK(got == Catch::Approx(expect).epsilon(1e-10));
    }

    SECTION("nonnegative on random inputs; zero rows or tiny memory give zero") {
        Rng rng(2);
        for (int trial = 0; trial < 10; ++trial) {
            int n = 2 + static_cast<int>(rng.uniform_int(4));
            Tape t;
            Var v = relmem::graph_regularizer(t, t.input(Tensor::from_matrix(sym_probs(rng, n))),
                                              sym_probs(rng, n), {0, 1});
            CHECK(t.val(v).values[0] >= 0.0);
        }
        Tape t;
        CHECK(t.val(relmem::graph_regularizer(t, t.constant(3, 3, 0.5), Matrix(3, 3, 0.5), {}))
                  .values[0] == 0.0);
        CHECK(t.val(relmem::graph_regularizer(t, t.constant(1, 1, 0.5), Matrix(1, 1, 0.5), {0}))
                  .values[0] == 0.0);
    }

    SECTION("descending the regularizer recovers the stored row") {
        // parameterize p_new = sigmoid(theta) so the probabilities stay open
        Rng rng(3);
        int n = 4;
        Matrix p_old = sym_probs(rng, n);
        Tensor theta = Tensor::param(n, n, 0.0);  // start at p_new = 0.5
        for (int step = 0; step < 800; ++step) {
            theta.zero_grad();
            Tape t;
            Var p_new = t.sigmoid(t.leaf(theta));
            Var loss = relmem::graph_regularizer(t, p_new, p_old, {0, 1, 2, 3});
            t.backward(loss);
            for (size_t i = 0; i < theta.size(); ++i) theta.values[i] -= 2.0 * theta.grad[i];
        }
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k) {
                if (k == i) continue;
                double p = 1.0 / (1.0 + std::exp(-theta.at(i, k)));
                CHECK(p == Catch::Approx(p_old.at(i, k)).margin(1e-3));
            }
    }

    SECTION("gradients reach the graph encoder and bandwidth only") {
        ArchConfig cfg;
        cfg.input_dim = 4;
        cfg.trunk_widths = {6};
        cfg.d1 = 3;
        cfg.d_img = 4;
        cfg.d_lab = 2;
        cfg.num_classes = 3;
        EncoderStack stack = EncoderStack::init(cfg, 4);
        Tensor tau = Tensor::param(1, 1, 1.0);
        Rng rng(5);
        Tensor mx(4, cfg.input_dim);
        for (auto& v : mx.values) v = rng.uniform(0.0, 1.0);
        Matrix p_old = sym_probs(rng, 4);

        Tape t;
        Var u = stack.encode_graph(t, t.input(mx));
        Var p_new = relmem::remove_self_edges(t, relmem::kernel_matrix(t, u, u, t.leaf(tau)));
        Var loss = relmem::graph_regularizer(t, p_new, p_old, {0, 1, 2, 3});
        t.backward(loss);

        auto grad_norm = [](const Tensor& p) {
            double s = 0.0;
            for (double g : p.grad) s += std::abs(g);
            return s;
        };
        CHECK(grad_norm(stack.trunk[0].w) > 0.0);
        CHECK(grad_norm(stack.head_graph.w) > 0.0);
        CHECK(grad_norm(tau) > 0.0);
        CHECK(grad_norm(stack.head_latent.w) == 0.0);
        CHECK(grad_norm(stack.label_embed.w) == 0.0);
        CHECK(grad_norm(stack.classifier.w) == 0.0);
    }
}

TEST_CASE("total loss") {
    LossWeights w;

    SECTION("direct arithmetic at (1, 1, 50)") {
        Tape t;
        Tensor ctx(2, 1);
        ctx.values = {0.1, 0.3};  // mean 0.2
        Tensor tgt(2, 1);
        tgt.values = {0.3, 0.5};  // mean 0.4
        Var loss = relmem::total_loss(t, t.input(ctx), t.input(tgt), t.constant(1, 1, 0.01), w);
        CHECK(t.val(loss).values[0] == Catch::Approx(1.1).epsilon(1e-12));
    }

    SECTION("all-zero weights zero the loss") {
        LossWeights z{0.0, 0.0, 0.0};
        Tape t;
        Var loss =
            relmem::total_loss(t, t.constant(2, 1, 1.0), t.constant(2, 1, 1.0),
                               t.constant(1, 1, 1.0), z);
        CHECK(t.val(loss).values[0] == 0.0);
    }

    SECTION("dropping the graph weight reduces to the replay objective") {
        LossWeights no_g = w;
        no_g.lambda_G = 0.0;
        Tape t;
        Var ctx = t.constant(3, 1, 0.7);
        Var tgt = t.constant(2, 1, 0.9);
        double with_term =
            t.val(relmem::total_loss(t, ctx, tgt, t.constant(1, 1, 0.5), no_g)).values[0];
        double without_term = t.val(relmem::total_loss(t, ctx, tgt, std::nullopt, no_g)).values[0];
        CHECK(with_term == Catch::Approx(without_term).epsilon(1e-15));
    }

    SECTION("linear in each weight") {
        Rng rng(6);
        Tape t;
        Tensor ctx(3, 1), tgt(2, 1);
        for (auto& v : ctx.values) v = rng.uniform(0.0, 2.0);
        for (auto& v : tgt.values) v = rng.uniform(0.0, 2.0);
        Var c = t.input(ctx), g = t.constant(1, 1, 0.25);
        Var tg = t.input(tgt);
        auto total = [&](double lc, double lt, double lg) {
            return t.val(relmem::total_loss(t, c, tg, g, LossWeights{lc, lt, lg})).values[0];
        };
        double base = total(1.0, 1.0, 1.0);
        double ctx_mean = (ctx.values[0] + ctx.values[1] + ctx.values[2]) / 3.0;
        double tgt_mean = (tgt.values[0] + tgt.values[1]) / 2.0;
        CHECK(total(3.0, 1.0, 1.0) - base == Catch::Approx(2.0 * ctx_mean).epsilon(1e-10));
        CHECK(total(1.0, 2.0, 1.0) - base == Catch::Approx(tgt_mean).epsilon(1e-10));
        CHECK(total(1.0, 1.0, 5.0) - base == Catch::Approx(1.0).epsilon(1e-10));
    }

    SECTION("empty memory keeps only the target term") {
        Tape t;
        Var loss = relmem::total_loss(t, std::nullopt, t.constant(2, 1, 0.6), std::nullopt, w);
        CHECK(t.val(loss).values[0] == Catch::Approx(0.6).epsilon(1e-12));
    }

    SECTION("negative weights are rejected") {
        Tape t;
        LossWeights bad{-1.0, 1.0, 1.0};
        CHECK_THROWS_AS(relmem::total_loss(t, std::nullopt, t.constant(1, 1, 0.0), std::nullopt,
                                           bad),
                        relmem::Error);
    }
}

TEST_CASE("the assembled objective passes the difference oracle") {
    // Full pipeline at tiny dims: both graphs sampled with frozen noise, all
    // three loss terms, gradients for every parameter including tau.
    ArchConfig cfg;
    cfg.input_dim = 3;
    cfg.trunk_widths = {5};
    cfg.d1 = 2;
    cfg.d_img = 3;
    cfg.d_lab = 2;
    cfg.num_classes = 3;
    EncoderStack stack = EncoderStack::init(cfg, 7);
    Tensor tau = Tensor::param(1, 1, 1.0);
    relmem::LossWeights w{1.0, 1.0, 50.0};

    Rng rng(8);
    EpisodicMemory mem(4, cfg.input_dim);
    Rng res(9);
    for (int i = 0; i < 4; ++i) {
        std::vector<double> f = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                                 rng.uniform(0.0, 1.0)};
        mem.reservoir_update(f, static_cast<int>(rng.uniform_int(cfg.num_classes)), res);
    }
    mem.consolidate({1.0, 1.0, 1.0, 1.0}, sym_probs(rng, 4));

    Tensor bx(2, cfg.input_dim);
    for (auto& v : bx.values) v = rng.uniform(0.0, 1.0);
    Tensor by = relmem::one_hot({0, 2}, cfg.num_classes);
    Matrix mem_x = mem.features();
    Tensor my = relmem::one_hot(mem.labels(), cfg.num_classes);
    Matrix stored = mem.stored_graph_occupied();
    std::vector<int> reg_rows = mem.regularization_rows();
    uint64_t noise_seed = rng.next_u64();

    auto build = [&](Tape& t) {
        Rng noise(noise_seed);
        Var uc = stack.encode_graph(t, t.input(Tensor::from_matrix(mem_x)));
        Var ut = stack.encode_graph(t, t.input(bx));
        Var vc = stack.encode_latent(t, t.input(Tensor::from_matrix(mem_x)), t.input(my));
        Var pg = relmem::remove_self_edges(t, relmem::kernel_matrix(t, uc, uc, t.leaf(tau)));
        Var gs = relmem::remove_self_edges(t, relmem::sample_relaxed(t, pg, 1.0, noise));
        Var ctx_ce = t.softmax_cross_entropy(stack.classify(t, relmem::propagate(t, gs, vc)),
                                             t.input(my));
        Var pa = relmem::kernel_matrix(t, ut, uc, t.leaf(tau));
        Var as = relmem::sample_relaxed(t, pa, 5.0, noise);
        Var tgt_ce = t.softmax_cross_entropy(stack.classify(t, relmem::propagate(t, as, vc)),
                                             t.input(by));
        Var reg = relmem::graph_regularizer(t, pg, stored, reg_rows);
        return relmem::total_loss(t, ctx_ce, tgt_ce, reg, w);
    };

    std::vector<Tensor*> params = stack.params();
    params.push_back(&tau);
    double err = relmem::grad_check(build, params);
    CHECK(err < 1e-3);
}
