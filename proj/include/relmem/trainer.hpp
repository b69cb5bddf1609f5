#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "relmem/common.hpp"
#include "relmem/data.hpp"
#include "relmem/eval.hpp"
#include "relmem/memory.hpp"
#include "relmem/nets.hpp"
#include "relmem/objective.hpp"
#include "relmem/relgraph.hpp"
#include "relmem/rng.hpp"
#include "relmem/tensor.hpp"

namespace relmem {

// Lower bound the learnable bandwidth is projected onto after each optimizer
// step; the kernel needs tau > 0 and an unconstrained step can cross zero.
inline constexpr double kTauFloor = 1e-6;

// ---------------------------------------------------------------------------
// Training configuration. One struct covers all three methods; fields that a
// method does not use are simply ignored (e.g. the kernel for `er`).
// ---------------------------------------------------------------------------
struct TrainConfig {
    std::string method = "gcl";  // gcl | er | finetune
    int batch_size = 10;
    int memory_capacity = 50;
    int epochs_per_task = 1;

    std::string optimizer = "adam";  // adam | sgd
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    LossWeights weights;
    KernelParams kernel;  // initial bandwidth and temperatures
    ArchConfig arch;      // input_dim / num_classes are overwritten per stream
    int test_samples = 30;

    // Ablation switches: replace the Bernoulli edges by their parameters
    // (no sampling anywhere), and/or regularize only the rows hitting a new
    // loss low this batch instead of every consolidated row.
    bool deterministic_edges = false;
    bool regularize_new_low_only = false;

    uint64_t seed = 0;
    // XOR salt for the within-task arrival order stream; leaving it 0 ties
    // the order to `seed`, changing it reshuffles batches without touching
    // any other randomness.
    uint64_t order_salt = 0;

    void validate() const {
        check(method == "gcl" || method == "er" || method == "finetune",
              "config: unknown method '", method, "'");
        check(batch_size >= 1, "config: batch_size must be >= 1, got ", batch_size);
        check(memory_capacity >= 0, "config: negative memory capacity");
        check(memory_capacity > 0 || method == "finetune",
              "config: zero memory capacity is only valid for finetune");
        check(epochs_per_task >= 1, "config: epochs_per_task must be >= 1");
        check(optimizer == "adam" || optimizer == "sgd", "config: unknown optimizer '",
              optimizer, "'");
        check(learning_rate > 0.0, "config: learning rate must be positive");
        check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
              "config: Adam betas must lie in [0,1)");
        check(adam_eps > 0.0, "config: adam_eps must be positive");
        check(test_samples >= 1, "config: test_samples must be >= 1");
        weights.validate();
        kernel.validate();
    }
};

// One gradient step's worth of bookkeeping. Loss components are the plain
// (unweighted) means; loss_total is the lambda-weighted objective.
struct StepLog {
    int step = 0;  // global batch index across the whole stream
    int task = 0;
    double loss_total = 0.0;
    double loss_ctx = 0.0;
    double loss_tgt = 0.0;
    double loss_graph = 0.0;
    int reg_rows = 0;      // |I| used by the graph regularizer this batch
    int consolidated = 0;  // slots whose stored edges were refreshed
};

inline void write_step_log_csv(std::ostream& os, const std::vector<StepLog>& logs) {
    os << "step,task,loss_total,loss_ctx,loss_tgt,loss_graph,consolidated_rows\n";
    char buf[128];
    for (const StepLog& l : logs) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.6f,%.6f,%d\n", l.step, l.task,
                      l.loss_total, l.loss_ctx, l.loss_tgt, l.loss_graph, l.consolidated);
        os << buf;
    }
}

inline void save_step_log_csv(const std::vector<StepLog>& logs, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    check(os.good(), "cannot open ", path, " for writing");
    write_step_log_csv(os, logs);
    check(os.good(), "write failed for ", path);
}

// ---------------------------------------------------------------------------
// Optimizers: plain SGD and Adam over a fixed parameter list. step() consumes
// the gradients accumulated since the last zero_grad().
// ---------------------------------------------------------------------------
class Optimizer {
  public:
    Optimizer(std::vector<Tensor*> params, const TrainConfig& cfg)
        : params_(std::move(params)),
          adam_(cfg.optimizer == "adam"),
          lr_(cfg.learning_rate),
          b1_(cfg.beta1),
          b2_(cfg.beta2),
          eps_(cfg.adam_eps) {
        check(cfg.optimizer == "adam" || cfg.optimizer == "sgd", "optimizer: unknown kind '",
              cfg.optimizer, "'");
        check(!params_.empty(), "optimizer: empty parameter list");
        for (Tensor* p : params_) {
            check(p != nullptr && p->requires_grad, "optimizer: parameter without gradient");
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }

    void zero_grad() {
        for (Tensor* p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        if (!adam_) {
            for (Tensor* p : params_)
                for (size_t k = 0; k < p->size(); ++k) p->values[k] -= lr_ * p->grad[k];
            return;
        }
        double c1 = 1.0 - std::pow(b1_, t_);
        double c2 = 1.0 - std::pow(b2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor* p = params_[i];
            for (size_t k = 0; k < p->size(); ++k) {
                double g = p->grad[k];
                m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g;
                v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g * g;
                p->values[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

  private:
    std::vector<Tensor*> params_;
    bool adam_;
    double lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Models. GclModel is the full relational stack plus the learnable kernel
// bandwidth; ReplayNet is the baseline classifier sharing the same trunk
// architecture with one linear head, so parameter counts stay comparable.
// ---------------------------------------------------------------------------
struct GclModel {
    EncoderStack stack;
    KernelParams kernel;

    static GclModel init(const ArchConfig& arch, const KernelParams& kernel0, uint64_t seed) {
        GclModel m;
        m.stack = EncoderStack::init(arch, seed);
        m.kernel = kernel0;
        m.kernel.tau.set_requires_grad(true);
        m.kernel.validate();
        return m;
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> ps = stack.params();
        ps.push_back(&kernel.tau);
        return ps;
    }

    void append_to(Checkpoint& cp) const {
        stack.append_to(cp, "net/");
        cp.put("kernel/tau", kernel.tau);
    }

    // Temperatures are configuration rather than learned state, so they come
    // from `kernel0`; only the bandwidth is restored from the checkpoint.
    static GclModel from_checkpoint(const Checkpoint& cp, const KernelParams& kernel0) {
        GclModel m;
        m.stack = EncoderStack::from_checkpoint(cp, "net/");
        m.kernel = kernel0;
        const Tensor& tau = cp.get("kernel/tau");
        check(tau.size() == 1, "checkpoint: kernel/tau must be a scalar");
        m.kernel.tau.values[0] = tau.values[0];
        m.kernel.tau.set_requires_grad(true);
        m.kernel.validate();
        return m;
    }
};

struct ReplayNet {
    ArchConfig cfg;
    std::vector<Linear> trunk;  // ReLU after every layer
    Linear head;                // trunk_dim -> num_classes

    static ReplayNet init(const ArchConfig& arch, uint64_t seed) {
        arch.validate();
        ReplayNet n;
        n.cfg = arch;
        Rng rng = derive_stream(seed, "init");
        int in = arch.input_dim;
        for (int width : arch.trunk_widths) {
            n.trunk.push_back(glorot_linear(rng, in, width));
            in = width;
        }
        n.head = glorot_linear(rng, in, arch.num_classes);
        return n;
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> ps;
        for (auto& l : trunk) {
            ps.push_back(&l.w);
            ps.push_back(&l.b);
        }
        ps.push_back(&head.w);
        ps.push_back(&head.b);
        return ps;
    }

    Var logits(Tape& t, Var x) {
        check(t.val(x).cols() == cfg.input_dim, "replay net: input has ", t.val(x).cols(),
              " columns, expected ", cfg.input_dim);
        Var h = x;
        for (auto& layer : trunk) h = t.relu(apply_linear(t, layer, h));
        return apply_linear(t, head, h);
    }

    Matrix predict(const Matrix& x) {
        Tape t;
        return softmax_rows(t.val(logits(t, t.input(Tensor::from_matrix(x)))).to_matrix());
    }

    void append_to(Checkpoint& cp) const {
        for (size_t i = 0; i < trunk.size(); ++i) {
            cp.put("net/trunk/" + std::to_string(i) + "/w", trunk[i].w);
            cp.put("net/trunk/" + std::to_string(i) + "/b", trunk[i].b);
        }
        cp.put("net/head/w", head.w);
        cp.put("net/head/b", head.b);
    }

    static ReplayNet from_checkpoint(const Checkpoint& cp, int num_classes) {
        ReplayNet n;
        int layers = 0;
        while (cp.has("net/trunk/" + std::to_string(layers) + "/w")) ++layers;
        check(layers > 0, "checkpoint: no trunk layers");
        for (int i = 0; i < layers; ++i)
            n.trunk.push_back(linear_from_checkpoint(cp, "net/trunk/" + std::to_string(i)));
        n.head = linear_from_checkpoint(cp, "net/head");
        n.cfg.input_dim = n.trunk.front().w.rows();
        n.cfg.trunk_widths.clear();
        for (const auto& l : n.trunk) n.cfg.trunk_widths.push_back(l.w.cols());
        n.cfg.num_classes = num_classes;
        check(n.head.w.cols() == num_classes, "checkpoint: head has ", n.head.w.cols(),
              " outputs, expected ", num_classes);
        return n;
    }
};

// Current edge probabilities over the occupied memory, self-edges removed —
// the matrix the consolidation ledger stores and the graph dump exports.
inline Matrix context_probabilities(GclModel& model, const EpisodicMemory& mem) {
    check(!mem.empty(), "context_probabilities: memory is empty");
    Tape t;
    Var uc = model.stack.encode_graph(t, t.input(Tensor::from_matrix(mem.features())));
    Matrix p = kernel_probabilities(t.val(uc).to_matrix(), t.val(uc).to_matrix(),
                                    model.kernel.tau.values[0]);
    remove_self_edges(p);
    return p;
}

namespace detail {

// Uniform draw of k distinct indices from [0, n) via a partial Fisher-Yates
// pass; k <= n.
inline std::vector<int> draw_without_replacement(int n, int k, Rng& rng) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i)
        std::swap(idx[i], idx[i + static_cast<int>(rng.uniform_int(n - i))]);
    idx.resize(k);
    return idx;
}

inline void check_batch(const Matrix& bx, const std::vector<int>& by) {
    check(bx.rows >= 1, "train step: empty batch");
    check(bx.rows == static_cast<int>(by.size()), "train step: ", bx.rows, " feature rows vs ",
          by.size(), " labels");
}

inline double mean_of(const Tensor& column) {
    double s = 0.0;
    for (double v : column.values) s += v;
    return s / static_cast<double>(column.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One gradient step of the graph-based learner. In order:
//   1. forward pass — context/target embeddings, edge probabilities, one
//      relaxed sample of each graph (unless running with deterministic
//      edges), propagation, both cross-entropies, the graph regularizer
//      over the chosen row set, and the weighted total;
//   2. backward + optimizer step (bandwidth projected back above kTauFloor);
//   3. consolidation: per-slot context losses from this batch's sampled
//      graph are compared against the ledger, and new lows store the
//      post-step edge probabilities;
//   4. reservoir insertion of the batch, so an example never attends to
//      itself within its own arrival step.
// RNG order per step: context-graph noise, then target-graph noise, then the
// reservoir draws.
// ---------------------------------------------------------------------------
inline StepLog train_step_gcl(GclModel& model, EpisodicMemory& mem, Optimizer& opt,
                              const Matrix& bx, const std::vector<int>& by,
                              const TrainConfig& cfg, Rng& rng) {
    detail::check_batch(bx, by);
    int nc = model.stack.cfg.num_classes;
    StepLog log;
    opt.zero_grad();

    Tape t;
    std::optional<Var> ctx_ce, reg;
    std::optional<Var> tgt_ce;
    std::vector<double> ctx_losses;
    int n = mem.occupied();
    if (n > 0) {
        Var cx = t.input(Tensor::from_matrix(mem.features()));
        Var cy = t.input(one_hot(mem.labels(), nc));
        Var uc = model.stack.encode_graph(t, cx);
        Var ut = model.stack.encode_graph(t, t.input(Tensor::from_matrix(bx)));
        Var vc = model.stack.encode_latent(t, cx, cy);
        Var tau = t.leaf(model.kernel.tau);
        Var pg = remove_self_edges(t, kernel_matrix(t, uc, uc, tau));
        Var pa = kernel_matrix(t, ut, uc, tau);
        Var g = pg, a = pa;
        if (!cfg.deterministic_edges) {
            // the clamp inside sampling lifts the zero diagonal to epsilon,
            // so the mask is applied again after sampling
            g = remove_self_edges(t, sample_relaxed(t, pg, model.kernel.concrete_temp_G, rng));
            a = sample_relaxed(t, pa, model.kernel.concrete_temp_A, rng);
        }
        ctx_ce = t.softmax_cross_entropy(model.stack.classify(t, propagate(t, g, vc)), cy);
        tgt_ce = t.softmax_cross_entropy(model.stack.classify(t, propagate(t, a, vc)),
                                         t.input(one_hot(by, nc)));
        const Tensor& cl = t.val(*ctx_ce);
        ctx_losses.assign(cl.values.begin(), cl.values.end());

        std::vector<int> rows;
        if (cfg.regularize_new_low_only) {
            // strict reading: only rows about to consolidate this batch, and
            // only those with stored values to regularize against
            for (int i = 0; i < n; ++i)
                if (mem.is_consolidated(i) && ctx_losses[i] < mem.best_loss(i))
                    rows.push_back(i);
        } else {
            rows = mem.regularization_rows();
        }
        log.reg_rows = static_cast<int>(rows.size());
        reg = graph_regularizer(t, pg, mem.stored_graph_occupied(), rows);
    } else {
        // cold start: nothing to relate the batch to yet, so targets are
        // classified from a zero latent code (classifier-only gradient);
        // this only lasts until the first insertions below
        Var z = t.input(Tensor(bx.rows, model.stack.cfg.d2()));
        tgt_ce = t.softmax_cross_entropy(model.stack.classify(t, z), t.input(one_hot(by, nc)));
    }

    Var loss = total_loss(t, ctx_ce, *tgt_ce, reg, cfg.weights);
    log.loss_total = t.val(loss).values[0];
    log.loss_ctx = ctx_ce ? detail::mean_of(t.val(*ctx_ce)) : 0.0;
    log.loss_tgt = detail::mean_of(t.val(*tgt_ce));
    log.loss_graph = reg ? t.val(*reg).values[0] : 0.0;
    check(std::isfinite(log.loss_total), "gcl step: non-finite loss");

    t.backward(loss);
    opt.step();
    model.kernel.tau.values[0] = std::max(model.kernel.tau.values[0], kTauFloor);

    if (n > 0)
        log.consolidated =
            static_cast<int>(mem.consolidate(ctx_losses, context_probabilities(model, mem)).size());

    std::vector<double> row(bx.cols);
    for (int i = 0; i < bx.rows; ++i) {
        for (int j = 0; j < bx.cols; ++j) row[j] = bx.at(i, j);
        mem.reservoir_update(row, by[i], rng);
    }
    return log;
}

// Experience replay: cross-entropy over the batch joined with a uniform
// without-replacement draw of min(occupied, batch_size) memory slots, one
// optimizer step, then reservoir insertion of the batch.
inline StepLog train_step_er(ReplayNet& net, EpisodicMemory& mem, Optimizer& opt,
                             const Matrix& bx, const std::vector<int>& by,
                             const TrainConfig& cfg, Rng& rng) {
    detail::check_batch(bx, by);
    int k = std::min(mem.occupied(), cfg.batch_size);
    std::vector<int> picks = detail::draw_without_replacement(mem.occupied(), k, rng);

    Matrix joint(bx.rows + k, bx.cols);
    std::vector<int> labels(by);
    std::copy(bx.v.begin(), bx.v.end(), joint.v.begin());
    std::vector<double> buf;
    for (int i = 0; i < k; ++i) {
        const std::vector<double>& feat = mem.slot_features(picks[i], buf);
        std::copy(feat.begin(), feat.end(),
                  joint.v.begin() + static_cast<size_t>(bx.rows + i) * bx.cols);
        labels.push_back(mem.labels()[picks[i]]);
    }

    opt.zero_grad();
    Tape t;
    Var ce = t.softmax_cross_entropy(net.logits(t, t.input(Tensor::from_matrix(joint))),
                                     t.input(one_hot(labels, net.cfg.num_classes)));
    Var loss = t.mean(ce);
    StepLog log;
    log.loss_total = log.loss_tgt = t.val(loss).values[0];
    check(std::isfinite(log.loss_total), "er step: non-finite loss");
    t.backward(loss);
    opt.step();

    std::vector<double> row(bx.cols);
    for (int i = 0; i < bx.rows; ++i) {
        for (int j = 0; j < bx.cols; ++j) row[j] = bx.at(i, j);
        mem.reservoir_update(row, by[i], rng);
    }
    return log;
}

// Naive finetuning: cross-entropy on the batch alone.
inline StepLog train_step_finetune(ReplayNet& net, Optimizer& opt, const Matrix& bx,
                                   const std::vector<int>& by, const TrainConfig& cfg) {
    detail::check_batch(bx, by);
    (void)cfg;
    opt.zero_grad();
    Tape t;
    Var ce = t.softmax_cross_entropy(net.logits(t, t.input(Tensor::from_matrix(bx))),
                                     t.input(one_hot(by, net.cfg.num_classes)));
    Var loss = t.mean(ce);
    StepLog log;
    log.loss_total = log.loss_tgt = t.val(loss).values[0];
    check(std::isfinite(log.loss_total), "finetune step: non-finite loss");
    t.backward(loss);
    opt.step();
    return log;
}

// ---------------------------------------------------------------------------
// Full protocol: train through the stream task by task, evaluating on every
// test split after each task to fill one row of the result matrix.
// ---------------------------------------------------------------------------
struct RunOutput {
    std::string method;
    ResultMatrix R;
    std::vector<StepLog> logs;
    EpisodicMemory memory{0, 1};  // final state, frozen
    GclModel gcl;                 // populated when method == "gcl"
    ReplayNet replay;             // populated otherwise
};

// Named RNG streams, all derived from the run seed: "init" (weights, inside
// the model builders), "train" (graph noise, memory), "order/<task>/<epoch>"
// (arrival order, optionally salted), "eval/<task>" (test-time samples).
// Evaluation therefore never perturbs training randomness, and the test
// sample count never changes what the model learns.
inline RunOutput run_stream(const TaskStream& stream, const TrainConfig& cfg) {
    cfg.validate();
    check(!stream.tasks.empty(), "run_stream: stream has no tasks");
    for (const TaskData& task : stream.tasks) {
        check(task.train_x.rows >= 1, "run_stream: task with empty train split");
        check(task.test_x.rows >= 1, "run_stream: task with empty test split");
    }

    ArchConfig arch = cfg.arch;
    arch.input_dim = stream.feature_dim;
    arch.num_classes = stream.num_classes;

    RunOutput out;
    out.method = cfg.method;
    bool is_gcl = cfg.method == "gcl";
    // finetune never touches memory; give it an empty buffer for a uniform
    // RunOutput shape
    out.memory = EpisodicMemory(cfg.method == "finetune" ? 0 : cfg.memory_capacity,
                                stream.feature_dim);

    std::unique_ptr<Optimizer> opt;
    if (is_gcl) {
        out.gcl = GclModel::init(arch, cfg.kernel, cfg.seed);
        opt = std::make_unique<Optimizer>(out.gcl.params(), cfg);
    } else {
        out.replay = ReplayNet::init(arch, cfg.seed);
        opt = std::make_unique<Optimizer>(out.replay.params(), cfg);
    }

    Rng train_rng = derive_stream(cfg.seed, "train");
    out.R = ResultMatrix(static_cast<int>(stream.tasks.size()));

    int global_step = 0;
    for (size_t task = 0; task < stream.tasks.size(); ++task) {
        const TaskData& td = stream.tasks[task];
        for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
            // the container is class-ordered; the stream arrives shuffled
            std::vector<int> order(td.train_x.rows);
            std::iota(order.begin(), order.end(), 0);
            Rng order_rng = derive_stream(cfg.seed ^ cfg.order_salt,
                                          "order/" + std::to_string(task) + "/" +
                                              std::to_string(epoch));
            order_rng.shuffle(order);

            for (int start = 0; start < td.train_x.rows; start += cfg.batch_size) {
                int rows = std::min(cfg.batch_size, td.train_x.rows - start);
                Matrix bx(rows, stream.feature_dim);
                std::vector<int> by(rows);
                for (int i = 0; i < rows; ++i) {
                    int src = order[start + i];
                    for (int j = 0; j < stream.feature_dim; ++j)
                        bx.at(i, j) = td.train_x.at(src, j);
                    by[i] = td.train_y[src];
                }
                StepLog log;
                try {
                    if (is_gcl)
                        log = train_step_gcl(out.gcl, out.memory, *opt, bx, by, cfg, train_rng);
                    else if (cfg.method == "er")
                        log = train_step_er(out.replay, out.memory, *opt, bx, by, cfg, train_rng);
                    else
                        log = train_step_finetune(out.replay, *opt, bx, by, cfg);
                } catch (const Error& e) {
                    fail("run aborted at step ", global_step, ", task ", task, ": ", e.what());
                }
                log.step = global_step++;
                log.task = static_cast<int>(task);
                out.logs.push_back(log);
            }
        }

        Rng eval_rng = derive_stream(cfg.seed, "eval/" + std::to_string(task));
        PredictFn predict = [&](const Matrix& x) -> Matrix {
            if (!is_gcl) return out.replay.predict(x);
            if (out.memory.empty()) {
                // documented fallback: nothing to condition on yet
                return Matrix(x.rows, stream.num_classes,
                              1.0 / static_cast<double>(stream.num_classes));
            }
            if (cfg.deterministic_edges)
                return predict_deterministic(out.gcl.stack, out.gcl.kernel, x,
                                             out.memory.features(), out.memory.labels());
            return predict_ensemble(out.gcl.stack, out.gcl.kernel, x, out.memory.features(),
                                    out.memory.labels(), cfg.test_samples, eval_rng);
        };
        std::vector<double> row = evaluate_tasks(predict, stream);
        for (size_t j = 0; j < row.size(); ++j) out.R.at(static_cast<int>(task), int(j)) = row[j];
    }
    return out;
}

}  // namespace relmem
