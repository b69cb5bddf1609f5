#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "relmem/common.hpp"
#include "relmem/data.hpp"
#include "relmem/eval.hpp"
#include "relmem/objective.hpp"
#include "relmem/relgraph.hpp"
#include "relmem/rng.hpp"
#include "relmem/trainer.hpp"

namespace relmem {

// ---------------------------------------------------------------------------
// Experiment description: which stream to build, how to train on it, and for
// which (method x seed) grid. Serialized as one flat JSON object whose keys
// are exactly the member names below; command-line flags override file
// values. Unknown keys are rejected so typos fail loudly instead of silently
// running the defaults.
// ---------------------------------------------------------------------------
struct ExperimentConfig {
    // Stream construction. The blob data seed for a run is derived from the
    // run seed via the named-stream rule ("data"), so reruns are exact and
    // every method sees the identical stream at a given seed.
    std::string family = "split";  // split | permuted | rotated
    BlobSpec blobs;
    int tasks = 5;
    int classes_per_task = 2;   // split family only
    double max_degrees = 180.0; // rotated family only

    TrainConfig train;  // per-run method/seed fields are overwritten

    std::vector<std::string> methods = {"gcl", "er", "finetune"};
    std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
    std::string out = "results";

    // Stream-construction fields only; gen-data needs nothing else.
    void validate_stream() const {
        family_from_name(family);  // throws on unknown family
        blobs.validate();
        check(tasks >= 1, "experiment: tasks must be >= 1");
        check(classes_per_task >= 1, "experiment: classes_per_task must be >= 1");
        check(max_degrees > 0.0, "experiment: max_degrees must be positive");
    }

    void validate() const {
        validate_stream();
        check(!methods.empty(), "experiment: methods list is empty");
        for (const std::string& m : methods)
            check(m == "gcl" || m == "er" || m == "finetune",
                  "experiment: unknown method '", m, "'");
        check(!seeds.empty(), "experiment: seeds list is empty");
        check(!out.empty(), "experiment: output directory is empty");
        TrainConfig probe = train;
        probe.method = methods.front();
        probe.validate();
    }
};

namespace detail {

inline void set_int(const nlohmann::json& v, const char* key, int& out) {
    check(v.is_number_integer(), "config: '", key, "' must be an integer");
    out = v.get<int>();
}

inline void set_u64(const nlohmann::json& v, const char* key, uint64_t& out) {
    check(v.is_number_unsigned() || (v.is_number_integer() && v.get<int64_t>() >= 0),
          "config: '", key, "' must be a nonnegative integer");
    out = v.get<uint64_t>();
}

inline void set_double(const nlohmann::json& v, const char* key, double& out) {
    check(v.is_number(), "config: '", key, "' must be a number");
    out = v.get<double>();
}

inline void set_string(const nlohmann::json& v, const char* key, std::string& out) {
    check(v.is_string(), "config: '", key, "' must be a string");
    out = v.get<std::string>();
}

inline void set_bool(const nlohmann::json& v, const char* key, bool& out) {
    check(v.is_boolean(), "config: '", key, "' must be a boolean");
    out = v.get<bool>();
}

}  // namespace detail

// Parse a flat JSON object into an ExperimentConfig. Every key is optional;
// absent keys keep their defaults. Does not validate() — callers apply flag
// overrides first and validate the final result.
inline ExperimentConfig parse_experiment_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail("config: not valid JSON: ", e.what());
    }
    check(j.is_object(), "config: top level must be a JSON object");

    ExperimentConfig cfg;
    for (const auto& [key, v] : j.items()) {
        using namespace detail;
        if (key == "family") set_string(v, "family", cfg.family);
        else if (key == "num_classes") set_int(v, "num_classes", cfg.blobs.num_classes);
        else if (key == "grid_side") set_int(v, "grid_side", cfg.blobs.grid_side);
        else if (key == "mean_radius") set_double(v, "mean_radius", cfg.blobs.mean_radius);
        else if (key == "noise_sigma") set_double(v, "noise_sigma", cfg.blobs.noise_sigma);
        else if (key == "train_per_class")
            set_int(v, "train_per_class", cfg.blobs.train_per_class);
        else if (key == "test_per_class")
            set_int(v, "test_per_class", cfg.blobs.test_per_class);
        else if (key == "tasks") set_int(v, "tasks", cfg.tasks);
        else if (key == "classes_per_task")
            set_int(v, "classes_per_task", cfg.classes_per_task);
        else if (key == "max_degrees") set_double(v, "max_degrees", cfg.max_degrees);
        else if (key == "batch_size") set_int(v, "batch_size", cfg.train.batch_size);
        else if (key == "memory_capacity")
            set_int(v, "memory_capacity", cfg.train.memory_capacity);
        else if (key == "epochs_per_task")
            set_int(v, "epochs_per_task", cfg.train.epochs_per_task);
        else if (key == "optimizer") set_string(v, "optimizer", cfg.train.optimizer);
        else if (key == "learning_rate")
            set_double(v, "learning_rate", cfg.train.learning_rate);
        else if (key == "beta1") set_double(v, "beta1", cfg.train.beta1);
        else if (key == "beta2") set_double(v, "beta2", cfg.train.beta2);
        else if (key == "adam_eps") set_double(v, "adam_eps", cfg.train.adam_eps);
        else if (key == "lambda_c") set_double(v, "lambda_c", cfg.train.weights.lambda_C);
        else if (key == "lambda_t") set_double(v, "lambda_t", cfg.train.weights.lambda_T);
        else if (key == "lambda_g") set_double(v, "lambda_g", cfg.train.weights.lambda_G);
        else if (key == "tau") {
            double tau0 = 1.0;
            set_double(v, "tau", tau0);
            cfg.train.kernel.tau = Tensor::param(1, 1, tau0);
        } else if (key == "temp_g")
            set_double(v, "temp_g", cfg.train.kernel.concrete_temp_G);
        else if (key == "temp_a")
            set_double(v, "temp_a", cfg.train.kernel.concrete_temp_A);
        else if (key == "trunk_widths") {
            check(v.is_array() && !v.empty(), "config: 'trunk_widths' must be a nonempty array");
            cfg.train.arch.trunk_widths.clear();
            for (const auto& w : v) {
                int width = 0;
                detail::set_int(w, "trunk_widths", width);
                cfg.train.arch.trunk_widths.push_back(width);
            }
        } else if (key == "d1") set_int(v, "d1", cfg.train.arch.d1);
        else if (key == "d_img") set_int(v, "d_img", cfg.train.arch.d_img);
        else if (key == "d_lab") set_int(v, "d_lab", cfg.train.arch.d_lab);
        else if (key == "test_samples") set_int(v, "test_samples", cfg.train.test_samples);
        else if (key == "deterministic_edges")
            set_bool(v, "deterministic_edges", cfg.train.deterministic_edges);
        else if (key == "regularize_new_low_only")
            set_bool(v, "regularize_new_low_only", cfg.train.regularize_new_low_only);
        else if (key == "order_salt") set_u64(v, "order_salt", cfg.train.order_salt);
        else if (key == "methods") {
            check(v.is_array(), "config: 'methods' must be an array");
            cfg.methods.clear();
            for (const auto& m : v) {
                std::string name;
                detail::set_string(m, "methods", name);
                cfg.methods.push_back(name);
            }
        } else if (key == "seeds") {
            check(v.is_array(), "config: 'seeds' must be an array");
            cfg.seeds.clear();
            for (const auto& s : v) {
                uint64_t seed = 0;
                detail::set_u64(s, "seeds", seed);
                cfg.seeds.push_back(seed);
            }
        } else if (key == "out") set_string(v, "out", cfg.out);
        else fail("config: unknown key '", key, "'");
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "config: cannot open '", path, "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment_json(buf.str());
}

// Stream for one run. The data seed comes from the run seed through the
// named-stream rule, so distinct seeds draw independent class geometry while
// every method at a given seed trains on the identical stream.
inline TaskStream make_stream(const ExperimentConfig& cfg, uint64_t run_seed) {
    uint64_t data_seed = derive_seed(run_seed, "data");
    switch (family_from_name(cfg.family)) {
        case Family::split:
            return gen_split_blobs(cfg.blobs, cfg.tasks, cfg.classes_per_task, data_seed);
        case Family::permuted:
            return gen_permuted(cfg.blobs, cfg.tasks, data_seed);
        case Family::rotated:
            return gen_rotated(cfg.blobs, cfg.tasks, cfg.max_degrees, data_seed);
    }
    fail("make_stream: unreachable family");
}

// One row of the top-level results table.
struct ResultRow {
    std::string method;
    uint64_t seed = 0;
    int task_count = 0;
    double acc = 0.0;
    double fgt = 0.0;
};

inline constexpr const char* kResultsHeader = "method,seed,task_count,acc,fgt";

inline void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
    os << kResultsHeader << "\n";
    char buf[64];
    for (const ResultRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.acc, r.fgt);
        os << r.method << "," << r.seed << "," << r.task_count << "," << buf << "\n";
    }
}

// Artifact basename shared by all files of one run, e.g. "gcl_seed3".
inline std::string run_tag(const std::string& method, uint64_t seed) {
    return method + "_seed" + std::to_string(seed);
}

// Execute one (method, seed) run and write its artifacts into out_dir:
// R matrix, step log, and for gcl also the final context graph plus a
// checkpoint that graph-dump can reopen.
inline ResultRow run_one(const ExperimentConfig& cfg, const std::string& method,
                         uint64_t seed, const std::string& out_dir) {
    TaskStream stream = make_stream(cfg, seed);
    TrainConfig tc = cfg.train;
    tc.method = method;
    tc.seed = seed;
    RunOutput out = run_stream(stream, tc);

    std::string tag = run_tag(method, seed);
    save_result_matrix_csv(out.R, out_dir + "/R_" + tag + ".csv");
    save_step_log_csv(out.logs, out_dir + "/steps_" + tag + ".csv");

    if (method == "gcl" && !out.memory.empty()) {
        Matrix p = context_probabilities(out.gcl, out.memory);
        std::vector<std::string> labels;
        for (int y : out.memory.labels()) labels.push_back("y" + std::to_string(y));
        std::ofstream gf(out_dir + "/graph_" + tag + ".csv", std::ios::binary);
        check(gf.good(), "run: cannot write graph CSV for ", tag);
        write_context_graph_csv(gf, p, labels);

        Checkpoint cp;
        out.gcl.append_to(cp);
        out.memory.append_to(cp, "");
        cp.save(out_dir + "/ckpt_" + tag + ".bin");
    }

    return ResultRow{method, seed, out.R.task_count, accuracy(out.R), forgetting(out.R)};
}

// Worker count: RELMEM_THREADS caps it, hardware concurrency is the default,
// and it never exceeds the number of runs.
inline int worker_count(int runs) {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("RELMEM_THREADS")) {
        char* end = nullptr;
        long cap = std::strtol(env, &end, 10);
        check(end != env && *end == '\0' && cap >= 1,
              "RELMEM_THREADS must be a positive integer, got '", env, "'");
        n = static_cast<int>(cap);
    }
    return std::min(n, runs);
}

// Run the full (method x seed) grid and write results.csv. Runs execute in a
// worker pool; all artifacts are keyed by (method, seed) so completion order
// never influences any output byte. The first failing run (in grid order)
// aborts with a diagnostic naming it.
inline std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out);

    struct Job {
        std::string method;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const std::string& m : cfg.methods)
        for (uint64_t s : cfg.seeds) jobs.push_back({m, s});

    std::vector<ResultRow> rows(jobs.size());
    std::vector<std::string> errors(jobs.size());
    std::atomic<size_t> next{0};
    auto work = [&]() {
        for (size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
            try {
                rows[i] = run_one(cfg, jobs[i].method, jobs[i].seed, cfg.out);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };

    int workers = worker_count(static_cast<int>(jobs.size()));
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (std::thread& t : pool) t.join();
    }

    for (size_t i = 0; i < jobs.size(); ++i)
        if (!errors[i].empty())
            fail("run ", run_tag(jobs[i].method, jobs[i].seed), " failed (artifacts under ",
                 cfg.out, "): ", errors[i]);

    std::ofstream rf(cfg.out + "/results.csv", std::ios::binary);
    check(rf.good(), "run: cannot write ", cfg.out, "/results.csv");
    write_results_csv(rf, rows);
    return rows;
}

// ---------------------------------------------------------------------------
// Aggregation: mean and sample standard deviation (n-1; a single run reports
// 0.0) of ACC and FGT per method, across every results CSV in a directory.
// ---------------------------------------------------------------------------
inline std::vector<ResultRow> read_results_csv(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "summarize: cannot open '", path, "'");
    std::string line;
    check(static_cast<bool>(std::getline(in, line)) && line == kResultsHeader,
          "summarize: '", path, "' is not a results CSV");
    std::vector<ResultRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ResultRow r;
        char method[64] = {0};
        unsigned long long seed = 0;
        int matched = std::sscanf(line.c_str(), "%63[^,],%llu,%d,%lf,%lf", method, &seed,
                                  &r.task_count, &r.acc, &r.fgt);
        check(matched == 5, "summarize: malformed row '", line, "' in ", path);
        r.method = method;
        r.seed = seed;
        rows.push_back(r);
    }
    return rows;
}

struct MethodSummary {
    std::string method;
    int runs = 0;
    double acc_mean = 0.0, acc_std = 0.0;
    double fgt_mean = 0.0, fgt_std = 0.0;
};

inline std::vector<MethodSummary> summarize_rows(const std::vector<ResultRow>& rows) {
    check(!rows.empty(), "summarize: no result rows");
    std::map<std::string, std::vector<const ResultRow*>> by_method;
    for (const ResultRow& r : rows) by_method[r.method].push_back(&r);

    auto mean_std = [](const std::vector<double>& xs) {
        double mean = 0.0;
        for (double x : xs) mean += x / xs.size();
        if (xs.size() < 2) return std::pair<double, double>{mean, 0.0};
        double ss = 0.0;
        for (double x : xs) ss += (x - mean) * (x - mean);
        return std::pair<double, double>{mean, std::sqrt(ss / (xs.size() - 1))};
    };

    std::vector<MethodSummary> out;
    for (const auto& [method, group] : by_method) {
        std::vector<double> accs, fgts;
        for (const ResultRow* r : group) {
            accs.push_back(r->acc);
            fgts.push_back(r->fgt);
        }
        MethodSummary s;
        s.method = method;
        s.runs = static_cast<int>(group.size());
        std::tie(s.acc_mean, s.acc_std) = mean_std(accs);
        std::tie(s.fgt_mean, s.fgt_std) = mean_std(fgts);
        out.push_back(s);
    }
    return out;
}

inline void write_summary_csv(std::ostream& os, const std::vector<MethodSummary>& summaries) {
    os << "method,runs,acc_mean,acc_std,fgt_mean,fgt_std\n";
    char buf[128];
    for (const MethodSummary& s : summaries) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f", s.acc_mean, s.acc_std,
                      s.fgt_mean, s.fgt_std);
        os << s.method << "," << s.runs << "," << buf << "\n";
    }
}

// Aggregate every results CSV found directly inside `dir` (sorted by name so
// the outcome is independent of directory enumeration order).
inline std::vector<MethodSummary> summarize_directory(const std::string& dir) {
    check(std::filesystem::is_directory(dir), "summarize: '", dir, "' is not a directory");
    std::vector<std::string> paths;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
        std::ifstream probe(entry.path());
        std::string first;
        if (std::getline(probe, first) && first == kResultsHeader)
            paths.push_back(entry.path().string());
    }
    check(!paths.empty(), "summarize: no results CSV found in '", dir, "'");
    std::sort(paths.begin(), paths.end());
    std::vector<ResultRow> rows;
    for (const std::string& p : paths) {
        std::vector<ResultRow> r = read_results_csv(p);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    return summarize_rows(rows);
}

// ---------------------------------------------------------------------------
// grad-check: finite differences against the full training objective (both
// graphs sampled with frozen noise, all loss terms) at toy dimensions.
// Returns the max relative gradient error across every parameter and tau.
// ---------------------------------------------------------------------------
inline double run_grad_check() {
    ArchConfig arch;
    arch.input_dim = 3;
    arch.trunk_widths = {5};
    arch.d1 = 2;
    arch.d_img = 3;
    arch.d_lab = 2;
    arch.num_classes = 3;
    EncoderStack stack = EncoderStack::init(arch, 7);
    Tensor tau = Tensor::param(1, 1, 1.0);
    LossWeights w{1.0, 1.0, 50.0};

    Rng rng(8);
    EpisodicMemory mem(4, arch.input_dim);
    Rng res(9);
    for (int i = 0; i < 4; ++i) {
        std::vector<double> f = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                                 rng.uniform(0.0, 1.0)};
        mem.reservoir_update(f, static_cast<int>(rng.uniform_int(arch.num_classes)), res);
    }
    Matrix stored_probs(4, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < i; ++j)
            stored_probs.at(i, j) = stored_probs.at(j, i) = rng.uniform(0.05, 0.95);
    mem.consolidate({1.0, 1.0, 1.0, 1.0}, stored_probs);

    Tensor bx(2, arch.input_dim);
    for (auto& v : bx.values) v = rng.uniform(0.0, 1.0);
    Tensor by = one_hot({0, 2}, arch.num_classes);
    Matrix mem_x = mem.features();
    Tensor my = one_hot(mem.labels(), arch.num_classes);
    Matrix stored = mem.stored_graph_occupied();
    std::vector<int> reg_rows = mem.regularization_rows();
    uint64_t noise_seed = rng.next_u64();

    auto build = [&](Tape& t) {
        Rng noise(noise_seed);
        Var uc = stack.encode_graph(t, t.input(Tensor::from_matrix(mem_x)));
        Var ut = stack.encode_graph(t, t.input(bx));
        Var vc = stack.encode_latent(t, t.input(Tensor::from_matrix(mem_x)), t.input(my));
        Var pg = remove_self_edges(t, kernel_matrix(t, uc, uc, t.leaf(tau)));
        Var gs = remove_self_edges(t, sample_relaxed(t, pg, 1.0, noise));
        Var ctx_ce = t.softmax_cross_entropy(stack.classify(t, propagate(t, gs, vc)),
                                             t.input(my));
        Var pa = kernel_matrix(t, ut, uc, t.leaf(tau));
        Var as = sample_relaxed(t, pa, 5.0, noise);
        Var tgt_ce = t.softmax_cross_entropy(stack.classify(t, propagate(t, as, vc)),
                                             t.input(by));
        Var reg = graph_regularizer(t, pg, stored, reg_rows);
        return total_loss(t, ctx_ce, tgt_ce, reg, w);
    };

    std::vector<Tensor*> params = stack.params();
    params.push_back(&tau);
    return grad_check(build, params);
}

// ---------------------------------------------------------------------------
// graph-dump: reopen a gcl run checkpoint and print the kernel probabilities
// over the stored memory (self-edges removed), labeled per slot.
// ---------------------------------------------------------------------------
inline void dump_context_graph(const std::string& ckpt_path, std::ostream& os) {
    Checkpoint cp = Checkpoint::load(ckpt_path);
    GclModel model = GclModel::from_checkpoint(cp, KernelParams{});
    EpisodicMemory mem = EpisodicMemory::from_checkpoint(cp, "");
    check(!mem.empty(), "graph-dump: checkpoint memory is empty");
    Matrix p = context_probabilities(model, mem);
    std::vector<std::string> labels;
    for (int y : mem.labels()) labels.push_back("y" + std::to_string(y));
    write_context_graph_csv(os, p, labels);
}

}  // namespace relmem
