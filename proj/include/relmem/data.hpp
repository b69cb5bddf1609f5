#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "relmem/checkpoint.hpp"
#include "relmem/common.hpp"
#include "relmem/rng.hpp"

namespace relmem {

enum class Family : uint32_t { split = 0, permuted = 1, rotated = 2 };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::split: return "split";
        case Family::permuted: return "permuted";
        case Family::rotated: return "rotated";
    }
    return "?";
}

inline Family family_from_name(const std::string& s) {
    if (s == "split") return Family::split;
    if (s == "permuted") return Family::permuted;
    if (s == "rotated") return Family::rotated;
    fail("unknown task family '", s, "' (expected split, permuted, or rotated)");
}

struct TaskData {
    Matrix train_x;  // rows x feature_dim
    std::vector<int> train_y;
    Matrix test_x;
    std::vector<int> test_y;
};

struct TaskStream {
    Family family = Family::split;
    int num_classes = 0;
    int feature_dim = 0;
    std::vector<TaskData> tasks;
};

// Gaussian blobs on a g x g feature grid: one mean per class on a sphere of
// radius mean_radius, isotropic noise, then an affine squeeze into [0,1].
// Every feature is rounded through 32-bit precision at generation time so the
// dataset container round-trips bitwise.
struct BlobSpec {
    int num_classes = 10;
    int grid_side = 8;
    double mean_radius = 2.5;
    double noise_sigma = 0.6;
    int train_per_class = 100;  // per task
    int test_per_class = 50;

    int feature_dim() const { return grid_side * grid_side; }

    void validate() const {
        check(num_classes >= 2, "blobs: need at least 2 classes");
        check(grid_side >= 2, "blobs: grid side must be at least 2");
        check(mean_radius > 0.0 && noise_sigma > 0.0, "blobs: radius and sigma must be positive");
        check(train_per_class > 0 && test_per_class > 0, "blobs: counts must be positive");
    }
};

namespace detail {

inline void write_f32(std::ostream& os, float x) { write_u32(os, std::bit_cast<uint32_t>(x)); }

inline float read_f32(std::istream& is, const std::string& path) {
    return std::bit_cast<float>(read_u32(is, path));
}

// Squeeze a raw blob coordinate into [0,1] and round it to f32.
inline double squash(double raw) {
    double x = (raw + 4.3) / 8.6;
    x = std::min(std::max(x, 0.0), 1.0);
    return static_cast<double>(static_cast<float>(x));
}

}  // namespace detail

// All classes in one dataset: the common base every family starts from, so
// task 0 of the permuted and rotated streams is bit-identical given a seed,
// and the split stream partitions exactly these examples.
inline TaskData gen_base_blobs(const BlobSpec& spec, uint64_t seed) {
    spec.validate();
    Rng rng = derive_stream(seed, "data");
    int d = spec.feature_dim();

    std::vector<std::vector<double>> means(spec.num_classes, std::vector<double>(d));
    for (auto& m : means) {
        double norm2 = 0.0;
        for (auto& v : m) {
            v = rng.normal();
            norm2 += v * v;
        }
        double scale = spec.mean_radius / std::sqrt(norm2);
        for (auto& v : m) v *= scale;
    }
    for (int a = 0; a < spec.num_classes; ++a)
        for (int b = a + 1; b < spec.num_classes; ++b)
            check(means[a] != means[b], "blobs: coincident class means");

    TaskData base;
    base.train_x = Matrix(spec.num_classes * spec.train_per_class, d);
    base.test_x = Matrix(spec.num_classes * spec.test_per_class, d);
    int tr = 0, te = 0;
    for (int c = 0; c < spec.num_classes; ++c) {
        for (int i = 0; i < spec.train_per_class; ++i, ++tr) {
            for (int j = 0; j < d; ++j)
                base.train_x.at(tr, j) =
                    detail::squash(means[c][j] + spec.noise_sigma * rng.normal());
            base.train_y.push_back(c);
        }
        for (int i = 0; i < spec.test_per_class; ++i, ++te) {
            for (int j = 0; j < d; ++j)
                base.test_x.at(te, j) =
                    detail::squash(means[c][j] + spec.noise_sigma * rng.normal());
            base.test_y.push_back(c);
        }
    }
    return base;
}

// Gather columns through a feature-index permutation (identical map for train
// and test).
inline TaskData apply_permutation(const TaskData& base, const std::vector<int>& perm) {
    int d = base.train_x.cols;
    check(static_cast<int>(perm.size()) == d, "permute: map covers ", perm.size(),
          " features of ", d);
    std::vector<bool> seen(d, false);
    for (int p : perm) {
        check(p >= 0 && p < d && !seen[p], "permute: not a permutation");
        seen[p] = true;
    }
    TaskData out = base;
    for (const auto* src : {&base.train_x, &base.test_x}) {
        Matrix& dst = (src == &base.train_x) ? out.train_x : out.test_x;
        for (int i = 0; i < src->rows; ++i)
            for (int j = 0; j < d; ++j) dst.at(i, j) = src->at(i, perm[j]);
    }
    return out;
}

// Rotate the g x g grid about its center by the given angle, nearest-neighbor
// resampling, out-of-frame pixels zero. 180 degrees lands exactly on the
// mirrored indices, so applying it twice is the identity.
inline TaskData rotate_grid(const TaskData& base, int g, double degrees) {
    int d = base.train_x.cols;
    check(g * g == d, "rotate: ", d, " features do not form a ", g, "x", g, " grid");
    double th = degrees * 3.14159265358979323846 / 180.0;
    double c = (g - 1) / 2.0, cos_t = std::cos(-th), sin_t = std::sin(-th);
    // dest (r,q) pulls from source = center + R(-theta) (dest - center)
    std::vector<int> src_index(d, -1);
    for (int r = 0; r < g; ++r)
        for (int q = 0; q < g; ++q) {
            double sr = c + cos_t * (r - c) - sin_t * (q - c);
            double sq = c + sin_t * (r - c) + cos_t * (q - c);
            long ir = std::lround(sr), iq = std::lround(sq);
            if (ir >= 0 && ir < g && iq >= 0 && iq < g)
                src_index[r * g + q] = static_cast<int>(ir * g + iq);
        }
    TaskData out = base;
    for (const auto* src : {&base.train_x, &base.test_x}) {
        Matrix& dst = (src == &base.train_x) ? out.train_x : out.test_x;
        for (int i = 0; i < src->rows; ++i)
            for (int j = 0; j < d; ++j)
                dst.at(i, j) = src_index[j] >= 0 ? src->at(i, src_index[j]) : 0.0;
    }
    return out;
}

// Task t covers classes [t*cpt, (t+1)*cpt); labels stay global.
inline TaskStream gen_split_blobs(const BlobSpec& spec, int tasks, int classes_per_task,
                                  uint64_t seed) {
    spec.validate();
    check(tasks >= 1 && classes_per_task >= 1, "split: need positive task and class counts");
    check(tasks * classes_per_task <= spec.num_classes, "split: ", tasks, " tasks x ",
          classes_per_task, " classes exceed the ", spec.num_classes, "-class universe");
    TaskData base = gen_base_blobs(spec, seed);
    TaskStream stream;
    stream.family = Family::split;
    stream.num_classes = spec.num_classes;
    stream.feature_dim = spec.feature_dim();
    for (int t = 0; t < tasks; ++t) {
        int lo = t * classes_per_task, hi = (t + 1) * classes_per_task;
        TaskData task;
        task.train_x = Matrix(classes_per_task * spec.train_per_class, stream.feature_dim);
        task.test_x = Matrix(classes_per_task * spec.test_per_class, stream.feature_dim);
        int tr = 0, te = 0;
        for (int i = 0; i < base.train_x.rows; ++i)
            if (base.train_y[i] >= lo && base.train_y[i] < hi) {
                for (int j = 0; j < stream.feature_dim; ++j)
                    task.train_x.at(tr, j) = base.train_x.at(i, j);
                task.train_y.push_back(base.train_y[i]);
                ++tr;
            }
        for (int i = 0; i < base.test_x.rows; ++i)
            if (base.test_y[i] >= lo && base.test_y[i] < hi) {
                for (int j = 0; j < stream.feature_dim; ++j)
                    task.test_x.at(te, j) = base.test_x.at(i, j);
                task.test_y.push_back(base.test_y[i]);
                ++te;
            }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

// Task 0 is the base dataset; each later task applies a fresh random feature
// permutation to it.
inline TaskStream gen_permuted(const BlobSpec& spec, int tasks, uint64_t seed) {
    spec.validate();
    check(tasks >= 1, "permuted: need at least one task");
    TaskData base = gen_base_blobs(spec, seed);
    Rng rng = derive_stream(seed, "tasks");
    TaskStream stream;
    stream.family = Family::permuted;
    stream.num_classes = spec.num_classes;
    stream.feature_dim = spec.feature_dim();
    stream.tasks.push_back(base);
    std::vector<int> perm(spec.feature_dim());
    for (int t = 1; t < tasks; ++t) {
        for (int j = 0; j < spec.feature_dim(); ++j) perm[j] = j;
        rng.shuffle(perm);
        stream.tasks.push_back(apply_permutation(base, perm));
    }
    return stream;
}

// Task 0 is the base dataset; each later task rotates it by a fresh angle
// drawn uniformly from [-max_degrees, max_degrees].
inline TaskStream gen_rotated(const BlobSpec& spec, int tasks, double max_degrees,
                              uint64_t seed) {
    spec.validate();
    check(tasks >= 1, "rotated: need at least one task");
    check(max_degrees > 0.0, "rotated: max_degrees must be positive");
    TaskData base = gen_base_blobs(spec, seed);
    Rng rng = derive_stream(seed, "tasks");
    TaskStream stream;
    stream.family = Family::rotated;
    stream.num_classes = spec.num_classes;
    stream.feature_dim = spec.feature_dim();
    stream.tasks.push_back(base);
    for (int t = 1; t < tasks; ++t) {
        double theta = rng.uniform(-max_degrees, max_degrees);
        stream.tasks.push_back(rotate_grid(base, spec.grid_side, theta));
    }
    return stream;
}

// ---------------------------------------------------------------------------
// Dataset container. Layout: magic "RELDS001", version u32, family u32,
// num_classes u64, feature_dim u64, task_count u64; then per task:
// train_count u64, test_count u64, train features (f32 each, row-major),
// train labels (u32 each), test features, test labels. Little-endian
// throughout.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[8] = {'R', 'E', 'L', 'D', 'S', '0', '0', '1'};
inline constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const TaskStream& stream, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    check(os.good(), "dataset: cannot open '", path, "' for writing");
    detail::write_bytes(os, kDatasetMagic, sizeof(kDatasetMagic));
    detail::write_u32(os, kDatasetVersion);
    detail::write_u32(os, static_cast<uint32_t>(stream.family));
    detail::write_u64(os, static_cast<uint64_t>(stream.num_classes));
    detail::write_u64(os, static_cast<uint64_t>(stream.feature_dim));
    detail::write_u64(os, stream.tasks.size());
    for (const TaskData& task : stream.tasks) {
        check(task.train_x.cols == stream.feature_dim && task.test_x.cols == stream.feature_dim,
              "dataset: task feature width differs from the stream header");
        check(task.train_x.rows == static_cast<int>(task.train_y.size()) &&
                  task.test_x.rows == static_cast<int>(task.test_y.size()),
              "dataset: feature/label row mismatch");
        detail::write_u64(os, task.train_y.size());
        detail::write_u64(os, task.test_y.size());
        for (double v : task.train_x.v) detail::write_f32(os, static_cast<float>(v));
        for (int y : task.train_y) detail::write_u32(os, static_cast<uint32_t>(y));
        for (double v : task.test_x.v) detail::write_f32(os, static_cast<float>(v));
        for (int y : task.test_y) detail::write_u32(os, static_cast<uint32_t>(y));
    }
    check(os.good(), "dataset: write to '", path, "' failed");
}

inline TaskStream load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "dataset: cannot open '", path, "'");
    char magic[8];
    check(detail::read_bytes(is, magic, 8), path, ": truncated file");
    check(std::equal(magic, magic + 8, kDatasetMagic), path, ": not a RELDS001 dataset");
    uint32_t version = detail::read_u32(is, path);
    check(version == kDatasetVersion, path, ": unsupported dataset version ", version);
    uint32_t family = detail::read_u32(is, path);
    check(family <= 2, path, ": unknown family code ", family);
    TaskStream stream;
    stream.family = static_cast<Family>(family);
    uint64_t num_classes = detail::read_u64(is, path);
    uint64_t feature_dim = detail::read_u64(is, path);
    uint64_t task_count = detail::read_u64(is, path);
    check(num_classes >= 2 && num_classes < (1u << 20), path, ": implausible class count");
    check(feature_dim >= 1 && feature_dim < (1u << 24), path, ": implausible feature dim");
    check(task_count < (1u << 16), path, ": implausible task count");
    stream.num_classes = static_cast<int>(num_classes);
    stream.feature_dim = static_cast<int>(feature_dim);
    for (uint64_t t = 0; t < task_count; ++t) {
        uint64_t ntr = detail::read_u64(is, path);
        uint64_t nte = detail::read_u64(is, path);
        check(ntr < (1u << 28) && nte < (1u << 28), path, ": implausible example counts");
        TaskData task;
        task.train_x = Matrix(static_cast<int>(ntr), stream.feature_dim);
        task.test_x = Matrix(static_cast<int>(nte), stream.feature_dim);
        for (double& v : task.train_x.v) v = detail::read_f32(is, path);
        task.train_y.resize(ntr);
        for (auto& y : task.train_y) {
            uint32_t raw = detail::read_u32(is, path);
            check(raw < num_classes, path, ": label ", raw, " outside the class universe");
            y = static_cast<int>(raw);
        }
        for (double& v : task.test_x.v) v = detail::read_f32(is, path);
        task.test_y.resize(nte);
        for (auto& y : task.test_y) {
            uint32_t raw = detail::read_u32(is, path);
            check(raw < num_classes, path, ": label ", raw, " outside the class universe");
            y = static_cast<int>(raw);
        }
        stream.tasks.push_back(std::move(task));
    }
    return stream;
}

}  // namespace relmem
