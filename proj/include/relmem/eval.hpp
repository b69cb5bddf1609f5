#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "relmem/common.hpp"
#include "relmem/data.hpp"

namespace relmem {

// ---------------------------------------------------------------------------
// Result matrix and the two continual-learning metrics.
//
// R is T x T with R[i][j] = test accuracy on task j after the model finished
// training on task i. Only the final row enters ACC; FGT compares each task's
// accuracy right after it was learned with its accuracy at the end of the
// stream. We fill the full matrix (including j > i) for completeness.
// ---------------------------------------------------------------------------
struct ResultMatrix {
    int task_count = 0;
    std::vector<double> r;  // row-major T x T

    ResultMatrix() = default;
    explicit ResultMatrix(int t) : task_count(t), r(static_cast<size_t>(t) * t, 0.0) {
        check(t >= 1, "result matrix: need at least one task, got ", t);
    }

    double& at(int i, int j) { return r[static_cast<size_t>(i) * task_count + j]; }
    double at(int i, int j) const { return r[static_cast<size_t>(i) * task_count + j]; }

    void validate() const {
        check(task_count >= 1, "result matrix: empty");
        check(r.size() == static_cast<size_t>(task_count) * task_count,
              "result matrix: storage does not match task count");
        for (double v : r)
            check(v >= 0.0 && v <= 1.0, "result matrix: accuracy ", v, " outside [0,1]");
    }
};

// Average accuracy: the mean of the final row, i.e. how well the finished
// model does across every task in the stream.
inline double accuracy(const ResultMatrix& R) {
    R.validate();
    double s = 0.0;
    for (int j = 0; j < R.task_count; ++j) s += R.at(R.task_count - 1, j);
    return s / R.task_count;
}

// Average forgetting: mean over tasks 0..T-2 of (accuracy right after the
// task was learned) minus (accuracy at the end). Positive means the model
// forgot; negative values indicate backward transfer. A single-task stream
// has nothing to forget and reports 0 by convention.
inline double forgetting(const ResultMatrix& R) {
    R.validate();
    if (R.task_count < 2) return 0.0;
    double s = 0.0;
    for (int j = 0; j + 1 < R.task_count; ++j) s += R.at(j, j) - R.at(R.task_count - 1, j);
    return s / (R.task_count - 1);
}

// A predictor maps a batch of feature rows to per-row class probabilities
// (or any score whose row-wise argmax is the predicted class).
using PredictFn = std::function<Matrix(const Matrix& x)>;

// Fraction of argmax-correct predictions on one test set. Ties resolve to
// the lowest class index, so the result is deterministic.
inline double test_accuracy(const PredictFn& predict, const Matrix& x,
                            const std::vector<int>& y) {
    check(x.rows >= 1, "test_accuracy: empty test set");
    check(x.rows == static_cast<int>(y.size()), "test_accuracy: ", x.rows, " rows vs ",
          y.size(), " labels");
    Matrix p = predict(x);
    check(p.rows == x.rows, "test_accuracy: predictor returned ", p.rows, " rows for ", x.rows,
          " inputs");
    int hits = 0;
    for (int i = 0; i < p.rows; ++i) {
        int arg = 0;
        for (int j = 1; j < p.cols; ++j)
            if (p.at(i, j) > p.at(i, arg)) arg = j;
        hits += arg == y[i];
    }
    return hits / static_cast<double>(p.rows);
}

// Per-task accuracy row over every test split in the stream.
inline std::vector<double> evaluate_tasks(const PredictFn& predict, const TaskStream& stream) {
    check(!stream.tasks.empty(), "evaluate_tasks: stream has no tasks");
    std::vector<double> row;
    row.reserve(stream.tasks.size());
    for (const TaskData& task : stream.tasks)
        row.push_back(test_accuracy(predict, task.test_x, task.test_y));
    return row;
}

// Wide-format CSV: one header of R_i_j column names, one data row. Keeps a
// whole run's matrix greppable as a single record.
inline void write_result_matrix_csv(std::ostream& os, const ResultMatrix& R) {
    R.validate();
    for (int i = 0; i < R.task_count; ++i)
        for (int j = 0; j < R.task_count; ++j)
            os << ((i || j) ? "," : "") << "R_" << i << "_" << j;
    os << "\n";
    char buf[32];
    for (int i = 0; i < R.task_count; ++i)
        for (int j = 0; j < R.task_count; ++j) {
            std::snprintf(buf, sizeof(buf), "%.6f", R.at(i, j));
            os << ((i || j) ? "," : "") << buf;
        }
    os << "\n";
}

inline void save_result_matrix_csv(const ResultMatrix& R, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    check(os.good(), "cannot open ", path, " for writing");
    write_result_matrix_csv(os, R);
    check(os.good(), "write failed for ", path);
}

}  // namespace relmem
