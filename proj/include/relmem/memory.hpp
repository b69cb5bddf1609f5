#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "relmem/checkpoint.hpp"
#include "relmem/common.hpp"
#include "relmem/rng.hpp"

namespace relmem {

// 32-bit storage accounting for the episodic buffer: feature rows + labels,
// plus the capacity^2 stored edge parameters when the graph is kept.
inline uint64_t memory_bytes(int capacity, int feature_dim, bool include_graph) {
    check(capacity >= 0 && feature_dim > 0, "memory_bytes: bad dims ", capacity, ", ", feature_dim);
    uint64_t c = static_cast<uint64_t>(capacity);
    uint64_t bytes = c * feature_dim * 4 + c * 4;
    if (include_graph) bytes += c * c * 4;
    return bytes;
}

// ---------------------------------------------------------------------------
// Fixed-capacity episodic memory. Slots fill in order, then Vitter's
// Algorithm R replaces them, so the occupied slots are always 0..occupied-1
// and every stream item ends up resident with equal probability.
//
// Alongside the samples it keeps the stored edge parameters (a probability
// per slot pair, written only when a slot reaches a new best loss) and the
// per-slot best-loss ledger driving those writes.
// ---------------------------------------------------------------------------
class EpisodicMemory {
  public:
    EpisodicMemory(int capacity, int feature_dim)
        : capacity_(capacity),
          feature_dim_(feature_dim),
          graph_(capacity, capacity),
          best_loss_(capacity, kInf),
          consolidated_(capacity, false) {
        check(capacity >= 0, "memory: negative capacity ", capacity);
        check(feature_dim > 0, "memory: feature_dim must be positive");
        features_.reserve(static_cast<size_t>(capacity) * feature_dim);
    }

    int capacity() const { return capacity_; }
    int feature_dim() const { return feature_dim_; }
    int occupied() const { return static_cast<int>(labels_.size()); }
    uint64_t n_seen() const { return n_seen_; }
    bool empty() const { return labels_.empty(); }

    // Offer one stream example. Returns the slot it landed in, or -1 if it
    // was discarded. Replacement wipes the slot's ledger entry and its stored
    // graph row/column: similarities to an evicted sample are meaningless.
    int reservoir_update(const std::vector<double>& features, int label, Rng& rng) {
        check(static_cast<int>(features.size()) == feature_dim_, "memory: example has ",
              features.size(), " features, expected ", feature_dim_);
        check(label >= 0, "memory: negative label");
        ++n_seen_;
        if (capacity_ == 0) return -1;
        if (occupied() < capacity_) {
            features_.insert(features_.end(), features.begin(), features.end());
            labels_.push_back(label);
            return occupied() - 1;
        }
        uint64_t j = rng.uniform_int(n_seen_);
        if (j >= static_cast<uint64_t>(capacity_)) return -1;
        int slot = static_cast<int>(j);
        std::copy(features.begin(), features.end(),
                  features_.begin() + static_cast<size_t>(slot) * feature_dim_);
        labels_[slot] = label;
        best_loss_[slot] = kInf;
        consolidated_[slot] = false;
        for (int k = 0; k < capacity_; ++k) graph_.at(slot, k) = graph_.at(k, slot) = 0.0;
        return slot;
    }

    // Write stored edges for every slot whose loss reached a new low (strict
    // inequality; ties keep the old edges). current_p holds post-step kernel
    // probabilities over the occupied slots, self-edges removed. Returns the
    // slots that updated. Runs after every minibatch, task boundaries unseen.
    std::vector<int> consolidate(const std::vector<double>& per_slot_losses,
                                 const Matrix& current_p) {
        int n = occupied();
        check(static_cast<int>(per_slot_losses.size()) == n, "consolidate: ",
              per_slot_losses.size(), " losses for ", n, " occupied slots");
        check(current_p.rows == n && current_p.cols == n, "consolidate: graph is ",
              current_p.rows, "x", current_p.cols, ", memory holds ", n);
        std::vector<int> updated;
        for (int i = 0; i < n; ++i) {
            if (!(per_slot_losses[i] < best_loss_[i])) continue;
            best_loss_[i] = per_slot_losses[i];
            consolidated_[i] = true;
            for (int k = 0; k < n; ++k) {
                double p = current_p.at(i, k);
                check(p >= 0.0 && p <= 1.0, "consolidate: edge probability ", p,
                      " outside [0,1]");
                graph_.at(i, k) = p;
                graph_.at(k, i) = p;  // kernel symmetry keeps the mirror consistent
            }
            updated.push_back(i);
        }
        return updated;
    }

    // The index set whose stored edges the regularizer pulls toward: every
    // slot consolidated since its (re)insertion.
    std::vector<int> regularization_rows() const {
        std::vector<int> rows;
        for (int i = 0; i < occupied(); ++i)
            if (consolidated_[i]) rows.push_back(i);
        return rows;
    }

    double best_loss(int slot) const { return best_loss_.at(slot); }
    bool is_consolidated(int slot) const { return consolidated_.at(slot); }
    const Matrix& stored_graph() const { return graph_; }

    // Occupied corner of the stored graph, aligned with features()/labels().
    Matrix stored_graph_occupied() const {
        int n = occupied();
        Matrix g(n, n);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k) g.at(i, k) = graph_.at(i, k);
        return g;
    }

    Matrix features() const {
        Matrix x(occupied(), feature_dim_);
        x.v = features_;
        return x;
    }

    const std::vector<int>& labels() const { return labels_; }

    const std::vector<double>& slot_features(int slot, std::vector<double>& buf) const {
        check(slot >= 0 && slot < occupied(), "memory: slot ", slot, " out of range");
        buf.assign(features_.begin() + static_cast<size_t>(slot) * feature_dim_,
                   features_.begin() + static_cast<size_t>(slot + 1) * feature_dim_);
        return buf;
    }

    // -- snapshot (parameter-checkpoint container) --------------------------

    void append_to(Checkpoint& cp, const std::string& prefix) const {
        Tensor meta(1, 3);
        meta.values = {static_cast<double>(capacity_), static_cast<double>(feature_dim_),
                       static_cast<double>(n_seen_)};
        cp.put(prefix + "mem/meta", meta);
        int n = occupied();
        if (n == 0) return;
        Tensor fx(n, feature_dim_);
        fx.values = features_;
        cp.put(prefix + "mem/features", fx);
        Tensor ly(n, 1);
        for (int i = 0; i < n; ++i) ly.values[i] = labels_[i];
        cp.put(prefix + "mem/labels", ly);
        Tensor g(n, n);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k) g.values[static_cast<size_t>(i) * n + k] = graph_.at(i, k);
        cp.put(prefix + "mem/graph", g);
        Tensor bl(n, 1);
        for (int i = 0; i < n; ++i) bl.values[i] = best_loss_[i];
        cp.put(prefix + "mem/best_loss", bl);
    }

    static EpisodicMemory from_checkpoint(const Checkpoint& cp, const std::string& prefix) {
        const Tensor& meta = cp.get(prefix + "mem/meta");
        check(meta.size() == 3, "memory snapshot: malformed meta");
        EpisodicMemory mem(static_cast<int>(meta.values[0]), static_cast<int>(meta.values[1]));
        mem.n_seen_ = static_cast<uint64_t>(meta.values[2]);
        if (!cp.has(prefix + "mem/features")) return mem;  // was empty
        const Tensor& fx = cp.get(prefix + "mem/features");
        const Tensor& ly = cp.get(prefix + "mem/labels");
        const Tensor& g = cp.get(prefix + "mem/graph");
        const Tensor& bl = cp.get(prefix + "mem/best_loss");
        int n = fx.rows();
        check(fx.cols() == mem.feature_dim_, "memory snapshot: feature dim ", fx.cols(),
              " != ", mem.feature_dim_);
        check(n <= mem.capacity_ && ly.rows() == n && g.rows() == n && g.cols() == n &&
                  bl.rows() == n,
              "memory snapshot: inconsistent slot counts");
        mem.features_ = fx.values;
        mem.labels_.resize(n);
        for (int i = 0; i < n; ++i) {
            double lv = ly.values[i];
            check(lv >= 0.0 && lv == std::floor(lv), "memory snapshot: bad label ", lv);
            mem.labels_[i] = static_cast<int>(lv);
        }
        for (int i = 0; i < n; ++i) {
            mem.best_loss_[i] = bl.values[i];
            mem.consolidated_[i] = std::isfinite(bl.values[i]);
            for (int k = 0; k < n; ++k) {
                double p = g.values[static_cast<size_t>(i) * n + k];
                check(p >= 0.0 && p <= 1.0, "memory snapshot: edge probability ", p,
                      " outside [0,1]");
                mem.graph_.at(i, k) = p;
            }
        }
        return mem;
    }

    void save(const std::string& path) const {
        Checkpoint cp;
        append_to(cp, "");
        cp.save(path);
    }

    static EpisodicMemory load(const std::string& path) {
        return from_checkpoint(Checkpoint::load(path), "");
    }

  private:
    static constexpr double kInf = std::numeric_limits<double>::infinity();

    int capacity_;
    int feature_dim_;
    std::vector<double> features_;  // occupied x feature_dim, row-major
    std::vector<int> labels_;
    Matrix graph_;  // capacity x capacity; row/col k valid iff consolidated_[k]
    std::vector<double> best_loss_;
    std::vector<bool> consolidated_;
    uint64_t n_seen_ = 0;
};

}  // namespace relmem
