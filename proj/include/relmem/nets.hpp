#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "relmem/checkpoint.hpp"
#include "relmem/common.hpp"
#include "relmem/rng.hpp"
#include "relmem/tensor.hpp"

namespace relmem {

// ---------------------------------------------------------------------------
// Architecture: shared MLP trunk feeding two linear heads (graph embedding
// and latent image code), a linear label encoder, and a relu+linear
// classifier over the concatenated latent code.
// ---------------------------------------------------------------------------
struct ArchConfig {
    int input_dim = 64;
    std::vector<int> trunk_widths = {64, 64};
    int d1 = 32;     // graph-embedding width (kernel space)
    int d_img = 32;  // latent image code width
    int d_lab = 16;  // label-embedding width
    int num_classes = 10;

    int d2() const { return d_img + d_lab; }

    void validate() const {
        check(input_dim > 0, "arch: input_dim must be positive");
        check(!trunk_widths.empty(), "arch: trunk needs at least one layer");
        for (int w : trunk_widths) check(w > 0, "arch: trunk width must be positive");
        check(d1 > 0 && d_img > 0 && d_lab > 0, "arch: embedding dims must be positive");
        check(num_classes >= 2, "arch: need at least 2 classes");
    }
};

struct Linear {
    Tensor w;  // in x out
    Tensor b;  // 1 x out
};

// Fan-balanced uniform init: w ~ U(-a, a) with a = sqrt(6/(fan_in+fan_out)),
// bias zero, both tracked for gradients.
inline Linear glorot_linear(Rng& rng, int fan_in, int fan_out) {
    Linear l;
    l.w = Tensor(fan_in, fan_out);
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : l.w.values) v = rng.uniform(-a, a);
    l.w.set_requires_grad(true);
    l.b = Tensor::param(1, fan_out, 0.0);
    return l;
}

inline Linear linear_from_checkpoint(const Checkpoint& cp, const std::string& prefix) {
    Linear l;
    l.w = cp.get(prefix + "/w");
    l.b = cp.get(prefix + "/b");
    check(l.b.rows() == 1 && l.b.cols() == l.w.cols(), "checkpoint: bias shape mismatch at '",
          prefix, "'");
    l.w.set_requires_grad(true);
    l.b.set_requires_grad(true);
    return l;
}

// One affine tape step with the layer's parameters bound as leaves.
inline Var apply_linear(Tape& t, Linear& l, Var x) {
    return t.add_broadcast_row(t.matmul(x, t.leaf(l.w)), t.leaf(l.b));
}

inline Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    Tensor y(static_cast<int>(labels.size()), num_classes);
    for (size_t i = 0; i < labels.size(); ++i) {
        check(labels[i] >= 0 && labels[i] < num_classes, "one_hot: label ", labels[i],
              " outside [0,", num_classes, ")");
        y.at(static_cast<int>(i), labels[i]) = 1.0;
    }
    return y;
}

class EncoderStack {
  public:
    ArchConfig cfg;
    std::vector<Linear> trunk;  // ReLU after every layer
    Linear head_graph;          // trunk_dim -> d1
    Linear head_latent;         // trunk_dim -> d_img
    Linear label_embed;         // num_classes -> d_lab
    Linear classifier;          // d2 -> num_classes, applied after ReLU

    // Fan-balanced uniform init: w ~ U(-a, a) with a = sqrt(6/(fan_in+fan_out)),
    // biases zero. Layers are drawn in declaration order so a seed fixes the
    // parameters bitwise.
    static EncoderStack init(const ArchConfig& cfg, uint64_t seed) {
        cfg.validate();
        EncoderStack s;
        s.cfg = cfg;
        Rng rng = derive_stream(seed, "init");
        int in = cfg.input_dim;
        for (int width : cfg.trunk_widths) {
            s.trunk.push_back(init_linear(rng, in, width));
            in = width;
        }
        s.head_graph = init_linear(rng, in, cfg.d1);
        s.head_latent = init_linear(rng, in, cfg.d_img);
        s.label_embed = init_linear(rng, cfg.num_classes, cfg.d_lab);
        s.classifier = init_linear(rng, cfg.d2(), cfg.num_classes);
        return s;
    }

    std::vector<Tensor*> params() {
        std::vector<Tensor*> ps;
        for (auto& l : trunk) {
            ps.push_back(&l.w);
            ps.push_back(&l.b);
        }
        for (Linear* l : {&head_graph, &head_latent, &label_embed, &classifier}) {
            ps.push_back(&l->w);
            ps.push_back(&l->b);
        }
        return ps;
    }

    size_t param_count() {
        size_t n = 0;
        for (Tensor* p : params()) n += p->size();
        return n;
    }

    // -- forward passes (bind parameters as leaves on the caller's tape) ----

    Var trunk_features(Tape& t, Var x) {
        check(t.val(x).cols() == cfg.input_dim, "trunk: input has ", t.val(x).cols(),
              " features, expected ", cfg.input_dim);
        Var h = x;
        for (auto& layer : trunk) h = t.relu(apply(t, layer, h));
        return h;
    }

    // f: image features -> kernel-space embedding U (batch x d1).
    Var encode_graph(Tape& t, Var x) { return apply(t, head_graph, trunk_features(t, x)); }

    // image features + one-hot labels -> latent code V (batch x d2), columns
    // laid out [image code | label code].
    Var encode_latent(Tape& t, Var x, Var y_onehot) {
        const Tensor& yt = t.val(y_onehot);
        check(yt.rows() == t.val(x).rows(), "encode_latent: ", t.val(x).rows(), " feature rows vs ",
              yt.rows(), " label rows");
        check(yt.cols() == cfg.num_classes, "encode_latent: labels have ", yt.cols(),
              " columns, expected ", cfg.num_classes);
        Var img = apply(t, head_latent, trunk_features(t, x));
        Var lab = apply(t, label_embed, y_onehot);
        return t.concat_cols(img, lab);
    }

    // latent code -> class logits.
    Var classify(Tape& t, Var z) {
        check(t.val(z).cols() == cfg.d2(), "classify: input has ", t.val(z).cols(),
              " columns, expected d2=", cfg.d2());
        return apply(t, classifier, t.relu(z));
    }

    // -- serialization ------------------------------------------------------

    void append_to(Checkpoint& cp, const std::string& prefix) const {
        for (size_t i = 0; i < trunk.size(); ++i) {
            cp.put(prefix + "trunk/" + std::to_string(i) + "/w", trunk[i].w);
            cp.put(prefix + "trunk/" + std::to_string(i) + "/b", trunk[i].b);
        }
        cp.put(prefix + "head_graph/w", head_graph.w);
        cp.put(prefix + "head_graph/b", head_graph.b);
        cp.put(prefix + "head_latent/w", head_latent.w);
        cp.put(prefix + "head_latent/b", head_latent.b);
        cp.put(prefix + "label_embed/w", label_embed.w);
        cp.put(prefix + "label_embed/b", label_embed.b);
        cp.put(prefix + "classifier/w", classifier.w);
        cp.put(prefix + "classifier/b", classifier.b);
    }

    // Rebuilds the stack from stored tensors; the architecture is recovered
    // from the tensor shapes, so checkpoints are self-describing.
    static EncoderStack from_checkpoint(const Checkpoint& cp, const std::string& prefix) {
        EncoderStack s;
        int n_layers = 0;
        while (cp.has(prefix + "trunk/" + std::to_string(n_layers) + "/w")) ++n_layers;
        check(n_layers > 0, "checkpoint: no trunk layers under '", prefix, "'");
        for (int i = 0; i < n_layers; ++i)
            s.trunk.push_back(load_linear(cp, prefix + "trunk/" + std::to_string(i)));
        s.head_graph = load_linear(cp, prefix + "head_graph");
        s.head_latent = load_linear(cp, prefix + "head_latent");
        s.label_embed = load_linear(cp, prefix + "label_embed");
        s.classifier = load_linear(cp, prefix + "classifier");

        s.cfg.input_dim = s.trunk.front().w.rows();
        s.cfg.trunk_widths.clear();
        for (const auto& l : s.trunk) s.cfg.trunk_widths.push_back(l.w.cols());
        s.cfg.d1 = s.head_graph.w.cols();
        s.cfg.d_img = s.head_latent.w.cols();
        s.cfg.d_lab = s.label_embed.w.cols();
        s.cfg.num_classes = s.label_embed.w.rows();
        s.cfg.validate();
        check(s.classifier.w.rows() == s.cfg.d2() && s.classifier.w.cols() == s.cfg.num_classes,
              "checkpoint: classifier shape ", s.classifier.w.rows(), "x", s.classifier.w.cols(),
              " inconsistent with d2=", s.cfg.d2());
        return s;
    }

    void save(const std::string& path) const {
        Checkpoint cp;
        append_to(cp, "");
        cp.save(path);
    }

    static EncoderStack load(const std::string& path) {
        return from_checkpoint(Checkpoint::load(path), "");
    }

  private:
    static Linear init_linear(Rng& rng, int fan_in, int fan_out) {
        return glorot_linear(rng, fan_in, fan_out);
    }

    static Linear load_linear(const Checkpoint& cp, const std::string& prefix) {
        return linear_from_checkpoint(cp, prefix);
    }

    Var apply(Tape& t, Linear& l, Var x) { return apply_linear(t, l, x); }
};

}  // namespace relmem
