#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <numeric>

#include "relmem/nets.hpp"

using relmem::ArchConfig;
using relmem::Checkpoint;
using relmem::EncoderStack;
using relmem::Rng;
using relmem::Tape;
using relmem::Tensor;
using relmem::Var;

namespace {

ArchConfig tiny_cfg() {
    ArchConfig cfg;
    cfg.input_dim = 6;
    cfg.trunk_widths = {8, 8};
    cfg.d1 = 4;
    cfg.d_img = 5;
    cfg.d_lab = 3;
    cfg.num_classes = 4;
    return cfg;
}

Tensor rand_batch(Rng& rng, int n, int d) {
    Tensor x(n, d);
    for (auto& v : x.values) v = rng.uniform(-1.0, 1.0);
    return x;
}

void zero_all(EncoderStack& s) {
    for (Tensor* p : s.params()) std::fill(p->values.begin(), p->values.end(), 0.0);
}

std::string temp_path(const char* name) {
    return std::string("/tmp/relmem_test_") + name + "_" + std::to_string(::getpid());
}

}  // namespace

TEST_CASE("initialization") {
    ArchConfig cfg = tiny_cfg();

    SECTION("same seed gives bitwise-identical parameters") {
        EncoderStack a = EncoderStack::init(cfg, 7);
        EncoderStack b = EncoderStack::init(cfg, 7);
        auto pa = a.params(), pb = b.params();
        REQUIRE(pa.size() == pb.size());
        for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->values == pb[i]->values);

        EncoderStack c = EncoderStack::init(cfg, 8);
        CHECK(a.trunk[0].w.values != c.trunk[0].w.values);
    }

    SECTION("biases are zero") {
        EncoderStack s = EncoderStack::init(cfg, 7);
        for (const auto& l : s.trunk)
            for (double v : l.b.values) CHECK(v == 0.0);
        for (double v : s.classifier.b.values) CHECK(v == 0.0);
    }

    SECTION("weight sample mean is near zero") {
        ArchConfig wide;
        wide.input_dim = 100;
        wide.trunk_widths = {100};  // 10^4 entries in the first weight matrix
        wide.num_classes = 4;
        EncoderStack s = EncoderStack::init(wide, 123);
        const Tensor& w = s.trunk[0].w;
        REQUIRE(w.size() == 10000);
        double a = std::sqrt(6.0 / (100 + 100));
        double mean = std::accumulate(w.values.begin(), w.values.end(), 0.0) / w.size();
        CHECK(std::abs(mean) < 3.0 * a / 100.0);
        for (double v : w.values) CHECK(std::abs(v) <= a);
    }

    SECTION("parameter count follows the architecture") {
        EncoderStack s = EncoderStack::init(cfg, 7);
        size_t expect = 0;
        expect += (6 * 8 + 8) + (8 * 8 + 8);              // trunk
        expect += 8 * 4 + 4;                              // head_graph
        expect += 8 * 5 + 5;                              // head_latent
        expect += 4 * 3 + 3;                              // label_embed
        expect += 8 * 4 + 4;                              // classifier (d2=8)
        CHECK(s.param_count() == expect);
    }

    SECTION("invalid configs are rejected") {
        ArchConfig bad = cfg;
        bad.num_classes = 1;
        CHECK_THROWS_AS(EncoderStack::init(bad, 7), relmem::Error);
        bad = cfg;
        bad.trunk_widths.clear();
        CHECK_THROWS_AS(EncoderStack::init(bad, 7), relmem::Error);
    }
}

TEST_CASE("encode_graph") {
    ArchConfig cfg = tiny_cfg();
    EncoderStack s = EncoderStack::init(cfg, 21);
    Rng rng(5);

    SECTION("identical input rows give identical embedding rows") {
        Tensor x(3, cfg.input_dim);
        for (int j = 0; j < cfg.input_dim; ++j) {
            double v = rng.uniform(-1.0, 1.0);
            x.at(0, j) = x.at(2, j) = v;
            x.at(1, j) = rng.uniform(-1.0, 1.0);
        }
        Tape t;
        const Tensor& u = t.val(s.encode_graph(t, t.input(x)));
        CHECK(u.rows() == 3);
        CHECK(u.cols() == cfg.d1);
        for (int j = 0; j < cfg.d1; ++j) CHECK(u.at(0, j) == u.at(2, j));
    }

    SECTION("zero parameters give zero embeddings") {
        zero_all(s);
        Tape t;
        const Tensor& u = t.val(s.encode_graph(t, t.input(rand_batch(rng, 4, cfg.input_dim))));
        for (double v : u.values) CHECK(v == 0.0);
    }

    SECTION("gradient check through the full path") {
        Tensor x = rand_batch(rng, 3, cfg.input_dim);
        Tensor w(3, cfg.d1);
        for (auto& v : w.values) v = rng.uniform(-1.0, 1.0);
        double err = relmem::grad_check(
            [&](Tape& t) { return t.mean(t.mul(s.encode_graph(t, t.input(x)), t.input(w))); },
            s.params());
        CHECK(err < 1e-4);
    }

    SECTION("wrong feature width is an error") {
        Tape t;
        CHECK_THROWS_AS(s.encode_graph(t, t.constant(2, cfg.input_dim + 1, 0.0)), relmem::Error);
    }
}

TEST_CASE("encode_latent") {
    ArchConfig cfg = tiny_cfg();
    EncoderStack s = EncoderStack::init(cfg, 22);
    Rng rng(6);

    SECTION("columns are [image code | label code]") {
        std::fill(s.label_embed.b.values.begin(), s.label_embed.b.values.end(), 0.0);
        Tensor x = rand_batch(rng, 2, cfg.input_dim);
        Tensor y = relmem::one_hot({1, 3}, cfg.num_classes);
        Tape t;
        const Tensor& v = t.val(s.encode_latent(t, t.input(x), t.input(y)));
        REQUIRE(v.cols() == cfg.d2());
        // one-hot label k with zero bias selects row k of the embedding matrix
        for (int j = 0; j < cfg.d_lab; ++j) {
            CHECK(v.at(0, cfg.d_img + j) == Catch::Approx(s.label_embed.w.at(1, j)));
            CHECK(v.at(1, cfg.d_img + j) == Catch::Approx(s.label_embed.w.at(3, j)));
        }
    }

    SECTION("same features, different labels differ only in the label columns") {
        Tensor one = rand_batch(rng, 1, cfg.input_dim);
        Tensor x(2, cfg.input_dim);
        for (int j = 0; j < cfg.input_dim; ++j) x.at(0, j) = x.at(1, j) = one.at(0, j);
        Tensor y = relmem::one_hot({0, 2}, cfg.num_classes);
        Tape t;
        const Tensor& v = t.val(s.encode_latent(t, t.input(x), t.input(y)));
        for (int j = 0; j < cfg.d_img; ++j) CHECK(v.at(0, j) == v.at(1, j));
        double diff = 0.0;
        for (int j = cfg.d_img; j < cfg.d2(); ++j) diff += std::abs(v.at(0, j) - v.at(1, j));
        CHECK(diff > 0.0);
    }

    SECTION("gradient check through the label encoder") {
        Tensor x = rand_batch(rng, 3, cfg.input_dim);
        Tensor y = relmem::one_hot({0, 1, 3}, cfg.num_classes);
        Tensor w(3, cfg.d2());
        for (auto& v : w.values) v = rng.uniform(-1.0, 1.0);
        double err = relmem::grad_check(
            [&](Tape& t) {
                return t.mean(t.mul(s.encode_latent(t, t.input(x), t.input(y)), t.input(w)));
            },
            {&s.label_embed.w, &s.label_embed.b});
        CHECK(err < 1e-4);
    }

    SECTION("mismatched batch sizes are an error") {
        Tape t;
        Tensor x = rand_batch(rng, 3, cfg.input_dim);
        Tensor y = relmem::one_hot({0, 1}, cfg.num_classes);
        CHECK_THROWS_AS(s.encode_latent(t, t.input(x), t.input(y)), relmem::Error);
    }
}

TEST_CASE("classify") {
    ArchConfig cfg = tiny_cfg();
    EncoderStack s = EncoderStack::init(cfg, 23);
    Rng rng(7);

    SECTION("zero weights give a uniform softmax") {
        zero_all(s);
        Tape t;
        const Tensor& logits = t.val(s.classify(t, t.input(rand_batch(rng, 2, cfg.d2()))));
        for (double v : logits.values) CHECK(v == 0.0);  // softmax of zeros is uniform
    }

    SECTION("softmax of the logits normalizes") {
        Tensor z = rand_batch(rng, 4, cfg.d2());
        Tape t;
        const Tensor& logits = t.val(s.classify(t, t.input(z)));
        for (int i = 0; i < logits.rows(); ++i) {
            double mx = logits.at(i, 0);
            for (int j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits.at(i, j));
            double sum = 0.0;
            for (int j = 0; j < logits.cols(); ++j) sum += std::exp(logits.at(i, j) - mx);
            double total = 0.0;
            for (int j = 0; j < logits.cols(); ++j)
                total += std::exp(logits.at(i, j) - mx) / sum;
            CHECK(total == Catch::Approx(1.0).margin(1e-12));
        }
    }

    SECTION("wrong latent width is an error") {
        Tape t;
        CHECK_THROWS_AS(s.classify(t, t.constant(2, cfg.d2() + 1, 0.0)), relmem::Error);
    }
}

TEST_CASE("trunk gradient accumulates from both heads") {
    ArchConfig cfg = tiny_cfg();
    Rng rng(8);
    Tensor x = rand_batch(rng, 3, cfg.input_dim);
    Tensor y = relmem::one_hot({0, 1, 2}, cfg.num_classes);

    auto trunk_grad = [&](bool use_graph, bool use_latent) {
        EncoderStack s = EncoderStack::init(cfg, 31);
        Tape t;
        Var loss = t.constant(1, 1, 0.0);
        if (use_graph) loss = t.add(loss, t.mean(s.encode_graph(t, t.input(x))));
        if (use_latent) loss = t.add(loss, t.mean(s.encode_latent(t, t.input(x), t.input(y))));
        t.backward(loss);
        return s.trunk[0].w.grad;
    };

    auto g_graph = trunk_grad(true, false);
    auto g_latent = trunk_grad(false, true);
    auto g_both = trunk_grad(true, true);
    double delta = 0.0, off = 0.0;
    for (size_t i = 0; i < g_both.size(); ++i) {
        delta += std::abs(g_both[i] - g_graph[i]);
        off += std::abs(g_both[i] - (g_graph[i] + g_latent[i]));
    }
    CHECK(delta > 0.0);          // zeroing one head's loss changes the trunk gradient
    CHECK(off < 1e-12);          // contributions add
}

TEST_CASE("checkpoint container") {
    std::string path = temp_path("ckpt");

    SECTION("roundtrip preserves names, shapes, and bits") {
        Checkpoint cp;
        Rng rng(9);
        Tensor a(3, 4);
        for (auto& v : a.values) v = rng.uniform(-10.0, 10.0);
        Tensor b(5, 1);
        for (auto& v : b.values) v = rng.uniform(-1.0, 1.0);
        cp.put("alpha/w", a);
        cp.put("beta", b);
        cp.save(path);

        Checkpoint in = Checkpoint::load(path);
        REQUIRE(in.entries().size() == 2);
        CHECK(in.entries()[0].first == "alpha/w");
        CHECK(in.get("alpha/w").shape == a.shape);
        CHECK(in.get("alpha/w").values == a.values);  // bitwise
        CHECK(in.get("beta").values == b.values);
        CHECK_THROWS_AS(in.get("gamma"), relmem::Error);
        std::remove(path.c_str());
    }

    SECTION("duplicate names are rejected") {
        Checkpoint cp;
        cp.put("x", Tensor(1, 1, 0.0));
        CHECK_THROWS_AS(cp.put("x", Tensor(1, 1, 0.0)), relmem::Error);
    }

    SECTION("bad magic is rejected") {
        std::ofstream os(path, std::ios::binary);
        os << "NOTAMAGC" << std::string(16, '\0');
        os.close();
        CHECK_THROWS_AS(Checkpoint::load(path), relmem::Error);
        std::remove(path.c_str());
    }

    SECTION("truncated file is rejected") {
        Checkpoint cp;
        cp.put("x", Tensor(4, 4, 1.5));
        cp.save(path);
        // chop the last 8 bytes off
        std::ifstream is(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        is.close();
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os.write(all.data(), static_cast<std::streamsize>(all.size() - 8));
        os.close();
        CHECK_THROWS_AS(Checkpoint::load(path), relmem::Error);
        std::remove(path.c_str());
    }

    SECTION("missing file is an error") {
        CHECK_THROWS_AS(Checkpoint::load("/tmp/relmem_no_such_file_xyz"), relmem::Error);
    }
}

TEST_CASE("encoder stack serialization roundtrip") {
    std::string path = temp_path("stack");
    ArchConfig cfg = tiny_cfg();
    EncoderStack s = EncoderStack::init(cfg, 77);
    s.save(path);

    EncoderStack r = EncoderStack::load(path);
    CHECK(r.cfg.input_dim == cfg.input_dim);
    CHECK(r.cfg.trunk_widths == cfg.trunk_widths);
    CHECK(r.cfg.d1 == cfg.d1);
    CHECK(r.cfg.d_img == cfg.d_img);
    CHECK(r.cfg.d_lab == cfg.d_lab);
    CHECK(r.cfg.num_classes == cfg.num_classes);
    auto ps = s.params(), pr = r.params();
    REQUIRE(ps.size() == pr.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        CHECK(pr[i]->values == ps[i]->values);
        CHECK(pr[i]->requires_grad);
    }
    std::remove(path.c_str());
}

TEST_CASE("one_hot") {
    Tensor y = relmem::one_hot({2, 0}, 3);
    CHECK(y.values == std::vector<double>{0, 0, 1, 1, 0, 0});
    CHECK_THROWS_AS(relmem::one_hot({3}, 3), relmem::Error);
    CHECK_THROWS_AS(relmem::one_hot({-1}, 3), relmem::Error);
}
