#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "af/backbone.hpp"
#include "af/pipeline.hpp"
#include "test_util.hpp"

using af::Backbone;
using af::DenseMatrix;
using af::Graph;
using af::Image;
using af::ParamStore;
using af::RandomSource;
using af::TokenSequence;
using af::Var;
using af::VitConfig;

namespace {

VitConfig tiny_config() {
    VitConfig c;
    c.image_side = 8;
    c.patch_side = 4;
    c.channels = 1;
    c.embed_dim = 8;
    c.num_blocks = 2;
    c.num_heads = 2;
    c.mlp_ratio = 2.0;
    c.num_known_classes = 2;
    c.num_total_classes = 4;
    return c;
}

Image random_image(const VitConfig& c, RandomSource& rng) {
    Image img;
    img.side = c.image_side;
    img.channels = c.channels;
    img.pixels.resize(static_cast<std::size_t>(c.image_side) * c.image_side * c.channels);
    for (double& v : img.pixels) {
        v = rng.gauss();
    }
    return img;
}

}  // namespace

TEST_CASE("patchify: 8x8 image with patch 4 gives N=4, sequence length 5") {
    VitConfig c = tiny_config();
    ParamStore store(1);
    Backbone bb(c, store);
    RandomSource rng(2);
    Image img = random_image(c, rng);
    Graph g;
    TokenSequence seq = bb.patchify(g, store, img);
    CHECK(seq.length() == 5);
    CHECK(seq.num_patches() == 4);
    CHECK(seq.grid_h == 2);
    CHECK(seq.grid_w == 2);
    CHECK(seq.cls_at_zero);
    CHECK(seq.patch_origin == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("patchify: zero image with zero bias leaves positional embeddings") {
    VitConfig c = tiny_config();
    ParamStore store(3);
    Backbone bb(c, store);
    Image img;
    img.side = c.image_side;
    img.channels = 1;
    img.pixels.assign(64, 0.0);
    Graph g;
    TokenSequence seq = bb.patchify(g, store, img);
    const DenseMatrix& pos = store.at(bb.pos).value;
    for (int p = 0; p < 4; ++p) {
        for (int j = 0; j < c.embed_dim; ++j) {
            CHECK(seq.tokens.value()(p + 1, j) == pos(p, j));
        }
    }
    // CLS row is the learned embedding, no positional term.
    for (int j = 0; j < c.embed_dim; ++j) {
        CHECK(seq.tokens.value()(0, j) == store.at(bb.cls).value(0, j));
    }
}

TEST_CASE("patchify matches a flatten-then-dot oracle") {
    VitConfig c = tiny_config();
    ParamStore store(5);
    Backbone bb(c, store);
    RandomSource rng(7);
    Image img = random_image(c, rng);
    Graph g;
    TokenSequence seq = bb.patchify(g, store, img);

    const DenseMatrix& w = store.at(bb.patch_w).value;
    const DenseMatrix& b = store.at(bb.patch_b).value;
    const DenseMatrix& pos = store.at(bb.pos).value;
    for (int p = 0; p < 4; ++p) {
        const int r0 = (p / 2) * 4;
        const int c0 = (p % 2) * 4;
        std::vector<double> flat;
        for (int r = 0; r < 4; ++r) {
            for (int cc = 0; cc < 4; ++cc) {
                flat.push_back(img.at(r0 + r, c0 + cc));
            }
        }
        for (int j = 0; j < c.embed_dim; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 16; ++k) {
                acc += flat[k] * w(k, j);
            }
            acc += b(0, j) + pos(p, j);
            CHECK(std::fabs(seq.tokens.value()(p + 1, j) - acc) < 1e-12);
        }
    }
}

TEST_CASE("run_block: zero weights reduce to the residual path") {
    VitConfig c = tiny_config();
    ParamStore store(11);
    Backbone bb(c, store);
    // Zero every block weight and bias, keep the layernorm gains.
    for (af::Tensor& t : store.tensors()) {
        if (t.name.rfind("backbone.block", 0) == 0 &&
            (t.name.find(".w") != std::string::npos || t.name.find(".b") != std::string::npos)) {
            t.value.zero();
        }
    }
    RandomSource rng(13);
    Graph g;
    TokenSequence seq;
    seq.tokens = g.leaf(aft::random_matrix(5, c.embed_dim, rng));
    seq.grid_h = seq.grid_w = 2;
    seq.patch_origin = {0, 1, 2, 3};
    Backbone::BlockResult res = bb.run_block(g, store, seq, 0);
    for (std::size_t i = 0; i < seq.tokens.value().size(); ++i) {
        CHECK(res.seq.tokens.value().data()[i] == seq.tokens.value().data()[i]);
    }
}

TEST_CASE("run_block matches a scalar-loop oracle on two tokens, one head") {
    VitConfig c = tiny_config();
    c.embed_dim = 2;
    c.num_heads = 1;
    c.mlp_ratio = 2.0;
    ParamStore store(17);
    Backbone bb(c, store);
    RandomSource rng(19);
    // Randomize the layernorm affine too, so the oracle exercises everything.
    for (af::Tensor& t : store.tensors()) {
        for (std::size_t i = 0; i < t.value.size(); ++i) {
            t.value.data()[i] = 0.5 * rng.gauss();
        }
    }

    DenseMatrix x = aft::random_matrix(2, 2, rng);
    Graph g;
    TokenSequence seq;
    seq.tokens = g.leaf(x);
    seq.grid_h = 1;
    seq.grid_w = 1;
    seq.patch_origin = {0};
    Backbone::BlockResult res = bb.run_block(g, store, seq, 0);

    // Independent scalar re-computation of the pre-norm block.
    const auto& ids = bb.blocks[0];
    auto ln = [&](const DenseMatrix& in, int gid, int bid) {
        DenseMatrix out(in.rows(), in.cols());
        for (int i = 0; i < in.rows(); ++i) {
            double mean = 0, var = 0;
            for (int j = 0; j < in.cols(); ++j) mean += in(i, j);
            mean /= in.cols();
            for (int j = 0; j < in.cols(); ++j) var += (in(i, j) - mean) * (in(i, j) - mean);
            var /= in.cols();
            for (int j = 0; j < in.cols(); ++j) {
                out(i, j) = (in(i, j) - mean) / std::sqrt(var + 1e-6) *
                                store.at(gid).value(0, j) +
                            store.at(bid).value(0, j);
            }
        }
        return out;
    };
    DenseMatrix h = ln(x, ids.ln1_g, ids.ln1_b);
    const DenseMatrix& qkvw = store.at(ids.qkv_w).value;
    const DenseMatrix& qkvb = store.at(ids.qkv_b).value;
    DenseMatrix q(2, 2), kk(2, 2), v(2, 2);
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            double sq = 0, sk = 0, sv = 0;
            for (int d = 0; d < 2; ++d) {
                sq += h(i, d) * qkvw(d, j);
                sk += h(i, d) * qkvw(d, 2 + j);
                sv += h(i, d) * qkvw(d, 4 + j);
            }
            q(i, j) = sq + qkvb(0, j);
            kk(i, j) = sk + qkvb(0, 2 + j);
            v(i, j) = sv + qkvb(0, 4 + j);
        }
    }
    DenseMatrix attn(2, 2);
    for (int i = 0; i < 2; ++i) {
        double logits[2];
        for (int j = 0; j < 2; ++j) {
            logits[j] = (q(i, 0) * kk(j, 0) + q(i, 1) * kk(j, 1)) / std::sqrt(2.0);
        }
        const double mx = std::max(logits[0], logits[1]);
        const double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
        attn(i, 0) = e0 / (e0 + e1);
        attn(i, 1) = e1 / (e0 + e1);
    }
    DenseMatrix av(2, 2);
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            av(i, j) = attn(i, 0) * v(0, j) + attn(i, 1) * v(1, j);
        }
    }
    const DenseMatrix& pw = store.at(ids.proj_w).value;
    const DenseMatrix& pb = store.at(ids.proj_b).value;
    DenseMatrix x1(2, 2);
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            x1(i, j) = x(i, j) + av(i, 0) * pw(0, j) + av(i, 1) * pw(1, j) + pb(0, j);
        }
    }
    DenseMatrix h2 = ln(x1, ids.ln2_g, ids.ln2_b);
    const DenseMatrix& f1w = store.at(ids.fc1_w).value;
    const DenseMatrix& f1b = store.at(ids.fc1_b).value;
    const DenseMatrix& f2w = store.at(ids.fc2_w).value;
    const DenseMatrix& f2b = store.at(ids.fc2_b).value;
    DenseMatrix expect(2, 2);
    for (int i = 0; i < 2; ++i) {
        double hidden[4];
        for (int j = 0; j < 4; ++j) {
            double s = f1b(0, j);
            for (int d = 0; d < 2; ++d) s += h2(i, d) * f1w(d, j);
            hidden[j] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
        }
        for (int j = 0; j < 2; ++j) {
            double s = f2b(0, j);
            for (int d = 0; d < 4; ++d) s += hidden[d] * f2w(d, j);
            expect(i, j) = x1(i, j) + s;
        }
    }
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            CHECK(std::fabs(res.seq.tokens.value()(i, j) - expect(i, j)) < 1e-12);
        }
    }
    // Attention maps from the block agree with the oracle and are row-stochastic.
    REQUIRE(res.attention.size() == 1);
    for (int i = 0; i < 2; ++i) {
        CHECK(std::fabs(res.attention[0](i, 0) + res.attention[0](i, 1) - 1.0) <= 1e-12);
        CHECK(std::fabs(res.attention[0](i, 0) - attn(i, 0)) < 1e-12);
    }
}

TEST_CASE("attention rows are stochastic on a full forward") {
    VitConfig c = tiny_config();
    ParamStore store(23);
    Backbone bb(c, store);
    RandomSource rng(29);
    Image img = random_image(c, rng);
    Graph g;
    af::ForwardTrace tr = af::forward_with_taps(g, store, bb, {}, img, af::PruneConfig{},
                                                /*af_enabled=*/false);
    for (const auto& per_block : tr.prefix.attention) {
        for (const DenseMatrix& a : per_block) {
            for (int i = 0; i < a.rows(); ++i) {
                double sum = 0;
                for (int j = 0; j < a.cols(); ++j) sum += a(i, j);
                CHECK(std::fabs(sum - 1.0) <= 1e-12);
            }
        }
    }
    CHECK(tr.final_seq.length() == 5);  // nothing pruned
}

TEST_CASE("pool_output: single token, duplicates, loop oracle, CLS mode") {
    Graph g;
    RandomSource rng(31);
    DenseMatrix one = aft::random_matrix(1, 6, rng);
    TokenSequence s1;
    s1.tokens = g.constant(one);
    Var p1 = Backbone::pool_output(g, s1, af::PoolMode::mean);
    for (int j = 0; j < 6; ++j) {
        CHECK(p1.value()(0, j) == one(0, j));
    }

    DenseMatrix two(2, 6);
    for (int j = 0; j < 6; ++j) {
        two(0, j) = two(1, j) = one(0, j);
    }
    TokenSequence s2;
    s2.tokens = g.constant(two);
    Var p2 = Backbone::pool_output(g, s2, af::PoolMode::mean);
    for (int j = 0; j < 6; ++j) {
        CHECK(p2.value()(0, j) == doctest::Approx(one(0, j)).epsilon(1e-15));
    }

    DenseMatrix five = aft::random_matrix(5, 6, rng);
    TokenSequence s5;
    s5.tokens = g.constant(five);
    Var p5 = Backbone::pool_output(g, s5, af::PoolMode::mean);
    for (int j = 0; j < 6; ++j) {
        double mean = 0;
        for (int i = 0; i < 5; ++i) mean += five(i, j);
        mean /= 5;
        CHECK(std::fabs(p5.value()(0, j) - mean) < 1e-12);
    }

    Var pc = Backbone::pool_output(g, s5, af::PoolMode::cls_only);
    for (int j = 0; j < 6; ++j) {
        CHECK(pc.value()(0, j) == five(0, j));
    }
}

TEST_CASE("pool_output is invariant under patch permutations") {
    VitConfig c = tiny_config();
    ParamStore store(37);
    Backbone bb(c, store);
    RandomSource rng(41);
    Image img = random_image(c, rng);

    Graph g;
    TokenSequence seq = bb.patchify(g, store, img);
    Var pooled = Backbone::pool_output(g, seq, af::PoolMode::mean);

    // Permute patch tokens together with their origins.
    TokenSequence perm = seq;
    perm.tokens = g.gather_rows(seq.tokens, {0, 3, 1, 4, 2});
    perm.patch_origin = {2, 0, 3, 1};
    Var pooled_perm = Backbone::pool_output(g, perm, af::PoolMode::mean);
    for (int j = 0; j < c.embed_dim; ++j) {
        CHECK(pooled.value()(0, j) == doctest::Approx(pooled_perm.value()(0, j)).epsilon(1e-15));
    }
}

TEST_CASE("forward_with_taps with pruning off equals a plain ViT forward") {
    VitConfig c = tiny_config();
    c.num_blocks = 3;
    ParamStore store(43);
    Backbone bb(c, store);
    std::vector<af::TimeModule> time = af::make_time_modules(c, 4, store);
    RandomSource rng(47);
    Image img = random_image(c, rng);

    Graph g1;
    af::PruneConfig off;
    off.strategy = af::PruneStrategy::none;
    af::ForwardTrace tr = af::forward_with_taps(g1, store, bb, time, img, off, true);
    CHECK(tr.prefix.scores.size() == 2);  // L-1 score vectors
    CHECK(tr.final_seq.length() == 5);

    // Plain forward without any TIME machinery.
    Graph g2;
    TokenSequence seq = bb.patchify(g2, store, img);
    for (int b = 0; b < c.num_blocks; ++b) {
        seq = bb.run_block(g2, store, seq, b).seq;
    }
    for (std::size_t i = 0; i < seq.tokens.value().size(); ++i) {
        CHECK(tr.final_seq.tokens.value().data()[i] == seq.tokens.value().data()[i]);
    }
}

TEST_CASE("single score vector when L=2") {
    VitConfig c = tiny_config();
    REQUIRE(c.num_blocks == 2);
    ParamStore store(45);
    Backbone bb(c, store);
    std::vector<af::TimeModule> time = af::make_time_modules(c, 4, store);
    RandomSource rng(46);
    Image img = random_image(c, rng);
    Graph g;
    af::ForwardTrace tr = af::forward_with_taps(g, store, bb, time, img, af::PruneConfig{}, true);
    CHECK(tr.prefix.scores.size() == 1);
}

TEST_CASE("forward_with_taps rejects a wrong TIME module count") {
    VitConfig c = tiny_config();
    c.num_blocks = 3;
    ParamStore store(53);
    Backbone bb(c, store);
    std::vector<af::TimeModule> just_one;
    just_one.emplace_back(0, c.embed_dim, c.num_known_classes, 4, store);
    RandomSource rng(59);
    Image img = random_image(c, rng);
    Graph g;
    CHECK_THROWS_AS(af::forward_with_taps(g, store, bb, just_one, img, af::PruneConfig{}, true),
                    std::invalid_argument);
}

TEST_CASE("tau = 0 prunes nothing (softmax scores are strictly positive)") {
    VitConfig c = tiny_config();
    ParamStore store(61);
    Backbone bb(c, store);
    std::vector<af::TimeModule> time = af::make_time_modules(c, 4, store);
    RandomSource rng(67);
    Image img = random_image(c, rng);
    Graph g;
    af::PruneConfig pc;
    pc.tau = 0.0;
    af::ForwardTrace tr = af::forward_with_taps(g, store, bb, time, img, pc, true);
    CHECK(tr.prune.pruned.empty());
    CHECK(tr.final_seq.length() == 5);  // all N+1 tokens reach the final block
}

TEST_CASE("freeze mask: only the last block's backbone tensors stay trainable") {
    VitConfig c = tiny_config();
    c.num_blocks = 3;
    ParamStore store(71);
    Backbone bb(c, store);
    bb.apply_freeze_mask(store, true);
    for (const af::Tensor& t : store.tensors()) {
        if (t.name.rfind("backbone.block2.", 0) == 0) {
            CHECK(t.trainable);
        } else if (t.name.rfind("backbone.", 0) == 0) {
            CHECK_FALSE(t.trainable);
        }
    }
    bb.apply_freeze_mask(store, false);
    for (const af::Tensor& t : store.tensors()) {
        CHECK(t.trainable);
    }
}

TEST_CASE("checkpoint round-trip preserves every tensor bit-for-bit") {
    VitConfig c = tiny_config();
    ParamStore store(73);
    Backbone bb(c, store);
    const std::string path =
        (std::filesystem::temp_directory_path() / "af_test_ckpt.bin").string();
    af::save_checkpoint(store, path);

    ParamStore store2(999);  // different seed, then overwritten by the load
    Backbone bb2(c, store2);
    af::load_checkpoint(store2, path);
    for (std::size_t i = 0; i < store.count(); ++i) {
        const af::Tensor& a = store.at(static_cast<int>(i));
        const af::Tensor& b = store2.at(static_cast<int>(i));
        CHECK(a.name == b.name);
        for (std::size_t k = 0; k < a.value.size(); ++k) {
            CHECK(a.value.data()[k] == b.value.data()[k]);
        }
    }

    // Header sanity: magic + version live at the front.
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    in.read(magic, 4);
    CHECK(std::string(magic, 4) == "AFCK");
    std::filesystem::remove(path);
}

TEST_CASE("backbone gradients match finite differences through a full forward") {
    VitConfig c = tiny_config();
    ParamStore store(79);
    Backbone bb(c, store);
    RandomSource rng(83);
    Image img = random_image(c, rng);
    aft::BuildFn f = [&](Graph& g, ParamStore& s) {
        TokenSequence seq = bb.patchify(g, s, img);
        for (int b = 0; b < c.num_blocks; ++b) {
            seq = bb.run_block(g, s, seq, b).seq;
        }
        Var pooled = Backbone::pool_output(g, seq, af::PoolMode::mean);
        return g.mean_all(g.hadamard(pooled, pooled));
    };
    for (int id : {bb.patch_w, bb.pos, bb.cls, bb.blocks[0].qkv_w, bb.blocks[1].fc1_w,
                   bb.blocks[1].ln2_g}) {
        CHECK(aft::grad_check(f, store, id) < 1e-5);
    }
}
