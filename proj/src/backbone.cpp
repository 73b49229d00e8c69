#include "af/backbone.hpp"

#include <cmath>

namespace af {

void VitConfig::validate() const {
    check(image_side > 0 && patch_side > 0 && channels > 0, "VitConfig: non-positive geometry");
    check(image_side % patch_side == 0,
          "VitConfig: image_side " + std::to_string(image_side) + " not divisible by patch_side " +
              std::to_string(patch_side));
    check(embed_dim % num_heads == 0, "VitConfig: embed_dim " + std::to_string(embed_dim) +
                                          " not divisible by num_heads " +
                                          std::to_string(num_heads));
    check(num_blocks >= 2, "VitConfig: num_blocks must be >= 2, got " +
                               std::to_string(num_blocks));
    check(mlp_ratio > 0.0, "VitConfig: mlp_ratio must be positive");
    check(num_known_classes >= 1 && num_total_classes > num_known_classes,
          "VitConfig: need 1 <= known classes < total classes");
}

VitConfig vit_b16_config(int image_side) {
    VitConfig c;
    c.image_side = image_side;
    c.patch_side = 16;
    c.channels = 3;
    c.embed_dim = 768;
    c.num_blocks = 12;
    c.num_heads = 12;
    c.mlp_ratio = 4.0;
    c.num_known_classes = 100;
    c.num_total_classes = 200;
    return c;
}

Backbone::Backbone(const VitConfig& config, ParamStore& store) : cfg(config) {
    cfg.validate();
    const int d = cfg.embed_dim;
    const int h = cfg.ffn_hidden();
    patch_w = store.add("backbone.patch_embed.w", cfg.patch_dim(), d, ParamStore::Init::trunc_normal, 0.02);
    patch_b = store.add("backbone.patch_embed.b", 1, d, ParamStore::Init::zeros);
    pos = store.add("backbone.pos_embed", cfg.num_patches(), d, ParamStore::Init::trunc_normal, 0.02);
    cls = store.add("backbone.cls_token", 1, d, ParamStore::Init::trunc_normal, 0.02);
    for (int b = 0; b < cfg.num_blocks; ++b) {
        const std::string p = "backbone.block" + std::to_string(b) + ".";
        BlockParamIds ids;
        ids.ln1_g = store.add(p + "ln1.g", 1, d, ParamStore::Init::ones);
        ids.ln1_b = store.add(p + "ln1.b", 1, d, ParamStore::Init::zeros);
        ids.qkv_w = store.add(p + "attn.qkv.w", d, 3 * d, ParamStore::Init::trunc_normal, 0.02);
        ids.qkv_b = store.add(p + "attn.qkv.b", 1, 3 * d, ParamStore::Init::zeros);
        ids.proj_w = store.add(p + "attn.proj.w", d, d, ParamStore::Init::trunc_normal, 0.02);
        ids.proj_b = store.add(p + "attn.proj.b", 1, d, ParamStore::Init::zeros);
        ids.ln2_g = store.add(p + "ln2.g", 1, d, ParamStore::Init::ones);
        ids.ln2_b = store.add(p + "ln2.b", 1, d, ParamStore::Init::zeros);
        ids.fc1_w = store.add(p + "ffn.fc1.w", d, h, ParamStore::Init::trunc_normal, 0.02);
        ids.fc1_b = store.add(p + "ffn.fc1.b", 1, h, ParamStore::Init::zeros);
        ids.fc2_w = store.add(p + "ffn.fc2.w", h, d, ParamStore::Init::trunc_normal, 0.02);
        ids.fc2_b = store.add(p + "ffn.fc2.b", 1, d, ParamStore::Init::zeros);
        blocks.push_back(ids);
    }
}

TokenSequence Backbone::patchify(Graph& g, ParamStore& store, const Image& img) const {
    check(img.side == cfg.image_side && img.channels == cfg.channels,
          "patchify: image " + std::to_string(img.side) + "x" + std::to_string(img.side) + "x" +
              std::to_string(img.channels) + " does not match config " +
              std::to_string(cfg.image_side) + "x" + std::to_string(cfg.image_side) + "x" +
              std::to_string(cfg.channels));
    const int gs = cfg.grid_side();
    const int ps = cfg.patch_side;
    const int n = cfg.num_patches();

    // Flatten each patch row-major, channels innermost.
    DenseMatrix patches(n, cfg.patch_dim());
    for (int p = 0; p < n; ++p) {
        const int r0 = (p / gs) * ps;
        const int c0 = (p % gs) * ps;
        double* row = patches.row(p);
        int at = 0;
        for (int r = 0; r < ps; ++r) {
            for (int c = 0; c < ps; ++c) {
                for (int ch = 0; ch < cfg.channels; ++ch) {
                    row[at++] = img.at(r0 + r, c0 + c, ch);
                }
            }
        }
    }

    Var flat = g.constant(std::move(patches));
    Var w = use_param(g, store, patch_w);
    Var b = use_param(g, store, patch_b);
    Var pe = use_param(g, store, pos);
    Var ct = use_param(g, store, cls);

    Var tok = g.add(g.add(g.matmul(flat, w), g.broadcast_row(b, n)), pe);
    const Var parts[] = {ct, tok};
    TokenSequence seq;
    seq.tokens = g.concat_rows(parts);
    seq.grid_h = gs;
    seq.grid_w = gs;
    seq.patch_origin.resize(n);
    for (int i = 0; i < n; ++i) {
        seq.patch_origin[i] = i;
    }
    return seq;
}

Backbone::BlockResult Backbone::run_block(Graph& g, ParamStore& store,
                                          const TokenSequence& in, int block_index) const {
    check(block_index >= 0 && block_index < cfg.num_blocks, "run_block: bad block index");
    const BlockParamIds& ids = blocks[block_index];
    auto P = [&](int id) { return use_param(g, store, id); };

    const int s = in.length();
    const int d = cfg.embed_dim;
    const int dh = cfg.head_dim();

    Var x = in.tokens;
    Var h = g.layernorm(x, P(ids.ln1_g), P(ids.ln1_b), kLayerNormEps);
    Var qkv = g.add(g.matmul(h, P(ids.qkv_w)), g.broadcast_row(P(ids.qkv_b), s));

    std::vector<Var> head_out;
    std::vector<DenseMatrix> attn_maps;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int hd = 0; hd < cfg.num_heads; ++hd) {
        std::vector<int> qi(dh), ki(dh), vi(dh);
        for (int j = 0; j < dh; ++j) {
            qi[j] = hd * dh + j;
            ki[j] = d + hd * dh + j;
            vi[j] = 2 * d + hd * dh + j;
        }
        Var q = g.gather_cols(qkv, qi);
        Var k = g.gather_cols(qkv, ki);
        Var v = g.gather_cols(qkv, vi);
        Var scores = g.scale(g.matmul(q, g.transpose(k)), inv_sqrt);
        Var attn = g.softmax_rows(scores);
        attn_maps.push_back(attn.value());
        head_out.push_back(g.matmul(attn, v));
    }
    Var merged = g.concat_cols(head_out);
    Var attn_proj = g.add(g.matmul(merged, P(ids.proj_w)), g.broadcast_row(P(ids.proj_b), s));
    Var x1 = g.add(x, attn_proj);

    Var h2 = g.layernorm(x1, P(ids.ln2_g), P(ids.ln2_b), kLayerNormEps);
    Var f1 = g.gelu(g.add(g.matmul(h2, P(ids.fc1_w)), g.broadcast_row(P(ids.fc1_b), s)));
    Var f2 = g.add(g.matmul(f1, P(ids.fc2_w)), g.broadcast_row(P(ids.fc2_b), s));
    Var out = g.add(x1, f2);

    BlockResult res;
    res.seq = in;
    res.seq.tokens = out;
    res.attention = std::move(attn_maps);
    return res;
}

Var Backbone::pool_output(Graph& g, const TokenSequence& seq, PoolMode mode) {
    check(seq.length() >= 1, "pool_output: empty sequence");
    if (mode == PoolMode::cls_only) {
        return g.gather_rows(seq.tokens, {0});
    }
    return g.scale(g.cols_sum(seq.tokens), 1.0 / static_cast<double>(seq.length()));
}

void Backbone::apply_freeze_mask(ParamStore& store, bool freeze_earlier) const {
    std::vector<int> embed_ids = {patch_w, patch_b, pos, cls};
    for (int id : embed_ids) {
        store.at(id).trainable = !freeze_earlier;
    }
    for (int b = 0; b < cfg.num_blocks; ++b) {
        const bool frozen = freeze_earlier && b + 1 < cfg.num_blocks;
        const BlockParamIds& ids = blocks[b];
        for (int id : {ids.ln1_g, ids.ln1_b, ids.qkv_w, ids.qkv_b, ids.proj_w, ids.proj_b,
                       ids.ln2_g, ids.ln2_b, ids.fc1_w, ids.fc1_b, ids.fc2_w, ids.fc2_b}) {
            store.at(id).trainable = !frozen;
        }
    }
}

}  // namespace af
