#pragma once

#include <string>
#include <vector>

#include "af/graph.hpp"
#include "af/params.hpp"

namespace af {

constexpr double kLayerNormEps = 1e-6;

// ViT geometry plus the class-count priors the heads need.
struct VitConfig {
    int image_side = 32;
    int patch_side = 8;
    int channels = 1;
    int embed_dim = 32;   // D
    int num_blocks = 4;   // L
    int num_heads = 2;
    double mlp_ratio = 2.0;
    int num_known_classes = 4;  // |Y_l|
    int num_total_classes = 8;  // K

    int grid_side() const { return image_side / patch_side; }
    int num_patches() const { return grid_side() * grid_side(); }  // N
    int seq_len() const { return num_patches() + 1; }
    int patch_dim() const { return patch_side * patch_side * channels; }
    int head_dim() const { return embed_dim / num_heads; }
    int ffn_hidden() const { return static_cast<int>(mlp_ratio * embed_dim); }

    void validate() const;
};

// The ViT-B/16 geometry used by the efficiency estimator only.
VitConfig vit_b16_config(int image_side);

struct Image {
    int side = 0;
    int channels = 1;
    std::vector<double> pixels;  // (row * side + col) * channels + ch

    double& at(int r, int c, int ch = 0) { return pixels[(static_cast<std::size_t>(r) * side + c) * channels + ch]; }
    double at(int r, int c, int ch = 0) const { return pixels[(static_cast<std::size_t>(r) * side + c) * channels + ch]; }
};

// Token matrix flowing through the blocks, with its grid bookkeeping.
// Row 0 is always the CLS token; patch_origin[j] is the pre-pruning grid
// position of token row j+1.
struct TokenSequence {
    Var tokens;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<int> patch_origin;
    bool cls_at_zero = true;

    int length() const { return tokens.rows(); }
    int num_patches() const { return tokens.rows() - 1; }
};

struct BlockParamIds {
    int ln1_g, ln1_b;
    int qkv_w, qkv_b;  // D x 3D layout [Q | K | V], head-major inside each third
    int proj_w, proj_b;
    int ln2_g, ln2_b;
    int fc1_w, fc1_b;
    int fc2_w, fc2_b;
};

enum class PoolMode { mean, cls_only };

// Parameter layout of a ViT-style encoder. Construction registers tensors
// in a fixed order; instances only hold ids into the store, so the same
// layout works against any copy of the store.
struct Backbone {
    VitConfig cfg;
    int patch_w, patch_b;
    int pos;  // N x D, added to patch tokens only
    int cls;
    std::vector<BlockParamIds> blocks;

    Backbone(const VitConfig& cfg, ParamStore& store);

    TokenSequence patchify(Graph& g, ParamStore& store, const Image& img) const;

    struct BlockResult {
        TokenSequence seq;
        std::vector<DenseMatrix> attention;  // per head, row-stochastic (S x S)
    };
    BlockResult run_block(Graph& g, ParamStore& store, const TokenSequence& in,
                          int block_index) const;

    static Var pool_output(Graph& g, const TokenSequence& seq, PoolMode mode);

    // Marks everything except the last block as frozen. Gradients for frozen
    // tensors are zeroed by the trainer after backward, so "only the last
    // block receives nonzero gradients" holds without changing the graph.
    void apply_freeze_mask(ParamStore& store, bool freeze_earlier) const;
};

}  // namespace af
